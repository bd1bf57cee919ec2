#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "arfs/corpus.hpp"
#include "arfs/model.hpp"
#include "arfs/nn.hpp"
#include "arfs/rng.hpp"

namespace arfs {

struct SampleParams {
    double cfg_scale = 2.0;
    double temperature = 1.0;  // 0 selects greedy decoding (the T -> 0 limit)
    int top_k = 0;             // 0 disables
    double top_p = 1.0;        // 1 disables
    uint64_t seed = 0;

    void validate() const {
        if (cfg_scale < 0.0) throw std::invalid_argument("cfg_scale must be nonnegative");
        if (temperature < 0.0) throw std::invalid_argument("temperature must be nonnegative");
        if (top_k < 0) throw std::invalid_argument("top_k must be nonnegative");
        if (top_p <= 0.0 || top_p > 1.0) throw std::invalid_argument("top_p must lie in (0,1]");
    }
};

// uncond + s * (cond - uncond), applied to logits.
template <typename T>
inline void cfg_combine(const T* cond, const T* uncond, double s, T* out, int v) {
    for (int j = 0; j < v; ++j) out[j] = uncond[j] + T(s) * (cond[j] - uncond[j]);
}

// Keeps the top_k largest entries and the smallest probability-sorted prefix
// whose cumulative mass reaches top_p; everything else drops to -inf. Ties at
// the nucleus boundary enter in ascending token id. The argmax always stays.
template <typename T>
inline void filter_top_k_top_p(T* logits, int v, int top_k, double top_p) {
    if (top_p <= 0.0 || top_p > 1.0) throw std::invalid_argument("top_p must lie in (0,1]");
    if (top_k < 0) throw std::invalid_argument("top_k must be nonnegative");
    if ((top_k == 0 || top_k >= v) && top_p == 1.0) return;

    const T neg_inf = -std::numeric_limits<T>::infinity();
    std::vector<int> order(static_cast<size_t>(v));
    for (int j = 0; j < v; ++j) order[size_t(j)] = j;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (logits[a] != logits[b]) return logits[a] > logits[b];
        return a < b;
    });

    std::vector<uint8_t> keep(size_t(v), 1);
    if (top_k > 0 && top_k < v) {
        for (int r = top_k; r < v; ++r) keep[size_t(order[size_t(r)])] = 0;
    }
    if (top_p < 1.0) {
        std::vector<T> probs(static_cast<size_t>(v));
        nn::softmax_row(logits, probs.data(), v);
        double mass = 0.0;
        bool reached = false;
        for (int r = 0; r < v; ++r) {
            const int id = order[size_t(r)];
            if (reached) {
                keep[size_t(id)] = 0;
                continue;
            }
            mass += double(probs[size_t(id)]);
            if (mass >= top_p) reached = true;  // this entry is the last kept
        }
    }
    for (int j = 0; j < v; ++j) {
        if (!keep[size_t(j)]) logits[j] = neg_inf;
    }
}

// Inverse-CDF categorical draw over softmax(logits); -inf entries carry
// exactly zero probability and can never be selected.
template <typename T>
inline int sample_categorical(const T* logits, int v, Rng& rng) {
    std::vector<T> probs(static_cast<size_t>(v));
    nn::softmax_row(logits, probs.data(), v);
    const double u = rng.u01();
    double cum = 0.0;
    int last_positive = -1;
    for (int j = 0; j < v; ++j) {
        const double p = double(probs[size_t(j)]);
        if (p > 0.0) last_positive = j;
        cum += p;
        if (u < cum) return j;
    }
    if (last_positive < 0) throw NumericError("all tokens filtered out");
    return last_positive;
}

template <typename T>
inline int argmax_row(const T* logits, int v) {
    int best = 0;
    for (int j = 1; j < v; ++j) {
        if (logits[j] > logits[best]) best = j;
    }
    return best;
}

// Incremental decoding cache. Keys/values of the prefix are reused in the
// same transposed layout the batch forward uses; every value it produces is
// bit-identical to a full re-forward because attention only ever reads
// positions <= the current slot, accumulated in the same order.
template <typename T>
struct DecodeCache {
    int slots = 0;    // filled so far
    int seq_cap = 0;  // stride of the transposed caches
    std::vector<std::vector<T>> kt, vt;  // per layer, [d, seq]
    std::vector<T> x, ln1, q, kk, vv, probs, ctx, proj, res1, ln2, fh, fa, fo, lnf, logits;

    void reset(const ModelConfig& cfg) {
        slots = 0;
        seq_cap = cfg.seq_len();
        const size_t sd = size_t(seq_cap) * cfg.d_model;
        const auto ensure = [](std::vector<T>& b, size_t size) {
            if (b.size() != size) b.resize(size);
        };
        kt.resize(size_t(cfg.layers));
        vt.resize(size_t(cfg.layers));
        for (auto& b : kt) ensure(b, sd);
        for (auto& b : vt) ensure(b, sd);
        const size_t d = size_t(cfg.d_model);
        ensure(x, d);
        ensure(ln1, d);
        ensure(q, d);
        ensure(kk, d);
        ensure(vv, d);
        ensure(probs, size_t(seq_cap));
        ensure(ctx, d);
        ensure(proj, d);
        ensure(res1, d);
        ensure(ln2, d);
        ensure(fh, size_t(cfg.ffn_dim()));
        ensure(fa, size_t(cfg.ffn_dim()));
        ensure(fo, d);
        ensure(lnf, d);
        ensure(logits, size_t(cfg.vocab));
    }
};

// Feeds one slot (the class slot or a token) and returns logits for the next
// raster position in cache.logits.
template <typename T>
inline void decode_step(const ModelConfig& cfg, const BackboneOffsets& off, const T* p,
                        DecodeCache<T>& cache, int token_or_class, bool is_class_slot) {
    const int d = cfg.d_model;
    const int heads = cfg.n_heads;
    const int hd = d / heads;
    const int f = cfg.ffn_dim();
    const int i = cache.slots;
    const int seq = cache.seq_cap;
    if (i >= seq) throw std::invalid_argument("decode past sequence end");

    const T* row = is_class_slot ? p + off.cls_emb + size_t(token_or_class) * d
                                 : p + off.tok_emb + size_t(token_or_class) * d;
    const T* pos = p + off.pos_emb + size_t(i) * d;
    for (int j = 0; j < d; ++j) cache.x[size_t(j)] = row[j] + pos[j];

    T mean, rstd;
    const T scale = T(1) / std::sqrt(T(hd));
    const int lim = i + 1;
    for (int l = 0; l < cfg.layers; ++l) {
        const BlockOffsets& b = off.blocks[size_t(l)];
        nn::layernorm_forward(cache.x.data(), p + b.ln1_g, p + b.ln1_b, cache.ln1.data(), &mean,
                              &rstd, 1, d);
        nn::linear_forward(cache.ln1.data(), p + b.wq, p + b.bq, cache.q.data(), 1, d, d);
        nn::linear_forward(cache.ln1.data(), p + b.wk, p + b.bk, cache.kk.data(), 1, d, d);
        nn::linear_forward(cache.ln1.data(), p + b.wv, p + b.bv, cache.vv.data(), 1, d, d);
        T* ktl = cache.kt[size_t(l)].data();
        T* vtl = cache.vt[size_t(l)].data();
        for (int j = 0; j < d; ++j) {
            ktl[size_t(j) * seq + i] = cache.kk[size_t(j)];
            vtl[size_t(j) * seq + i] = cache.vv[size_t(j)];
        }
        // attend over slots 0..i, matching the masked batch forward bit for bit
        for (int h = 0; h < heads; ++h) {
            const int offh = h * hd;
            const T* qh = cache.q.data() + offh;
            T* prow = cache.probs.data();
            for (int j = 0; j < lim; ++j) prow[j] = T(0);
            for (int m = 0; m < hd; ++m) nn::axpy(qh[m], ktl + size_t(offh + m) * seq, prow, lim);
            T mx = prow[0];
            for (int j = 1; j < lim; ++j) mx = std::max(mx, prow[j]);
            T sum = T(0);
            for (int j = 0; j < lim; ++j) {
                prow[j] = std::exp((prow[j] - mx) * scale);
                sum += prow[j];
            }
            const T inv = T(1) / sum;
            for (int j = 0; j < lim; ++j) prow[j] *= inv;
            T* ch = cache.ctx.data() + offh;
            for (int m = 0; m < hd; ++m) ch[m] = nn::dot(prow, vtl + size_t(offh + m) * seq, lim);
        }
        nn::linear_forward(cache.ctx.data(), p + b.wo, p + b.bo, cache.proj.data(), 1, d, d);
        for (int j = 0; j < d; ++j) cache.res1[size_t(j)] = cache.x[size_t(j)] + cache.proj[size_t(j)];
        nn::layernorm_forward(cache.res1.data(), p + b.ln2_g, p + b.ln2_b, cache.ln2.data(), &mean,
                              &rstd, 1, d);
        nn::linear_forward(cache.ln2.data(), p + b.w1, p + b.b1, cache.fh.data(), 1, d, f);
        for (int j = 0; j < f; ++j) cache.fa[size_t(j)] = nn::gelu(cache.fh[size_t(j)]);
        nn::linear_forward(cache.fa.data(), p + b.w2, p + b.b2, cache.fo.data(), 1, f, d);
        for (int j = 0; j < d; ++j) cache.x[size_t(j)] = cache.res1[size_t(j)] + cache.fo[size_t(j)];
    }
    nn::layernorm_forward(cache.x.data(), p + off.lnf_g, p + off.lnf_b, cache.lnf.data(), &mean,
                          &rstd, 1, d);
    nn::linear_forward(cache.lnf.data(), p + off.head_w, p + off.head_b, cache.logits.data(), 1, d,
                       cfg.vocab);
    cache.slots = i + 1;
}

// Strictly causal token-by-token decoding with classifier-free guidance. Two
// streams (class and null prefix) run when the scale calls for both; the
// projection heads play no part here.
template <typename T>
inline TokenGrid sample_grid(const ModelConfig& cfg, const BackboneOffsets& off, const T* p,
                             int class_label, const SampleParams& sp, Rng& rng,
                             DecodeCache<T>& cond_cache, DecodeCache<T>& uncond_cache) {
    sp.validate();
    if (!cfg.cond_prefix) throw std::invalid_argument("sampling needs the class-conditional model");
    if (class_label < 0 || class_label > cfg.num_classes) {
        throw std::invalid_argument("class label out of range");
    }
    const int n = cfg.shape.tokens();
    const int v = cfg.vocab;
    const bool two_streams = sp.cfg_scale != 1.0 && class_label != cfg.null_class();

    cond_cache.reset(cfg);
    decode_step(cfg, off, p, cond_cache, class_label, true);
    if (two_streams) {
        uncond_cache.reset(cfg);
        decode_step(cfg, off, p, uncond_cache, cfg.null_class(), true);
    }

    TokenGrid grid;
    grid.class_label = class_label;
    grid.tokens.resize(size_t(n));
    std::vector<T> mixed(static_cast<size_t>(v));
    for (int i = 0; i < n; ++i) {
        const T* logits;
        if (two_streams) {
            cfg_combine(cond_cache.logits.data(), uncond_cache.logits.data(), sp.cfg_scale,
                        mixed.data(), v);
            logits = mixed.data();
        } else {
            logits = cond_cache.logits.data();
        }

        int tok;
        if (sp.temperature == 0.0) {
            tok = argmax_row(logits, v);
        } else {
            if (logits != mixed.data()) {
                for (int j = 0; j < v; ++j) mixed[size_t(j)] = logits[j];
            }
            if (sp.temperature != 1.0) {
                for (int j = 0; j < v; ++j) mixed[size_t(j)] /= T(sp.temperature);
            }
            filter_top_k_top_p(mixed.data(), v, sp.top_k, sp.top_p);
            tok = sample_categorical(mixed.data(), v, rng);
        }
        grid.tokens[size_t(i)] = uint16_t(tok);
        if (i + 1 < n) {
            decode_step(cfg, off, p, cond_cache, tok, false);
            if (two_streams) decode_step(cfg, off, p, uncond_cache, tok, false);
        }
    }
    return grid;
}

}  // namespace arfs
