#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "arfs/grid.hpp"
#include "arfs/nn.hpp"
#include "arfs/params.hpp"
#include "arfs/rng.hpp"

namespace arfs {

// Causal decoder over class-prefixed token grids: pre-LN blocks, learned
// absolute positions, a single class-condition slot in front of the raster
// sequence, GELU feed-forward with 4x expansion.
struct ModelConfig {
    int layers = 6;
    int d_model = 96;
    int n_heads = 4;
    int vocab = 64;
    GridShape shape{16, 16};
    int num_classes = 8;
    int align_layer = 4;  // residual-stream tap after this many blocks
    double dropout_token = 0.1;
    double dropout_attn = 0.1;
    double dropout_ffn = 0.1;
    double dropout_cond = 0.1;
    // The decoder carries a class slot ahead of the raster sequence; the
    // bidirectional encoder reuses this machinery without one.
    bool cond_prefix = true;

    int seq_len() const { return shape.tokens() + (cond_prefix ? 1 : 0); }
    int null_class() const { return num_classes; }
    int ffn_dim() const { return 4 * d_model; }

    void validate() const {
        if (layers < 1) throw std::invalid_argument("layers must be positive");
        if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
            throw std::invalid_argument("d_model must be a positive multiple of n_heads");
        }
        if (vocab < 1 || num_classes < 1) throw std::invalid_argument("vocab/classes must be positive");
        if (shape.height < 1 || shape.width < 1) throw std::invalid_argument("bad grid shape");
        if (align_layer <= 0 || align_layer >= layers) {
            throw std::invalid_argument("align_layer must satisfy 0 < l < layers");
        }
        for (double p : {dropout_token, dropout_attn, dropout_ffn, dropout_cond}) {
            if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout probabilities must lie in [0,1)");
        }
    }
};

struct BlockOffsets {
    size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    size_t ln2_g, ln2_b, w1, b1, w2, b2;
};

struct BackboneOffsets {
    size_t tok_emb, pos_emb, cls_emb;
    std::vector<BlockOffsets> blocks;
    size_t lnf_g, lnf_b, head_w, head_b;
};

// Appends the backbone tensors to `layout` and returns their offsets.
inline BackboneOffsets build_backbone_layout(const ModelConfig& cfg, ParamLayout& layout,
                                             const std::string& prefix = "") {
    cfg.validate();
    const uint32_t d = uint32_t(cfg.d_model);
    const uint32_t f = uint32_t(cfg.ffn_dim());
    BackboneOffsets off;
    off.tok_emb = layout.add(prefix + "tok_emb", {uint32_t(cfg.vocab), d}, false);
    off.pos_emb = layout.add(prefix + "pos_emb", {uint32_t(cfg.seq_len()), d}, false);
    off.cls_emb = cfg.cond_prefix
                      ? layout.add(prefix + "cls_emb", {uint32_t(cfg.num_classes + 1), d}, false)
                      : size_t(-1);
    for (int i = 0; i < cfg.layers; ++i) {
        const std::string b = prefix + "blk" + std::to_string(i) + ".";
        BlockOffsets bo;
        bo.ln1_g = layout.add(b + "ln1.g", {d}, false);
        bo.ln1_b = layout.add(b + "ln1.b", {d}, false);
        bo.wq = layout.add(b + "attn.wq", {d, d}, true);
        bo.bq = layout.add(b + "attn.bq", {d}, false);
        bo.wk = layout.add(b + "attn.wk", {d, d}, true);
        bo.bk = layout.add(b + "attn.bk", {d}, false);
        bo.wv = layout.add(b + "attn.wv", {d, d}, true);
        bo.bv = layout.add(b + "attn.bv", {d}, false);
        bo.wo = layout.add(b + "attn.wo", {d, d}, true);
        bo.bo = layout.add(b + "attn.bo", {d}, false);
        bo.ln2_g = layout.add(b + "ln2.g", {d}, false);
        bo.ln2_b = layout.add(b + "ln2.b", {d}, false);
        bo.w1 = layout.add(b + "ffn.w1", {d, f}, true);
        bo.b1 = layout.add(b + "ffn.b1", {f}, false);
        bo.w2 = layout.add(b + "ffn.w2", {f, d}, true);
        bo.b2 = layout.add(b + "ffn.b2", {d}, false);
        off.blocks.push_back(bo);
    }
    off.lnf_g = layout.add(prefix + "lnf.g", {d}, false);
    off.lnf_b = layout.add(prefix + "lnf.b", {d}, false);
    off.head_w = layout.add(prefix + "head.w", {d, uint32_t(cfg.vocab)}, true);
    off.head_b = layout.add(prefix + "head.b", {uint32_t(cfg.vocab)}, false);
    return off;
}

// Standard init: normals for embeddings and weights, zeros for biases, ones
// for norm gains. Walks the layout in order, so it is layout-deterministic.
template <typename T>
inline void init_backbone_params(const ParamLayout& layout, std::vector<T>& p, Rng& rng,
                                 double stddev = 0.02) {
    p.assign(layout.total, T(0));
    for (const TensorSpec& t : layout.tensors) {
        const bool is_norm_gain = t.name.size() >= 2 && t.name.compare(t.name.size() - 2, 2, ".g") == 0;
        const bool is_bias = !is_norm_gain && t.dims.size() == 1;
        if (is_norm_gain) {
            for (size_t i = 0; i < t.size; ++i) p[t.offset + i] = T(1);
        } else if (!is_bias) {
            for (size_t i = 0; i < t.size; ++i) p[t.offset + i] = T(rng.normal(0.0, stddev));
        }
    }
}

// Per-sample activation tape. Holds everything the backward pass needs.
template <typename T>
struct BackboneActs {
    int s = 0, d = 0, f = 0, heads = 0, layers = 0, n = 0, vocab = 0;
    bool train = false;
    int class_id = 0;
    std::vector<uint16_t> tokens;

    std::vector<T> xs;  // (layers+1) residual streams, each [s,d]
    std::vector<uint8_t> emb_keep;
    struct Layer {
        std::vector<T> ln1_out, ln1_mean, ln1_rstd;
        std::vector<T> q, kt, vt;  // keys/values kept transposed [d, s]
        std::vector<T> probs, probs_used;
        std::vector<uint8_t> attn_keep;
        std::vector<T> ctx, proj, res1;
        std::vector<T> ln2_out, ln2_mean, ln2_rstd;
        std::vector<T> ffn_h, ffn_a, ffn_o;
        std::vector<uint8_t> ffn_keep;
    };
    std::vector<Layer> layer;
    std::vector<T> lnf_out, lnf_mean, lnf_rstd;
    std::vector<T> logits;  // [n, vocab], rows are raster positions
    std::vector<T> row_scratch;  // [s, d], staging for the k/v transposes

    T* stream(int i) { return xs.data() + size_t(i) * s * d; }
    const T* stream(int i) const { return xs.data() + size_t(i) * s * d; }

    // Buffers are sized, not cleared: every cell the forward pass exposes is
    // written before it is read, and reallocating per sample would dominate
    // the step time.
    template <typename V>
    static void ensure(V& v, size_t size) {
        if (v.size() != size) v.resize(size);
    }

    void resize(const ModelConfig& cfg, bool train_mode) {
        s = cfg.seq_len();
        d = cfg.d_model;
        f = cfg.ffn_dim();
        heads = cfg.n_heads;
        layers = cfg.layers;
        n = cfg.shape.tokens();
        vocab = cfg.vocab;
        train = train_mode;
        const size_t sd = size_t(s) * d;
        ensure(xs, size_t(layers + 1) * sd);
        ensure(emb_keep, train ? sd : 0);
        layer.resize(size_t(layers));
        for (auto& L : layer) {
            ensure(L.ln1_out, sd);
            ensure(L.ln1_mean, size_t(s));
            ensure(L.ln1_rstd, size_t(s));
            ensure(L.q, sd);
            ensure(L.kt, sd);
            ensure(L.vt, sd);
            ensure(L.probs, size_t(heads) * s * s);
            const bool attn_drop = train && cfg.dropout_attn > 0.0;
            ensure(L.probs_used, attn_drop ? size_t(heads) * s * s : 0);
            ensure(L.attn_keep, attn_drop ? size_t(heads) * s * s : 0);
            ensure(L.ctx, sd);
            ensure(L.proj, sd);
            ensure(L.res1, sd);
            ensure(L.ln2_out, sd);
            ensure(L.ln2_mean, size_t(s));
            ensure(L.ln2_rstd, size_t(s));
            ensure(L.ffn_h, size_t(s) * f);
            ensure(L.ffn_a, size_t(s) * f);
            ensure(L.ffn_o, sd);
            ensure(L.ffn_keep, train && cfg.dropout_ffn > 0.0 ? sd : 0);
        }
        ensure(lnf_out, sd);
        ensure(lnf_mean, size_t(s));
        ensure(lnf_rstd, size_t(s));
        ensure(logits, size_t(n) * vocab);
        ensure(row_scratch, sd);
    }
};

// Forward pass for one grid. `class_id` must already reflect condition dropout
// (the trainer draws it); `rng` supplies the dropout streams in train mode.
// Rows of `logits` score token n given the class and tokens < n; the slot that
// consumes the last grid token produces no logits row. `run_layers` < layers
// stops after that many blocks and skips the final norm and head (used for
// EMA target extraction).
template <typename T>
inline void backbone_forward(const ModelConfig& cfg, const BackboneOffsets& off, const T* p,
                             const uint16_t* tokens, int class_id,
                             const std::vector<int>& row_limits, bool train, Rng* rng,
                             BackboneActs<T>& a, int run_layers = -1) {
    const int s = cfg.seq_len();
    const int d = cfg.d_model;
    const int f = cfg.ffn_dim();
    const int n = cfg.shape.tokens();
    const int depth = run_layers < 0 ? cfg.layers : run_layers;
    if (int(row_limits.size()) != s) throw std::invalid_argument("mask size must be seq_len");
    if (depth < 1 || depth > cfg.layers) throw std::invalid_argument("bad layer count");
    if (cfg.cond_prefix && (class_id < 0 || class_id > cfg.num_classes)) {
        throw std::invalid_argument("bad class id");
    }

    a.resize(cfg, train);
    a.class_id = class_id;
    a.tokens.assign(tokens, tokens + n);

    // class slot + token embeddings + positions
    const int first_tok = cfg.cond_prefix ? 1 : 0;
    T* emb = a.stream(0);
    for (int i = 0; i < s; ++i) {
        const T* row = (cfg.cond_prefix && i == 0)
                           ? p + off.cls_emb + size_t(class_id) * d
                           : p + off.tok_emb + size_t(tokens[i - first_tok]) * d;
        const T* pos = p + off.pos_emb + size_t(i) * d;
        T* out = emb + size_t(i) * d;
        for (int j = 0; j < d; ++j) out[j] = row[j] + pos[j];
    }
    if (train && cfg.dropout_token > 0.0) {
        nn::dropout_forward(emb, emb, a.emb_keep.data(), s * d, cfg.dropout_token, *rng);
    }

    for (int l = 0; l < depth; ++l) {
        const BlockOffsets& b = off.blocks[size_t(l)];
        auto& L = a.layer[size_t(l)];
        const T* x = a.stream(l);
        T* out = a.stream(l + 1);

        nn::layernorm_forward(x, p + b.ln1_g, p + b.ln1_b, L.ln1_out.data(), L.ln1_mean.data(),
                              L.ln1_rstd.data(), s, d);
        nn::linear_forward(L.ln1_out.data(), p + b.wq, p + b.bq, L.q.data(), s, d, d);
        nn::linear_forward(L.ln1_out.data(), p + b.wk, p + b.bk, a.row_scratch.data(), s, d, d);
        nn::transpose_rows(a.row_scratch.data(), L.kt.data(), s, d);
        nn::linear_forward(L.ln1_out.data(), p + b.wv, p + b.bv, a.row_scratch.data(), s, d, d);
        nn::transpose_rows(a.row_scratch.data(), L.vt.data(), s, d);

        const bool attn_drop = train && cfg.dropout_attn > 0.0;
        nn::attention_forward(L.q.data(), L.kt.data(), L.vt.data(), L.probs.data(),
                              attn_drop ? L.probs_used.data() : nullptr,
                              attn_drop ? L.attn_keep.data() : nullptr, L.ctx.data(), s, d,
                              cfg.n_heads, row_limits, attn_drop ? cfg.dropout_attn : 0.0,
                              attn_drop ? rng : nullptr);
        nn::linear_forward(L.ctx.data(), p + b.wo, p + b.bo, L.proj.data(), s, d, d);
        for (int i = 0; i < s * d; ++i) L.res1[size_t(i)] = x[i] + L.proj[size_t(i)];

        nn::layernorm_forward(L.res1.data(), p + b.ln2_g, p + b.ln2_b, L.ln2_out.data(),
                              L.ln2_mean.data(), L.ln2_rstd.data(), s, d);
        nn::linear_forward(L.ln2_out.data(), p + b.w1, p + b.b1, L.ffn_h.data(), s, d, f);
        for (size_t i = 0; i < L.ffn_h.size(); ++i) L.ffn_a[i] = nn::gelu(L.ffn_h[i]);
        nn::linear_forward(L.ffn_a.data(), p + b.w2, p + b.b2, L.ffn_o.data(), s, f, d);
        if (train && cfg.dropout_ffn > 0.0) {
            nn::dropout_forward(L.ffn_o.data(), L.ffn_o.data(), L.ffn_keep.data(), s * d,
                                cfg.dropout_ffn, *rng);
        }
        for (int i = 0; i < s * d; ++i) out[i] = L.res1[size_t(i)] + L.ffn_o[size_t(i)];
    }
    if (depth < cfg.layers) return;

    nn::layernorm_forward(a.stream(cfg.layers), p + off.lnf_g, p + off.lnf_b, a.lnf_out.data(),
                          a.lnf_mean.data(), a.lnf_rstd.data(), s, d);
    // logits only for the slots that score grid tokens
    nn::linear_forward(a.lnf_out.data(), p + off.head_w, p + off.head_b, a.logits.data(), n, d,
                       cfg.vocab);
}

// Scratch for one backward pass; reusable across samples. The backward pass
// zero-fills each buffer right before accumulating into it.
template <typename T>
struct BackboneGradWork {
    std::vector<T> dres, d_ln1, d_ln2, d_ctx, d_proj, dq, dk, dv, dkt, dvt, d_ffn_a, d_ffn_o,
        d_lnf, attn_scratch;

    void resize(const ModelConfig& cfg) {
        const size_t sd = size_t(cfg.seq_len()) * cfg.d_model;
        const auto ensure = [](std::vector<T>& v, size_t size) {
            if (v.size() != size) v.resize(size);
        };
        ensure(dres, sd);
        ensure(d_ln1, sd);
        ensure(d_ln2, sd);
        ensure(d_ctx, sd);
        ensure(d_proj, sd);
        ensure(dq, sd);
        ensure(dk, sd);
        ensure(dv, sd);
        ensure(dkt, sd);
        ensure(dvt, sd);
        ensure(d_ffn_a, size_t(cfg.seq_len()) * cfg.ffn_dim());
        ensure(d_ffn_o, sd);
        ensure(d_lnf, sd);
        ensure(attn_scratch, size_t(cfg.seq_len()));
    }
};

// Backward over one recorded tape. d_logits is [n, vocab]; d_align (optional)
// is [n, d] gradient into the residual stream after block `align_layer`;
// d_final (optional) is [n, d] gradient into the post-final-norm states (the
// auxiliary output heads read those). Gradients accumulate into `grad`.
template <typename T>
inline void backbone_backward(const ModelConfig& cfg, const BackboneOffsets& off, const T* p,
                              const BackboneActs<T>& a, const std::vector<int>& row_limits,
                              const T* d_logits, const T* d_align, const T* d_final, T* grad,
                              BackboneGradWork<T>& w) {
    const int s = cfg.seq_len();
    const int d = cfg.d_model;
    const int f = cfg.ffn_dim();
    const int n = cfg.shape.tokens();
    w.resize(cfg);

    // head and final norm
    std::fill(w.d_lnf.begin(), w.d_lnf.end(), T(0));
    nn::linear_backward(a.lnf_out.data(), p + off.head_w, d_logits, w.d_lnf.data(),
                        grad + off.head_w, grad + off.head_b, n, d, cfg.vocab);
    if (d_final) {
        for (int i = 0; i < n * d; ++i) w.d_lnf[size_t(i)] += d_final[i];
    }
    std::fill(w.dres.begin(), w.dres.end(), T(0));
    nn::layernorm_backward(a.stream(cfg.layers), p + off.lnf_g, a.lnf_mean.data(),
                           a.lnf_rstd.data(), w.d_lnf.data(), w.dres.data(), grad + off.lnf_g,
                           grad + off.lnf_b, s, d);

    for (int l = cfg.layers - 1; l >= 0; --l) {
        if (d_align && l + 1 == cfg.align_layer) {
            // foresight gradient enters the tapped residual stream directly
            for (int i = 0; i < n * d; ++i) w.dres[size_t(i)] += d_align[i];
        }
        const BlockOffsets& b = off.blocks[size_t(l)];
        const auto& L = a.layer[size_t(l)];
        const T* x = a.stream(l);

        // ffn path: res2 = res1 + drop(w2 gelu(w1 ln2(res1)))
        std::fill(w.d_ffn_o.begin(), w.d_ffn_o.end(), T(0));
        if (!L.ffn_keep.empty()) {
            nn::dropout_backward(w.dres.data(), L.ffn_keep.data(), w.d_ffn_o.data(), s * d,
                                 cfg.dropout_ffn);
        } else {
            for (int i = 0; i < s * d; ++i) w.d_ffn_o[size_t(i)] = w.dres[size_t(i)];
        }
        std::fill(w.d_ffn_a.begin(), w.d_ffn_a.end(), T(0));
        nn::linear_backward(L.ffn_a.data(), p + b.w2, w.d_ffn_o.data(), w.d_ffn_a.data(),
                            grad + b.w2, grad + b.b2, s, f, d);
        for (size_t i = 0; i < w.d_ffn_a.size(); ++i) w.d_ffn_a[i] *= nn::gelu_grad(L.ffn_h[i]);
        std::fill(w.d_ln2.begin(), w.d_ln2.end(), T(0));
        nn::linear_backward(L.ln2_out.data(), p + b.w1, w.d_ffn_a.data(), w.d_ln2.data(),
                            grad + b.w1, grad + b.b1, s, d, f);
        nn::layernorm_backward(L.res1.data(), p + b.ln2_g, L.ln2_mean.data(), L.ln2_rstd.data(),
                               w.d_ln2.data(), w.dres.data(), grad + b.ln2_g, grad + b.ln2_b, s, d);

        // attention path: res1 = x + wo attn(wq/wk/wv ln1(x))
        std::fill(w.d_proj.begin(), w.d_proj.end(), T(0));
        for (int i = 0; i < s * d; ++i) w.d_proj[size_t(i)] = w.dres[size_t(i)];
        std::fill(w.d_ctx.begin(), w.d_ctx.end(), T(0));
        nn::linear_backward(L.ctx.data(), p + b.wo, w.d_proj.data(), w.d_ctx.data(), grad + b.wo,
                            grad + b.bo, s, d, d);
        std::fill(w.dq.begin(), w.dq.end(), T(0));
        std::fill(w.dkt.begin(), w.dkt.end(), T(0));
        std::fill(w.dvt.begin(), w.dvt.end(), T(0));
        nn::attention_backward(L.q.data(), L.kt.data(), L.vt.data(), L.probs.data(),
                               L.attn_keep.empty() ? nullptr : L.attn_keep.data(), w.d_ctx.data(),
                               w.dq.data(), w.dkt.data(), w.dvt.data(), s, d, cfg.n_heads,
                               row_limits, L.attn_keep.empty() ? 0.0 : cfg.dropout_attn,
                               w.attn_scratch);
        nn::transpose_rows(w.dkt.data(), w.dk.data(), d, s);
        nn::transpose_rows(w.dvt.data(), w.dv.data(), d, s);
        std::fill(w.d_ln1.begin(), w.d_ln1.end(), T(0));
        nn::linear_backward(L.ln1_out.data(), p + b.wq, w.dq.data(), w.d_ln1.data(), grad + b.wq,
                            grad + b.bq, s, d, d);
        nn::linear_backward(L.ln1_out.data(), p + b.wk, w.dk.data(), w.d_ln1.data(), grad + b.wk,
                            grad + b.bk, s, d, d);
        nn::linear_backward(L.ln1_out.data(), p + b.wv, w.dv.data(), w.d_ln1.data(), grad + b.wv,
                            grad + b.bv, s, d, d);
        nn::layernorm_backward(x, p + b.ln1_g, L.ln1_mean.data(), L.ln1_rstd.data(),
                               w.d_ln1.data(), w.dres.data(), grad + b.ln1_g, grad + b.ln1_b, s, d);
    }

    // embeddings; route through the token-dropout mask first
    T* demb = w.d_ln1.data();  // reuse as scratch
    std::fill(demb, demb + size_t(s) * d, T(0));
    if (!a.emb_keep.empty()) {
        nn::dropout_backward(w.dres.data(), a.emb_keep.data(), demb, s * d, cfg.dropout_token);
    } else {
        for (int i = 0; i < s * d; ++i) demb[i] = w.dres[size_t(i)];
    }
    const int first_tok = cfg.cond_prefix ? 1 : 0;
    for (int i = 0; i < s; ++i) {
        T* gpos = grad + off.pos_emb + size_t(i) * d;
        T* grow = (cfg.cond_prefix && i == 0)
                      ? grad + off.cls_emb + size_t(a.class_id) * d
                      : grad + off.tok_emb + size_t(a.tokens[size_t(i - first_tok)]) * d;
        const T* src = demb + size_t(i) * d;
        for (int j = 0; j < d; ++j) {
            gpos[j] += src[j];
            grow[j] += src[j];
        }
    }
}

// The public view of one forward pass: logits plus the two state taps, rows
// aligned with raster positions.
template <typename T>
struct ForwardOutput {
    int n = 0, d = 0, vocab = 0;
    std::vector<T> logits;        // [n, vocab]
    std::vector<T> hidden_align;  // [n, d], residual stream after align_layer
    std::vector<T> hidden_final;  // [n, d], post-final-norm states
};

template <typename T>
inline ForwardOutput<T> extract_output(const ModelConfig& cfg, const BackboneActs<T>& a) {
    ForwardOutput<T> out;
    out.n = a.n;
    out.d = a.d;
    out.vocab = a.vocab;
    out.logits = a.logits;
    const T* tap = a.stream(cfg.align_layer);
    out.hidden_align.assign(tap, tap + size_t(a.n) * a.d);
    out.hidden_final.assign(a.lnf_out.data(), a.lnf_out.data() + size_t(a.n) * a.d);
    return out;
}

// Mean next-token cross entropy over the grid; optionally accumulates
// grad_scale * d(loss)/d(logits) into d_logits.
template <typename T>
inline T ntp_loss(const T* logits, const uint16_t* targets, int n, int vocab, T* d_logits,
                  T grad_scale = T(1)) {
    T sum = T(0);
    const T scale = T(1) / T(n);
    for (int i = 0; i < n; ++i) {
        const T* row = logits + size_t(i) * vocab;
        const T l = nn::cross_entropy_row(row, vocab, targets[i]);
        if (!std::isfinite(double(l))) throw NumericError("non-finite next-token loss");
        sum += l;
        if (d_logits) {
            nn::cross_entropy_backward_row(row, vocab, int(targets[i]), grad_scale * scale,
                                           d_logits + size_t(i) * vocab);
        }
    }
    return sum * scale;
}

// Output-level multi-token baseline: K linear heads on the post-norm final
// states, head k scoring the k-th neighborhood slot, mean over the available
// (position, slot) pairs.
struct MtpHeadOffsets {
    std::vector<size_t> w, b;  // each head [vocab, d] and [vocab]
};

inline MtpHeadOffsets build_mtp_heads(const ModelConfig& cfg, int k, ParamLayout& layout) {
    if (k < 1) throw std::invalid_argument("mtp needs at least one head");
    MtpHeadOffsets off;
    for (int i = 0; i < k; ++i) {
        const std::string b = "mtp_head" + std::to_string(i) + ".";
        off.w.push_back(layout.add(b + "w", {uint32_t(cfg.d_model), uint32_t(cfg.vocab)}, true));
        off.b.push_back(layout.add(b + "b", {uint32_t(cfg.vocab)}, false));
    }
    return off;
}

// hidden_final is [n, d]. Accumulates head gradients into `grad` and the
// gradient w.r.t. hidden_final into d_hidden when requested.
template <typename T>
inline T mtp_loss(const ModelConfig& cfg, const MtpHeadOffsets& heads, const T* p,
                  const T* hidden_final, const uint16_t* tokens,
                  const std::vector<Neighborhood>& nbhd, T* grad, T* d_hidden,
                  T grad_scale = T(1)) {
    const int d = cfg.d_model;
    const int v = cfg.vocab;
    const int n = cfg.shape.tokens();
    const int k = int(heads.w.size());

    size_t pairs = 0;
    for (const auto& nb : nbhd) pairs += std::min<size_t>(nb.targets.size(), size_t(k));
    if (pairs == 0) throw std::invalid_argument("no (position, slot) pairs available");
    const T scale = T(1) / T(pairs);

    std::vector<T> row(static_cast<size_t>(v));
    std::vector<T> drow(static_cast<size_t>(v));
    T sum = T(0);
    for (int i = 0; i < n; ++i) {
        const T* h = hidden_final + size_t(i) * d;
        const auto& nb = nbhd[size_t(i)];
        const int slots = int(std::min<size_t>(nb.targets.size(), size_t(k)));
        for (int s = 0; s < slots; ++s) {
            const T* w = p + heads.w[size_t(s)];
            const T* b = p + heads.b[size_t(s)];
            nn::linear_forward(h, w, b, row.data(), 1, d, v);
            const int target = int(tokens[nb.targets[size_t(s)]]);
            sum += nn::cross_entropy_row(row.data(), v, target);
            if (grad || d_hidden) {
                std::fill(drow.begin(), drow.end(), T(0));
                nn::cross_entropy_backward_row(row.data(), v, target, grad_scale * scale,
                                               drow.data());
                nn::linear_backward(h, w, drow.data(),
                                    d_hidden ? d_hidden + size_t(i) * d : nullptr,
                                    grad ? grad + heads.w[size_t(s)] : nullptr,
                                    grad ? grad + heads.b[size_t(s)] : nullptr, 1, d, v);
            }
        }
    }
    return sum * scale;
}

}  // namespace arfs
