#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "arfs/grid.hpp"
#include "arfs/model.hpp"
#include "arfs/nn.hpp"
#include "arfs/params.hpp"

namespace arfs {

enum class ForesightMode { none, explicit_ema, implicit_encoder, output_mtp };
enum class EmaSource { online, pretrained_frozen };
enum class HeadKind { mlp, transformer_block };

struct ScheduleSpec {
    enum class Kind { constant, step, cosine };
    Kind kind = Kind::constant;
    double start = 0.0;
    double end = 0.0;
    double switch_fraction = 0.5;  // step schedule only

    bool operator==(const ScheduleSpec&) const = default;
};

// Closed forms for the alignment-coefficient schedules. The step schedule's
// end value takes effect at progress >= switch_fraction.
inline double lambda_at(const ScheduleSpec& spec, double progress) {
    if (progress < 0.0 || progress > 1.0) throw std::invalid_argument("progress must lie in [0,1]");
    switch (spec.kind) {
        case ScheduleSpec::Kind::constant:
            return spec.start;
        case ScheduleSpec::Kind::step:
            return progress < spec.switch_fraction ? spec.start : spec.end;
        case ScheduleSpec::Kind::cosine:
            return spec.end + (spec.start - spec.end) * (1.0 + std::cos(3.14159265358979323846 * progress)) / 2.0;
    }
    throw std::invalid_argument("bad schedule kind");
}

struct ForesightConfig {
    ForesightMode mode = ForesightMode::none;
    FsLayout layout = FsLayout::grid_2d;
    int k = 3;
    double tau = 0.9999;
    double warmup_fraction = 0.0;
    ScheduleSpec lambda_schedule{ScheduleSpec::Kind::constant, 0.0, 0.0, 0.5};
    EmaSource ema_source = EmaSource::online;
    HeadKind head_kind = HeadKind::mlp;
    int head_hidden = 128;
    int target_width = 0;  // C; 0 resolves to d_model (explicit) / encoder width

    void validate() const {
        if (k < 1 && mode != ForesightMode::none) throw std::invalid_argument("k must be positive");
        if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("tau must lie in [0,1]");
        if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) {
            throw std::invalid_argument("warmup_fraction must lie in [0,1)");
        }
        if (lambda_schedule.start < 0.0 || lambda_schedule.end < 0.0) {
            throw std::invalid_argument("lambda must be nonnegative");
        }
        if (mode == ForesightMode::implicit_encoder && k != 1) {
            throw std::invalid_argument("implicit foresight aligns the current position only (k = 1)");
        }
        if (head_hidden < 1) throw std::invalid_argument("head_hidden must be positive");
    }
};

// Paper defaults: explicit foresight steps lambda 2 -> 1 at the midpoint with
// a warm-up; implicit keeps lambda constant at 2.
inline ForesightConfig default_explicit_config() {
    ForesightConfig fs;
    fs.mode = ForesightMode::explicit_ema;
    fs.layout = FsLayout::grid_2d;
    fs.k = 3;
    fs.warmup_fraction = 0.05;
    fs.lambda_schedule = {ScheduleSpec::Kind::step, 2.0, 1.0, 0.5};
    return fs;
}

inline ForesightConfig default_implicit_config() {
    ForesightConfig fs;
    fs.mode = ForesightMode::implicit_encoder;
    fs.k = 1;
    fs.lambda_schedule = {ScheduleSpec::Kind::constant, 2.0, 2.0, 0.5};
    return fs;
}

// phi <- tau*phi + (1-tau)*theta, accumulated in double so long runs stay
// within closed-form tolerance.
template <typename T>
inline void ema_update(std::vector<T>& phi, const std::vector<T>& theta, double tau) {
    if (phi.size() != theta.size()) throw std::invalid_argument("EMA/parameter shape mismatch");
    if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("tau must lie in [0,1]");
    for (size_t i = 0; i < phi.size(); ++i) {
        phi[i] = T(tau * double(phi[i]) + (1.0 - tau) * double(theta[i]));
    }
}

// ---------------------------------------------------------------------------
// projection heads

struct HeadOffsets {
    HeadKind kind = HeadKind::mlp;
    // mlp: Linear(d->h) SiLU Linear(h->h) SiLU Linear(h->c)
    size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0, w3 = 0, b3 = 0;
    // transformer block: LN, 4-head attention, residual, LN, 4x MLP, residual,
    // then Linear(d->c)
    size_t ln1_g = 0, ln1_b = 0, wq = 0, bq = 0, wk = 0, bk = 0, wv = 0, bv = 0, wo = 0, bo = 0;
    size_t ln2_g = 0, ln2_b = 0, fw1 = 0, fb1 = 0, fw2 = 0, fb2 = 0, wout = 0, bout = 0;
};

inline constexpr int kHeadAttnHeads = 4;

inline HeadOffsets build_projection_head(int d, int hidden, int c, HeadKind kind,
                                         const std::string& name, ParamLayout& layout) {
    HeadOffsets off;
    off.kind = kind;
    const uint32_t ud = uint32_t(d), uh = uint32_t(hidden), uc = uint32_t(c);
    if (kind == HeadKind::mlp) {
        off.w1 = layout.add(name + ".w1", {ud, uh}, true);
        off.b1 = layout.add(name + ".b1", {uh}, false);
        off.w2 = layout.add(name + ".w2", {uh, uh}, true);
        off.b2 = layout.add(name + ".b2", {uh}, false);
        off.w3 = layout.add(name + ".w3", {uh, uc}, true);
        off.b3 = layout.add(name + ".b3", {uc}, false);
    } else {
        if (d % kHeadAttnHeads != 0) throw std::invalid_argument("head width must split over 4 attention heads");
        const uint32_t uf = uint32_t(4 * d);
        off.ln1_g = layout.add(name + ".ln1.g", {ud}, false);
        off.ln1_b = layout.add(name + ".ln1.b", {ud}, false);
        off.wq = layout.add(name + ".attn.wq", {ud, ud}, true);
        off.bq = layout.add(name + ".attn.bq", {ud}, false);
        off.wk = layout.add(name + ".attn.wk", {ud, ud}, true);
        off.bk = layout.add(name + ".attn.bk", {ud}, false);
        off.wv = layout.add(name + ".attn.wv", {ud, ud}, true);
        off.bv = layout.add(name + ".attn.bv", {ud}, false);
        off.wo = layout.add(name + ".attn.wo", {ud, ud}, true);
        off.bo = layout.add(name + ".attn.bo", {ud}, false);
        off.ln2_g = layout.add(name + ".ln2.g", {ud}, false);
        off.ln2_b = layout.add(name + ".ln2.b", {ud}, false);
        off.fw1 = layout.add(name + ".mlp.w1", {ud, uf}, true);
        off.fb1 = layout.add(name + ".mlp.b1", {uf}, false);
        off.fw2 = layout.add(name + ".mlp.w2", {uf, ud}, true);
        off.fb2 = layout.add(name + ".mlp.b2", {ud}, false);
        off.wout = layout.add(name + ".out.w", {ud, uc}, true);
        off.bout = layout.add(name + ".out.b", {uc}, false);
    }
    return off;
}

// Forward tape of one projection head over n token rows.
template <typename T>
struct HeadActs {
    std::vector<T> h1, a1, h2, a2;                       // mlp
    std::vector<T> ln1_out, ln1_mean, ln1_rstd;          // transformer
    std::vector<T> q, kt, vt, probs, ctx, proj, res1, row_scratch;
    std::vector<T> ln2_out, ln2_mean, ln2_rstd, fh, fa, fo, res2;
    std::vector<T> out;  // [n, c]
};

template <typename T>
inline void head_forward(const HeadOffsets& off, const T* p, const T* x, int n, int d, int hidden,
                         int c, HeadActs<T>& a) {
    const auto ensure = [](std::vector<T>& v, size_t size) {
        if (v.size() != size) v.resize(size);
    };
    if (off.kind == HeadKind::mlp) {
        ensure(a.h1, size_t(n) * hidden);
        ensure(a.a1, size_t(n) * hidden);
        ensure(a.h2, size_t(n) * hidden);
        ensure(a.a2, size_t(n) * hidden);
        ensure(a.out, size_t(n) * c);
        nn::linear_forward(x, p + off.w1, p + off.b1, a.h1.data(), n, d, hidden);
        for (size_t i = 0; i < a.h1.size(); ++i) a.a1[i] = nn::silu(a.h1[i]);
        nn::linear_forward(a.a1.data(), p + off.w2, p + off.b2, a.h2.data(), n, hidden, hidden);
        for (size_t i = 0; i < a.h2.size(); ++i) a.a2[i] = nn::silu(a.h2[i]);
        nn::linear_forward(a.a2.data(), p + off.w3, p + off.b3, a.out.data(), n, hidden, c);
        return;
    }

    // transformer-style head; full bidirectional attention over the n rows
    const int f = 4 * d;
    const size_t nd = size_t(n) * d;
    ensure(a.ln1_out, nd);
    ensure(a.ln1_mean, size_t(n));
    ensure(a.ln1_rstd, size_t(n));
    ensure(a.q, nd);
    ensure(a.kt, nd);
    ensure(a.vt, nd);
    ensure(a.row_scratch, nd);
    ensure(a.probs, size_t(kHeadAttnHeads) * n * n);
    ensure(a.ctx, nd);
    ensure(a.proj, nd);
    ensure(a.res1, nd);
    ensure(a.ln2_out, nd);
    ensure(a.ln2_mean, size_t(n));
    ensure(a.ln2_rstd, size_t(n));
    ensure(a.fh, size_t(n) * f);
    ensure(a.fa, size_t(n) * f);
    ensure(a.fo, nd);
    ensure(a.res2, nd);
    ensure(a.out, size_t(n) * c);

    const std::vector<int> full(size_t(n), n);
    nn::layernorm_forward(x, p + off.ln1_g, p + off.ln1_b, a.ln1_out.data(), a.ln1_mean.data(),
                          a.ln1_rstd.data(), n, d);
    nn::linear_forward(a.ln1_out.data(), p + off.wq, p + off.bq, a.q.data(), n, d, d);
    nn::linear_forward(a.ln1_out.data(), p + off.wk, p + off.bk, a.row_scratch.data(), n, d, d);
    nn::transpose_rows(a.row_scratch.data(), a.kt.data(), n, d);
    nn::linear_forward(a.ln1_out.data(), p + off.wv, p + off.bv, a.row_scratch.data(), n, d, d);
    nn::transpose_rows(a.row_scratch.data(), a.vt.data(), n, d);
    nn::attention_forward(a.q.data(), a.kt.data(), a.vt.data(), a.probs.data(), (T*)nullptr,
                          (uint8_t*)nullptr, a.ctx.data(), n, d, kHeadAttnHeads, full, 0.0,
                          (Rng*)nullptr);
    nn::linear_forward(a.ctx.data(), p + off.wo, p + off.bo, a.proj.data(), n, d, d);
    for (size_t i = 0; i < nd; ++i) a.res1[i] = x[i] + a.proj[i];
    nn::layernorm_forward(a.res1.data(), p + off.ln2_g, p + off.ln2_b, a.ln2_out.data(),
                          a.ln2_mean.data(), a.ln2_rstd.data(), n, d);
    nn::linear_forward(a.ln2_out.data(), p + off.fw1, p + off.fb1, a.fh.data(), n, d, f);
    for (size_t i = 0; i < a.fh.size(); ++i) a.fa[i] = nn::gelu(a.fh[i]);
    nn::linear_forward(a.fa.data(), p + off.fw2, p + off.fb2, a.fo.data(), n, f, d);
    for (size_t i = 0; i < nd; ++i) a.res2[i] = a.res1[i] + a.fo[i];
    nn::linear_forward(a.res2.data(), p + off.wout, p + off.bout, a.out.data(), n, d, c);
}

// Accumulates d(out) back into head parameter gradients and d(x).
template <typename T>
inline void head_backward(const HeadOffsets& off, const T* p, const T* x, const HeadActs<T>& a,
                          const T* dout, int n, int d, int hidden, int c, T* grad, T* dx) {
    if (off.kind == HeadKind::mlp) {
        std::vector<T> da2(size_t(n) * hidden, T(0)), da1(size_t(n) * hidden, T(0));
        nn::linear_backward(a.a2.data(), p + off.w3, dout, da2.data(), grad + off.w3,
                            grad + off.b3, n, hidden, c);
        for (size_t i = 0; i < da2.size(); ++i) da2[i] *= nn::silu_grad(a.h2[i]);
        nn::linear_backward(a.a1.data(), p + off.w2, da2.data(), da1.data(), grad + off.w2,
                            grad + off.b2, n, hidden, hidden);
        for (size_t i = 0; i < da1.size(); ++i) da1[i] *= nn::silu_grad(a.h1[i]);
        nn::linear_backward(x, p + off.w1, da1.data(), dx, grad + off.w1, grad + off.b1, n, d,
                            hidden);
        return;
    }

    const int f = 4 * d;
    const size_t nd = size_t(n) * d;
    const std::vector<int> full(size_t(n), n);
    std::vector<T> dres2(nd, T(0));
    nn::linear_backward(a.res2.data(), p + off.wout, dout, dres2.data(), grad + off.wout,
                        grad + off.bout, n, d, c);

    // ffn sub-block
    std::vector<T> dfa(size_t(n) * f, T(0)), dln2(nd, T(0));
    nn::linear_backward(a.fa.data(), p + off.fw2, dres2.data(), dfa.data(), grad + off.fw2,
                        grad + off.fb2, n, f, d);
    for (size_t i = 0; i < dfa.size(); ++i) dfa[i] *= nn::gelu_grad(a.fh[i]);
    nn::linear_backward(a.ln2_out.data(), p + off.fw1, dfa.data(), dln2.data(), grad + off.fw1,
                        grad + off.fb1, n, d, f);
    std::vector<T> dres1 = dres2;  // residual passthrough
    nn::layernorm_backward(a.res1.data(), p + off.ln2_g, a.ln2_mean.data(), a.ln2_rstd.data(),
                           dln2.data(), dres1.data(), grad + off.ln2_g, grad + off.ln2_b, n, d);

    // attention sub-block
    std::vector<T> dctx(nd, T(0)), dq(nd, T(0)), dk(nd, T(0)), dv(nd, T(0)), dln1(nd, T(0));
    std::vector<T> dkt(nd, T(0)), dvt(nd, T(0));
    std::vector<T> scratch;
    nn::linear_backward(a.ctx.data(), p + off.wo, dres1.data(), dctx.data(), grad + off.wo,
                        grad + off.bo, n, d, d);
    nn::attention_backward(a.q.data(), a.kt.data(), a.vt.data(), a.probs.data(),
                           (uint8_t*)nullptr, dctx.data(), dq.data(), dkt.data(), dvt.data(), n,
                           d, kHeadAttnHeads, full, 0.0, scratch);
    nn::transpose_rows(dkt.data(), dk.data(), d, n);
    nn::transpose_rows(dvt.data(), dv.data(), d, n);
    nn::linear_backward(a.ln1_out.data(), p + off.wq, dq.data(), dln1.data(), grad + off.wq,
                        grad + off.bq, n, d, d);
    nn::linear_backward(a.ln1_out.data(), p + off.wk, dk.data(), dln1.data(), grad + off.wk,
                        grad + off.bk, n, d, d);
    nn::linear_backward(a.ln1_out.data(), p + off.wv, dv.data(), dln1.data(), grad + off.wv,
                        grad + off.bv, n, d, d);
    for (size_t i = 0; i < nd; ++i) dx[i] += dres1[i];
    nn::layernorm_backward(x, p + off.ln1_g, a.ln1_mean.data(), a.ln1_rstd.data(), dln1.data(),
                           dx, grad + off.ln1_g, grad + off.ln1_b, n, d);
}

// ---------------------------------------------------------------------------
// cosine alignment

inline constexpr double kCosineEps = 1e-8;

// -(1/P) sum cos(target, projected) over pairs (anchor i, slot s) where the
// target row index comes from the neighborhood. Fills d_proj (same shape as
// proj) when grads are requested. Targets are constants.
template <typename T>
inline T cosine_align_loss(const T* targets, int c, const std::vector<Neighborhood>& nbhd,
                           const std::vector<std::vector<T>>& proj,
                           std::vector<std::vector<T>>* d_proj) {
    const int k = int(proj.size());
    size_t pairs = 0;
    for (const auto& nb : nbhd) pairs += std::min<size_t>(nb.targets.size(), size_t(k));
    if (pairs == 0) throw std::invalid_argument("no alignment pairs available");

    const T inv_pairs = T(1) / T(pairs);
    T sum = T(0);
    for (size_t i = 0; i < nbhd.size(); ++i) {
        const auto& nb = nbhd[i];
        const int slots = int(std::min<size_t>(nb.targets.size(), size_t(k)));
        for (int s = 0; s < slots; ++s) {
            const T* f = targets + size_t(nb.targets[size_t(s)]) * c;
            const T* r = proj[size_t(s)].data() + i * size_t(c);
            const T fn = std::sqrt(nn::dot(f, f, c));
            const T rn = std::sqrt(nn::dot(r, r, c));
            if (!std::isfinite(double(fn)) || !std::isfinite(double(rn))) {
                throw NumericError("non-finite vector in alignment loss");
            }
            const T a = std::max(fn, T(kCosineEps));
            const T b = std::max(rn, T(kCosineEps));
            const T d = nn::dot(f, r, c);
            const T cs = d / (a * b);
            sum += cs;
            if (d_proj) {
                T* dr = (*d_proj)[size_t(s)].data() + i * size_t(c);
                // d(-cos)/dr, with the norm guard frozen below eps
                const T g1 = -inv_pairs / (a * b);
                const T g2 = rn > T(kCosineEps) ? inv_pairs * cs / (b * b) : T(0);
                for (int j = 0; j < c; ++j) dr[j] += g1 * f[j] + g2 * r[j];
            }
        }
    }
    return -sum * inv_pairs;
}

template <typename T>
inline T cosine_align_loss(const T* targets, int c, const std::vector<Neighborhood>& nbhd,
                           const std::vector<std::vector<T>>& proj) {
    return cosine_align_loss(targets, c, nbhd, proj,
                             static_cast<std::vector<std::vector<T>>*>(nullptr));
}

// ---------------------------------------------------------------------------
// bidirectional encoder (frozen after pretraining)

template <typename T>
struct BidirEncoder {
    ModelConfig cfg;        // cond_prefix = false, vocab includes the mask id
    ParamLayout layout;
    BackboneOffsets off;
    std::vector<T> params;
    AttnMask mask;
    std::vector<int> row_limits;

    int feature_width() const { return cfg.d_model; }
    int mask_token() const { return cfg.vocab - 1; }
};

// cfg describes the data (vocab, shape); the encoder gets its own embedding
// table with one extra mask token and full attention by default.
template <typename T>
inline BidirEncoder<T> make_encoder(int data_vocab, GridShape shape, int layers, int d_model,
                                    int n_heads, const AttnMask& mask) {
    BidirEncoder<T> enc;
    enc.cfg.cond_prefix = false;
    enc.cfg.layers = layers;
    enc.cfg.d_model = d_model;
    enc.cfg.n_heads = n_heads;
    enc.cfg.vocab = data_vocab + 1;  // + mask token
    enc.cfg.shape = shape;
    enc.cfg.num_classes = 1;
    enc.cfg.align_layer = std::max(1, layers - 1);
    enc.cfg.dropout_token = enc.cfg.dropout_attn = enc.cfg.dropout_ffn = enc.cfg.dropout_cond = 0.0;
    if (mask.size != shape.tokens()) throw std::invalid_argument("encoder mask size mismatch");
    enc.off = build_backbone_layout(enc.cfg, enc.layout, "");
    enc.mask = mask;
    enc.row_limits = mask_row_limits(mask);
    return enc;
}

// One feature row per grid position from the final layer, eval mode. The
// caller treats the result as constants; nothing here tracks gradients.
template <typename T>
inline std::vector<T> implicit_targets(const BidirEncoder<T>& enc, const uint16_t* tokens,
                                       BackboneActs<T>& scratch) {
    backbone_forward(enc.cfg, enc.off, enc.params.data(), tokens, 0, enc.row_limits, false,
                     (Rng*)nullptr, scratch);
    const int n = enc.cfg.shape.tokens();
    return std::vector<T>(scratch.lnf_out.data(), scratch.lnf_out.data() + size_t(n) * enc.cfg.d_model);
}

}  // namespace arfs
