#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "arfs/rng.hpp"

namespace arfs {

// Raised when a loss or activation goes non-finite; the CLI maps it to its own
// exit code.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace nn {

// Multi-lane dot product. The lane loops auto-vectorize without -ffast-math
// and the reduction order is fixed, so results are reproducible bit for bit.
template <typename T>
inline T dot(const T* a, const T* b, int n) {
    T acc[16] = {};
    int i = 0;
    for (; i + 16 <= n; i += 16) {
        for (int l = 0; l < 16; ++l) acc[l] += a[i + l] * b[i + l];
    }
    if (i + 8 <= n) {
        for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
        i += 8;
    }
    T tail = T(0);
    for (; i < n; ++i) tail += a[i] * b[i];
    T sum = tail;
    for (int l = 0; l < 16; ++l) sum += acc[l];
    return sum;
}

template <typename T>
inline void axpy(T s, const T* x, T* y, int n) {
    for (int i = 0; i < n; ++i) y[i] += s * x[i];
}

// Four fused accumulations; one pass over y amortizes the loads when the
// rows are short.
template <typename T>
inline void axpy4(T s0, const T* x0, T s1, const T* x1, T s2, const T* x2, T s3, const T* x3,
                  T* y, int n) {
    for (int i = 0; i < n; ++i) y[i] += s0 * x0[i] + s1 * x1[i] + s2 * x2[i] + s3 * x3[i];
}

// Four dot products sharing the loads of a.
template <typename T>
inline void dot4(const T* a, const T* b0, const T* b1, const T* b2, const T* b3, int n, T* out) {
    T acc0[8] = {}, acc1[8] = {}, acc2[8] = {}, acc3[8] = {};
    int i = 0;
    for (; i + 8 <= n; i += 8) {
        for (int l = 0; l < 8; ++l) {
            acc0[l] += a[i + l] * b0[i + l];
            acc1[l] += a[i + l] * b1[i + l];
            acc2[l] += a[i + l] * b2[i + l];
            acc3[l] += a[i + l] * b3[i + l];
        }
    }
    T t0 = T(0), t1 = T(0), t2 = T(0), t3 = T(0);
    for (; i < n; ++i) {
        t0 += a[i] * b0[i];
        t1 += a[i] * b1[i];
        t2 += a[i] * b2[i];
        t3 += a[i] * b3[i];
    }
    for (int l = 0; l < 8; ++l) {
        t0 += acc0[l];
        t1 += acc1[l];
        t2 += acc2[l];
        t3 += acc3[l];
    }
    out[0] = t0;
    out[1] = t1;
    out[2] = t2;
    out[3] = t3;
}

// ---------------------------------------------------------------------------
// linear: y = x W + b with W stored [in, out]. The forward is a pure axpy
// accumulation in ascending input order, which a one-row incremental decode
// reproduces bit for bit.

template <typename T>
inline void linear_forward(const T* x, const T* w, const T* b, T* y, int n, int din, int dout) {
    for (int i = 0; i < n; ++i) {
        T* yi = y + size_t(i) * dout;
        if (b) {
            for (int o = 0; o < dout; ++o) yi[o] = b[o];
        } else {
            for (int o = 0; o < dout; ++o) yi[o] = T(0);
        }
        const T* xi = x + size_t(i) * din;
        int c = 0;
        for (; c + 4 <= din; c += 4) {
            const T* wc = w + size_t(c) * dout;
            axpy4(xi[c], wc, xi[c + 1], wc + dout, xi[c + 2], wc + 2 * dout, xi[c + 3],
                  wc + 3 * dout, yi, dout);
        }
        for (; c < din; ++c) axpy(xi[c], w + size_t(c) * dout, yi, dout);
    }
}

template <typename T>
inline void linear_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db, int n,
                            int din, int dout) {
    if (dx) {
        for (int i = 0; i < n; ++i) {
            const T* dyi = dy + size_t(i) * dout;
            T* dxi = dx + size_t(i) * din;
            int c = 0;
            T four[4];
            for (; c + 4 <= din; c += 4) {
                const T* wc = w + size_t(c) * dout;
                dot4(dyi, wc, wc + dout, wc + 2 * dout, wc + 3 * dout, dout, four);
                dxi[c] += four[0];
                dxi[c + 1] += four[1];
                dxi[c + 2] += four[2];
                dxi[c + 3] += four[3];
            }
            for (; c < din; ++c) dxi[c] += dot(dyi, w + size_t(c) * dout, dout);
        }
    }
    if (dw) {
        for (int i = 0; i < n; ++i) {
            const T* xi = x + size_t(i) * din;
            const T* dyi = dy + size_t(i) * dout;
            for (int c = 0; c < din; ++c) axpy(xi[c], dyi, dw + size_t(c) * dout, dout);
        }
    }
    if (db) {
        for (int i = 0; i < n; ++i) axpy(T(1), dy + size_t(i) * dout, db, dout);
    }
}

// ---------------------------------------------------------------------------
// layer norm (gain + bias, eps inside the sqrt)

inline constexpr double kLnEps = 1e-5;

template <typename T>
inline void layernorm_forward(const T* x, const T* g, const T* b, T* y, T* mean, T* rstd, int n,
                              int d) {
    for (int i = 0; i < n; ++i) {
        const T* xi = x + size_t(i) * d;
        T m = T(0);
        for (int j = 0; j < d; ++j) m += xi[j];
        m /= T(d);
        T var = T(0);
        for (int j = 0; j < d; ++j) {
            const T c = xi[j] - m;
            var += c * c;
        }
        var /= T(d);
        const T rs = T(1) / std::sqrt(var + T(kLnEps));
        mean[i] = m;
        rstd[i] = rs;
        T* yi = y + size_t(i) * d;
        for (int j = 0; j < d; ++j) yi[j] = (xi[j] - m) * rs * g[j] + b[j];
    }
}

template <typename T>
inline void layernorm_backward(const T* x, const T* g, const T* mean, const T* rstd, const T* dy,
                               T* dx, T* dg, T* db, int n, int d) {
    for (int i = 0; i < n; ++i) {
        const T* xi = x + size_t(i) * d;
        const T* dyi = dy + size_t(i) * d;
        T* dxi = dx + size_t(i) * d;
        const T m = mean[i];
        const T rs = rstd[i];

        T c1 = T(0), c2 = T(0);
        for (int j = 0; j < d; ++j) {
            const T xhat = (xi[j] - m) * rs;
            const T dxhat = dyi[j] * g[j];
            c1 += dxhat;
            c2 += dxhat * xhat;
            dg[j] += dyi[j] * xhat;
            db[j] += dyi[j];
        }
        c1 /= T(d);
        c2 /= T(d);
        for (int j = 0; j < d; ++j) {
            const T xhat = (xi[j] - m) * rs;
            dxi[j] += rs * (dyi[j] * g[j] - c1 - xhat * c2);
        }
    }
}

// ---------------------------------------------------------------------------
// activations

template <typename T>
inline T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <typename T>
inline T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(0.39894228040143267794);
    return cdf + x * pdf;
}

template <typename T>
inline T silu(T x) {
    const T s = T(1) / (T(1) + std::exp(-x));
    return x * s;
}

template <typename T>
inline T silu_grad(T x) {
    const T s = T(1) / (T(1) + std::exp(-x));
    return s * (T(1) + x * (T(1) - s));
}

// ---------------------------------------------------------------------------
// dropout (inverted scaling; draws one u01 per element in index order)

template <typename T>
inline void dropout_forward(const T* x, T* y, uint8_t* keep, int n, double p, Rng& rng) {
    const T scale = T(1.0 / (1.0 - p));
    for (int i = 0; i < n; ++i) {
        keep[i] = rng.u01() >= p ? 1 : 0;
        y[i] = keep[i] ? x[i] * scale : T(0);
    }
}

template <typename T>
inline void dropout_backward(const T* dy, const uint8_t* keep, T* dx, int n, double p) {
    const T scale = T(1.0 / (1.0 - p));
    for (int i = 0; i < n; ++i) dx[i] += keep[i] ? dy[i] * scale : T(0);
}

// ---------------------------------------------------------------------------
// softmax / cross entropy on single rows

template <typename T>
inline void softmax_row(const T* logits, T* probs, int v) {
    T m = logits[0];
    for (int j = 1; j < v; ++j) m = std::max(m, logits[j]);
    T sum = T(0);
    for (int j = 0; j < v; ++j) {
        probs[j] = std::exp(logits[j] - m);
        sum += probs[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < v; ++j) probs[j] *= inv;
}

template <typename T>
inline T cross_entropy_row(const T* logits, int v, int target) {
    T m = logits[0];
    for (int j = 1; j < v; ++j) m = std::max(m, logits[j]);
    T sum = T(0);
    for (int j = 0; j < v; ++j) sum += std::exp(logits[j] - m);
    return m + std::log(sum) - logits[target];
}

// dlogits += scale * (softmax(logits) - onehot(target))
template <typename T>
inline void cross_entropy_backward_row(const T* logits, int v, int target, T scale, T* dlogits) {
    T m = logits[0];
    for (int j = 1; j < v; ++j) m = std::max(m, logits[j]);
    T sum = T(0);
    for (int j = 0; j < v; ++j) sum += std::exp(logits[j] - m);
    const T inv = T(1) / sum;
    for (int j = 0; j < v; ++j) dlogits[j] += scale * std::exp(logits[j] - m) * inv;
    dlogits[target] -= scale;
}

// ---------------------------------------------------------------------------
// multi-head attention over prefix-shaped masks. Disallowed keys are never
// touched, which makes causality exact in floating point, not just in math.
// Keys and values are kept transposed ([d, s]) so every inner loop runs over
// a contiguous span of sequence positions.

template <typename T>
inline void transpose_rows(const T* x, T* xt, int s, int d) {
    for (int i = 0; i < s; ++i) {
        for (int j = 0; j < d; ++j) xt[size_t(j) * s + i] = x[size_t(i) * d + j];
    }
}

// q: [s,d] with head h occupying columns [h*hd, (h+1)*hd); kt, vt: [d,s]
// transposed keys/values; probs: [heads,s,s]. When train dropout is active,
// probs keeps the pre-dropout softmax (for the backward pass) and probs_used
// the dropped/rescaled weights actually applied.
template <typename T>
inline void attention_forward(const T* q, const T* kt, const T* vt, T* probs, T* probs_used,
                              uint8_t* keep, T* out, int s, int d, int heads,
                              const std::vector<int>& row_limits, double p_drop, Rng* rng) {
    const int hd = d / heads;
    const T scale = T(1) / std::sqrt(T(hd));
    for (int h = 0; h < heads; ++h) {
        const int off = h * hd;
        T* hp = probs + size_t(h) * s * s;
        T* hpu = probs_used ? probs_used + size_t(h) * s * s : nullptr;
        uint8_t* hk = keep ? keep + size_t(h) * s * s : nullptr;
        for (int i = 0; i < s; ++i) {
            const int lim = row_limits[size_t(i)];
            T* row = hp + size_t(i) * s;
            const T* qi = q + size_t(i) * d + off;
            for (int j = 0; j < lim; ++j) row[j] = T(0);
            for (int m = 0; m < hd; ++m) axpy(qi[m], kt + size_t(off + m) * s, row, lim);
            T mx = row[0];
            for (int j = 1; j < lim; ++j) mx = std::max(mx, row[j]);
            T sum = T(0);
            for (int j = 0; j < lim; ++j) {
                row[j] = std::exp((row[j] - mx) * scale);
                sum += row[j];
            }
            const T inv = T(1) / sum;
            for (int j = 0; j < lim; ++j) row[j] *= inv;

            const T* used = row;
            if (rng && p_drop > 0.0) {
                T* urow = hpu + size_t(i) * s;
                dropout_forward(row, urow, hk + size_t(i) * s, lim, p_drop, *rng);
                used = urow;
            }
            T* oi = out + size_t(i) * d + off;
            for (int m = 0; m < hd; ++m) oi[m] = dot(used, vt + size_t(off + m) * s, lim);
        }
    }
}

// Accumulates into dq [s,d] and the transposed dkt/dvt [d,s]; the caller
// transposes those back once per layer.
template <typename T>
inline void attention_backward(const T* q, const T* kt, const T* vt, const T* probs,
                               const uint8_t* keep, const T* dout, T* dq, T* dkt, T* dvt, int s,
                               int d, int heads, const std::vector<int>& row_limits, double p_drop,
                               std::vector<T>& scratch) {
    const int hd = d / heads;
    const T scale = T(1) / std::sqrt(T(hd));
    const T drop_scale = T(p_drop > 0.0 ? 1.0 / (1.0 - p_drop) : 1.0);
    if (scratch.size() != 2 * size_t(s)) scratch.resize(2 * size_t(s));
    T* dp = scratch.data();
    T* used = scratch.data() + s;  // dropped/rescaled weights, rebuilt per row
    for (int h = 0; h < heads; ++h) {
        const int off = h * hd;
        const T* hp = probs + size_t(h) * s * s;
        const uint8_t* hk = keep ? keep + size_t(h) * s * s : nullptr;
        for (int i = 0; i < s; ++i) {
            const int lim = row_limits[size_t(i)];
            const T* row = hp + size_t(i) * s;
            const T* doi = dout + size_t(i) * d + off;
            const T* wrow = row;
            if (hk) {
                const uint8_t* krow = hk + size_t(i) * s;
                for (int j = 0; j < lim; ++j) used[j] = krow[j] ? row[j] * drop_scale : T(0);
                wrow = used;
            }
            // through the weighted sum and dropout back to softmax weights
            for (int j = 0; j < lim; ++j) dp[j] = T(0);
            for (int m = 0; m < hd; ++m) {
                axpy(doi[m], vt + size_t(off + m) * s, dp, lim);
                axpy(doi[m], wrow, dvt + size_t(off + m) * s, lim);
            }
            if (hk) {
                const uint8_t* krow = hk + size_t(i) * s;
                for (int j = 0; j < lim; ++j) dp[j] = krow[j] ? dp[j] * drop_scale : T(0);
            }
            // softmax backward over the allowed prefix, fused with the scale
            T inner = T(0);
            for (int j = 0; j < lim; ++j) inner += row[j] * dp[j];
            for (int j = 0; j < lim; ++j) dp[j] = row[j] * (dp[j] - inner) * scale;

            const T* qi = q + size_t(i) * d + off;
            T* dqi = dq + size_t(i) * d + off;
            for (int m = 0; m < hd; ++m) {
                dqi[m] += dot(dp, kt + size_t(off + m) * s, lim);
                axpy(qi[m], dp, dkt + size_t(off + m) * s, lim);
            }
        }
    }
}

template <typename T>
inline void check_finite(const std::vector<T>& x, const char* what) {
    for (const T v : x) {
        if (!std::isfinite(double(v))) throw NumericError(std::string("non-finite value in ") + what);
    }
}

}  // namespace nn
}  // namespace arfs
