#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "arfs/params.hpp"

namespace arfs {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

// Per-element weight-decay participation. Norm parameters, biases and
// embedding tables are excluded by layout construction.
inline std::vector<uint8_t> build_decay_mask(const ParamLayout& layout) {
    std::vector<uint8_t> mask(layout.total, 0);
    for (const TensorSpec& t : layout.tensors) {
        if (!t.decay) continue;
        for (size_t i = 0; i < t.size; ++i) mask[t.offset + i] = 1;
    }
    return mask;
}

template <typename T>
inline double global_norm(const std::vector<T>& g) {
    double s = 0.0;
    for (const T v : g) s += double(v) * double(v);
    return std::sqrt(s);
}

// Scales gradients so the global norm does not exceed max_norm; a norm at or
// below the limit leaves them bit-identical.
template <typename T>
inline double clip_gradients(std::vector<T>& g, double max_norm) {
    const double norm = global_norm(g);
    if (norm > max_norm) {
        const T scale = T(max_norm / norm);
        for (T& v : g) v *= scale;
    }
    return norm;
}

// Decoupled weight decay AdamW with the textbook bias correction. Moment
// arithmetic runs in double regardless of the storage type.
template <typename T>
inline void adamw_step(std::vector<T>& p, const std::vector<T>& g, std::vector<T>& m,
                       std::vector<T>& v, const std::vector<uint8_t>& decay_mask, int64_t t,
                       const AdamConfig& cfg) {
    if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size() ||
        p.size() != decay_mask.size()) {
        throw std::invalid_argument("optimizer state shape mismatch");
    }
    if (t < 1) throw std::invalid_argument("adam step index is 1-based");
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
    for (size_t i = 0; i < p.size(); ++i) {
        const double gi = double(g[i]);
        const double mi = cfg.beta1 * double(m[i]) + (1.0 - cfg.beta1) * gi;
        const double vi = cfg.beta2 * double(v[i]) + (1.0 - cfg.beta2) * gi * gi;
        m[i] = T(mi);
        v[i] = T(vi);
        const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
        double pi = double(p[i]) - cfg.lr * update;
        if (decay_mask[i]) pi -= cfg.lr * cfg.weight_decay * double(p[i]);
        p[i] = T(pi);
    }
}

}  // namespace arfs
