#pragma once

#include <cmath>
#include <cstdint>

namespace arfs {

// 64-bit finalizer (splitmix64). Used for stream derivation and as the
// generator step, so every random decision in the project is a pure function
// of (seed, stream tag, draw index) and therefore identical across platforms.
inline uint64_t mix64(uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

// Counter-based stream: state advances by the golden-gamma constant and the
// output is the mixed state. std::random distributions are avoided on purpose;
// their output is implementation-defined.
class Rng {
public:
    Rng() = default;
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return mix64(state_);
    }

    // Independent child stream; the parent is not advanced.
    Rng fork(uint64_t tag) const {
        return Rng(mix64(state_ ^ mix64(tag + 0x632be59bd9b4e019ull)));
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double u01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Multiply-high rejection-free map; the bias is
    // below 2^-32 for every n used here.
    uint64_t next_below(uint64_t n) {
        return uint64_t((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    bool bernoulli(double p) { return u01() < p; }

    // Box-Muller without the cached spare: two draws per variate keeps the
    // stream position independent of call history.
    double normal() {
        const double u1 = 1.0 - u01();  // (0, 1]
        const double u2 = u01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

private:
    uint64_t state_ = 0;
};

}  // namespace arfs
