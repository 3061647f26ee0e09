#pragma once

// Deterministic random source. mt19937_64 is fully specified by the standard;
// the distributions here are hand-rolled so that streams are reproducible
// across platforms and standard-library versions.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "transop/error.hpp"

namespace transop {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Combines a seed with stream labels (epoch, batch index, purpose tag, ...)
// into an independent substream seed.
inline uint64_t mix_seed(std::initializer_list<uint64_t> parts) {
    uint64_t h = 0x243f6a8885a308d3ull;
    for (uint64_t p : parts) h = splitmix64(h ^ splitmix64(p));
    return h;
}

class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; the second deviate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log1p(-u1)); // log(1-u1), u1<1 so safe
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Normal truncated to [-2, 2] standard deviations, by resampling.
    double trunc_normal(double stddev) {
        double z = normal();
        while (z < -2.0 || z > 2.0) z = normal();
        return z * stddev;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Uniform integer in [0, n). Modulo bias is negligible for n << 2^64.
    uint64_t below(uint64_t n) {
        if (n == 0) throw ContractError("Rng::below: n must be positive");
        return eng_() % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace transop
