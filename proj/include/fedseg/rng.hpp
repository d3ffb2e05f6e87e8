#pragma once

// Deterministic randomness. mt19937_64 has a standardized sequence, but the
// standard *distributions* are implementation-defined, so every conversion
// from raw bits to a sample is hand-rolled here. Two builds on different
// platforms must produce bit-identical streams for the same seed.

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "errors.hpp"

namespace fedseg {

// SplitMix64 finalizer; good avalanche, cheap, stable.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Order-independent derivation of sub-seeds: mixing (seed, tag) gives every
// parameter / client / round its own stream, so adding or removing one
// consumer never shifts the draws of another.
inline uint64_t mix_seed(uint64_t seed, uint64_t tag) {
    return splitmix64(seed ^ splitmix64(tag));
}

inline uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b) {
    return mix_seed(mix_seed(seed, a), b);
}

// FNV-1a, used to turn parameter names into seed tags.
inline uint64_t hash_name(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0,1) with 53 random bits.
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Inclusive integer range via rejection-free modulo of a wide draw;
    // bias is negligible for the small ranges used here, but stay exact
    // anyway with Lemire-style rejection.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (hi < lo) throw DomainError("uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        if (span == 0) return static_cast<int64_t>(eng_()); // full 2^64 range
        uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t r;
        do {
            r = eng_();
        } while (r >= limit);
        return lo + static_cast<int64_t>(r % span);
    }

    // Box-Muller, first component only: one normal costs two uniforms but
    // keeps the stream stateless (no cached spare to invalidate).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        constexpr double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    double normal(double mean, double stddev) {
        return mean + stddev * normal();
    }

    // Rejection-sampled truncated normal, clipped at +-2 sigma like the
    // usual transformer init.
    double trunc_normal(double stddev) {
        double x = normal();
        while (x < -2.0 || x > 2.0) x = normal();
        return x * stddev;
    }

    // Fisher-Yates with our own integer draw.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
};

} // namespace fedseg
