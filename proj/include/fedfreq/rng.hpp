// Self-contained deterministic PRNG. The standard <random> distributions are
// implementation-defined, which would break byte-identical reproducibility of
// reports across toolchains, so all randomness in the library flows through
// this splitmix64-based generator with hand-rolled draws.
#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>
#include <vector>

namespace fedfreq {

inline uint64_t splitmix64_next(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// FNV-1a, used for seed derivation tags and content hashing.
inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2));
    return splitmix64_next(s);
}

// Stable seed for a named sub-stream, e.g. derive_seed(seed, "shuffle", epoch).
inline uint64_t derive_seed(uint64_t seed, std::string_view tag) {
    return mix_seed(seed, fnv1a(tag));
}

inline uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t index) {
    return mix_seed(derive_seed(seed, tag), index);
}

inline uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t i, uint64_t j) {
    return mix_seed(derive_seed(seed, tag, i), j);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // Warm up so that small consecutive seeds decorrelate.
        splitmix64_next(state_);
    }

    uint64_t next_u64() { return splitmix64_next(state_); }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Standard normal via Box-Muller (no caching; one draw costs two uniforms).
    double next_normal() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    // Unbiased integer in [0, n) by rejection.
    uint64_t below(uint64_t n) {
        if (n <= 1) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

}  // namespace fedfreq
