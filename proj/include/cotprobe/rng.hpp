#pragma once

#include <cstdint>
#include <cstring>
#include <cmath>
#include <string_view>
#include <vector>

namespace cotprobe::rng {

// Deterministic randomness for the whole toolkit.
//
// Everything downstream (mock backend draws, bootstrap resampling, permutation
// shuffles, calibration resplits) must be byte-identical across platforms for a
// fixed master seed, so we avoid std::uniform_*_distribution (whose output is
// implementation-defined) and generate bits ourselves from a splitmix64 chain.

// ======================================================================
// == Bit mixing
// ======================================================================

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Stateless mix of a value into a seed (order-sensitive).
inline std::uint64_t mix(std::uint64_t seed, std::uint64_t value) {
    std::uint64_t s = seed ^ (value + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2));
    return splitmix64(s);
}

inline std::uint64_t mix(std::uint64_t seed, std::string_view text) {
    // FNV-1a over the bytes, then one splitmix round to spread the entropy.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return mix(seed, h);
}

/// Derive a sub-seed for a named call site: derive(master, "probe", i, j).
inline std::uint64_t derive(std::uint64_t master, std::string_view label,
                            std::uint64_t a = 0, std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t s = mix(master, label);
    s = mix(s, a);
    s = mix(s, b);
    s = mix(s, c);
    return s;
}

// ======================================================================
// == Generator
// ======================================================================

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    /// Uniform double in [0, 1) with 53 random mantissa bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be ≥ 1.
    std::uint64_t below(std::uint64_t n) {
        // Debiased via rejection on the top of the range.
        std::uint64_t threshold = (0ULL - n) % n;
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    /// Standard normal via Box-Muller (deterministic, no cached spare).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        // Guard against log(0).
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// In-place Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            using std::swap;
            swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
};

/// One uniform [0,1) draw from a stateless seed (used by the mock backend so
/// every sample is a pure function of its derivation path).
inline double uniform_at(std::uint64_t seed) {
    std::uint64_t s = seed;
    return static_cast<double>(splitmix64(s) >> 11) * 0x1.0p-53;
}

} // namespace cotprobe::rng
