#pragma once

#include <cmath>
#include <cstdint>

namespace linevit {

// Derives the RNG seed for item `index` of a run keyed by `base`. Uses the
// splitmix64 finalizer over base + (index+1)*gamma, so any single item's
// stream can be reconstructed without advancing through its predecessors.
inline uint64_t mix_seed(uint64_t base, uint64_t index) {
    uint64_t z = base + (index + 1) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// splitmix64 generator (Steele, Lea & Flood 2014 constants). Chosen over
// std::mt19937 + std::*_distribution because the standard distributions are
// implementation-defined; every draw here is pinned bit-for-bit.
class SplitMix64 {
public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // [lo, hi)
    double uniform(double lo, double hi) {
        return lo + next_double() * (hi - lo);
    }

    // Unbiased integer in [0, n) via Lemire's multiply-shift rejection.
    uint64_t next_below(uint64_t n) {
        uint64_t x = next_u64();
        __uint128_t m = static_cast<__uint128_t>(x) * n;
        auto lo = static_cast<uint64_t>(m);
        if (lo < n) {
            uint64_t t = -n % n;
            while (lo < t) {
                x = next_u64();
                m = static_cast<__uint128_t>(x) * n;
                lo = static_cast<uint64_t>(m);
            }
        }
        return static_cast<uint64_t>(m >> 64);
    }

    // Inclusive [lo, hi].
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_below(static_cast<uint64_t>(hi - lo + 1)));
    }

    // Standard normal via Box-Muller; the sine partner is cached so draws
    // come in deterministic pairs.
    double gaussian() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        // u1 in (0, 1] so log() stays finite.
        double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
        double u2 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    double gaussian(double mean, double stddev) {
        return mean + stddev * gaussian();
    }

    // Normal(0, stddev) resampled until |z| <= cutoff_sigmas * stddev.
    double truncated_normal(double stddev, double cutoff_sigmas = 2.0) {
        for (;;) {
            double z = gaussian();
            if (std::abs(z) <= cutoff_sigmas) return z * stddev;
        }
    }

private:
    uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

} // namespace linevit
