#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "dfd/errors.hpp"

namespace dfd {

// splitmix64: tiny, well-mixed generator. Used everywhere instead of the
// std distributions so that sampled values are identical across platforms
// and standard-library versions.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// Derives an independent stream seed from a base seed and a stream index.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t s = base ^ (0x517cc1b727220a95ull + stream * 0x2545f4914f6cdd1dull);
    splitmix64(s);
    return splitmix64(s);
}

/// Seeded deterministic RNG. All randomness in the library flows through this.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // Warm up so that small seeds do not produce correlated first draws.
        splitmix64(state_);
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    /// Uniform in [0, 1).
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        if (hi < lo) throw parameter_error("uniform_int: empty range");
        const std::uint64_t n = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % n);
    }

    /// Standard normal via Box-Muller (no state caching, fully deterministic).
    double normal() {
        double u1 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    float normalf() { return static_cast<float>(normal()); }

    /// Uniform draw from the inclusive grid {lo, lo+step, ..., hi}.
    double grid(double lo, double hi, double step) {
        if (step <= 0 || hi < lo) throw parameter_error("grid: bad range");
        const int n = static_cast<int>(std::floor((hi - lo) / step + 0.5)) + 1;
        return lo + step * uniform_int(0, n - 1);
    }

private:
    std::uint64_t state_;
};

} // namespace dfd
