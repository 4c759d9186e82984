#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace comigs {

/// Deterministic random source. All sampling routines are written out
/// explicitly (no std::*_distribution) so that a given seed produces the
/// same stream on every platform and build.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform() { return std::ldexp(static_cast<double>(gen_() >> 11), -53); }

    /// Uniform integer in [0, n). Rejection sampling, unbiased.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = gen_();
        while (v >= limit) v = gen_();
        return v % n;
    }

    /// Standard normal via Box-Muller; caches the second deviate.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::mt19937_64 gen_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

/// SplitMix64 finalizer, used to derive well-separated stream seeds.
inline std::uint64_t mix_seed(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Stream id for (seed, client, round, purpose). Each simulated client and
/// round gets an RNG stream independent of thread scheduling.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t client,
                                 std::uint64_t round, std::uint64_t purpose = 0) {
    std::uint64_t s = mix_seed(seed);
    s = mix_seed(s ^ (client + 1) * 0x9e3779b97f4a7c15ULL);
    s = mix_seed(s ^ (round + 1) * 0xc2b2ae3d27d4eb4fULL);
    s = mix_seed(s ^ (purpose + 1) * 0x165667b19e3779f9ULL);
    return s;
}

}  // namespace comigs
