#pragma once

// Counter-based random numbers. Every draw is a pure function of (seed, stream, counter),
// so any slice of a random sequence can be regenerated without replaying the prefix.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace ivae {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Derives an independent seed for a named sub-purpose (layer index, segment, epoch...).
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
    return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
}

class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t counter = 0) noexcept
        : key_(derive_seed(seed, stream)), counter_(counter) {}

    std::uint64_t next_u64() noexcept { return splitmix64(key_ ^ splitmix64(counter_++)); }

    // Uniform on the open interval (0, 1).
    double uniform() noexcept { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    // Box-Muller; consumes two counters per draw so draws never depend on call parity.
    double normal() noexcept {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Standard Laplace (density e^{-|x|}/2) by inverse CDF.
    double laplace() noexcept {
        const double p = uniform() - 0.5;
        return p < 0 ? std::log1p(2.0 * p) : -std::log1p(-2.0 * p);
    }

    // Uniform integer in [0, bound).
    std::uint64_t below(std::uint64_t bound) noexcept {
        return static_cast<std::uint64_t>(uniform() * static_cast<double>(bound)) % bound;
    }

    std::uint64_t counter() const noexcept { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_;
};

// Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed, std::uint64_t stream = 0) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    CounterRng rng(seed, stream);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = rng.below(i);
        std::swap(perm[i - 1], perm[j]);
    }
    return perm;
}

}  // namespace ivae
