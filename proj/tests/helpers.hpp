#pragma once

#include <vector>

#include "ivae/rng.hpp"
#include "ivae/tensor.hpp"

namespace ivae::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    CounterRng rng(seed, 0);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
}

// Same, but keeps every entry at least `gap` away from zero.
inline Tensor random_away_from_zero(Shape shape, std::uint64_t seed, double gap, double hi = 2.0) {
    Tensor t = random_tensor(std::move(shape), seed, gap, hi);
    CounterRng sign(seed, 1);
    for (auto& x : t.mutable_values())
        if (sign.uniform() < 0.5) x = -x;
    return t;
}

}  // namespace ivae::testing
