#pragma once

#include "lisa/autodiff.hpp"

#include <random>
#include <vector>

namespace lisa::testutil {

inline std::vector<double> random_values(std::mt19937_64& rng, int64_t n, double lo = -1.0,
                                         double hi = 1.0) {
    std::uniform_real_distribution<double> uni(lo, hi);
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = uni(rng);
    return v;
}

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0,
                            double hi = 1.0) {
    return Tensor::from_values(shape, random_values(rng, numel(shape), lo, hi));
}

}  // namespace lisa::testutil
