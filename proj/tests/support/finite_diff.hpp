#pragma once

#include <cmath>
#include <functional>

#include "metanas/rng.hpp"
#include "metanas/tensor.hpp"

namespace metanas::testing {

// Central finite differences of a scalar function at x, one coordinate at a
// time. The probe function must not retain state between calls.
inline Tensor numeric_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                           double eps = 1e-5) {
    Tensor g(x.shape());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double hi = f(probe);
        probe[i] = orig - eps;
        const double lo = f(probe);
        probe[i] = orig;
        g[i] = (hi - lo) / (2.0 * eps);
    }
    return g;
}

// Largest mixed absolute/relative error between two gradients:
// |a-b| / max(1, |a|, |b|).
inline double max_rel_err(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace metanas::testing
