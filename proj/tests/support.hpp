#pragma once

// Shared helpers for the test binaries: random feature maps, random BeIN
// layers, and central finite differences against scalar-valued functions.

#include <cmath>
#include <functional>
#include <vector>

#include "bestta/normalization.hpp"
#include "bestta/rng.hpp"
#include "bestta/tensor.hpp"

namespace bestta::testing {

inline FeatureMap random_map(Rng& rng, int c, int h, int w, double lo = -2.0, double hi = 2.0) {
    FeatureMap x(c, h, w);
    for (double& v : x.data) v = rng.uniform(lo, hi);
    return x;
}

// Layer whose blend denominator stays comfortably away from the guard so
// finite-difference probes do not cross the throw boundary.
inline BeINLayer random_layer(Rng& rng, int c, bool per_channel = false) {
    BeINLayer layer;
    layer.rho = rng.uniform(0.1, 0.9);
    layer.anchor_mu.resize(c);
    layer.anchor_sigma.resize(c);
    for (int i = 0; i < c; ++i) {
        layer.anchor_mu[i] = rng.uniform(-1.0, 1.0);
        layer.anchor_sigma[i] = rng.uniform(0.5, 2.0);
    }
    const size_t n = per_channel ? static_cast<size_t>(c) : 1;
    layer.gamma_sigma.assign(n, 0.0);
    layer.gamma_mu.assign(n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        layer.gamma_sigma[i] = rng.uniform(-0.05, 0.05);
        layer.gamma_mu[i] = rng.uniform(-0.5, 0.5);
    }
    return layer;
}

// Central finite difference of f around x.
inline double central_diff(const std::function<double(double)>& f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double rel_err(double got, double want) {
    const double denom = std::max({std::fabs(got), std::fabs(want), 1e-10});
    return std::fabs(got - want) / denom;
}

} // namespace bestta::testing
