#pragma once

// Test-only oracles. Nothing here calls into the autodiff backward pass.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "elat/data.hpp"
#include "elat/energy.hpp"
#include "elat/models.hpp"
#include "elat/ops.hpp"
#include "elat/tensor.hpp"

namespace elat::testing {

/// Central finite differences of a scalar function of a flat vector.
inline std::vector<double> finite_difference(const std::function<double(const std::vector<double>&)>& f,
                                             std::vector<double> x, double step = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + step;
        const double up = f(x);
        x[i] = orig - step;
        const double down = f(x);
        x[i] = orig;
        g[i] = (up - down) / (2.0 * step);
    }
    return g;
}

/// ||a - b||_2 / max(||a||_2, ||b||_2, 1e-8)
inline double relative_error(std::span<const double> a, std::span<const double> b) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Uniform values in [lo, hi] kept at least `gap` away from every kink in
/// `kinks` so finite differences do not straddle a non-differentiable point.
inline std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double lo, double hi,
                                         std::vector<double> kinks = {}, double gap = 1e-3) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) {
        do {
            x = dist(rng);
        } while (std::any_of(kinks.begin(), kinks.end(),
                             [&](double k) { return std::abs(x - k) < gap; }));
    }
    return v;
}

inline Tensor leaf(Shape shape, std::vector<double> values) {
    Tensor t = Tensor::from(std::move(shape), std::move(values));
    t.set_requires_grad(true);
    return t;
}

/// Plain full-batch gradient descent on clean CE; gives attack and telemetry
/// tests a model with meaningful decision boundaries without going through
/// the training module.
inline void fit_clean(Classifier& model, const Dataset& data, std::size_t iters, double lr) {
    std::vector<std::size_t> all(data.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const Tensor x = data.batch(all);
    const auto y = data.batch_labels(all);
    std::vector<Tensor> params;
    for (auto& p : model.parameters()) {
        p.value.set_requires_grad(true);
        params.push_back(p.value);
    }
    for (std::size_t it = 0; it < iters; ++it) {
        const auto grads = grad(ops::mean(energy::cross_entropy(model.logits(x), y)), params);
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto w = params[k].mutable_data();
            for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * grads[k][j];
        }
    }
}

}  // namespace elat::testing
