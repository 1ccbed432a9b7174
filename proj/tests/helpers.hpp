#pragma once

// Shared test utilities. The finite-difference gradient check and the
// high-precision reductions here are intentionally written from first
// principles so they stay independent of the library's own code paths.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "spnmt/tensor.hpp"

namespace testing_support {

using spnmt::Real;
using spnmt::Tensor;

inline Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, Real lo = -1, Real hi = 1) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<Real> d(lo, hi);
    for (Real& x : t.v) x = d(rng);
    return t;
}

// Central finite differences of a scalar-valued function of one tensor,
// evaluated entry by entry.
inline Tensor finite_difference(const std::function<Real(const Tensor&)>& f, const Tensor& at,
                                Real h = Real(1e-4)) {
    Tensor g(at.shape);
    Tensor probe = at;
    for (std::size_t i = 0; i < at.v.size(); ++i) {
        const Real keep = probe.v[i];
        probe.v[i] = keep + h;
        const Real up = f(probe);
        probe.v[i] = keep - h;
        const Real dn = f(probe);
        probe.v[i] = keep;
        g.v[i] = (up - dn) / (2 * h);
    }
    return g;
}

// Largest relative error between analytic and finite-difference gradients,
// with an absolute floor for near-zero entries.
inline Real max_rel_err(const Tensor& analytic, const Tensor& fd, Real floor = Real(1e-6)) {
    Real worst = 0;
    for (std::size_t i = 0; i < analytic.v.size(); ++i) {
        const Real denom = std::max({std::abs(analytic.v[i]), std::abs(fd.v[i]), floor});
        worst = std::max(worst, std::abs(analytic.v[i] - fd.v[i]) / denom);
    }
    return worst;
}

// Two-pass population variance in long double; the reference for the
// confidence module's statistics.
inline long double popvar_ld(const std::vector<Real>& xs) {
    long double mean = 0;
    for (Real x : xs) mean += static_cast<long double>(x);
    mean /= static_cast<long double>(xs.size());
    long double acc = 0;
    for (Real x : xs) {
        const long double d = static_cast<long double>(x) - mean;
        acc += d * d;
    }
    return acc / static_cast<long double>(xs.size());
}

}  // namespace testing_support
