#pragma once

// Central finite-difference oracle for the autodiff tests. Works on double
// instantiations only; it never calls backward() on the function it checks
// except to obtain the analytic side.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "advspade/ops.hpp"

namespace advspade::testing {

using Fn = std::function<Var<double>(const Var<double>&)>;

inline Tensor<double> random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor<double> t(s);
    for (auto& v : t.values()) v = d(rng);
    return t;
}

/// d(sum(w * f(x)))/dx by central differences, with w a fixed random weighting
/// so that every output element contributes.
inline Tensor<double> numeric_grad(const Fn& f, const Tensor<double>& x, const Tensor<double>& weights,
                                   double step = 1e-5) {
    Tensor<double> g(x.shape());
    Tensor<double> probe = x;
    auto eval = [&](const Tensor<double>& t) {
        NoGradGuard ng;
        const auto y = f(Var<double>(t)).value();
        double acc = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) acc += y[i] * weights[i];
        return acc;
    };
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + step;
        const double up = eval(probe);
        probe[i] = orig - step;
        const double down = eval(probe);
        probe[i] = orig;
        g[i] = (up - down) / (2 * step);
    }
    return g;
}

inline Tensor<double> analytic_grad(const Fn& f, const Tensor<double>& x, const Tensor<double>& weights) {
    Var<double> in(x, true);
    auto y = f(in);
    y.backward(weights);
    return in.grad();
}

/// max_i |a_i - n_i| / max(1e-2, max|n|): relative to gradient scale, so tiny
/// components do not blow the ratio up.
inline double relative_error(const Tensor<double>& analytic, const Tensor<double>& numeric) {
    double diff = 0;
    for (std::size_t i = 0; i < analytic.numel(); ++i) diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    return diff / std::max(1e-2, numeric.max_abs());
}

inline double gradient_error(const Fn& f, const Tensor<double>& x, std::uint64_t seed = 7, double step = 1e-5) {
    Tensor<double> probe_out;
    {
        NoGradGuard ng;
        probe_out = f(Var<double>(x)).value();
    }
    const auto w = random_tensor(probe_out.shape(), seed);
    return relative_error(analytic_grad(f, x, w), numeric_grad(f, x, w, step));
}

}  // namespace advspade::testing
