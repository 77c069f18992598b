#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "idinvert/autodiff.hpp"

namespace testutil {

using idinvert::ad::Tensor;
using idinvert::ad::Var;

struct GradCheck {
  double max_rel_err = 0.0;
  int checked = 0;
};

// Compares the analytic gradient of a scalar function f(x) against central
// differences at `coords` randomly chosen coordinates. The relative error uses
// max(|a|, |n|, floor) as denominator so coordinates with vanishing gradient
// are compared absolutely at the floor scale.
inline GradCheck check_gradient(const std::function<Var(const Var&)>& f, const Tensor& x0, int coords,
                                std::uint64_t seed, double h = 1e-5, double floor = 1e-6) {
  Var x = idinvert::ad::leaf(x0);
  Var y = f(x);
  Tensor g = idinvert::ad::grad(y, std::span<const Var>(&x, 1))[0].value();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, x0.size() - 1);
  GradCheck out;
  for (int k = 0; k < coords; ++k) {
    const std::size_t i = pick(rng);
    Tensor xp = x0, xm = x0;
    xp[i] += h;
    xm[i] -= h;
    // Evaluated with recording enabled: f may itself differentiate internally.
    const double fp = f(idinvert::ad::constant(xp)).item();
    const double fm = f(idinvert::ad::constant(xm)).item();
    const double num = (fp - fm) / (2 * h);
    const double den = std::max({std::abs(num), std::abs(g[i]), floor});
    out.max_rel_err = std::max(out.max_rel_err, std::abs(num - g[i]) / den);
    ++out.checked;
  }
  return out;
}

// Same comparison for a parameter tensor that `loss` reads through its owner;
// the parameter is perturbed in place and restored.
inline GradCheck check_param_gradient(const std::function<Var()>& loss, Var& param, int coords, std::uint64_t seed,
                                      double h = 1e-5, double floor = 1e-6) {
  Tensor g = idinvert::ad::grad(loss(), std::span<const Var>(&param, 1))[0].value();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, param.size() - 1);
  GradCheck out;
  for (int k = 0; k < coords; ++k) {
    const std::size_t i = pick(rng);
    const double keep = param.value()[i];
    param.mutable_value()[i] = keep + h;
    const double fp = loss().item();
    param.mutable_value()[i] = keep - h;
    const double fm = loss().item();
    param.mutable_value()[i] = keep;
    const double num = (fp - fm) / (2 * h);
    const double den = std::max({std::abs(num), std::abs(g[i]), floor});
    out.max_rel_err = std::max(out.max_rel_err, std::abs(num - g[i]) / den);
    ++out.checked;
  }
  return out;
}

inline Tensor random_tensor(const idinvert::ad::Shape& shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(shape);
  for (auto& v : t.storage()) v = n(rng);
  return t;
}

}  // namespace testutil
