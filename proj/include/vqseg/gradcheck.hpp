#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "vqseg/errors.hpp"
#include "vqseg/rng.hpp"
#include "vqseg/tensor.hpp"

namespace vqseg {

/// Compares the autodiff gradient of a scalar-valued function against central
/// finite differences at every coordinate of x. Returns the worst relative
/// error  |analytic - central| / max(1, |central|).
///
/// f must be pure: it rebuilds its graph from x on each call. epsilon must lie
/// in (0, 1e-2]; a non-finite function value raises NumericalError.
template <typename T, typename F>
T grad_check(F&& f, const TensorPtr<T>& x, T epsilon,
             const std::vector<int64_t>* coords = nullptr) {
  if (!(epsilon > T(0)) || epsilon > T(1e-2))
    throw ConfigError("grad_check: epsilon must be in (0, 1e-2]");

  x->requires_grad = true;
  auto eval = [&]() -> T {
    TensorPtr<T> y = f(x);
    if (y->numel() != 1)
      throw ConfigError("grad_check: f must return a scalar, got " +
                        y->shape.str());
    if (!std::isfinite(double(y->v[0])))
      throw NumericalError("grad_check: f produced a non-finite value");
    return y->v[0];
  };

  // Analytic pass.
  {
    TensorPtr<T> y = f(x);
    if (y->numel() != 1)
      throw ConfigError("grad_check: f must return a scalar, got " +
                        y->shape.str());
    if (!std::isfinite(double(y->v[0])))
      throw NumericalError("grad_check: f produced a non-finite value");
    backward(y);
  }
  std::vector<T> analytic = x->g;

  std::vector<int64_t> all;
  if (!coords) {
    all.resize(size_t(x->numel()));
    for (int64_t i = 0; i < x->numel(); ++i) all[size_t(i)] = i;
    coords = &all;
  }

  T worst = 0;
  for (int64_t i : *coords) {
    const T keep = x->v[size_t(i)];
    x->v[size_t(i)] = keep + epsilon;
    const T fp = eval();
    x->v[size_t(i)] = keep - epsilon;
    const T fm = eval();
    x->v[size_t(i)] = keep;
    const T central = (fp - fm) / (T(2) * epsilon);
    if (!std::isfinite(double(central)))
      throw NumericalError("grad_check: non-finite finite difference");
    const T rel = std::abs(analytic[size_t(i)] - central) /
                  std::max(T(1), std::abs(central));
    worst = std::max(worst, rel);
  }
  return worst;
}

/// grad_check over a random subset of coordinates (for large inputs).
template <typename T, typename F>
T grad_check_sampled(F&& f, const TensorPtr<T>& x, T epsilon, int count,
                     Rng& rng) {
  std::vector<int64_t> coords;
  coords.reserve(size_t(count));
  for (int i = 0; i < count; ++i)
    coords.push_back(int64_t(rng.below(int(x->numel()))));
  return grad_check(std::forward<F>(f), x, epsilon, &coords);
}

}  // namespace vqseg
