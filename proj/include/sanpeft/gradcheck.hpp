// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SANPEFT_GRADCHECK_HPP
#define SANPEFT_GRADCHECK_HPP

#include <sanpeft/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace sanpeft {

/// Central-difference gradient of a scalar function: (f(x+εeᵢ) − f(x−εeᵢ)) / 2ε.
template <std::floating_point T, class F>
NDArray<T> finite_diff_grad(F&& f, const NDArray<T>& x, T eps = T{1e-5}) {
  if (!(eps > T{0})) throw ContractError("finite difference step must be positive");
  NDArray<T> grad(x.shape());
  NDArray<T> probe = x;
  auto eval = [&](const NDArray<T>& at) {
    const T v = static_cast<T>(f(at));
    if (!std::isfinite(v)) throw NumericError("finite difference evaluation is not finite");
    return v;
  };
  for (std::size_t i = 0; i < x.numel(); ++i) {
    probe[i] = x[i] + eps;
    const T plus = eval(probe);
    probe[i] = x[i] - eps;
    const T minus = eval(probe);
    probe[i] = x[i];
    grad[i] = (plus - minus) / (T{2} * eps);
  }
  return grad;
}

// Relative error with a floor on the denominator, so coordinates whose true
// gradient is ~0 are judged on absolute error at the floor's scale.
inline constexpr double kGradientErrorFloor = 1e-6;

template <std::floating_point T>
T relative_error(T analytic, T numeric, T floor = static_cast<T>(kGradientErrorFloor)) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
};

// Compares backward() against central differences for every coordinate of
// every tensor in `params`. `loss_fn` must rebuild the loss from the current
// parameter values each time it is called. Parameters are restored on exit.
template <std::floating_point T, class LossFn>
GradCheckReport check_gradients(LossFn&& loss_fn, std::vector<Tensor<T>> params, T eps = T{1e-5}) {
  for (auto& p : params) p.zero_grad();
  {
    Tape<T> tape;
    Tensor<T> loss;
    {
      auto rec = tape.record();
      loss = loss_fn();
    }
    backward(loss);
  }

  GradCheckReport report;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& p = params[t];
    const NDArray<T> analytic = p.grad();
    const NDArray<T> original = p.value();
    const NDArray<T> numeric = finite_diff_grad<T>(
        [&](const NDArray<T>& at) {
          p.assign(at);
          return loss_fn().item();
        },
        original, eps);
    p.assign(original);
    for (std::size_t i = 0; i < original.numel(); ++i) {
      const double rel = relative_error<T>(analytic[i], numeric[i]);
      report.max_absolute_error =
          std::max(report.max_absolute_error, static_cast<double>(std::abs(analytic[i] - numeric[i])));
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_tensor = t;
        report.worst_index = i;
      }
      ++report.coordinates;
    }
  }
  return report;
}

}  // namespace sanpeft

#endif  // SANPEFT_GRADCHECK_HPP
