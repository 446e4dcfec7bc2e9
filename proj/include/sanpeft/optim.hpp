// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SANPEFT_OPTIM_HPP
#define SANPEFT_OPTIM_HPP

#include <sanpeft/errors.hpp>
#include <sanpeft/ndarray.hpp>
#include <sanpeft/tensor.hpp>

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

namespace sanpeft {

enum class OptimizerKind { sgd, adam, adamw };

inline const char* to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::adamw: return "adamw";
  }
  return "?";
}

inline OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  if (s == "adamw") return OptimizerKind::adamw;
  throw ConfigError("unknown optimizer '" + s + "'");
}

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;
inline constexpr double kAdamWDecay = 0.01;

template <std::floating_point T>
struct OptimizerState {
  std::vector<NDArray<T>> m, v;
  std::size_t steps = 0;
};

// One update over parallel lists of parameters and gradients. `decay[i]` marks
// tensors that receive AdamW's decoupled decay. Every gradient is checked
// before anything is written, so a bad gradient leaves all parameters intact.
template <std::floating_point T>
void optimizer_step(OptimizerKind kind, std::span<NDArray<T>> params, std::span<const NDArray<T>> grads,
                    OptimizerState<T>& state, double lr, const std::vector<bool>& decay = {}) {
  if (params.size() != grads.size()) throw ContractError("optimizer_step: parameter and gradient counts differ");
  if (!decay.empty() && decay.size() != params.size()) throw ContractError("optimizer_step: decay flag count differs");
  if (!std::isfinite(lr) || lr < 0) throw ConfigError("learning rate must be finite and non-negative");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape()) {
      throw DimensionError("gradient " + shape_string(grads[i].shape()) + " for parameter " +
                           shape_string(params[i].shape()));
    }
    if (!grads[i].all_finite()) throw NumericError("non-finite gradient for parameter " + std::to_string(i));
  }
  if (kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i].data();
      auto g = grads[i].data();
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= static_cast<T>(lr * static_cast<double>(g[j]));
    }
    ++state.steps;
    return;
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(NDArray<T>::zeros(p.shape()));
      state.v.push_back(NDArray<T>::zeros(p.shape()));
    }
  }
  if (state.m.size() != params.size()) throw ContractError("optimizer state belongs to a different parameter list");
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(kAdamBeta1, t);
  const double c2 = 1.0 - std::pow(kAdamBeta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    const bool decays = kind == OptimizerKind::adamw && !decay.empty() && decay[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = kAdamBeta1 * static_cast<double>(m[j]) + (1.0 - kAdamBeta1) * gj;
      const double vj = kAdamBeta2 * static_cast<double>(v[j]) + (1.0 - kAdamBeta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      double pj = static_cast<double>(p[j]);
      if (decays) pj -= lr * kAdamWDecay * pj;
      pj -= lr * (mj / c1) / (std::sqrt(vj / c2) + kAdamEpsilon);
      p[j] = static_cast<T>(pj);
    }
  }
}

/// Owns optimizer state for a fixed list of leaf tensors. A parameter that
/// received no gradient this step is treated as having a zero gradient.
template <std::floating_point T>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, std::vector<Tensor<T>> params, std::vector<bool> decay = {})
      : kind_(kind), params_(std::move(params)), decay_(std::move(decay)) {
    if (decay_.empty()) decay_.assign(params_.size(), false);
    if (decay_.size() != params_.size()) throw ContractError("decay flags must match parameters");
  }

  void step(double lr) {
    std::vector<NDArray<T>> values, grads;
    values.reserve(params_.size());
    grads.reserve(params_.size());
    for (const auto& p : params_) {
      values.push_back(p.value());
      grads.push_back(p.grad());
    }
    optimizer_step<T>(kind_, values, grads, state_, lr, decay_);
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].assign(std::move(values[i]));
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  [[nodiscard]] const OptimizerState<T>& state() const { return state_; }
  [[nodiscard]] const std::vector<Tensor<T>>& params() const { return params_; }

 private:
  OptimizerKind kind_;
  std::vector<Tensor<T>> params_;
  std::vector<bool> decay_;
  OptimizerState<T> state_;
};

/// Linear warmup from 0 to `base_lr` over the first `warmup_fraction` of
/// `total_steps`, then cosine decay to 0 at `total_steps`.
inline double lr_at(double step, double total_steps, double base_lr, double warmup_fraction = 0.1) {
  if (!(total_steps > 0)) throw ContractError("lr_at: total_steps must be positive");
  if (!(step >= 0 && step <= total_steps)) {
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  }
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw ContractError("lr_at: warmup_fraction outside [0, 1)");
  const double warm = warmup_fraction * total_steps;
  if (step < warm) return base_lr * step / warm;
  const double progress = (step - warm) / (total_steps - warm);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace sanpeft

#endif  // SANPEFT_OPTIM_HPP
