// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0

// Folding adapters into plain weights, and auditing that the folded model
// computes what the adapted one does.

#ifndef SANPEFT_REPARAM_HPP
#define SANPEFT_REPARAM_HPP

#include <sanpeft/adapters.hpp>

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace sanpeft {

template <std::floating_point T>
struct MergedLayer {
  NDArray<T> weight;
  NDArray<T> bias;
};

namespace detail {

template <std::floating_point T>
void require_vector(const NDArray<T>& v, std::size_t n, const char* what) {
  if (v.rank() != 1 || v.dim(0) != n) {
    throw DimensionError(std::string(what) + " " + shape_string(v.shape()) + " needs length " + std::to_string(n));
  }
}

template <std::floating_point T>
void require_layer(const NDArray<T>& w, const NDArray<T>& b) {
  if (w.rank() != 2) throw DimensionError("weight must be a matrix, got " + shape_string(w.shape()));
  require_vector(b, w.dim(0), "bias");
}

}  // namespace detail

/// (γ ⊙ W) x + γ ⊙ b + β: rows of W scaled by γ.
template <std::floating_point T>
MergedLayer<T> merge_ssf(const NDArray<T>& w, const NDArray<T>& b, const NDArray<T>& gamma, const NDArray<T>& beta) {
  detail::require_layer(w, b);
  detail::require_vector(gamma, w.dim(0), "gamma");
  detail::require_vector(beta, w.dim(0), "beta");
  MergedLayer<T> out{w, b};
  for (std::size_t i = 0; i < w.dim(0); ++i) {
    for (std::size_t j = 0; j < w.dim(1); ++j) out.weight(i, j) *= gamma[i];
    out.bias[i] = gamma[i] * b[i] + beta[i];
  }
  return out;
}

/// Multiplicative mask M = γ_out γ_inᵀ that merge_san applies to W.
template <std::floating_point T>
NDArray<T> weight_mask(const NDArray<T>& gamma_out, const NDArray<T>& gamma_in) {
  NDArray<T> m(Shape{gamma_out.numel(), gamma_in.numel()});
  for (std::size_t i = 0; i < gamma_out.numel(); ++i)
    for (std::size_t j = 0; j < gamma_in.numel(); ++j) m(i, j) = gamma_out[i] * gamma_in[j];
  return m;
}

/// (γ_out ⊙ γ_in' ⊙ W) x + γ_out ⊙ b + β: rows scaled by this layer's γ, columns
/// by the recalibrated factor arriving from the previous attach point.
template <std::floating_point T>
MergedLayer<T> merge_san(const NDArray<T>& w, const NDArray<T>& b, const NDArray<T>& gamma_in,
                         const NDArray<T>& gamma, const NDArray<T>& beta) {
  detail::require_layer(w, b);
  detail::require_vector(gamma_in, w.dim(1), "incoming factor");
  detail::require_vector(gamma, w.dim(0), "gamma");
  detail::require_vector(beta, w.dim(0), "beta");
  const NDArray<T> mask = weight_mask(gamma, gamma_in);
  MergedLayer<T> out{w, b};
  for (std::size_t i = 0; i < out.weight.numel(); ++i) out.weight[i] *= mask[i];
  for (std::size_t i = 0; i < b.numel(); ++i) out.bias[i] = gamma[i] * b[i] + beta[i];
  return out;
}

/// W' = W · T for a full square T.
template <std::floating_point T>
NDArray<T> merge_linear_transform(const NDArray<T>& w, const NDArray<T>& transform) {
  if (transform.rank() == 1) {
    detail::require_vector(transform, w.dim(1), "diagonal transform");
    NDArray<T> out = w;
    for (std::size_t i = 0; i < w.dim(0); ++i)
      for (std::size_t j = 0; j < w.dim(1); ++j) out(i, j) *= transform[j];
    return out;
  }
  if (transform.rank() != 2 || transform.dim(0) != transform.dim(1) || w.rank() != 2 || w.dim(1) != transform.dim(0)) {
    throw DimensionError("transform " + shape_string(transform.shape()) + " must be square and match weight " +
                         shape_string(w.shape()));
  }
  return detail::gemm(w, false, transform, false);
}

/// W' = W + W_up · W_down (identity φ only).
template <std::floating_point T>
NDArray<T> merge_lora(const NDArray<T>& w, const LoraPair<T>& lora) {
  if (lora.phi != Activation::identity) throw ConfigError("a LoRA branch with a nonlinear φ cannot be folded");
  NDArray<T> delta = detail::gemm(lora.up.value(), false, lora.down.value(), false);
  if (delta.shape() != w.shape()) {
    throw DimensionError("lora update " + shape_string(delta.shape()) + " for weight " + shape_string(w.shape()));
  }
  NDArray<T> out = w;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += delta[i];
  return out;
}

/// Two stacked linear layers with no nonlinearity, both factors applied:
/// (γ_next ⊙ γ ⊙ γ ⊙ W) x + γ_next ⊙ b, with γ scaling W's input columns.
/// x holds one input per row.
template <std::floating_point T>
NDArray<T> two_layer_closed_form(const NDArray<T>& w, const NDArray<T>& b, const NDArray<T>& x,
                                 const NDArray<T>& gamma, const NDArray<T>& gamma_next) {
  detail::require_layer(w, b);
  detail::require_vector(gamma, w.dim(1), "gamma");
  detail::require_vector(gamma_next, w.dim(0), "next gamma");
  if (x.rank() != 2 || x.dim(1) != w.dim(1)) {
    throw DimensionError("input " + shape_string(x.shape()) + " for weight " + shape_string(w.shape()));
  }
  NDArray<T> out(Shape{x.dim(0), w.dim(0)});
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    for (std::size_t i = 0; i < w.dim(0); ++i) {
      T acc{0};
      for (std::size_t j = 0; j < w.dim(1); ++j) acc += gamma_next[i] * gamma[j] * gamma[j] * w(i, j) * x(r, j);
      out(r, i) = acc + gamma_next[i] * b[i];
    }
  }
  return out;
}

/// λ Σ ‖γ − 1‖², differentiable in every γ.
template <std::floating_point T>
Tensor<T> san_regularizer(const std::vector<Tensor<T>>& gammas, T lambda) {
  if (!(lambda >= T{0})) throw ConfigError("regularization strength must be non-negative");
  Tensor<T> total(NDArray<T>::scalar(T{0}));
  for (const auto& g : gammas) {
    const Tensor<T> d = add_scalar(g, T{-1});
    total = add(total, sum(mul(d, d)));
  }
  return scale(total, lambda);
}

/// Σ ‖γ − 1‖² without building a graph.
template <std::floating_point T>
double gamma_deviation(const std::vector<Tensor<T>>& gammas) {
  double s = 0.0;
  for (const auto& g : gammas)
    for (T v : g.value().data()) s += static_cast<double>(v - T{1}) * static_cast<double>(v - T{1});
  return s;
}

// ---------------------------------------------------------------------------
// Whole-model merge

/// Plain model computing the adapted model's function with no adapter state.
template <std::floating_point T>
ModelState<T> merge_model(const ModelState<T>& state, const AdapterSet<T>& adapters) {
  const ModelSpec& spec = state.spec();
  adapters.validate(spec);
  if (adapters.prompts() && adapters.prompts()->count() > 0) {
    throw ConfigError("prompt tokens change the sequence length and cannot be folded into weights");
  }
  ModelState<T> merged = state.clone();
  merged.freeze_all();

  // Incoming column factors from propagated SAN points.
  std::map<std::string, NDArray<T>> column_factor;
  for (const auto& e : spec.propagation_edges()) {
    auto it = adapters.san().find(e.source);
    if (it == adapters.san().end() || !it->second.propagate) continue;
    const NDArray<T> g = recalibrate(it->second).value();
    for (const auto& c : e.consumers) {
      auto [pos, fresh] = column_factor.emplace(c, g);
      if (!fresh) {
        for (std::size_t i = 0; i < g.numel(); ++i) pos->second[i] *= g[i];
      }
    }
  }

  for (const auto& layer : spec.layers()) {
    if (layer.kind == LayerKind::activation || layer.kind == LayerKind::attention) continue;
    const std::string point = attach_id(layer.name);
    NDArray<T> row_scale = NDArray<T>::ones({layer.out_dim});
    NDArray<T> shift = NDArray<T>::zeros({layer.out_dim});
    if (auto it = adapters.ssf().find(point); it != adapters.ssf().end()) {
      row_scale = it->second.gamma.value();
      shift = it->second.beta.value();
    }
    if (auto it = adapters.san().find(point); it != adapters.san().end()) {
      if (it->second.modeling) row_scale = it->second.gamma.value();
      shift = it->second.beta.value();
    }

    if (layer.kind == LayerKind::layernorm) {
      NDArray<T> gain = merged.param(layer.name + ".gain").value();
      NDArray<T> bias = merged.param(layer.name + ".bias").value();
      for (std::size_t i = 0; i < gain.numel(); ++i) {
        gain[i] *= row_scale[i];
        bias[i] = row_scale[i] * bias[i] + shift[i];
      }
      merged.set(layer.name + ".gain", std::move(gain));
      merged.set(layer.name + ".bias", std::move(bias));
      continue;
    }

    NDArray<T> w = merged.param(layer.name + ".weight").value();
    if (auto it = adapters.lora().find(layer.name); it != adapters.lora().end()) w = merge_lora(w, it->second);
    auto cf = column_factor.find(layer.name);
    const NDArray<T> gamma_in = cf != column_factor.end() ? cf->second : NDArray<T>::ones({layer.in_dim});
    MergedLayer<T> m = merge_san(w, merged.param(layer.name + ".bias").value(), gamma_in, row_scale, shift);
    merged.set(layer.name + ".weight", std::move(m.weight));
    merged.set(layer.name + ".bias", std::move(m.bias));
  }
  return merged;
}

// ---------------------------------------------------------------------------
// Equivalence audit

inline constexpr double kExactTolerance = 1e-10;
inline constexpr std::size_t kDefaultProbeCount = 64;

struct LayerDeviation {
  std::string point;
  double max_abs_dev = 0.0;
};

struct MergeReport {
  std::uint64_t probe_seed = 0;
  std::size_t probe_count = 0;
  std::vector<LayerDeviation> layers;
  double output_max_abs_dev = 0.0;
  double max_abs_dev = 0.0;
  double tolerance = kExactTolerance;
  std::string tolerance_class;  // "linear" (asserted) or "nonlinear" (reported only)
  bool asserted = false;
  std::string verdict;          // "exact", "approximate" or "mismatch"
  std::size_t trainable_before = 0;
  std::size_t trainable_after = 0;

  [[nodiscard]] bool passed() const { return verdict != "mismatch"; }
};

template <std::floating_point T>
NDArray<T> probe_batch(const ModelSpec& spec, std::uint64_t seed, std::size_t count) {
  std::mt19937_64 rng(seed);
  return NDArray<T>::randn({count, spec.input_dim()}, rng);
}

/// Runs both models on a seeded Gaussian probe batch and compares every attach
/// point and the final output. Exactness is asserted only for linear chains.
template <std::floating_point T>
MergeReport audit_merge(const ModelState<T>& adapted, const AdapterSet<T>* adapters, const ModelState<T>& merged,
                        std::uint64_t probe_seed, std::size_t probe_count = kDefaultProbeCount) {
  if (!(adapted.spec() == merged.spec())) throw ContractError("adapted and merged models have different specs");
  for (const auto& [name, t] : adapted.params()) {
    if (!merged.contains(name)) throw ContractError("merged model lacks parameter '" + name + "'");
  }
  const Tensor<T> x(probe_batch<T>(adapted.spec(), probe_seed, probe_count));

  std::vector<std::string> order;
  std::map<std::string, std::vector<NDArray<T>>> lhs, rhs;
  auto collector = [&order](std::map<std::string, std::vector<NDArray<T>>>& sink, bool record_order) {
    return [&sink, &order, record_order](const std::string& point, const NDArray<T>& v) {
      if (record_order && sink.find(point) == sink.end()) order.push_back(point);
      sink[point].push_back(v);
    };
  };
  const NDArray<T> out_a = adapted_forward<T>(adapted, adapters, x, TraceFn<T>(collector(lhs, true))).value();
  const NDArray<T> out_m = adapted_forward<T>(merged, nullptr, x, TraceFn<T>(collector(rhs, false))).value();

  MergeReport report;
  report.probe_seed = probe_seed;
  report.probe_count = probe_count;
  for (const auto& point : order) {
    const auto& a = lhs[point];
    const auto& b = rhs[point];
    if (a.size() != b.size()) throw ContractError("attach point '" + point + "' visited unequally");
    double dev = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dev = std::max(dev, static_cast<double>(max_abs_diff(a[i], b[i])));
    report.layers.push_back({point, dev});
    report.max_abs_dev = std::max(report.max_abs_dev, dev);
  }
  report.output_max_abs_dev = max_abs_diff(out_a, out_m);
  report.max_abs_dev = std::max(report.max_abs_dev, report.output_max_abs_dev);

  report.asserted = adapted.spec().linear_only();
  report.tolerance_class = report.asserted ? "linear" : "nonlinear";
  if (report.max_abs_dev < report.tolerance) {
    report.verdict = "exact";
  } else {
    report.verdict = report.asserted ? "mismatch" : "approximate";
  }
  for (const auto& [name, t] : adapted.params()) {
    if (t.requires_grad()) report.trainable_before += t.numel();
  }
  if (adapters) report.trainable_before += adapters->parameter_count();
  for (const auto& [name, t] : merged.params()) {
    if (t.requires_grad()) report.trainable_after += t.numel();
  }
  return report;
}

}  // namespace sanpeft

#endif  // SANPEFT_REPARAM_HPP
