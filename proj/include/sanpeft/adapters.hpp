// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0

// Parameter-efficient adapters attached to a frozen ModelState.
//
//  * SSF: y' = γ ⊙ y + β at every attach point.
//  * LoRA: out = base + [W_up · φ(W_down · xᵀ)]ᵀ on selected linear layers.
//  * VPT: learnable tokens appended to the token sequence.
//  * SAN: SSF-style modeling at each attach point, plus propagation: the
//          recalibrated factor γ' = A ⊙ γ + b scales the input columns of
//          every layer consuming that attach point, W' = W ⊙ γ'.
//
// Every adapter is the identity map at initialization (VPT only when empty).

#ifndef SANPEFT_ADAPTERS_HPP
#define SANPEFT_ADAPTERS_HPP

#include <sanpeft/model.hpp>

#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace sanpeft {

enum class MethodKind { full, linear_probe, bitfit, lora, vpt, ssf, san };
enum class RecalMode { diagonal, full };

inline const char* to_string(MethodKind k) {
  switch (k) {
    case MethodKind::full: return "full";
    case MethodKind::linear_probe: return "linear_probe";
    case MethodKind::bitfit: return "bitfit";
    case MethodKind::lora: return "lora";
    case MethodKind::vpt: return "vpt";
    case MethodKind::ssf: return "ssf";
    case MethodKind::san: return "san";
  }
  return "?";
}

inline MethodKind parse_method_kind(const std::string& s) {
  for (auto k : {MethodKind::full, MethodKind::linear_probe, MethodKind::bitfit, MethodKind::lora, MethodKind::vpt,
                 MethodKind::ssf, MethodKind::san}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown method '" + s + "'");
}

struct MethodSpec {
  MethodKind kind = MethodKind::ssf;
  std::size_t lora_rank = 4;
  Activation lora_activation = Activation::identity;
  std::size_t prompts = 0;
  bool modeling = true;
  bool propagate = true;
  RecalMode recal = RecalMode::diagonal;
  double lambda = 0.0;
  bool train_head = true;

  static MethodSpec ssf() { return {MethodKind::ssf}; }
  static MethodSpec san(bool modeling = true, bool propagate = true) {
    MethodSpec m{MethodKind::san};
    m.modeling = modeling;
    m.propagate = propagate;
    return m;
  }
  static MethodSpec lora(std::size_t rank, Activation phi = Activation::identity) {
    MethodSpec m{MethodKind::lora};
    m.lora_rank = rank;
    m.lora_activation = phi;
    return m;
  }
  static MethodSpec vpt(std::size_t prompts) {
    MethodSpec m{MethodKind::vpt};
    m.prompts = prompts;
    return m;
  }
  static MethodSpec linear_probe() { return {MethodKind::linear_probe}; }
  static MethodSpec bitfit() { return {MethodKind::bitfit}; }
  static MethodSpec full() { return {MethodKind::full}; }

  MethodSpec& without_head() {
    train_head = false;
    return *this;
  }

  [[nodiscard]] bool propagates() const { return kind == MethodKind::san && propagate; }

  /// Short human-readable tag, e.g. "san(modeling+propagation)".
  [[nodiscard]] std::string label() const {
    switch (kind) {
      case MethodKind::lora: return "lora(r=" + std::to_string(lora_rank) + ")";
      case MethodKind::vpt: return "vpt(n=" + std::to_string(prompts) + ")";
      case MethodKind::san: {
        std::string arms = modeling && propagate ? "modeling+propagation"
                           : modeling            ? "modeling"
                           : propagate           ? "propagation"
                                                 : "shift-only";
        return "san(" + arms + (recal == RecalMode::full ? ",full-recal" : "") + ")";
      }
      default: return to_string(kind);
    }
  }

  bool operator==(const MethodSpec&) const = default;
};

// ---------------------------------------------------------------------------
// Adapter parameter blocks

template <std::floating_point T>
struct ScaleShift {
  Tensor<T> gamma;
  Tensor<T> beta;

  static ScaleShift identity(std::size_t channels) {
    return {Tensor<T>::parameter(NDArray<T>::ones({channels})), Tensor<T>::parameter(NDArray<T>::zeros({channels}))};
  }
};

template <std::floating_point T>
struct LoraPair {
  Tensor<T> down;  // [rank × in]
  Tensor<T> up;    // [out × rank]
  Activation phi = Activation::identity;

  [[nodiscard]] std::size_t rank() const { return down.shape()[0]; }

  /// Gaussian down-projection (std 1/√in), zero up-projection.
  template <class Rng>
  static LoraPair init(std::size_t in, std::size_t out, std::size_t rank, Activation phi, Rng& rng) {
    if (rank == 0 || rank > std::min(in, out)) {
      throw ConfigError("lora rank " + std::to_string(rank) + " must be in [1, " + std::to_string(std::min(in, out)) +
                        "]");
    }
    const T stddev = T{1} / std::sqrt(static_cast<T>(in));
    return {Tensor<T>::parameter(NDArray<T>::randn({rank, in}, rng, stddev)),
            Tensor<T>::parameter(NDArray<T>::zeros({out, rank})), phi};
  }
};

template <std::floating_point T>
struct PromptBlock {
  Tensor<T> tokens;  // [n × d], n may be 0

  [[nodiscard]] std::size_t count() const { return tokens.shape()[0]; }
};

template <std::floating_point T>
struct SanAdapter {
  Tensor<T> gamma;
  Tensor<T> beta;
  std::optional<Tensor<T>> recal_scale;  // A: [d] diagonal or [d × d] full
  std::optional<Tensor<T>> recal_shift;  // b: [d]
  bool modeling = true;
  bool propagate = true;

  static SanAdapter identity(std::size_t channels, bool modeling, bool propagate, bool propagated_point,
                             RecalMode mode = RecalMode::diagonal) {
    SanAdapter a{Tensor<T>::parameter(NDArray<T>::ones({channels})),
                 Tensor<T>::parameter(NDArray<T>::zeros({channels})), std::nullopt, std::nullopt, modeling,
                 propagate && propagated_point};
    if (a.propagate) {
      a.recal_scale = Tensor<T>::parameter(mode == RecalMode::full ? NDArray<T>::identity(channels)
                                                                   : NDArray<T>::ones({channels}));
      a.recal_shift = Tensor<T>::parameter(NDArray<T>::zeros({channels}));
    }
    return a;
  }

  [[nodiscard]] std::size_t channels() const { return gamma.shape()[0]; }

  /// Tensors that influence the forward pass (and therefore train).
  [[nodiscard]] std::vector<std::pair<std::string, Tensor<T>>> parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    if (modeling || propagate) out.emplace_back("gamma", gamma);
    out.emplace_back("beta", beta);
    if (propagate) {
      out.emplace_back("recal_scale", *recal_scale);
      out.emplace_back("recal_shift", *recal_shift);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Adapter operations

template <std::floating_point T>
Tensor<T> ssf_apply(const ScaleShift<T>& a, const Tensor<T>& y) {
  if (y.value().rank() < 1 || y.shape().back() != a.gamma.numel() || a.beta.shape() != a.gamma.shape()) {
    throw DimensionError("ssf factors " + shape_string(a.gamma.shape()) + " for features " + shape_string(y.shape()));
  }
  return add(mul(y, a.gamma), a.beta);
}

template <std::floating_point T>
Tensor<T> lora_apply(const LoraPair<T>& a, const Tensor<T>& x, const Tensor<T>& base_out) {
  if (a.down.shape()[1] != x.shape().back() || a.up.shape()[0] != base_out.shape().back() ||
      a.up.shape()[1] != a.down.shape()[0]) {
    throw DimensionError("lora down " + shape_string(a.down.shape()) + ", up " + shape_string(a.up.shape()) +
                         " for input " + shape_string(x.shape()) + " and output " + shape_string(base_out.shape()));
  }
  return add(base_out, linear(activate(a.phi, linear(x, a.down)), a.up));
}

/// Appends the prompt tokens after the input tokens.
template <std::floating_point T>
Tensor<T> vpt_concat(const PromptBlock<T>& p, const Tensor<T>& x) {
  if (p.tokens.value().rank() != 2 || x.value().rank() != 2 || p.tokens.shape()[1] != x.shape()[1]) {
    throw DimensionError("prompts " + shape_string(p.tokens.shape()) + " for tokens " + shape_string(x.shape()));
  }
  if (p.count() == 0) return x;
  return concat_rows(x, p.tokens);
}

/// γ' = A ⊙ γ + b (diagonal A) or A·γ + b (full A).
template <std::floating_point T>
Tensor<T> recalibrate(const SanAdapter<T>& a) {
  if (!a.recal_scale || !a.recal_shift) throw ConfigError("adapter has no recalibration parameters");
  const std::size_t d = a.channels();
  const Tensor<T>& scale_t = *a.recal_scale;
  if (a.recal_shift->shape() != Shape{d}) {
    throw DimensionError("recalibration shift " + shape_string(a.recal_shift->shape()) + " for " + std::to_string(d) +
                         " channels");
  }
  if (scale_t.shape() == Shape{d}) return add(mul(scale_t, a.gamma), *a.recal_shift);
  if (scale_t.shape() == Shape{d, d}) {
    return add(reshape(matmul(scale_t, reshape(a.gamma, {d, 1})), {d}), *a.recal_shift);
  }
  throw DimensionError("recalibration scale " + shape_string(scale_t.shape()) + " for " + std::to_string(d) +
                       " channels");
}

/// Attach-point transform: γ ⊙ y + β with modeling on, y + β with it off.
template <std::floating_point T>
Tensor<T> san_apply(const SanAdapter<T>& a, const Tensor<T>& y) {
  if (y.shape().back() != a.channels()) {
    throw DimensionError("san factors [" + std::to_string(a.channels()) + "] for features " + shape_string(y.shape()));
  }
  return add(a.modeling ? mul(y, a.gamma) : y, a.beta);
}

// ---------------------------------------------------------------------------
// Adapter sets

template <std::floating_point T>
std::vector<std::string> lora_targets(const ModelSpec& spec) {
  std::vector<std::string> out;
  if (spec.arch() == ArchKind::vit) {
    for (std::size_t b = 0; b < spec.vit_shape().depth; ++b) {
      out.push_back("blocks." + std::to_string(b) + ".attn.q");
      out.push_back("blocks." + std::to_string(b) + ".attn.v");
    }
    return out;
  }
  const std::string head = spec.head_layer();
  for (const auto& l : spec.layers()) {
    if (l.kind == LayerKind::linear && l.name != head) out.push_back(l.name);
  }
  return out;
}

template <std::floating_point T>
class AdapterSet {
 public:
  AdapterSet() = default;

  /// Identity-initialized adapters for `method` on `spec`. The seed only
  /// matters for LoRA down-projections.
  static AdapterSet create(const ModelSpec& spec, const MethodSpec& method, std::uint64_t seed = 0) {
    AdapterSet set;
    set.method_ = method;
    std::mt19937_64 rng(seed);
    switch (method.kind) {
      case MethodKind::ssf:
        for (const auto& p : spec.attach_points()) set.ssf_.emplace(p.id, ScaleShift<T>::identity(p.channels));
        break;
      case MethodKind::san: {
        std::map<std::string, bool> propagated;
        for (const auto& p : spec.propagated_points()) propagated[p.id] = true;
        for (const auto& p : spec.attach_points()) {
          set.san_.emplace(p.id, SanAdapter<T>::identity(p.channels, method.modeling, method.propagate,
                                                         propagated.count(p.id) != 0, method.recal));
        }
        break;
      }
      case MethodKind::lora:
        for (const auto& name : lora_targets<T>(spec)) {
          const auto& l = spec.layer(name);
          set.lora_.emplace(name, LoraPair<T>::init(l.in_dim, l.out_dim, method.lora_rank, method.lora_activation, rng));
        }
        break;
      case MethodKind::vpt:
        if (spec.arch() != ArchKind::vit) throw ConfigError("vpt needs a token model (vit_toy)");
        set.prompts_ = PromptBlock<T>{
            Tensor<T>::parameter(method.prompts == 0 ? NDArray<T>(Shape{0, spec.vit_shape().dim})
                                                     : NDArray<T>::randn({method.prompts, spec.vit_shape().dim}, rng,
                                                                         static_cast<T>(kInitStddev)))};
        break;
      default: break;
    }
    return set;
  }

  [[nodiscard]] const MethodSpec& method() const noexcept { return method_; }
  [[nodiscard]] std::map<std::string, ScaleShift<T>>& ssf() noexcept { return ssf_; }
  [[nodiscard]] const std::map<std::string, ScaleShift<T>>& ssf() const noexcept { return ssf_; }
  [[nodiscard]] std::map<std::string, SanAdapter<T>>& san() noexcept { return san_; }
  [[nodiscard]] const std::map<std::string, SanAdapter<T>>& san() const noexcept { return san_; }
  [[nodiscard]] std::map<std::string, LoraPair<T>>& lora() noexcept { return lora_; }
  [[nodiscard]] const std::map<std::string, LoraPair<T>>& lora() const noexcept { return lora_; }
  [[nodiscard]] std::optional<PromptBlock<T>>& prompts() noexcept { return prompts_; }
  [[nodiscard]] const std::optional<PromptBlock<T>>& prompts() const noexcept { return prompts_; }

  [[nodiscard]] bool empty() const { return ssf_.empty() && san_.empty() && lora_.empty() && !prompts_; }

  /// Trainable adapter tensors with stable names, in deterministic order.
  [[nodiscard]] std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& [id, a] : ssf_) {
      out.emplace_back("ssf." + id + ".gamma", a.gamma);
      out.emplace_back("ssf." + id + ".beta", a.beta);
    }
    for (const auto& [id, a] : san_) {
      for (auto& [n, t] : a.parameters()) out.emplace_back("san." + id + "." + n, t);
    }
    for (const auto& [name, a] : lora_) {
      out.emplace_back("lora." + name + ".down", a.down);
      out.emplace_back("lora." + name + ".up", a.up);
    }
    if (prompts_ && prompts_->count() > 0) out.emplace_back("vpt.prompts", prompts_->tokens);
    return out;
  }

  [[nodiscard]] std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [n, t] : named_parameters()) out.push_back(t);
    return out;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }

  /// Scaling factors γ of every SSF/SAN attach point (for regularization and
  /// drift statistics).
  [[nodiscard]] std::vector<Tensor<T>> gammas() const {
    std::vector<Tensor<T>> out;
    for (const auto& [id, a] : ssf_) out.push_back(a.gamma);
    for (const auto& [id, a] : san_) {
      if (a.modeling || a.propagate) out.push_back(a.gamma);
    }
    return out;
  }

  [[nodiscard]] AdapterSet clone() const {
    AdapterSet out;
    out.method_ = method_;
    for (const auto& [id, a] : ssf_) out.ssf_.emplace(id, ScaleShift<T>{a.gamma.clone(), a.beta.clone()});
    for (const auto& [id, a] : san_) {
      SanAdapter<T> c = a;
      c.gamma = a.gamma.clone();
      c.beta = a.beta.clone();
      if (a.recal_scale) c.recal_scale = a.recal_scale->clone();
      if (a.recal_shift) c.recal_shift = a.recal_shift->clone();
      out.san_.emplace(id, std::move(c));
    }
    for (const auto& [name, a] : lora_) out.lora_.emplace(name, LoraPair<T>{a.down.clone(), a.up.clone(), a.phi});
    if (prompts_) out.prompts_ = PromptBlock<T>{prompts_->tokens.clone()};
    return out;
  }

  /// Throws ConfigError unless the adapters line up with the spec's attach points.
  void validate(const ModelSpec& spec) const {
    const auto points = spec.attach_points();
    auto check_points = [&](const auto& adapters, const char* what) {
      if (adapters.empty()) return;
      if (adapters.size() != points.size()) {
        throw ConfigError(std::string(what) + " adapter count " + std::to_string(adapters.size()) +
                          " does not match " + std::to_string(points.size()) + " attach points");
      }
      for (const auto& p : points) {
        if (adapters.count(p.id) == 0) throw ConfigError(std::string(what) + " adapter missing for '" + p.id + "'");
      }
    };
    check_points(ssf_, "ssf");
    check_points(san_, "san");
    for (const auto& [name, a] : lora_) (void)spec.layer(name);
  }

 private:
  MethodSpec method_;
  std::map<std::string, ScaleShift<T>> ssf_;
  std::map<std::string, SanAdapter<T>> san_;
  std::map<std::string, LoraPair<T>> lora_;
  std::optional<PromptBlock<T>> prompts_;
};

/// Freezes the base and unfreezes whatever `method` trains in the base model
/// itself (head for probing, biases for BitFit, everything for full tuning).
template <std::floating_point T>
void configure_trainable(ModelState<T>& state, const MethodSpec& method) {
  for (const auto& info : state.spec().parameters()) {
    bool on = false;
    switch (method.kind) {
      case MethodKind::full: on = true; break;
      case MethodKind::linear_probe: on = info.head; break;
      case MethodKind::bitfit:
        on = info.role == ParamRole::bias || info.role == ParamRole::norm_bias || (info.head && method.train_head);
        break;
      default: on = info.head && method.train_head; break;
    }
    state.param(info.name).set_requires_grad(on);
  }
}

// ---------------------------------------------------------------------------
// Adapted forward

template <std::floating_point T>
using TraceFn = std::function<void(const std::string& point, const NDArray<T>& value)>;

// Forward hooks realizing an AdapterSet. With no adapters they reproduce the
// base model, which makes them usable for tracing plain models as well.
template <std::floating_point T>
class AdapterHooks : public ForwardHooks<T> {
 public:
  AdapterHooks(const ModelSpec& spec, const AdapterSet<T>* adapters, TraceFn<T> trace = {})
      : adapters_(adapters), trace_(std::move(trace)) {
    if (!adapters_) return;
    adapters_->validate(spec);
    for (const auto& e : spec.propagation_edges()) {
      auto it = adapters_->san().find(e.source);
      if (it == adapters_->san().end() || !it->second.propagate) continue;
      for (const auto& c : e.consumers) incoming_[c].push_back(e.source);
    }
  }

  Tensor<T> effective_weight(const LayerSpec& layer, const Tensor<T>& weight) override {
    auto it = incoming_.find(layer.name);
    if (it == incoming_.end()) return weight;
    Tensor<T> w = weight;
    for (const auto& source : it->second) w = mul(w, recalibrated(source));
    if (!w.value().all_finite()) throw NumericError("effective weight of '" + layer.name + "' is not finite");
    return w;
  }

  Tensor<T> branch(const LayerSpec& layer, const Tensor<T>& input, Tensor<T> output) override {
    if (!adapters_) return output;
    auto it = adapters_->lora().find(layer.name);
    return it == adapters_->lora().end() ? output : lora_apply(it->second, input, output);
  }

  Tensor<T> attach(const std::string& point, Tensor<T> y) override {
    if (adapters_) {
      if (auto it = adapters_->ssf().find(point); it != adapters_->ssf().end()) y = ssf_apply(it->second, y);
      if (auto it = adapters_->san().find(point); it != adapters_->san().end()) y = san_apply(it->second, y);
    }
    if (trace_) trace_(point, y.value());
    return y;
  }

  Tensor<T> tokens(Tensor<T> seq) override {
    if (adapters_ && adapters_->prompts()) return vpt_concat(*adapters_->prompts(), seq);
    return seq;
  }

 private:
  // γ' is shared by every consumer within one forward pass.
  const Tensor<T>& recalibrated(const std::string& source) {
    auto it = recal_cache_.find(source);
    if (it == recal_cache_.end()) {
      it = recal_cache_.emplace(source, recalibrate(adapters_->san().at(source))).first;
    }
    return it->second;
  }

  const AdapterSet<T>* adapters_;
  TraceFn<T> trace_;
  std::map<std::string, std::vector<std::string>> incoming_;
  std::map<std::string, Tensor<T>> recal_cache_;
};

template <std::floating_point T>
Tensor<T> adapted_forward(const ModelState<T>& state, const AdapterSet<T>* adapters, const Tensor<T>& x,
                          TraceFn<T> trace = {}) {
  AdapterHooks<T> hooks(state.spec(), adapters, std::move(trace));
  return forward(state, x, hooks);
}

/// Forward pass with one SanAdapter per attach point.
template <std::floating_point T>
Tensor<T> san_forward(const AdapterSet<T>& adapters, const ModelState<T>& model, const Tensor<T>& x) {
  if (adapters.san().empty()) throw ConfigError("san_forward needs SAN adapters");
  return adapted_forward(model, &adapters, x);
}

// ---------------------------------------------------------------------------
// Parameter accounting (shapes only)

struct ParamCount {
  std::size_t trainable = 0;
  std::size_t total = 0;

  [[nodiscard]] double ratio() const { return total == 0 ? 0.0 : static_cast<double>(trainable) / total; }
};

/// Trainable parameters of `method` on `spec` against the base model size.
inline ParamCount count_params(const ModelSpec& spec, const MethodSpec& method) {
  ParamCount c;
  c.total = spec.total_params();
  for (const auto& p : spec.parameters()) {
    switch (method.kind) {
      case MethodKind::full: c.trainable += p.numel(); break;
      case MethodKind::linear_probe:
        if (p.head) c.trainable += p.numel();
        break;
      case MethodKind::bitfit:
        if (p.role == ParamRole::bias || p.role == ParamRole::norm_bias || (p.head && method.train_head))
          c.trainable += p.numel();
        break;
      default:
        if (p.head && method.train_head) c.trainable += p.numel();
        break;
    }
  }
  switch (method.kind) {
    case MethodKind::ssf:
      for (const auto& p : spec.attach_points()) c.trainable += 2 * p.channels;
      break;
    case MethodKind::san: {
      std::map<std::string, bool> propagated;
      if (method.propagate) {
        for (const auto& p : spec.propagated_points()) propagated[p.id] = true;
      }
      for (const auto& p : spec.attach_points()) {
        const bool prop = propagated.count(p.id) != 0;
        c.trainable += p.channels;  // β
        if (method.modeling || prop) c.trainable += p.channels;
        if (prop) c.trainable += (method.recal == RecalMode::full ? p.channels * p.channels : p.channels) + p.channels;
      }
      break;
    }
    case MethodKind::lora:
      for (const auto& name : lora_targets<double>(spec)) {
        const auto& l = spec.layer(name);
        if (method.lora_rank == 0 || method.lora_rank > std::min(l.in_dim, l.out_dim))
          throw ConfigError("lora rank " + std::to_string(method.lora_rank) + " invalid for layer '" + name + "'");
        c.trainable += method.lora_rank * (l.in_dim + l.out_dim);
      }
      break;
    case MethodKind::vpt:
      if (spec.arch() != ArchKind::vit) throw ConfigError("vpt needs a token model (vit_toy)");
      c.trainable += method.prompts * spec.vit_shape().dim;
      break;
    default: break;
  }
  return c;
}

/// Recalibration parameters SAN adds on top of SSF (2d per propagated point
/// in diagonal mode).
inline std::size_t recalibration_param_count(const ModelSpec& spec, RecalMode mode = RecalMode::diagonal) {
  std::size_t n = 0;
  for (const auto& p : spec.propagated_points()) {
    n += (mode == RecalMode::full ? p.channels * p.channels : p.channels) + p.channels;
  }
  return n;
}

}  // namespace sanpeft

#endif  // SANPEFT_ADAPTERS_HPP
