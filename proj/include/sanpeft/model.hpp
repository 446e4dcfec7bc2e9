// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0

// Frozen-base reference architectures: a chain of linear layers and a single
// block toy vision transformer (patchify -> attention -> MLP). Both declare
// adapter attach points after every linear output and every layernorm output.

#ifndef SANPEFT_MODEL_HPP
#define SANPEFT_MODEL_HPP

#include <sanpeft/tensor.hpp>

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace sanpeft {

enum class LayerKind { linear, activation, layernorm, attention, embedding_patchify };
enum class Activation { identity, relu, gelu };
enum class ArchKind { mlp_chain, vit };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::linear: return "linear";
    case LayerKind::activation: return "activation";
    case LayerKind::layernorm: return "layernorm";
    case LayerKind::attention: return "attention";
    case LayerKind::embedding_patchify: return "embedding_patchify";
  }
  return "?";
}

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "gelu") return Activation::gelu;
  throw ConfigError("unknown activation '" + s + "'");
}

template <std::floating_point T>
Tensor<T> activate(Activation a, const Tensor<T>& x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return relu(x);
    case Activation::gelu: return gelu(x);
  }
  return x;
}

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::linear;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::identity;
  std::vector<std::string> attach_points;
  bool main_path = true;

  bool operator==(const LayerSpec&) const = default;
};

struct VitShape {
  std::size_t dim = 16;
  std::size_t grid = 2;        // N: the image is an N×N grid of patches
  std::size_t patch_dim = 4;   // flattened values per patch
  std::size_t classes = 4;     // 0 drops the head
  std::size_t depth = 1;
  std::size_t mlp_dim = 0;     // 0 means 4·dim

  [[nodiscard]] std::size_t tokens() const { return grid * grid + 1; }
  [[nodiscard]] std::size_t hidden() const { return mlp_dim == 0 ? 4 * dim : mlp_dim; }
  bool operator==(const VitShape&) const = default;
};

struct AttachPoint {
  std::string id;
  std::string layer;
  std::size_t channels = 0;
};

// The scaling factor at `source` is propagated into the input columns of every
// consumer's weight.
struct PropagationEdge {
  std::string source;
  std::vector<std::string> consumers;
};

enum class ParamRole { weight, bias, norm_gain, norm_bias, token, position };

struct ParamInfo {
  std::string name;
  Shape shape;
  ParamRole role = ParamRole::weight;
  std::string layer;
  bool head = false;

  [[nodiscard]] std::size_t numel() const { return shape_numel(shape); }
};

inline std::string attach_id(const std::string& layer) { return layer + ".out"; }

class ModelSpec {
 public:
  static ModelSpec mlp_chain(std::vector<std::size_t> dims, Activation activation = Activation::relu) {
    if (dims.size() < 2) throw ConfigError("mlp_chain needs at least an input and an output width");
    for (auto d : dims) {
      if (d == 0) throw ConfigError("mlp_chain widths must be positive");
    }
    ModelSpec spec;
    spec.arch_ = ArchKind::mlp_chain;
    spec.dims_ = dims;
    spec.activation_ = activation;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      const std::string name = "fc" + std::to_string(i);
      spec.layers_.push_back({name, LayerKind::linear, dims[i], dims[i + 1], Activation::identity,
                              {attach_id(name)}, true});
      if (i + 2 < dims.size()) {
        spec.layers_.push_back({"act" + std::to_string(i), LayerKind::activation, dims[i + 1], dims[i + 1],
                                activation, {}, true});
      }
    }
    spec.validate();
    return spec;
  }

  static ModelSpec vit(VitShape shape) {
    if (shape.dim == 0 || shape.grid == 0 || shape.patch_dim == 0 || shape.depth == 0) {
      throw ConfigError("vit dims must be positive");
    }
    ModelSpec spec;
    spec.arch_ = ArchKind::vit;
    spec.vit_ = shape;
    spec.activation_ = Activation::gelu;
    const std::size_t d = shape.dim, h = shape.hidden();
    auto add = [&](std::string name, LayerKind kind, std::size_t in, std::size_t out, bool main = true,
                   Activation act = Activation::identity) {
      std::vector<std::string> points;
      if (kind == LayerKind::linear || kind == LayerKind::layernorm || kind == LayerKind::embedding_patchify)
        points.push_back(attach_id(name));
      spec.layers_.push_back({std::move(name), kind, in, out, act, std::move(points), main});
    };
    add("patch_embed", LayerKind::embedding_patchify, shape.patch_dim, d);
    for (std::size_t b = 0; b < shape.depth; ++b) {
      const std::string p = "blocks." + std::to_string(b) + ".";
      add(p + "ln1", LayerKind::layernorm, d, d);
      add(p + "attn", LayerKind::attention, d, d);
      add(p + "attn.q", LayerKind::linear, d, d, false);
      add(p + "attn.k", LayerKind::linear, d, d, false);
      add(p + "attn.v", LayerKind::linear, d, d, false);
      add(p + "attn.proj", LayerKind::linear, d, d, false);
      add(p + "ln2", LayerKind::layernorm, d, d);
      add(p + "fc1", LayerKind::linear, d, h);
      add(p + "act", LayerKind::activation, h, h, true, Activation::gelu);
      add(p + "fc2", LayerKind::linear, h, d);
    }
    add("norm", LayerKind::layernorm, d, d);
    if (shape.classes > 0) add("head", LayerKind::linear, d, shape.classes);
    spec.validate();
    return spec;
  }

  [[nodiscard]] ArchKind arch() const noexcept { return arch_; }
  [[nodiscard]] const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  [[nodiscard]] const VitShape& vit_shape() const noexcept { return vit_; }
  [[nodiscard]] const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  [[nodiscard]] Activation activation() const noexcept { return activation_; }

  [[nodiscard]] std::size_t input_dim() const {
    return arch_ == ArchKind::mlp_chain ? dims_.front() : vit_.grid * vit_.grid * vit_.patch_dim;
  }

  [[nodiscard]] std::size_t num_classes() const {
    return arch_ == ArchKind::mlp_chain ? dims_.back() : vit_.classes;
  }

  [[nodiscard]] bool has_head() const { return !head_layer().empty(); }

  /// Name of the classification layer, or empty when the model has none.
  [[nodiscard]] std::string head_layer() const {
    if (arch_ == ArchKind::mlp_chain) return "fc" + std::to_string(dims_.size() - 2);
    return vit_.classes > 0 ? "head" : "";
  }

  [[nodiscard]] const LayerSpec& layer(const std::string& name) const {
    for (const auto& l : layers_) {
      if (l.name == name) return l;
    }
    throw ConfigError("no layer named '" + name + "'");
  }

  [[nodiscard]] std::vector<AttachPoint> attach_points() const {
    std::vector<AttachPoint> out;
    for (const auto& l : layers_) {
      for (const auto& p : l.attach_points) out.push_back({p, l.name, l.out_dim});
    }
    return out;
  }

  [[nodiscard]] std::vector<PropagationEdge> propagation_edges() const {
    std::vector<PropagationEdge> edges;
    if (arch_ == ArchKind::mlp_chain) {
      for (std::size_t i = 0; i + 2 < dims_.size(); ++i) {
        edges.push_back({attach_id("fc" + std::to_string(i)), {"fc" + std::to_string(i + 1)}});
      }
      return edges;
    }
    for (std::size_t b = 0; b < vit_.depth; ++b) {
      const std::string p = "blocks." + std::to_string(b) + ".";
      edges.push_back({attach_id(p + "ln1"), {p + "attn.q", p + "attn.k", p + "attn.v"}});
      // Attention mixes value rows with row-stochastic weights, which commutes
      // with per-channel scaling, so v's factor reaches the output projection.
      edges.push_back({attach_id(p + "attn.v"), {p + "attn.proj"}});
      edges.push_back({attach_id(p + "ln2"), {p + "fc1"}});
      edges.push_back({attach_id(p + "fc1"), {p + "fc2"}});
    }
    if (has_head()) edges.push_back({attach_id("norm"), {"head"}});
    return edges;
  }

  /// Attach points whose factor feeds at least one consumer weight.
  [[nodiscard]] std::vector<AttachPoint> propagated_points() const {
    std::vector<AttachPoint> out;
    const auto points = attach_points();
    for (const auto& e : propagation_edges()) {
      for (const auto& p : points) {
        if (p.id == e.source) out.push_back(p);
      }
    }
    return out;
  }

  [[nodiscard]] std::vector<ParamInfo> parameters() const {
    std::vector<ParamInfo> out;
    const std::string head = head_layer();
    if (arch_ == ArchKind::vit) {
      out.push_back({"cls_token", {1, vit_.dim}, ParamRole::token, "", false});
      out.push_back({"pos_embed", {vit_.tokens(), vit_.dim}, ParamRole::position, "", false});
    }
    for (const auto& l : layers_) {
      const bool is_head = l.name == head;
      switch (l.kind) {
        case LayerKind::linear:
        case LayerKind::embedding_patchify:
          out.push_back({l.name + ".weight", {l.out_dim, l.in_dim}, ParamRole::weight, l.name, is_head});
          out.push_back({l.name + ".bias", {l.out_dim}, ParamRole::bias, l.name, is_head});
          break;
        case LayerKind::layernorm:
          out.push_back({l.name + ".gain", {l.out_dim}, ParamRole::norm_gain, l.name, false});
          out.push_back({l.name + ".bias", {l.out_dim}, ParamRole::norm_bias, l.name, false});
          break;
        default: break;
      }
    }
    return out;
  }

  [[nodiscard]] std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
  }

  [[nodiscard]] bool linear_only() const {
    return arch_ == ArchKind::mlp_chain && (activation_ == Activation::identity || dims_.size() <= 2);
  }

  void validate() const {
    const LayerSpec* prev = nullptr;
    std::map<std::string, int> seen;
    for (const auto& l : layers_) {
      if (l.in_dim == 0 || l.out_dim == 0) throw ConfigError("layer '" + l.name + "' has a zero width");
      for (const auto& p : l.attach_points) {
        if (seen[p]++ > 0) throw ConfigError("duplicate attach point '" + p + "'");
      }
      if (!l.main_path) continue;
      if (prev && prev->out_dim != l.in_dim) {
        throw ConfigError("layer '" + l.name + "' expects width " + std::to_string(l.in_dim) + " but '" +
                          prev->name + "' produces " + std::to_string(prev->out_dim));
      }
      prev = &l;
    }
  }

  bool operator==(const ModelSpec&) const = default;

 private:
  ArchKind arch_ = ArchKind::mlp_chain;
  std::vector<LayerSpec> layers_;
  VitShape vit_;
  std::vector<std::size_t> dims_;
  Activation activation_ = Activation::relu;
};

// Weights of a model. Tensors are held in spec order; copying a ModelState
// shares tensors, clone() does not.
template <std::floating_point T>
class ModelState {
 public:
  ModelState() = default;

  explicit ModelState(ModelSpec spec) : spec_(std::move(spec)) {
    for (const auto& p : spec_.parameters()) {
      index_[p.name] = params_.size();
      params_.emplace_back(p.name, Tensor<T>(NDArray<T>(p.shape)));
    }
  }

  [[nodiscard]] const ModelSpec& spec() const noexcept { return spec_; }

  [[nodiscard]] Tensor<T>& param(const std::string& name) { return params_.at(lookup(name)).second; }
  [[nodiscard]] const Tensor<T>& param(const std::string& name) const {
    return params_.at(lookup(name)).second;
  }
  [[nodiscard]] bool contains(const std::string& name) const { return index_.count(name) != 0; }

  [[nodiscard]] std::vector<std::pair<std::string, Tensor<T>>>& params() noexcept { return params_; }
  [[nodiscard]] const std::vector<std::pair<std::string, Tensor<T>>>& params() const noexcept {
    return params_;
  }

  void set(const std::string& name, NDArray<T> value) {
    auto& t = param(name);
    if (value.shape() != t.shape()) {
      throw DimensionError("parameter '" + name + "' has shape " + shape_string(t.shape()) + ", got " +
                           shape_string(value.shape()));
    }
    t = Tensor<T>(std::move(value), t.requires_grad());
  }

  [[nodiscard]] ModelState clone() const {
    ModelState out;
    out.spec_ = spec_;
    out.index_ = index_;
    for (const auto& [name, t] : params_) out.params_.emplace_back(name, t.clone());
    return out;
  }

  void freeze_all() {
    for (auto& [name, t] : params_) t.set_requires_grad(false);
  }

  [[nodiscard]] std::vector<Tensor<T>> trainable() const {
    std::vector<Tensor<T>> out;
    for (const auto& [name, t] : params_) {
      if (t.requires_grad()) out.push_back(t);
    }
    return out;
  }

  /// FNV-1a over the bytes of the named parameters (all when empty).
  [[nodiscard]] std::uint64_t fingerprint(const std::vector<std::string>& names = {}) const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const NDArray<T>& a) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(a.data().data());
      for (std::size_t i = 0; i < a.numel() * sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
      }
    };
    if (names.empty()) {
      for (const auto& [name, t] : params_) mix(t.value());
    } else {
      for (const auto& n : names) mix(param(n).value());
    }
    return h;
  }

 private:
  [[nodiscard]] std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("model has no parameter '" + name + "'");
    return it->second;
  }

  ModelSpec spec_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

inline constexpr double kInitStddev = 0.02;

/// Seeded Gaussian(0, 0.02) weights and tokens, zero biases, unit norm gains.
template <std::floating_point T>
ModelState<T> init_model(const ModelSpec& spec, std::uint64_t seed) {
  ModelState<T> state(spec);
  std::mt19937_64 rng(seed);
  for (const auto& p : spec.parameters()) {
    switch (p.role) {
      case ParamRole::weight:
      case ParamRole::token:
      case ParamRole::position:
        state.set(p.name, NDArray<T>::randn(p.shape, rng, static_cast<T>(kInitStddev)));
        break;
      case ParamRole::norm_gain: state.set(p.name, NDArray<T>::ones(p.shape)); break;
      default: break;
    }
  }
  return state;
}

enum class ReferenceKind { mlp_chain, vit_toy };

/// mlp_chain: dims are the layer widths. vit_toy: dims are
/// [dim, grid, patch_dim, classes] with optional trailing [depth, mlp_dim].
template <std::floating_point T>
ModelState<T> build_reference_model(ReferenceKind kind, const std::vector<std::size_t>& dims,
                                    std::uint64_t seed, Activation activation = Activation::relu) {
  if (kind == ReferenceKind::mlp_chain) return init_model<T>(ModelSpec::mlp_chain(dims, activation), seed);
  if (dims.size() < 4 || dims.size() > 6) {
    throw ConfigError("vit_toy dims are [dim, grid, patch_dim, classes(, depth(, mlp_dim))]");
  }
  VitShape shape{dims[0], dims[1], dims[2], dims[3], dims.size() > 4 ? dims[4] : 1, dims.size() > 5 ? dims[5] : 0};
  return init_model<T>(ModelSpec::vit(shape), seed);
}

// ---------------------------------------------------------------------------
// Layer forwards

template <std::floating_point T>
Tensor<T> linear_forward(const Tensor<T>& weight, const Tensor<T>& bias, const Tensor<T>& x) {
  return linear(x, weight, bias);
}

template <std::floating_point T>
Tensor<T> layernorm_forward(const Tensor<T>& gain, const Tensor<T>& bias, const Tensor<T>& x) {
  return layer_norm(x, gain, bias);
}

/// Softmax(Q·Kᵀ/√d)·V for a single head, d being the query width.
template <std::floating_point T>
Tensor<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (q.shape() != k.shape() || q.shape()[0] != v.shape()[0]) {
    throw DimensionError("attention q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) +
                         ", v " + shape_string(v.shape()));
  }
  const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(q.shape()[1]));
  return matmul(softmax(scale(matmul(q, transpose(k)), inv_sqrt_d)), v);
}

template <std::floating_point T>
Tensor<T> attention_forward(const Tensor<T>& wq, const Tensor<T>& wk, const Tensor<T>& wv, const Tensor<T>& x) {
  const Shape& s = wq.shape();
  if (s.size() != 2 || wk.shape() != s || wv.shape() != s || s[0] != s[1] || x.value().rank() != 2 ||
      x.shape()[1] != s[1]) {
    throw DimensionError("attention projections " + shape_string(wq.shape()) + ", " +
                         shape_string(wk.shape()) + ", " + shape_string(wv.shape()) + " for input " +
                         shape_string(x.shape()));
  }
  return scaled_dot_product_attention(linear(x, wq), linear(x, wk), linear(x, wv));
}

// Customization points used by the model forward. The default hooks leave the
// base model untouched; adapters override them.
template <std::floating_point T>
struct ForwardHooks {
  virtual ~ForwardHooks() = default;
  /// Weight actually used by a linear layer.
  virtual Tensor<T> effective_weight(const LayerSpec&, const Tensor<T>& weight) { return weight; }
  /// Extra contribution added to a linear layer's output (parallel branches).
  virtual Tensor<T> branch(const LayerSpec&, const Tensor<T>& /*input*/, Tensor<T> output) { return output; }
  /// Transform applied at an attach point.
  virtual Tensor<T> attach(const std::string& /*point*/, Tensor<T> y) { return y; }
  /// Token sequence entering the first block.
  virtual Tensor<T> tokens(Tensor<T> seq) { return seq; }
};

namespace detail {

template <std::floating_point T>
class Forward {
 public:
  Forward(const ModelState<T>& state, ForwardHooks<T>& hooks) : state_(state), hooks_(hooks) {}

  Tensor<T> dense(const std::string& name, const Tensor<T>& x) {
    const LayerSpec& spec = state_.spec().layer(name);
    const Tensor<T> w = hooks_.effective_weight(spec, state_.param(name + ".weight"));
    Tensor<T> y = linear(x, w, state_.param(name + ".bias"));
    y = hooks_.branch(spec, x, std::move(y));
    return hooks_.attach(attach_id(name), std::move(y));
  }

  Tensor<T> norm(const std::string& name, const Tensor<T>& x) {
    Tensor<T> y = layer_norm(x, state_.param(name + ".gain"), state_.param(name + ".bias"));
    return hooks_.attach(attach_id(name), std::move(y));
  }

  Tensor<T> run(const Tensor<T>& x) {
    const ModelSpec& spec = state_.spec();
    if (x.value().rank() != 2 || x.shape()[1] != spec.input_dim()) {
      throw DimensionError("model expects input [batch x " + std::to_string(spec.input_dim()) + "], got " +
                           shape_string(x.shape()));
    }
    if (spec.arch() == ArchKind::mlp_chain) return run_mlp(x);
    std::vector<Tensor<T>> rows;
    rows.reserve(x.shape()[0]);
    for (std::size_t i = 0; i < x.shape()[0]; ++i) rows.push_back(run_vit_sample(x, i));
    return concat_rows<T>(rows);
  }

 private:
  Tensor<T> run_mlp(const Tensor<T>& x) {
    const ModelSpec& spec = state_.spec();
    Tensor<T> h = x;
    const std::size_t n = spec.dims().size() - 1;
    for (std::size_t i = 0; i < n; ++i) {
      h = dense("fc" + std::to_string(i), h);
      if (i + 1 < n) h = activate(spec.activation(), h);
    }
    return h;
  }

  Tensor<T> run_vit_sample(const Tensor<T>& x, std::size_t row) {
    const VitShape& v = state_.spec().vit_shape();
    const auto& src = x.value().values();
    const std::size_t width = x.shape()[1];
    std::vector<T> patch(src.begin() + static_cast<std::ptrdiff_t>(row * width),
                         src.begin() + static_cast<std::ptrdiff_t>((row + 1) * width));
    Tensor<T> patches(NDArray<T>(Shape{v.grid * v.grid, v.patch_dim}, std::move(patch)));

    Tensor<T> h = dense("patch_embed", patches);
    h = add(concat_rows(state_.param("cls_token"), h), state_.param("pos_embed"));
    h = hooks_.tokens(std::move(h));
    for (std::size_t b = 0; b < v.depth; ++b) {
      const std::string p = "blocks." + std::to_string(b) + ".";
      Tensor<T> a = norm(p + "ln1", h);
      Tensor<T> q = dense(p + "attn.q", a);
      Tensor<T> k = dense(p + "attn.k", a);
      Tensor<T> val = dense(p + "attn.v", a);
      h = add(h, dense(p + "attn.proj", scaled_dot_product_attention(q, k, val)));
      Tensor<T> f = gelu(dense(p + "fc1", norm(p + "ln2", h)));
      h = add(h, dense(p + "fc2", f));
    }
    h = norm("norm", h);
    Tensor<T> cls = slice_rows(h, 0, 1);
    return state_.spec().has_head() ? dense("head", cls) : cls;
  }

  const ModelState<T>& state_;
  ForwardHooks<T>& hooks_;
};

}  // namespace detail

/// Logits [batch × classes] (or CLS features when the model has no head).
template <std::floating_point T>
Tensor<T> forward(const ModelState<T>& state, const Tensor<T>& x, ForwardHooks<T>& hooks) {
  return detail::Forward<T>(state, hooks).run(x);
}

template <std::floating_point T>
Tensor<T> forward(const ModelState<T>& state, const Tensor<T>& x) {
  ForwardHooks<T> none;
  return forward(state, x, none);
}

}  // namespace sanpeft

#endif  // SANPEFT_MODEL_HPP
