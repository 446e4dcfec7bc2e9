// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode automatic differentiation over dense arrays.
//
// A Tensor is a shared handle to a node holding a value and, when the tensor
// requires gradients, a gradient buffer. Operations are recorded on the
// thread's active Tape (see Tape::Recording); if no tape is active, or none of
// the inputs requires gradients, an operation simply produces a constant.
//
//   Tape<double> tape;
//   auto w = Tensor<double>::parameter(NDArray<double>::vector({1, 2}));
//   Tensor<double> loss;
//   {
//     auto rec = tape.record();
//     loss = sum(mul(w, w));
//   }
//   backward(loss);          // w.grad() == [2, 4]
//
// Gradients of leaves accumulate across backward() calls until zero_grad().

#ifndef SANPEFT_TENSOR_HPP
#define SANPEFT_TENSOR_HPP

#include <sanpeft/errors.hpp>
#include <sanpeft/ndarray.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace sanpeft {

template <std::floating_point T>
class Tensor;
template <std::floating_point T>
class Tape;

namespace detail {

template <std::floating_point T>
struct TapeState;

template <std::floating_point T>
struct Node {
  NDArray<T> value;
  NDArray<T> grad;
  bool requires_grad = false;
  bool has_grad = false;
  bool leaf = true;
  std::weak_ptr<TapeState<T>> tape;
};

template <std::floating_point T>
using NodePtr = std::shared_ptr<Node<T>>;

template <std::floating_point T>
struct Record {
  NodePtr<T> output;
  std::function<void(const NDArray<T>&)> backward;
};

template <std::floating_point T>
struct TapeState {
  std::vector<Record<T>> records;
};

template <std::floating_point T>
struct ActiveTape {
  static inline thread_local std::shared_ptr<TapeState<T>> current;
};

template <std::floating_point T>
void accumulate(Node<T>& node, const NDArray<T>& delta) {
  if (!node.requires_grad) return;
  if (!node.has_grad) {
    node.grad = delta;
    node.has_grad = true;
    return;
  }
  auto g = node.grad.data();
  auto d = delta.data();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
}

template <std::floating_point T>
void check_finite(const NDArray<T>& value, const char* op) {
  if (!value.all_finite()) {
    throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

}  // namespace detail

template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::Node<T>;

  Tensor() : node_(std::make_shared<Node>()) {}

  explicit Tensor(NDArray<T> value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    detail::check_finite(value, "tensor construction");
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Tensor parameter(NDArray<T> value) { return Tensor(std::move(value), true); }

  [[nodiscard]] const NDArray<T>& value() const noexcept { return node_->value; }
  [[nodiscard]] const Shape& shape() const noexcept { return node_->value.shape(); }
  [[nodiscard]] std::size_t numel() const noexcept { return node_->value.numel(); }
  [[nodiscard]] T item() const { return node_->value.item(); }

  [[nodiscard]] bool requires_grad() const noexcept { return node_->requires_grad; }
  [[nodiscard]] bool is_leaf() const noexcept { return node_->leaf; }

  void set_requires_grad(bool on) {
    if (!node_->leaf) throw ContractError("requires_grad can only be changed on leaf tensors");
    node_->requires_grad = on;
    if (!on) zero_grad();
  }

  /// True once a backward pass has reached this tensor since the last zero_grad().
  [[nodiscard]] bool has_grad() const noexcept { return node_->has_grad; }

  /// Accumulated gradient; zeros when no backward pass reached this tensor.
  [[nodiscard]] NDArray<T> grad() const {
    return node_->has_grad ? node_->grad : NDArray<T>::zeros(shape());
  }

  void zero_grad() {
    node_->grad = NDArray<T>();
    node_->has_grad = false;
  }

  /// Replace a leaf's value in place (optimizer updates). Shape must be kept.
  void assign(NDArray<T> value) {
    if (!node_->leaf) throw ContractError("assign() on a non-leaf tensor");
    if (value.shape() != shape()) {
      throw DimensionError("assign " + shape_string(value.shape()) + " to tensor of shape " +
                           shape_string(shape()));
    }
    detail::check_finite(value, "assign");
    node_->value = std::move(value);
  }

  /// Independent leaf with a copy of the value and the same requires_grad flag.
  [[nodiscard]] Tensor clone() const { return Tensor(node_->value, node_->requires_grad); }

  /// Constant leaf sharing no history with this tensor.
  [[nodiscard]] Tensor detach() const { return Tensor(node_->value, false); }

  [[nodiscard]] bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

  [[nodiscard]] const detail::NodePtr<T>& node() const noexcept { return node_; }

  static Tensor from_node(detail::NodePtr<T> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  detail::NodePtr<T> node_;
};

// Ordered record of primitive operations. Operations append in execution
// order, so the record is already topologically sorted.
template <std::floating_point T>
class Tape {
 public:
  Tape() : state_(std::make_shared<detail::TapeState<T>>()) {}

  // Makes this tape the thread's active tape for its lifetime.
  class Recording {
   public:
    explicit Recording(std::shared_ptr<detail::TapeState<T>> state)
        : previous_(std::exchange(detail::ActiveTape<T>::current, std::move(state))) {}
    ~Recording() { detail::ActiveTape<T>::current = std::move(previous_); }
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    std::shared_ptr<detail::TapeState<T>> previous_;
  };

  [[nodiscard]] Recording record() { return Recording(state_); }

  [[nodiscard]] std::size_t size() const noexcept { return state_->records.size(); }

  void clear() { state_->records.clear(); }

  [[nodiscard]] const std::shared_ptr<detail::TapeState<T>>& state() const noexcept { return state_; }

 private:
  std::shared_ptr<detail::TapeState<T>> state_;
};

/// Reverse sweep from a scalar loss. Intermediate gradients are recomputed on
/// every call; leaf gradients accumulate.
template <std::floating_point T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  auto state = loss.node()->tape.lock();
  if (loss.is_leaf() || !state) throw ContractError("loss is not attached to a live tape");

  auto& records = state->records;
  std::size_t end = records.size();
  while (end > 0 && records[end - 1].output != loss.node()) --end;
  if (end == 0) throw ContractError("loss was not recorded on its tape");

  for (std::size_t i = 0; i < end; ++i) {
    records[i].output->grad = NDArray<T>();
    records[i].output->has_grad = false;
  }
  loss.node()->grad = NDArray<T>::ones(loss.shape());
  loss.node()->has_grad = true;
  for (std::size_t i = end; i-- > 0;) {
    auto& rec = records[i];
    if (rec.output->has_grad) rec.backward(rec.output->grad);
  }
}

template <std::floating_point T>
void zero_grads(std::span<Tensor<T>> tensors) {
  for (auto& t : tensors) t.zero_grad();
}

namespace detail {

template <std::floating_point T>
Tensor<T> make_result(NDArray<T> value, const char* op, bool needs_grad,
                      std::function<void(Node<T>&, const NDArray<T>&)> bw) {
  check_finite(value, op);
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->leaf = false;
  auto& active = ActiveTape<T>::current;
  if (needs_grad && active) {
    node->requires_grad = true;
    node->tape = active;
    std::weak_ptr<Node<T>> weak = node;
    active->records.push_back(Record<T>{node, [weak, bw = std::move(bw)](const NDArray<T>& g) {
                                          if (auto n = weak.lock()) bw(*n, g);
                                        }});
  }
  return Tensor<T>::from_node(std::move(node));
}

template <std::floating_point T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <std::floating_point T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (t.value().rank() != rank) {
    throw DimensionError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
  }
}

// C = A(m×k) · B(k×n), optionally with A and/or B transposed in storage.
template <std::floating_point T>
NDArray<T> gemm(const NDArray<T>& a, bool ta, const NDArray<T>& b, bool tb) {
  const std::size_t m = ta ? a.dim(1) : a.dim(0);
  const std::size_t k = ta ? a.dim(0) : a.dim(1);
  const std::size_t n = tb ? b.dim(0) : b.dim(1);
  NDArray<T> c(Shape{m, n});
  const std::size_t as = a.dim(1), bs = b.dim(1);
  const T* A = a.data().data();
  const T* B = b.data().data();
  T* C = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ta ? A[p * as + i] : A[i * as + p];
      if (aip == T{0}) continue;
      T* crow = C + i * n;
      if (!tb) {
        const T* brow = B + p * bs;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * B[j * bs + p];
      }
    }
  }
  return c;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(detail::gemm(a.value(), false, b.value(), false), "matmul",
                                detail::any_requires_grad<T>({&a, &b}),
                                [an, bn](detail::Node<T>&, const NDArray<T>& g) {
                                  if (an->requires_grad)
                                    detail::accumulate(*an, detail::gemm(g, false, bn->value, true));
                                  if (bn->requires_grad)
                                    detail::accumulate(*bn, detail::gemm(an->value, true, g, false));
                                });
}

template <std::floating_point T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  NDArray<T> out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a.value()(i, j);
  auto an = a.node();
  return detail::make_result<T>(std::move(out), "transpose", a.requires_grad(),
                                [an, r, c](detail::Node<T>&, const NDArray<T>& g) {
                                  NDArray<T> d(Shape{r, c});
                                  for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t j = 0; j < c; ++j) d(i, j) = g(j, i);
                                  detail::accumulate(*an, d);
                                });
}

template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  auto an = a.node();
  Shape original = a.shape();
  return detail::make_result<T>(a.value().reshaped(std::move(shape)), "reshape", a.requires_grad(),
                                [an, original](detail::Node<T>&, const NDArray<T>& g) {
                                  detail::accumulate(*an, g.reshaped(original));
                                });
}

/// y = x·Wᵀ + b for x [rows×in], W [out×in], b [out]; bias may be null.
template <std::floating_point T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias = nullptr) {
  if (x.value().rank() != 2 || weight.value().rank() != 2 || x.shape()[1] != weight.shape()[1]) {
    throw DimensionError("linear input " + shape_string(x.shape()) + " vs weight " +
                         shape_string(weight.shape()));
  }
  const std::size_t out_dim = weight.shape()[0];
  if (bias && (bias->value().rank() != 1 || bias->shape()[0] != out_dim)) {
    throw DimensionError("linear bias " + shape_string(bias->shape()) + " vs weight " +
                         shape_string(weight.shape()));
  }
  NDArray<T> y = detail::gemm(x.value(), false, weight.value(), true);
  if (bias) {
    for (std::size_t i = 0; i < y.dim(0); ++i)
      for (std::size_t j = 0; j < out_dim; ++j) y(i, j) += bias->value()[j];
  }
  auto xn = x.node();
  auto wn = weight.node();
  detail::NodePtr<T> bn = bias ? bias->node() : nullptr;
  const bool needs = x.requires_grad() || weight.requires_grad() || (bias && bias->requires_grad());
  return detail::make_result<T>(std::move(y), "linear", needs,
                                [xn, wn, bn](detail::Node<T>&, const NDArray<T>& g) {
                                  if (xn->requires_grad)
                                    detail::accumulate(*xn, detail::gemm(g, false, wn->value, false));
                                  if (wn->requires_grad)
                                    detail::accumulate(*wn, detail::gemm(g, true, xn->value, false));
                                  if (bn && bn->requires_grad) {
                                    NDArray<T> db(bn->value.shape());
                                    for (std::size_t i = 0; i < g.dim(0); ++i)
                                      for (std::size_t j = 0; j < g.dim(1); ++j) db[j] += g(i, j);
                                    detail::accumulate(*bn, db);
                                  }
                                });
}

template <std::floating_point T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return linear(x, weight, &bias);
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

enum class ElementwiseOp { add, sub, mul };

namespace detail {

// b either matches a's shape or is a vector aligned with a's trailing axis.
template <std::floating_point T>
bool broadcasts(const NDArray<T>& a, const NDArray<T>& b) {
  if (a.shape() == b.shape()) return false;
  if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0)) return true;
  throw DimensionError("cannot broadcast " + shape_string(b.shape()) + " against " +
                       shape_string(a.shape()));
}

template <std::floating_point T>
NDArray<T> reduce_to_trailing(const NDArray<T>& g, std::size_t width) {
  NDArray<T> out(Shape{width});
  for (std::size_t i = 0; i < g.numel(); ++i) out[i % width] += g[i];
  return out;
}

}  // namespace detail

template <std::floating_point T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b) {
  const bool bc = detail::broadcasts(a.value(), b.value());
  const std::size_t width = b.numel();
  NDArray<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T rhs = bc ? bv[i % width] : bv[i];
    switch (op) {
      case ElementwiseOp::add: out[i] += rhs; break;
      case ElementwiseOp::sub: out[i] -= rhs; break;
      case ElementwiseOp::mul: out[i] *= rhs; break;
    }
  }
  auto an = a.node();
  auto bn = b.node();
  const char* name = op == ElementwiseOp::add ? "add" : op == ElementwiseOp::sub ? "sub" : "mul";
  return detail::make_result<T>(
      std::move(out), name, detail::any_requires_grad<T>({&a, &b}),
      [an, bn, op, bc, width](detail::Node<T>&, const NDArray<T>& g) {
        if (an->requires_grad) {
          if (op == ElementwiseOp::mul) {
            NDArray<T> da = g;
            for (std::size_t i = 0; i < da.numel(); ++i) da[i] *= bn->value[bc ? i % width : i];
            detail::accumulate(*an, da);
          } else {
            detail::accumulate(*an, g);
          }
        }
        if (bn->requires_grad) {
          NDArray<T> db = g;
          if (op == ElementwiseOp::sub) {
            for (auto& v : db.data()) v = -v;
          } else if (op == ElementwiseOp::mul) {
            for (std::size_t i = 0; i < db.numel(); ++i) db[i] *= an->value[i];
          }
          detail::accumulate(*bn, bc ? detail::reduce_to_trailing(db, width) : db);
        }
      });
}

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(ElementwiseOp::add, a, b);
}
template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(ElementwiseOp::sub, a, b);
}
template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(ElementwiseOp::mul, a, b);
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  NDArray<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  auto an = a.node();
  return detail::make_result<T>(std::move(out), "scale", a.requires_grad(),
                                [an, factor](detail::Node<T>&, const NDArray<T>& g) {
                                  NDArray<T> d = g;
                                  for (auto& v : d.data()) v *= factor;
                                  detail::accumulate(*an, d);
                                });
}

template <std::floating_point T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  NDArray<T> out = a.value();
  for (auto& v : out.data()) v += offset;
  auto an = a.node();
  return detail::make_result<T>(std::move(out), "add_scalar", a.requires_grad(),
                                [an](detail::Node<T>&, const NDArray<T>& g) { detail::accumulate(*an, g); });
}

// ---------------------------------------------------------------------------
// Reductions and nonlinearities

enum class UnaryOp { sum, mean, relu, gelu, softmax_lastaxis, exp, log };

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& a) {
  T s{0};
  for (T v : a.value().data()) s += v;
  auto an = a.node();
  return detail::make_result<T>(NDArray<T>::scalar(s), "sum", a.requires_grad(),
                                [an](detail::Node<T>&, const NDArray<T>& g) {
                                  detail::accumulate(*an, NDArray<T>(an->value.shape(), g.item()));
                                });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.numel()));
}

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& a) {
  NDArray<T> out = a.value();
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  auto an = a.node();
  return detail::make_result<T>(std::move(out), "relu", a.requires_grad(),
                                [an](detail::Node<T>&, const NDArray<T>& g) {
                                  NDArray<T> d = g;
                                  for (std::size_t i = 0; i < d.numel(); ++i)
                                    if (!(an->value[i] > T{0})) d[i] = T{0};
                                  detail::accumulate(*an, d);
                                });
}

// Exact (erf-based) GELU.
template <std::floating_point T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T inv_sqrt2 = T{1} / std::numbers::sqrt2_v<T>;
  NDArray<T> out = a.value();
  for (auto& v : out.data()) v = T{0.5} * v * (T{1} + std::erf(v * inv_sqrt2));
  auto an = a.node();
  return detail::make_result<T>(std::move(out), "gelu", a.requires_grad(),
                                [an, inv_sqrt2](detail::Node<T>&, const NDArray<T>& g) {
                                  const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
                                  NDArray<T> d = g;
                                  for (std::size_t i = 0; i < d.numel(); ++i) {
                                    const T x = an->value[i];
                                    const T cdf = T{0.5} * (T{1} + std::erf(x * inv_sqrt2));
                                    const T pdf = inv_sqrt_2pi * std::exp(T{-0.5} * x * x);
                                    d[i] *= cdf + x * pdf;
                                  }
                                  detail::accumulate(*an, d);
                                });
}

template <std::floating_point T>
Tensor<T> exp(const Tensor<T>& a) {
  NDArray<T> out = a.value();
  for (auto& v : out.data()) v = std::exp(v);
  auto an = a.node();
  auto result = detail::make_result<T>(out, "exp", a.requires_grad(),
                                       [an, out](detail::Node<T>&, const NDArray<T>& g) {
                                         NDArray<T> d = g;
                                         for (std::size_t i = 0; i < d.numel(); ++i) d[i] *= out[i];
                                         detail::accumulate(*an, d);
                                       });
  return result;
}

template <std::floating_point T>
Tensor<T> log(const Tensor<T>& a) {
  NDArray<T> out = a.value();
  for (auto& v : out.data()) {
    if (!(v > T{0})) throw DomainError("log of non-positive value " + std::to_string(v));
    v = std::log(v);
  }
  auto an = a.node();
  return detail::make_result<T>(std::move(out), "log", a.requires_grad(),
                                [an](detail::Node<T>&, const NDArray<T>& g) {
                                  NDArray<T> d = g;
                                  for (std::size_t i = 0; i < d.numel(); ++i) d[i] /= an->value[i];
                                  detail::accumulate(*an, d);
                                });
}

namespace detail {

template <std::floating_point T>
NDArray<T> softmax_rows(const NDArray<T>& x) {
  NDArray<T> out = x;
  const std::size_t width = x.cols();
  const std::size_t rows = x.numel() / width;
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data().data() + r * width;
    T mx = row[0];
    for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, row[j]);
    T total{0};
    for (std::size_t j = 0; j < width; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (std::size_t j = 0; j < width; ++j) row[j] /= total;
  }
  return out;
}

}  // namespace detail

template <std::floating_point T>
Tensor<T> softmax(const Tensor<T>& a) {
  if (a.value().rank() < 1) throw DimensionError("softmax needs at least one axis");
  NDArray<T> out = detail::softmax_rows(a.value());
  auto an = a.node();
  return detail::make_result<T>(out, "softmax", a.requires_grad(),
                                [an, out](detail::Node<T>&, const NDArray<T>& g) {
                                  const std::size_t width = out.cols();
                                  NDArray<T> d = g;
                                  for (std::size_t r = 0; r < out.numel() / width; ++r) {
                                    T dot{0};
                                    for (std::size_t j = 0; j < width; ++j)
                                      dot += g[r * width + j] * out[r * width + j];
                                    for (std::size_t j = 0; j < width; ++j) {
                                      const std::size_t i = r * width + j;
                                      d[i] = out[i] * (g[i] - dot);
                                    }
                                  }
                                  detail::accumulate(*an, d);
                                });
}

template <std::floating_point T>
Tensor<T> unary(UnaryOp op, const Tensor<T>& a) {
  switch (op) {
    case UnaryOp::sum: return sum(a);
    case UnaryOp::mean: return mean(a);
    case UnaryOp::relu: return relu(a);
    case UnaryOp::gelu: return gelu(a);
    case UnaryOp::softmax_lastaxis: return softmax(a);
    case UnaryOp::exp: return exp(a);
    case UnaryOp::log: return log(a);
  }
  throw ContractError("unknown unary op");
}

// ---------------------------------------------------------------------------
// Normalization, sequence manipulation, loss

inline constexpr double kLayerNormEpsilon = 1e-5;

// Per-row normalization over the last axis, then gain/bias. Rows whose
// variance is below kLayerNormEpsilon normalize to zeros.
template <std::floating_point T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  if (x.value().rank() < 1 || x.numel() == 0) throw DimensionError("layer_norm on an empty axis");
  const std::size_t width = x.value().cols();
  if (gain.shape() != Shape{width} || bias.shape() != Shape{width}) {
    throw DimensionError("layer_norm input " + shape_string(x.shape()) + " with gain " +
                         shape_string(gain.shape()) + " and bias " + shape_string(bias.shape()));
  }
  const std::size_t rows = x.numel() / width;
  NDArray<T> xhat(x.shape());
  std::vector<T> inv_std(rows, T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.value().data().data() + r * width;
    T mu{0};
    for (std::size_t j = 0; j < width; ++j) mu += row[j];
    mu /= static_cast<T>(width);
    T var{0};
    for (std::size_t j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(width);
    if (var < static_cast<T>(kLayerNormEpsilon)) continue;
    inv_std[r] = T{1} / std::sqrt(var);
    for (std::size_t j = 0; j < width; ++j) xhat[r * width + j] = (row[j] - mu) * inv_std[r];
  }
  NDArray<T> out = xhat;
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = out[i] * gain.value()[i % width] + bias.value()[i % width];

  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return detail::make_result<T>(
      std::move(out), "layer_norm", detail::any_requires_grad<T>({&x, &gain, &bias}),
      [xn, gn, bn, xhat, inv_std, width, rows](detail::Node<T>&, const NDArray<T>& g) {
        if (gn->requires_grad) {
          NDArray<T> dg(Shape{width});
          for (std::size_t i = 0; i < g.numel(); ++i) dg[i % width] += g[i] * xhat[i];
          detail::accumulate(*gn, dg);
        }
        if (bn->requires_grad) detail::accumulate(*bn, detail::reduce_to_trailing(g, width));
        if (xn->requires_grad) {
          NDArray<T> dx(xn->value.shape());
          for (std::size_t r = 0; r < rows; ++r) {
            if (inv_std[r] == T{0}) continue;
            T mean_g{0}, mean_gx{0};
            for (std::size_t j = 0; j < width; ++j) {
              const std::size_t i = r * width + j;
              const T gx = g[i] * gn->value[j];
              mean_g += gx;
              mean_gx += gx * xhat[i];
            }
            mean_g /= static_cast<T>(width);
            mean_gx /= static_cast<T>(width);
            for (std::size_t j = 0; j < width; ++j) {
              const std::size_t i = r * width + j;
              dx[i] = inv_std[r] * (g[i] * gn->value[j] - mean_g - xhat[i] * mean_gx);
            }
          }
          detail::accumulate(*xn, dx);
        }
      });
}

/// Stack rows of a [r1×d] on top of b [r2×d].
template <std::floating_point T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "concat_rows");
  detail::require_rank(b, 2, "concat_rows");
  if (a.shape()[1] != b.shape()[1]) {
    throw DimensionError("concat_rows " + shape_string(a.shape()) + " with " + shape_string(b.shape()));
  }
  const std::size_t ra = a.shape()[0], rb = b.shape()[0], d = a.shape()[1];
  std::vector<T> data(a.value().values());
  data.insert(data.end(), b.value().values().begin(), b.value().values().end());
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(
      NDArray<T>(Shape{ra + rb, d}, std::move(data)), "concat_rows", detail::any_requires_grad<T>({&a, &b}),
      [an, bn, ra, rb, d](detail::Node<T>&, const NDArray<T>& g) {
        const auto gd = g.values();
        if (an->requires_grad)
          detail::accumulate(*an, NDArray<T>(Shape{ra, d}, std::vector<T>(gd.begin(), gd.begin() + ra * d)));
        if (bn->requires_grad)
          detail::accumulate(*bn, NDArray<T>(Shape{rb, d}, std::vector<T>(gd.begin() + ra * d, gd.end())));
      });
}

/// Stack a list of [rᵢ×d] matrices row-wise.
template <std::floating_point T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of an empty list");
  const std::size_t d = parts[0].value().cols();
  std::vector<T> data;
  std::vector<detail::NodePtr<T>> nodes;
  std::vector<std::size_t> rows;
  bool needs = false;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_rows");
    if (p.shape()[1] != d) {
      throw DimensionError("concat_rows " + shape_string(parts[0].shape()) + " with " + shape_string(p.shape()));
    }
    data.insert(data.end(), p.value().values().begin(), p.value().values().end());
    nodes.push_back(p.node());
    rows.push_back(p.shape()[0]);
    needs = needs || p.requires_grad();
  }
  const std::size_t total = data.size() / d;
  return detail::make_result<T>(NDArray<T>(Shape{total, d}, std::move(data)), "concat_rows", needs,
                                [nodes, rows, d](detail::Node<T>&, const NDArray<T>& g) {
                                  std::size_t offset = 0;
                                  for (std::size_t i = 0; i < nodes.size(); ++i) {
                                    const std::size_t n = rows[i] * d;
                                    if (nodes[i]->requires_grad) {
                                      auto first = g.values().begin() + static_cast<std::ptrdiff_t>(offset);
                                      detail::accumulate(*nodes[i], NDArray<T>(Shape{rows[i], d}, std::vector<T>(first, first + static_cast<std::ptrdiff_t>(n))));
                                    }
                                    offset += n;
                                  }
                                });
}

/// Rows [begin, end) of a matrix.
template <std::floating_point T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  detail::require_rank(a, 2, "slice_rows");
  if (begin > end || end > a.shape()[0]) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") of " + shape_string(a.shape()));
  }
  const std::size_t d = a.shape()[1];
  const auto& src = a.value().values();
  auto an = a.node();
  return detail::make_result<T>(
      NDArray<T>(Shape{end - begin, d}, std::vector<T>(src.begin() + begin * d, src.begin() + end * d)),
      "slice_rows", a.requires_grad(), [an, begin, d](detail::Node<T>&, const NDArray<T>& g) {
        NDArray<T> full(an->value.shape());
        std::copy(g.data().begin(), g.data().end(), full.data().begin() + begin * d);
        detail::accumulate(*an, full);
      });
}

/// Mean softmax cross-entropy of logits [batch×classes] against integer labels,
/// stabilized with log-sum-exp.
template <std::floating_point T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy got " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(batch) + " rows");
  }
  NDArray<T> probs = detail::softmax_rows(logits.value());
  T loss{0};
  for (std::size_t i = 0; i < batch; ++i) {
    if (labels[i] >= classes) throw DataError("label " + std::to_string(labels[i]) + " out of range");
    const T* row = logits.value().data().data() + i * classes;
    T mx = row[0];
    for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
    T total{0};
    for (std::size_t j = 0; j < classes; ++j) total += std::exp(row[j] - mx);
    loss += mx + std::log(total) - row[labels[i]];
  }
  loss /= static_cast<T>(batch);
  std::vector<std::size_t> y(labels.begin(), labels.end());
  auto ln = logits.node();
  return detail::make_result<T>(NDArray<T>::scalar(loss), "cross_entropy", logits.requires_grad(),
                                [ln, probs, y, batch, classes](detail::Node<T>&, const NDArray<T>& g) {
                                  NDArray<T> d = probs;
                                  for (std::size_t i = 0; i < batch; ++i) d(i, y[i]) -= T{1};
                                  const T s = g.item() / static_cast<T>(batch);
                                  for (auto& v : d.data()) v *= s;
                                  detail::accumulate(*ln, d);
                                });
}

}  // namespace sanpeft

#endif  // SANPEFT_TENSOR_HPP
