// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SANPEFT_NDARRAY_HPP
#define SANPEFT_NDARRAY_HPP

#include <sanpeft/errors.hpp>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace sanpeft {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

// Dense row-major array. Rank 0 is a scalar holding one value. Every extent
// must be positive except that a rank-2 array may have zero rows (an empty
// prompt block, for instance).
template <std::floating_point T>
class NDArray {
 public:
  using value_type = T;

  NDArray() : shape_{}, data_(1, T{0}) {}

  explicit NDArray(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_numel(shape_), fill);
  }

  NDArray(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_numel(shape_) != data_.size()) {
      throw DimensionError("shape " + shape_string(shape_) + " needs " +
                           std::to_string(shape_numel(shape_)) + " values, got " +
                           std::to_string(data_.size()));
    }
  }

  static NDArray scalar(T v) { return NDArray(Shape{}, std::vector<T>{v}); }

  static NDArray vector(std::initializer_list<T> values) {
    return NDArray(Shape{values.size()}, std::vector<T>(values));
  }

  static NDArray vector(std::vector<T> values) {
    const std::size_t n = values.size();
    return NDArray(Shape{n}, std::move(values));
  }

  static NDArray matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return NDArray(Shape{r, c}, std::move(data));
  }

  static NDArray zeros(Shape shape) { return NDArray(std::move(shape), T{0}); }
  static NDArray ones(Shape shape) { return NDArray(std::move(shape), T{1}); }

  static NDArray identity(std::size_t n) {
    NDArray out(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) out(i, i) = T{1};
    return out;
  }

  template <class Rng>
  static NDArray randn(Shape shape, Rng& rng, T stddev = T{1}, T mean = T{0}) {
    NDArray out(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : out.data_) v = static_cast<T>(mean + stddev * dist(rng));
    return out;
  }

  template <std::floating_point U>
  [[nodiscard]] NDArray<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return NDArray<U>(shape_, std::move(out));
  }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t numel() const noexcept { return data_.size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  [[nodiscard]] std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  [[nodiscard]] std::size_t cols() const { return rank() == 0 ? 1 : shape_.back(); }

  [[nodiscard]] std::span<T> data() noexcept { return data_; }
  [[nodiscard]] std::span<const T> data() const noexcept { return data_; }
  [[nodiscard]] const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

  [[nodiscard]] T item() const {
    if (data_.size() != 1) throw ContractError("item() on array of shape " + shape_string(shape_));
    return data_[0];
  }

  [[nodiscard]] bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  [[nodiscard]] NDArray reshaped(Shape shape) const { return NDArray(std::move(shape), data_); }

  bool operator==(const NDArray& other) const = default;

 private:
  void check_extents() const {
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (shape_[i] == 0 && !(shape_.size() == 2 && i == 0)) {
        throw DimensionError("zero extent in shape " + shape_string(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

template <std::floating_point T>
T max_abs_diff(const NDArray<T>& a, const NDArray<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("cannot compare " + shape_string(a.shape()) + " with " +
                         shape_string(b.shape()));
  }
  T m{0};
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace sanpeft

#endif  // SANPEFT_NDARRAY_HPP
