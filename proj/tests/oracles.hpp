// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reference computations for tests. Everything here is written as plain scalar
// loops over NDArray storage and never calls the library's tensor ops.

#ifndef SANPEFT_TESTS_ORACLES_HPP
#define SANPEFT_TESTS_ORACLES_HPP

#include <sanpeft/ndarray.hpp>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include <cmath>
#include <random>
#include <vector>

namespace oracle {

using sanpeft::NDArray;
using sanpeft::Shape;

inline NDArray<double> random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  NDArray<double> m(Shape{r, c});
  for (auto& v : m.data()) v = u(rng);
  return m;
}

inline NDArray<double> random_vector(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  NDArray<double> m(Shape{n});
  for (auto& v : m.data()) v = u(rng);
  return m;
}

// Triple loop in i-j-k order.
inline NDArray<double> matmul(const NDArray<double>& a, const NDArray<double>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  NDArray<double> c(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  return c;
}

// y[r][o] = Σ_i x[r][i] W[o][i] + b[o]
inline NDArray<double> linear(const NDArray<double>& w, const NDArray<double>& b, const NDArray<double>& x) {
  NDArray<double> y(Shape{x.dim(0), w.dim(0)});
  for (std::size_t r = 0; r < x.dim(0); ++r)
    for (std::size_t o = 0; o < w.dim(0); ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < w.dim(1); ++i) s += x(r, i) * w(o, i);
      y(r, o) = s;
    }
  return y;
}

inline NDArray<double> linear_nobias(const NDArray<double>& w, const NDArray<double>& x) {
  return linear(w, NDArray<double>(Shape{w.dim(0)}), x);
}

// Softmax in 50-digit binary floating point, rounded to double.
inline std::vector<double> softmax_high_precision(const std::vector<double>& x) {
  using hp = boost::multiprecision::cpp_bin_float_50;
  std::vector<hp> e;
  hp total = 0;
  for (double v : x) {
    e.push_back(boost::multiprecision::exp(hp(v)));
    total += e.back();
  }
  std::vector<double> out;
  for (const auto& v : e) out.push_back(static_cast<double>(v / total));
  return out;
}

// Single-head attention, one scalar at a time.
inline NDArray<double> attention(const NDArray<double>& wq, const NDArray<double>& wk, const NDArray<double>& wv,
                                 const NDArray<double>& x) {
  const std::size_t n = x.dim(0), d = wq.dim(0);
  const NDArray<double> q = linear_nobias(wq, x), k = linear_nobias(wk, x), v = linear_nobias(wv, x);
  NDArray<double> out(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> logits(n);
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) s += q(i, c) * k(j, c);
      logits[j] = s / std::sqrt(static_cast<double>(d));
    }
    double mx = logits[0];
    for (double l : logits) mx = std::max(mx, l);
    double total = 0;
    for (double& l : logits) {
      l = std::exp(l - mx);
      total += l;
    }
    for (std::size_t c = 0; c < d; ++c) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) s += logits[j] / total * v(j, c);
      out(i, c) = s;
    }
  }
  return out;
}

// y'[r][c] = γ[c]·y[r][c] + β[c]
inline NDArray<double> scale_shift(const NDArray<double>& gamma, const NDArray<double>& beta,
                                   const NDArray<double>& y) {
  NDArray<double> out = y;
  const std::size_t d = gamma.numel();
  for (std::size_t i = 0; i < y.numel(); ++i) out[i] = gamma[i % d] * y[i] + beta[i % d];
  return out;
}

// W with column j multiplied by s[j].
inline NDArray<double> scale_columns(const NDArray<double>& w, const NDArray<double>& s) {
  NDArray<double> out = w;
  for (std::size_t i = 0; i < w.dim(0); ++i)
    for (std::size_t j = 0; j < w.dim(1); ++j) out(i, j) = w(i, j) * s[j];
  return out;
}

inline double row_mean(const NDArray<double>& m, std::size_t r) {
  double s = 0;
  for (std::size_t c = 0; c < m.dim(1); ++c) s += m(r, c);
  return s / static_cast<double>(m.dim(1));
}

inline double row_variance(const NDArray<double>& m, std::size_t r) {
  const double mu = row_mean(m, r);
  double s = 0;
  for (std::size_t c = 0; c < m.dim(1); ++c) s += (m(r, c) - mu) * (m(r, c) - mu);
  return s / static_cast<double>(m.dim(1));
}

}  // namespace oracle

#endif  // SANPEFT_TESTS_ORACLES_HPP
