// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <sanpeft/gradcheck.hpp>
#include <sanpeft/tensor.hpp>

#include "oracles.hpp"

#include <functional>
#include <random>

using namespace sanpeft;
using A = NDArray<double>;
using Tn = Tensor<double>;
using Catch::Matchers::ContainsSubstring;

namespace {

// Runs `f` on a recording tape and backpropagates its result.
Tn run_backward(const std::function<Tn()>& f) {
  Tape<double> tape;
  Tn loss;
  {
    auto rec = tape.record();
    loss = f();
  }
  backward(loss);
  return loss;
}

double max_rel_err(const A& analytic, const A& numeric) {
  double m = 0;
  for (std::size_t i = 0; i < analytic.numel(); ++i) m = std::max(m, relative_error(analytic[i], numeric[i]));
  return m;
}

}  // namespace

TEST_CASE("matmul examples", "[tensor][matmul]") {
  const Tn id(A::identity(2));
  const Tn m(A::matrix({{1, 2}, {3, 4}}));
  CHECK(matmul(id, m).value() == m.value());

  CHECK(matmul(Tn(A::matrix({{1, 2}})), Tn(A::matrix({{3}, {4}}))).value() == A::matrix({{11}}));

  std::mt19937_64 rng(11);
  const A a = oracle::random_matrix(rng, 5, 4), b = oracle::random_matrix(rng, 4, 3);
  CHECK(max_abs_diff(matmul(Tn(a), Tn(b)).value(), oracle::matmul(a, b)) < 1e-12);
}

TEST_CASE("matmul rejects mismatched inner extents", "[tensor][matmul][errors]") {
  REQUIRE_THROWS_AS(matmul(Tn(A(Shape{2, 3})), Tn(A(Shape{2, 3}))), DimensionError);
  REQUIRE_THROWS_WITH(matmul(Tn(A(Shape{2, 3})), Tn(A(Shape{2, 3}))),
                      ContainsSubstring("[2x3]") && ContainsSubstring("matmul"));
}

TEST_CASE("elementwise examples", "[tensor][elementwise]") {
  CHECK(mul(Tn(A::vector({2, 3})), Tn(A::vector({1, 1}))).value() == A::vector({2, 3}));
  CHECK(mul(Tn(A::matrix({{1, 2}, {3, 4}})), Tn(A::vector({10, 100}))).value() == A::matrix({{10, 200}, {30, 400}}));
  CHECK(sub(Tn(A::vector({5, 5})), Tn(A::vector({1, 2}))).value() == A::vector({4, 3}));
  CHECK(add(Tn(A::matrix({{1, 2}, {3, 4}})), Tn(A::vector({1, 1}))).value() == A::matrix({{2, 3}, {4, 5}}));

  SECTION("gradient of sum(a*b) w.r.t. a is b") {
    std::mt19937_64 rng(3);
    const A bv = oracle::random_matrix(rng, 3, 4);
    auto a = Tn::parameter(oracle::random_matrix(rng, 3, 4));
    const Tn b(bv);
    run_backward([&] { return sum(mul(a, b)); });
    CHECK(max_abs_diff(a.grad(), bv) == 0.0);
    const A fd = finite_diff_grad<double>([&](const A& at) { return sum(mul(Tn(at), b)).item(); }, a.value());
    CHECK(max_abs_diff(fd, bv) < 1e-9);
  }

  SECTION("broadcast gradient is reduced over rows") {
    auto v = Tn::parameter(A::vector({1, 2}));
    run_backward([&] { return sum(mul(Tn(A::matrix({{1, 2}, {3, 4}})), v)); });
    CHECK(v.grad() == A::vector({4, 6}));
  }
}

TEST_CASE("elementwise rejects non-broadcastable shapes", "[tensor][elementwise][errors]") {
  CHECK_THROWS_AS(add(Tn(A(Shape{2, 3})), Tn(A(Shape{2}))), DimensionError);
  CHECK_THROWS_AS(mul(Tn(A(Shape{3})), Tn(A(Shape{2, 3}))), DimensionError);
  CHECK_THROWS_AS(elementwise(ElementwiseOp::sub, Tn(A(Shape{2, 2})), Tn(A(Shape{4}))), DimensionError);
}

TEST_CASE("reductions and nonlinearities", "[tensor][unary]") {
  CHECK(softmax(Tn(A::vector({0, 0}))).value() == A::vector({0.5, 0.5}));
  CHECK(relu(Tn(A::vector({-1, 2}))).value() == A::vector({0, 2}));
  CHECK(sum(Tn(A::matrix({{1, 2}, {3, 4}}))).item() == 10.0);
  CHECK(mean(Tn(A::vector({1, 2, 3, 6}))).item() == 3.0);
  CHECK(unary(UnaryOp::exp, Tn(A::vector({0}))).value()[0] == 1.0);
  CHECK(unary(UnaryOp::log, Tn(A::vector({1}))).value()[0] == 0.0);
  CHECK(gelu(Tn(A::vector({0}))).value()[0] == 0.0);

  SECTION("softmax agrees with a 50-digit evaluation") {
    const auto hp = oracle::softmax_high_precision({1, 2, 3});
    const A s = softmax(Tn(A::vector({1, 2, 3}))).value();
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(s[i] - hp[i]) < 1e-12);
  }

  SECTION("log of a non-positive value is a domain error") {
    CHECK_THROWS_AS(log(Tn(A::vector({1, 0}))), DomainError);
    CHECK_THROWS_AS(log(Tn(A::vector({-2}))), DomainError);
  }
}

TEST_CASE("softmax rows sum to one", "[tensor][unary][property]") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const A x = oracle::random_matrix(rng, 4, 7, 20.0);
    const A s = softmax(Tn(x)).value();
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 7; ++c) total += s(r, c);
      REQUIRE(std::abs(total - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("backward examples", "[tensor][backward]") {
  auto x = Tn::parameter(A::vector({4, 5, 6}));
  run_backward([&] { return sum(x); });
  CHECK(x.grad() == A::vector({1, 1, 1}));

  auto y = Tn::parameter(A::vector({1, 2}));
  run_backward([&] { return sum(mul(y, y)); });
  CHECK(y.grad() == A::vector({2, 4}));

  SECTION("repeated backward accumulates until zero_grad") {
    Tape<double> tape;
    Tn loss;
    {
      auto rec = tape.record();
      loss = sum(mul(y, y));
    }
    backward(loss);
    CHECK(y.grad() == A::vector({4, 8}));
    y.zero_grad();
    CHECK_FALSE(y.has_grad());
    backward(loss);
    CHECK(y.grad() == A::vector({2, 4}));
  }

  SECTION("composite MLP loss matches finite differences") {
    std::mt19937_64 rng(17);
    const Tn input(oracle::random_matrix(rng, 6, 3));
    std::vector<Tn> params = {Tn::parameter(oracle::random_matrix(rng, 5, 3)),
                              Tn::parameter(oracle::random_vector(rng, 5)),
                              Tn::parameter(oracle::random_matrix(rng, 2, 5)),
                              Tn::parameter(oracle::random_vector(rng, 2))};
    const std::vector<std::size_t> labels = {0, 1, 1, 0, 1, 0};
    auto loss_fn = [&] {
      Tn h = gelu(linear(input, params[0], params[1]));
      return cross_entropy(linear(h, params[2], params[3]), std::span<const std::size_t>(labels));
    };
    CHECK(check_gradients<double>(loss_fn, params).max_relative_error < 1e-4);
  }
}

TEST_CASE("backward contract errors", "[tensor][backward][errors]") {
  auto x = Tn::parameter(A::vector({1, 2}));
  Tape<double> tape;
  Tn vec;
  {
    auto rec = tape.record();
    vec = mul(x, x);
  }
  CHECK_THROWS_AS(backward(vec), ContractError);
  CHECK_THROWS_AS(backward(Tn(A::scalar(1.0))), ContractError);
  // Without an active tape nothing is recorded.
  const Tn detached = sum(mul(x, x));
  CHECK_FALSE(detached.requires_grad());
  CHECK_THROWS_AS(backward(detached), ContractError);
}

TEST_CASE("finite_diff_grad examples", "[tensor][gradcheck]") {
  std::mt19937_64 rng(23);
  const A x = oracle::random_matrix(rng, 3, 3);
  const A g = finite_diff_grad<double>([](const A& at) { return sum(Tn(at)).item(); }, x);
  for (double v : g.data()) CHECK(std::abs(v - 1.0) < 1e-9);

  const A sq = finite_diff_grad<double>([](const A& at) { return at[0] * at[0]; }, A::vector({3}));
  CHECK(std::abs(sq[0] - 6.0) < 1e-6);

  CHECK_THROWS_AS(
      finite_diff_grad<double>([](const A&) { return std::numeric_limits<double>::infinity(); }, A::vector({1})),
      NumericError);
}

TEST_CASE("every primitive's gradient matches finite differences", "[tensor][gradcheck][property]") {
  std::mt19937_64 rng(29);
  struct Case {
    const char* name;
    std::function<Tn(const Tn&)> f;
    bool positive = false;
  };
  const Tn other(oracle::random_matrix(rng, 3, 4));
  const Tn row(oracle::random_vector(rng, 4));
  const Tn right(oracle::random_matrix(rng, 4, 2));
  const Tn gain(oracle::random_vector(rng, 4, 0.5, 1.5));
  const Tn shift(oracle::random_vector(rng, 4));
  const Tn weights(oracle::random_matrix(rng, 3, 4));  // turns every op into a scalar with mixed weights
  auto weigh = [&](const Tn& y) {
    if (y.shape() == weights.shape()) return sum(mul(y, weights));
    return sum(mul(y, Tn(A(y.shape(), 0.7))));
  };
  const std::vector<std::size_t> labels = {1, 0, 3};
  const std::vector<Case> cases = {
      {"matmul", [&](const Tn& a) { return weigh(matmul(a, right)); }},
      {"linear", [&](const Tn& a) { return weigh(linear(a, transpose(right), Tn(A::vector({0.1, -0.2})))); }},
      {"transpose", [&](const Tn& a) { return weigh(transpose(a)); }},
      {"add", [&](const Tn& a) { return weigh(add(a, other)); }},
      {"sub-broadcast", [&](const Tn& a) { return weigh(sub(other, mul(a, row))); }},
      {"mul", [&](const Tn& a) { return weigh(mul(a, other)); }},
      {"scale", [&](const Tn& a) { return weigh(scale(a, 1.7)); }},
      {"sum", [&](const Tn& a) { return scale(sum(a), 0.3); }},
      {"mean", [&](const Tn& a) { return scale(mean(a), 2.0); }},
      {"relu", [&](const Tn& a) { return weigh(relu(a)); }},
      {"gelu", [&](const Tn& a) { return weigh(gelu(a)); }},
      {"softmax", [&](const Tn& a) { return weigh(softmax(a)); }},
      {"exp", [&](const Tn& a) { return weigh(exp(a)); }},
      {"log", [&](const Tn& a) { return weigh(log(a)); }, true},
      {"layer_norm", [&](const Tn& a) { return weigh(layer_norm(a, gain, shift)); }},
      {"concat/slice", [&](const Tn& a) { return weigh(slice_rows(concat_rows(other, a), 2, 5)); }},
      {"reshape", [&](const Tn& a) { return weigh(reshape(reshape(a, {12}), {3, 4})); }},
      {"cross_entropy", [&](const Tn& a) { return cross_entropy(a, std::span<const std::size_t>(labels)); }},
  };
  for (const auto& c : cases) {
    DYNAMIC_SECTION(c.name) {
      double worst = 0;
      for (int point = 0; point < 100; ++point) {
        A x = c.positive ? oracle::random_vector(rng, 12, 0.2, 3.0).reshaped({3, 4})
                         : oracle::random_matrix(rng, 3, 4, 2.0);
        for (auto& v : x.data()) {
          if (std::abs(v) < 1e-3) v += 0.01;  // keep relu away from its kink
        }
        auto p = Tn::parameter(x);
        run_backward([&] { return c.f(p); });
        const A fd = finite_diff_grad<double>([&](const A& at) { return c.f(Tn(at)).item(); }, x);
        worst = std::max(worst, max_rel_err(p.grad(), fd));
      }
      CHECK(worst < 1e-4);
    }
  }
}

TEST_CASE("backward is linear in the objective", "[tensor][property]") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const A x = oracle::random_matrix(rng, 3, 4);
    const double ca = 1.5, cb = -0.25;
    auto f = [](const Tn& p) { return sum(gelu(p)); };
    auto g = [](const Tn& p) { return sum(softmax(mul(p, p))); };
    auto p1 = Tn::parameter(x), p2 = Tn::parameter(x), p3 = Tn::parameter(x);
    run_backward([&] { return add(scale(f(p1), ca), scale(g(p1), cb)); });
    run_backward([&] { return f(p2); });
    run_backward([&] { return g(p3); });
    const A combined = p1.grad();
    const A gf = p2.grad(), gg = p3.grad();
    for (std::size_t i = 0; i < combined.numel(); ++i) REQUIRE(std::abs(combined[i] - (ca * gf[i] + cb * gg[i])) < 1e-10);
  }
}

TEST_CASE("identical seeds give bitwise-identical results", "[tensor][property]") {
  auto run = [] {
    std::mt19937_64 rng(99);
    auto w = Tn::parameter(A::randn({4, 3}, rng));
    const Tn x(A::randn({5, 3}, rng));
    run_backward([&] { return sum(softmax(linear(x, w))); });
    return std::pair{linear(x, w).value(), w.grad()};
  };
  CHECK(run() == run());
}

TEST_CASE("non-finite values are rejected", "[tensor][errors]") {
  CHECK_THROWS_AS(Tn(A::vector({1, std::numeric_limits<double>::quiet_NaN()})), NumericError);
  CHECK_THROWS_AS(exp(Tn(A::vector({1000}))), NumericError);
}

TEST_CASE("layer norm guards zero-variance rows", "[tensor][layernorm]") {
  const Tn ones(A::ones({2})), zeros(A::zeros({2}));
  CHECK(layer_norm(Tn(A::matrix({{3, 3}})), ones, zeros).value() == A::matrix({{0, 0}}));
  CHECK(layer_norm(Tn(A::matrix({{1, -1}})), ones, zeros).value() == A::matrix({{1, -1}}));
}

TEST_CASE("float32 tensors use the same code paths", "[tensor][f32]") {
  using F = NDArray<float>;
  auto w = Tensor<float>::parameter(F::vector({1.f, 2.f}));
  Tape<float> tape;
  Tensor<float> loss;
  {
    auto rec = tape.record();
    loss = sum(mul(w, w));
  }
  backward(loss);
  CHECK(w.grad() == F::vector({2.f, 4.f}));
}
