// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <sanpeft/adapters.hpp>
#include <sanpeft/gradcheck.hpp>
#include <sanpeft/reparam.hpp>

#include "oracles.hpp"

#include <random>

using namespace sanpeft;
using A = NDArray<double>;
using Tn = Tensor<double>;

namespace {

void perturb(AdapterSet<double>& set, std::uint64_t seed, double stddev = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, stddev);
  for (auto& [name, t] : set.named_parameters()) {
    A v = t.value();
    for (auto& x : v.data()) x += n(rng);
    t.assign(std::move(v));
  }
}

Tn param(const A& v) { return Tn::parameter(v); }

std::vector<MethodSpec> all_methods(bool vit) {
  std::vector<MethodSpec> out{MethodSpec::full(),    MethodSpec::linear_probe(), MethodSpec::bitfit(),
                              MethodSpec::lora(2),   MethodSpec::ssf(),          MethodSpec::san(),
                              MethodSpec::san(true, false), MethodSpec::san(false, true)};
  if (vit) out.push_back(MethodSpec::vpt(0));
  return out;
}

}  // namespace

TEST_CASE("ssf_apply examples", "[adapters][ssf]") {
  std::mt19937_64 rng(1);
  const A y = oracle::random_matrix(rng, 4, 3);
  CHECK(ssf_apply(ScaleShift<double>::identity(3), Tn(y)).value() == y);
  CHECK(ssf_apply(ScaleShift<double>{param(A::vector({2})), param(A::vector({3}))}, Tn(A::matrix({{5}}))).value() ==
        A::matrix({{13}}));
  for (int trial = 0; trial < 20; ++trial) {
    const A g = oracle::random_vector(rng, 6), b = oracle::random_vector(rng, 6), x = oracle::random_matrix(rng, 5, 6);
    CHECK(max_abs_diff(ssf_apply(ScaleShift<double>{param(g), param(b)}, Tn(x)).value(),
                       oracle::scale_shift(g, b, x)) < 1e-12);
  }
}

TEST_CASE("ssf_apply gradients reach only gamma and beta", "[adapters][ssf]") {
  ScaleShift<double> a = ScaleShift<double>::identity(3);
  const Tn y(A::matrix({{1, 2, 3}, {4, 5, 6}}));
  Tape<double> tape;
  Tn loss;
  {
    auto rec = tape.record();
    loss = sum(ssf_apply(a, y));
  }
  backward(loss);
  CHECK(a.gamma.grad() == A::vector({5, 7, 9}));
  CHECK(a.beta.grad() == A::vector({2, 2, 2}));
  CHECK_FALSE(y.has_grad());
}

TEST_CASE("ssf_apply rejects a channel mismatch", "[adapters][ssf][errors]") {
  REQUIRE_THROWS_AS(ssf_apply(ScaleShift<double>::identity(3), Tn(A(Shape{2, 4}))), DimensionError);
}

TEST_CASE("lora_apply examples", "[adapters][lora]") {
  std::mt19937_64 rng(2);
  const A x = oracle::random_matrix(rng, 3, 4), base = oracle::random_matrix(rng, 3, 5);
  const auto fresh = LoraPair<double>::init(4, 5, 2, Activation::identity, rng);
  CHECK(lora_apply(fresh, Tn(x), Tn(base)).value() == base);

  const LoraPair<double> pair{param(A::matrix({{1, 0}})), param(A::matrix({{1}, {0}})), Activation::identity};
  CHECK(lora_apply(pair, Tn(A::matrix({{3, 9}})), Tn(A::zeros({1, 2}))).value() == A::matrix({{3, 0}}));

  for (int trial = 0; trial < 20; ++trial) {
    const A down = oracle::random_matrix(rng, 2, 4), up = oracle::random_matrix(rng, 5, 2);
    const LoraPair<double> p{param(down), param(up), Activation::relu};
    A hidden = oracle::linear_nobias(down, x);
    for (auto& v : hidden.data()) v = std::max(v, 0.0);
    A expected = oracle::linear_nobias(up, hidden);
    for (std::size_t i = 0; i < expected.numel(); ++i) expected[i] += base[i];
    CHECK(max_abs_diff(lora_apply(p, Tn(x), Tn(base)).value(), expected) < 1e-12);
  }
}

TEST_CASE("lora rank must fit the layer", "[adapters][lora][errors]") {
  std::mt19937_64 rng(0);
  REQUIRE_THROWS_AS(LoraPair<double>::init(4, 3, 4, Activation::identity, rng), ConfigError);
  REQUIRE_THROWS_AS(LoraPair<double>::init(4, 3, 0, Activation::identity, rng), ConfigError);
  REQUIRE_THROWS_AS(AdapterSet<double>::create(ModelSpec::vit(VitShape{}), MethodSpec::lora(17)), ConfigError);
}

TEST_CASE("vpt_concat examples", "[adapters][vpt]") {
  std::mt19937_64 rng(3);
  const A x = oracle::random_matrix(rng, 5, 16);
  CHECK(vpt_concat(PromptBlock<double>{param(A(Shape{0, 16}))}, Tn(x)).value() == x);

  const ModelSpec spec = ModelSpec::vit(VitShape{});
  auto set = AdapterSet<double>::create(spec, MethodSpec::vpt(1), 0);
  set.prompts()->tokens.assign(A::zeros({1, 16}));
  AdapterHooks<double> hooks(spec, &set);
  CHECK(hooks.tokens(Tn(x)).shape() == Shape{spec.vit_shape().tokens() + 1, 16});
  const auto model = init_model<double>(spec, 0);
  CHECK(adapted_forward(model, &set, Tn(A::randn({2, 16}, rng))).shape() == Shape{2, 4});

  const A prompts = oracle::random_matrix(rng, 2, 16);
  const A seq = vpt_concat(PromptBlock<double>{param(prompts)}, Tn(x)).value();
  REQUIRE(seq.shape() == Shape{7, 16});
  const A wq = oracle::random_matrix(rng, 16, 16), wk = oracle::random_matrix(rng, 16, 16);
  const A q = oracle::linear_nobias(wq, seq), k = oracle::linear_nobias(wk, seq);
  const A p = softmax(scale(matmul(Tn(q), transpose(Tn(k))), 0.25)).value();
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) s += p(r, c);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("vpt_concat rejects a width mismatch", "[adapters][vpt][errors]") {
  REQUIRE_THROWS_AS(vpt_concat(PromptBlock<double>{param(A(Shape{1, 8}))}, Tn(A(Shape{5, 16}))), DimensionError);
  REQUIRE_THROWS_AS(AdapterSet<double>::create(ModelSpec::mlp_chain({2, 3}), MethodSpec::vpt(1)), ConfigError);
}

TEST_CASE("recalibrate examples", "[adapters][recal]") {
  auto a = SanAdapter<double>::identity(2, true, true, true);
  a.gamma.assign(A::vector({2, 3}));
  CHECK(recalibrate(a).value() == A::vector({2, 3}));
  a.recal_scale->assign(A::vector({1, 0}));
  a.recal_shift->assign(A::vector({0, 5}));
  CHECK(recalibrate(a).value() == A::vector({2, 5}));

  auto full = SanAdapter<double>::identity(2, true, true, true, RecalMode::full);
  full.gamma.assign(A::vector({2, 3}));
  full.recal_scale->assign(A::matrix({{0, 1}, {1, 1}}));
  CHECK(recalibrate(full).value() == A::vector({3, 5}));
}

TEST_CASE("recalibrate gradients match finite differences", "[adapters][recal][gradcheck]") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = SanAdapter<double>::identity(5, true, true, true);
    a.gamma.assign(oracle::random_vector(rng, 5, 0.5, 1.5));
    a.recal_scale->assign(oracle::random_vector(rng, 5, 0.5, 1.5));
    a.recal_shift->assign(oracle::random_vector(rng, 5));
    const A w = oracle::random_vector(rng, 5);
    auto loss = [&] { return sum(mul(exp(recalibrate(a)), Tn(w))); };
    const auto report = check_gradients<double>(loss, {*a.recal_scale, *a.recal_shift, a.gamma});
    CHECK(report.max_relative_error < 1e-4);
  }
}

TEST_CASE("recalibrate without parameters is rejected", "[adapters][recal][errors]") {
  const auto a = SanAdapter<double>::identity(3, true, false, true);
  REQUIRE_THROWS_AS(recalibrate(a), ConfigError);
  auto bad = SanAdapter<double>::identity(3, true, true, true);
  bad.recal_scale = Tn::parameter(A::vector({1, 1}));
  REQUIRE_THROWS_AS(recalibrate(bad), DimensionError);
}

TEST_CASE("identity at initialization for every method", "[adapters][identity][property]") {
  std::mt19937_64 rng(5);
  for (const auto& spec : {ModelSpec::mlp_chain({3, 8, 8, 4}), ModelSpec::vit(VitShape{8, 2, 3, 3})}) {
    const auto model = init_model<double>(spec, 1);
    const Tn x(A::randn({6, spec.input_dim()}, rng));
    const A base = forward(model, x).value();
    for (const auto& m : all_methods(spec.arch() == ArchKind::vit)) {
      const auto set = AdapterSet<double>::create(spec, m, 3);
      INFO(m.label());
      CHECK(adapted_forward(model, &set, x).value() == base);
    }
  }
}

TEST_CASE("vpt with prompts changes the function", "[adapters][vpt]") {
  const ModelSpec spec = ModelSpec::vit(VitShape{8, 2, 3, 3});
  const auto model = init_model<double>(spec, 1);
  std::mt19937_64 rng(6);
  const Tn x(A::randn({2, spec.input_dim()}, rng));
  const auto set = AdapterSet<double>::create(spec, MethodSpec::vpt(2), 3);
  CHECK(max_abs_diff(adapted_forward(model, &set, x).value(), forward(model, x).value()) > 0.0);
}

TEST_CASE("san_forward two-layer linear chain equals the closed form", "[adapters][san]") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const ModelSpec spec = ModelSpec::mlp_chain({4, 5, 3}, Activation::identity);
    auto model = init_model<double>(spec, trial);
    model.set("fc0.weight", oracle::random_matrix(rng, 5, 4));
    model.set("fc1.weight", oracle::random_matrix(rng, 3, 5));
    model.set("fc1.bias", oracle::random_vector(rng, 3));
    auto set = AdapterSet<double>::create(spec, MethodSpec::san(), 0);
    const A g = oracle::random_vector(rng, 5, 0.5, 2.0), g_next = oracle::random_vector(rng, 3, 0.5, 2.0);
    set.san().at("fc0.out").gamma.assign(g);
    set.san().at("fc1.out").gamma.assign(g_next);

    const A x = oracle::random_matrix(rng, 8, 4);
    const A hidden = oracle::linear(model.param("fc0.weight").value(), model.param("fc0.bias").value(), x);
    const A expected = two_layer_closed_form(model.param("fc1.weight").value(), model.param("fc1.bias").value(),
                                             hidden, g, g_next);
    CHECK(max_abs_diff(san_forward(set, model, Tn(x)).value(), expected) < 1e-10);
  }
}

TEST_CASE("san propagation-only matches a materialized weight", "[adapters][san]") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const ModelSpec spec = ModelSpec::mlp_chain({4, 6, 3}, Activation::relu);
    const auto model = init_model<double>(spec, trial);
    auto set = AdapterSet<double>::create(spec, MethodSpec::san(false, true), 0);
    auto& a = set.san().at("fc0.out");
    a.gamma.assign(oracle::random_vector(rng, 6, 0.5, 2.0));
    a.recal_scale->assign(oracle::random_vector(rng, 6, 0.5, 2.0));
    a.recal_shift->assign(oracle::random_vector(rng, 6, -0.5, 0.5));

    A gp(Shape{6});
    for (std::size_t i = 0; i < 6; ++i) gp[i] = (*a.recal_scale).value()[i] * a.gamma.value()[i] + (*a.recal_shift).value()[i];
    auto materialized = model.clone();
    materialized.set("fc1.weight", oracle::scale_columns(model.param("fc1.weight").value(), gp));

    const Tn x(oracle::random_matrix(rng, 7, 4));
    CHECK(max_abs_diff(san_forward(set, model, x).value(), forward(materialized, x).value()) < 1e-12);
  }
}

TEST_CASE("san without propagation equals ssf", "[adapters][san][property]") {
  std::mt19937_64 rng(9);
  for (const auto& spec : {ModelSpec::mlp_chain({3, 7, 7, 2}), ModelSpec::vit(VitShape{8, 2, 3, 3})}) {
    const auto model = init_model<double>(spec, 2);
    auto ssf = AdapterSet<double>::create(spec, MethodSpec::ssf(), 0);
    auto san = AdapterSet<double>::create(spec, MethodSpec::san(true, false), 0);
    perturb(ssf, 10);
    for (auto& [id, a] : san.san()) {
      a.gamma.assign(ssf.ssf().at(id).gamma.value());
      a.beta.assign(ssf.ssf().at(id).beta.value());
    }
    const Tn x(A::randn({4, spec.input_dim()}, rng));
    CHECK(adapted_forward(model, &san, x).value() == adapted_forward(model, &ssf, x).value());
  }
}

TEST_CASE("gradients populate adapters and skip frozen weights", "[adapters][property]") {
  std::mt19937_64 rng(10);
  for (const auto& spec : {ModelSpec::mlp_chain({3, 7, 7, 2}), ModelSpec::vit(VitShape{8, 2, 3, 3})}) {
    for (const auto& m : {MethodSpec::ssf(), MethodSpec::san(), MethodSpec::lora(2)}) {
      auto model = init_model<double>(spec, 2);
      configure_trainable(model, m.kind == MethodKind::san ? MethodSpec(m).without_head() : m);
      auto set = AdapterSet<double>::create(spec, m, 0);
      perturb(set, 11);
      const Tn x(A::randn({3, spec.input_dim()}, rng));
      Tape<double> tape;
      Tn loss;
      {
        auto rec = tape.record();
        loss = sum(mul(adapted_forward(model, &set, x), adapted_forward(model, &set, x)));
      }
      backward(loss);
      INFO(m.label());
      for (const auto& [name, t] : set.named_parameters()) {
        INFO(name);
        CHECK(t.has_grad());
      }
      for (const auto& [name, t] : model.params()) {
        if (!t.requires_grad()) CHECK_FALSE(t.has_grad());
      }
    }
  }
}

TEST_CASE("quadratic propagation on a bias-free linear chain", "[adapters][san][property]") {
  std::mt19937_64 rng(12);
  const ModelSpec spec = ModelSpec::mlp_chain({3, 4, 2}, Activation::identity);
  for (int trial = 0; trial < 10; ++trial) {
    auto model = init_model<double>(spec, trial);
    model.set("fc0.weight", oracle::random_matrix(rng, 4, 3));
    model.set("fc1.weight", oracle::random_matrix(rng, 2, 4));
    auto set = AdapterSet<double>::create(spec, MethodSpec::san(), 0);
    const A x = oracle::random_matrix(rng, 1, 3), c = oracle::random_matrix(rng, 1, 2);
    const A x1 = oracle::linear_nobias(model.param("fc0.weight").value(), x);
    const A& w1 = model.param("fc1.weight").value();

    // d/dγ_j Σ_i c_i Σ_j γ_j² W_ij x_j at γ = 1 is 2 Σ_i c_i W_ij x_j.
    A analytic(Shape{4});
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t i = 0; i < 2; ++i) analytic[j] += 2.0 * c[i] * w1(i, j) * x1[j];

    Tn& gamma = set.san().at("fc0.out").gamma;
    auto loss = [&] { return sum(mul(san_forward(set, model, Tn(x)), Tn(c))); };
    const A numeric = finite_diff_grad<double>(
        [&](const A& at) {
          gamma.assign(at);
          return loss().item();
        },
        A::ones({4}));
    gamma.assign(A::ones({4}));
    gamma.zero_grad();
    Tape<double> tape;
    Tn l;
    {
      auto rec = tape.record();
      l = loss();
    }
    backward(l);
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(relative_error(gamma.grad()[j], analytic[j]) < 1e-10);
      CHECK(relative_error(numeric[j], analytic[j]) < 1e-6);
    }
  }
}

TEST_CASE("doubling the recalibrated factor doubles weight columns", "[adapters][san][property]") {
  std::mt19937_64 rng(13);
  const ModelSpec spec = ModelSpec::mlp_chain({3, 5, 2});
  const auto model = init_model<double>(spec, 0);
  auto set = AdapterSet<double>::create(spec, MethodSpec::san(), 0);
  auto& a = set.san().at("fc0.out");
  const A g = oracle::random_vector(rng, 5, 0.5, 2.0);
  a.gamma.assign(g);
  const Tn& w = model.param("fc1.weight");

  AdapterHooks<double> first(spec, &set);
  const A base = first.effective_weight(spec.layer("fc1"), w).value();
  A doubled_gamma = g;
  for (auto& v : doubled_gamma.data()) v *= 2.0;
  a.gamma.assign(doubled_gamma);
  AdapterHooks<double> second(spec, &set);
  const A doubled = second.effective_weight(spec.layer("fc1"), w).value();
  for (std::size_t i = 0; i < base.numel(); ++i) CHECK(doubled[i] == 2.0 * base[i]);
}

TEST_CASE("non-finite effective weights are rejected", "[adapters][san][errors]") {
  const ModelSpec spec = ModelSpec::mlp_chain({3, 5, 2});
  const auto model = init_model<double>(spec, 0);
  auto set = AdapterSet<double>::create(spec, MethodSpec::san(), 0);
  A huge = A::ones({5});
  huge[2] = 1e200;
  set.san().at("fc0.out").gamma.assign(huge);
  set.san().at("fc0.out").recal_scale->assign(huge);
  REQUIRE_THROWS_AS(san_forward(set, model, Tn(A::ones({1, 3}))), NumericError);
}

TEST_CASE("adapter sets must cover every attach point", "[adapters][errors]") {
  const ModelSpec spec = ModelSpec::mlp_chain({3, 5, 2});
  const auto model = init_model<double>(spec, 0);
  auto set = AdapterSet<double>::create(spec, MethodSpec::san(), 0);
  set.san().erase("fc1.out");
  REQUIRE_THROWS_AS(san_forward(set, model, Tn(A::ones({1, 3}))), ConfigError);
  const auto other = AdapterSet<double>::create(ModelSpec::mlp_chain({3, 6, 2}), MethodSpec::san(), 0);
  REQUIRE_THROWS_AS(adapted_forward(model, &other, Tn(A::ones({1, 3}))), DimensionError);
}
