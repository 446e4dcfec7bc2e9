// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0
//
// Attach SAN adapters to a small linear chain, move them off identity, fold
// them into the weights and audit the merged model against the adapted one.

#include <sanpeft/sanpeft.hpp>

#include <cstdio>
#include <random>

using namespace sanpeft;

int main() {
  const ModelSpec spec = ModelSpec::mlp_chain({6, 8, 8, 3}, Activation::identity);
  const ModelState<double> base = init_model<double>(spec, 7);
  AdapterSet<double> adapters = AdapterSet<double>::create(spec, MethodSpec::san(), 0);

  std::mt19937_64 rng(11);
  std::normal_distribution<double> noise(0.0, 0.2);
  for (auto& [name, t] : adapters.named_parameters()) {
    NDArray<double> v = t.value();
    for (auto& x : v.data()) x += noise(rng);
    t.assign(std::move(v));
  }

  const ModelState<double> merged = merge_model(base, adapters);
  const MergeReport report = audit_merge(base, &adapters, merged, 0);

  std::printf("adapter parameters: %zu\n", adapters.parameter_count());
  for (const auto& l : report.layers) std::printf("  %-10s max |dev| %.3e\n", l.point.c_str(), l.max_abs_dev);
  std::printf("output max |dev| %.3e over %zu probes: %s\n", report.output_max_abs_dev, report.probe_count,
              report.verdict.c_str());
  return report.passed() ? 0 : 2;
}
