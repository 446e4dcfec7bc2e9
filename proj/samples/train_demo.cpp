// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0
//
// Fine-tune the shifted-Gaussians preset with linear probing, SSF and SAN and
// print the final held-out accuracy of each.

#include <sanpeft/sanpeft.hpp>

#include <cstdio>

using namespace sanpeft;

int main() {
  TrainConfig config = load_config("shifted_gaussians", {});
  const DatasetHandle data = build_dataset(config);

  for (const MethodSpec& method : {MethodSpec::linear_probe(), MethodSpec::ssf(), MethodSpec::san()}) {
    config.method = method;
    const auto run = train<double>(config, data);
    const auto& m = run.metrics;
    std::printf("%-28s epoch0 %.3f  final %.3f  trainable %zu (%.2f%%)\n", method.label().c_str(),
                m.init_eval.accuracy, m.final_eval_accuracy(), m.params.trainable, 100.0 * m.params.ratio());
  }
  return 0;
}
