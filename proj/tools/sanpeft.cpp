// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Exit codes: 0 success, 1 configuration or input
// error, 2 numeric or verification failure.

#include <sanpeft/sanpeft.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace sanpeft;

namespace {

constexpr double kGradcheckTolerance = 1e-4;

fs::path output_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("SANPEFT_OUTPUT_DIR"); env && *env) return env;
  return "sanpeft-out";
}

std::vector<std::size_t> parse_dims(const std::string& text) {
  std::vector<std::size_t> dims;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) {
    try {
      std::size_t used = 0;
      const auto v = std::stoul(part, &used);
      if (used != part.size() || v == 0) throw std::invalid_argument(part);
      dims.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("--dims: '" + part + "' is not a positive integer");
    }
  }
  return dims;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

// "--model" accepts mlp_chain, vit_toy, vit_b, or a JSON spec file.
ModelSpec model_from_args(const std::string& model, const std::string& dims_text, const std::string& activation) {
  if (fs::exists(model)) return model_spec_from_json(read_json(model), "model");
  const auto dims = dims_text.empty() ? std::vector<std::size_t>{} : parse_dims(dims_text);
  if (model == "mlp_chain") {
    ModelSpec spec = ModelSpec::mlp_chain(dims.empty() ? std::vector<std::size_t>{4, 8, 8, 3} : dims,
                                          parse_activation(activation));
    spec.validate();
    return spec;
  }
  if (model == "vit_toy") {
    if (dims.empty()) return ModelSpec::vit(VitShape{});
    if (dims.size() < 4 || dims.size() > 6) {
      throw ConfigError("--dims for vit_toy is dim,grid,patch_dim,classes[,depth[,mlp_dim]]");
    }
    VitShape s{dims[0], dims[1], dims[2], dims[3], dims.size() > 4 ? dims[4] : 1, dims.size() > 5 ? dims[5] : 0};
    return ModelSpec::vit(s);
  }
  if (model == "vit_b") {
    if (!dims.empty()) throw ConfigError("--dims is not accepted for vit_b");
    return ModelSpec::vit(vit_b_shape());
  }
  throw ConfigError("--model: unknown model '" + model + "' (mlp_chain, vit_toy, vit_b, or a spec file)");
}

std::string args_hash(const Json& args) { return hex64(fnv1a(args.dump())); }

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string out;
};

template <std::floating_point T>
int run_train(const TrainConfig& config, const fs::path& out, bool verbose) {
  const auto run = train<T>(config);
  const std::string hash = config_hash(config);
  const Json resolved = to_json(config);
  write_json(out / "config.json", Json{{"header", artifact_header("config", hash, config.seed, resolved)}});
  write_json(out / "metrics.json", metrics_document(config, run.metrics));
  write_json(out / "timing.json", Json{{"header", artifact_header("timing", hash, config.seed)},
                                       {"wall_clock_seconds", run.metrics.wall_clock_seconds}});
  save_checkpoint<T>(out / "checkpoint.json", run.model, &run.adapters,
                     artifact_header("checkpoint", hash, config.seed, resolved),
                     Json{{"final_eval_accuracy", run.metrics.final_eval_accuracy()}});
  if (verbose) {
    for (const auto& e : run.metrics.epochs) {
      std::cerr << "epoch " << e.epoch << " loss " << e.train_loss << " eval_acc " << e.eval.accuracy << '\n';
    }
  }
  std::cout << "train: method=" << run.metrics.method << " seed=" << config.seed << " config=" << hash
            << " epoch0_acc=" << fmt("%.4f", run.metrics.init_eval.accuracy)
            << " final_acc=" << fmt("%.4f", run.metrics.final_eval_accuracy())
            << " params=" << run.metrics.params.trainable << "/" << run.metrics.params.total << " ("
            << fmt("%.2f", 100.0 * run.metrics.params.ratio()) << "%) out=" << out.string() << '\n';
  return 0;
}

int cmd_train(const TrainArgs& a, bool verbose) {
  const TrainConfig config = load_config(a.config, a.overrides, a.seed);
  const fs::path out = output_dir(a.out);
  return config.dtype == DType::f32 ? run_train<float>(config, out, verbose) : run_train<double>(config, out, verbose);
}

// ---------------------------------------------------------------------------
// merge / verify

struct MergeArgs {
  std::string checkpoint;
  std::string out;
  std::size_t probes = kDefaultProbeCount;
  std::uint64_t probe_seed = 0;
};

std::string header_hash(const Json& header) {
  return header.is_object() && header.contains("config_hash") ? header["config_hash"].get<std::string>() : "none";
}

std::uint64_t header_seed(const Json& header) {
  return header.is_object() && header.contains("seed") ? header["seed"].get<std::uint64_t>() : 0;
}

int report_verdict(const char* cmd, const MergeReport& r, const fs::path& report_path) {
  std::cout << cmd << ": verdict=" << r.verdict << " class=" << r.tolerance_class
            << " max_abs_dev=" << fmt("%.3e", r.max_abs_dev) << " probes=" << r.probe_count
            << " report=" << report_path.string() << '\n';
  if (!r.passed()) {
    std::cerr << cmd << ": merged model deviates by " << r.max_abs_dev << " (tolerance " << r.tolerance << ")\n";
    return 2;
  }
  return 0;
}

int cmd_merge(const MergeArgs& a) {
  const auto ck = load_checkpoint<double>(a.checkpoint);
  if (!ck.adapters) throw ConfigError("'" + a.checkpoint + "' has no adapters to merge");
  const ModelState<double> merged = merge_model(ck.model, *ck.adapters);
  const MergeReport report = audit_merge(ck.model, &*ck.adapters, merged, a.probe_seed, a.probes);
  const fs::path out = output_dir(a.out);
  const Json header = artifact_header("merged-model", header_hash(ck.header), header_seed(ck.header),
                                      ck.header.value("config", Json::object()));
  save_checkpoint<double>(out / "merged.json", merged, nullptr, header, Json{{"merged_from", a.checkpoint}});
  Json doc = to_json(report);
  doc = Json{{"header", artifact_header("merge-report", header_hash(ck.header), header_seed(ck.header))},
             {"adapted", a.checkpoint},
             {"merged", (out / "merged.json").string()},
             {"report", doc}};
  write_json(out / "merge_report.json", doc);
  return report_verdict("merge", report, out / "merge_report.json");
}

struct VerifyArgs {
  std::string adapted, merged, out, report;
  std::size_t probes = kDefaultProbeCount;
  std::uint64_t probe_seed = 0;
};

int cmd_verify(const VerifyArgs& a) {
  const auto adapted = load_checkpoint<double>(a.adapted);
  const auto merged = load_checkpoint<double>(a.merged);
  if (merged.adapters && !merged.adapters->empty()) {
    throw ContractError("'" + a.merged + "' still carries adapter state");
  }
  const AdapterSet<double>* adapters = adapted.adapters ? &*adapted.adapters : nullptr;
  const MergeReport report = audit_merge(adapted.model, adapters, merged.model, a.probe_seed, a.probes);
  const fs::path path = a.report.empty() ? output_dir(a.out) / "verify_report.json" : fs::path(a.report);
  write_json(path, Json{{"header", artifact_header("verify-report", header_hash(adapted.header),
                                                   header_seed(adapted.header))},
                        {"adapted", a.adapted},
                        {"merged", a.merged},
                        {"report", to_json(report)}});
  return report_verdict("verify", report, path);
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradArgs {
  std::string model = "vit_toy";
  std::string dims;
  std::string activation = "gelu";
  std::string method = "san";
  std::uint64_t seed = 0;
  std::size_t seeds = 1;
  std::size_t samples = 2;
  double eps = 1e-5;
  std::string out;
};

int cmd_gradcheck(const GradArgs& a) {
  const ModelSpec spec = model_from_args(a.model, a.dims, a.activation);
  const MethodSpec method = parse_method_shorthand(a.method);
  if (a.seeds == 0 || a.samples == 0) throw ConfigError("--seeds and --samples must be positive");
  Json runs = Json::array();
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < a.seeds; ++i) {
    const auto audit = gradient_audit(spec, method, a.seed + i, a.samples, a.eps);
    worst = std::max(worst, audit.report.max_relative_error);
    checked += audit.report.coordinates;
    runs.push_back(Json{{"seed", a.seed + i},
                        {"coordinates", audit.report.coordinates},
                        {"max_relative_error", audit.report.max_relative_error},
                        {"max_absolute_error", audit.report.max_absolute_error}});
  }
  const Json args{{"model", to_json(spec)}, {"method", to_json(method)}, {"samples", a.samples}, {"eps", a.eps}};
  const fs::path out = output_dir(a.out) / "gradcheck.json";
  const bool ok = worst < kGradcheckTolerance;
  write_json(out, Json{{"header", artifact_header("gradcheck", args_hash(args), a.seed, args)},
                       {"tolerance", kGradcheckTolerance},
                       {"relative_error_floor", kGradientErrorFloor},
                       {"max_relative_error", worst},
                       {"passed", ok},
                       {"runs", runs}});
  std::cout << "gradcheck: model=" << a.model << " method=" << method.label() << " coordinates=" << checked
            << " max_relative_error=" << fmt("%.3e", worst) << " tolerance=" << fmt("%.0e", kGradcheckTolerance)
            << (ok ? " PASS" : " FAIL") << '\n';
  return ok ? 0 : 2;
}

// ---------------------------------------------------------------------------
// params

struct ParamsArgs {
  std::string model = "vit_toy";
  std::string dims;
  std::string activation = "relu";
  std::string methods;
  std::string out;
};

int cmd_params(const ParamsArgs& a) {
  const ModelSpec spec = model_from_args(a.model, a.dims, a.activation);
  std::vector<std::string> names = split_list(a.methods);
  if (names.empty()) {
    names = {"full", "linear_probe", "bitfit", "lora:4", "ssf", "san"};
    if (spec.arch() == ArchKind::vit) names.insert(names.begin() + 4, "vpt:1");
  }
  std::vector<MethodSpec> methods;
  for (const auto& n : names) methods.push_back(parse_method_shorthand(n));

  Json rows = Json::array();
  std::printf("%-28s %14s %14s %9s\n", "method", "trainable", "total", "ratio");
  for (const auto& m : methods) {
    const ParamCount c = count_params(spec, m);
    std::printf("%-28s %14zu %14zu %8.2f%%\n", m.label().c_str(), c.trainable, c.total, 100.0 * c.ratio());
    rows.push_back(Json{{"label", m.label()}, {"method", to_json(m)}, {"params", to_json(c)}});
  }
  const std::size_t recal = recalibration_param_count(spec);
  std::printf("recalibration parameters (diagonal): %zu over %zu propagated points\n", recal,
              spec.propagated_points().size());
  const Json args{{"model", to_json(spec)}, {"methods", names}};
  const fs::path out = output_dir(a.out) / "params.json";
  write_json(out, Json{{"header", artifact_header("params", args_hash(args), 0, args)},
                       {"rows", rows},
                       {"recalibration_params", recal},
                       {"propagated_points", spec.propagated_points().size()}});
  std::cout << "params: " << methods.size() << " methods, total=" << spec.total_params() << " out=" << out.string()
            << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// compare

struct CompareArgs {
  std::string config = "shifted_gaussians";
  std::string preset = "ablation-san";
  std::string methods;
  std::size_t seeds = 3;
  std::uint64_t first_seed = 0;
  std::size_t workers = 0;
  std::vector<std::string> overrides;
  std::string out;
};

int cmd_compare(const CompareArgs& a) {
  const TrainConfig base = load_config(a.config, a.overrides);
  std::vector<MethodSpec> methods;
  if (!a.methods.empty()) {
    for (const auto& n : split_list(a.methods)) methods.push_back(parse_method_shorthand(n));
  } else {
    methods = compare_preset(a.preset);
  }
  std::vector<TrainConfig> configs;
  for (const auto& m : methods) {
    TrainConfig c = base;
    c.method = m;
    configs.push_back(c);
  }
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < a.seeds; ++i) seeds.push_back(a.first_seed + i);
  const CompareReport report = compare(configs, seeds, a.workers);

  std::printf("%-30s %9s %9s %12s %9s\n", "method", "mean_acc", "std_acc", "trainable", "ratio");
  for (const auto& r : report.rows) {
    std::printf("%-30s %9.4f %9.4f %12zu %8.2f%%\n", r.label.c_str(), r.mean, r.stddev, r.params.trainable,
                100.0 * r.params.ratio());
  }
  Json resolved = to_json(base);
  resolved.erase("method");
  const std::string hash = hex64(fnv1a(resolved.dump()));
  const fs::path out = output_dir(a.out) / "compare.json";
  Json doc{{"header", artifact_header("compare", hash, a.first_seed, resolved)},
           {"preset", a.methods.empty() ? Json(a.preset) : Json(nullptr)}};
  const Json body = to_json(report);
  for (const auto& [k, v] : body.items()) doc[k] = v;
  write_json(out, doc);
  std::cout << "compare: rows=" << report.rows.size() << " seeds=" << seeds.size() << " out=" << out.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// gen-data

struct GenArgs {
  std::string task = "two_moons";
  std::size_t n = 200;
  std::uint64_t seed = 0;
  SyntheticOptions opt;
  bool no_shift = false;
  std::string out;
};

int cmd_gen_data(GenArgs a) {
  const SyntheticTask task = parse_synthetic_task(a.task);
  a.opt.shift = !a.no_shift;
  const DatasetHandle d = gen_synthetic(task, a.n, a.seed, a.opt);
  const fs::path dir = output_dir(a.out);
  fs::create_directories(dir);
  const fs::path csv = dir / (a.task + ".csv");
  write_csv(d, csv);
  const Json args{{"task", a.task}, {"n", a.n}, {"descriptor", d.descriptor}};
  Json meta{{"header", artifact_header("dataset", args_hash(args), a.seed, args)},
            {"descriptor", d.descriptor},
            {"csv", csv.filename().string()},
            {"classes", d.classes},
            {"features", d.features()},
            {"train_rows", d.train_y.size()},
            {"eval_rows", d.eval_y.size()}};
  if (!d.gamma_star.empty()) {
    meta["gamma_star"] = d.gamma_star;
    meta["beta_star"] = d.beta_star;
  }
  write_json(dir / (a.task + ".json"), meta);
  std::cout << "gen-data: task=" << a.task << " n=" << d.size() << " classes=" << d.classes
            << " features=" << d.features() << " seed=" << a.seed << " out=" << csv.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sanpeft: parameter-efficient fine-tuning with scaling-factor propagation"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Print per-epoch progress to stderr");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Fine-tune a model and write metrics and a checkpoint");
  train_cmd->add_option("--config", train_args.config, "Config file or preset name")->required();
  train_cmd->add_option("--seed", train_args.seed, "Run seed (overrides the config)");
  train_cmd->add_option("--set", train_args.overrides, "Override a config key: key.path=value")->take_all();
  train_cmd->add_option("--out", train_args.out, "Output directory");

  MergeArgs merge_args;
  auto* merge_cmd = app.add_subcommand("merge", "Fold adapters into base weights and audit the result");
  merge_cmd->add_option("--checkpoint", merge_args.checkpoint, "Adapted checkpoint manifest")->required();
  merge_cmd->add_option("--probes", merge_args.probes, "Probe batch size");
  merge_cmd->add_option("--probe-seed", merge_args.probe_seed, "Probe batch seed");
  merge_cmd->add_option("--out", merge_args.out, "Output directory");

  VerifyArgs verify_args;
  auto* verify_cmd = app.add_subcommand("verify", "Compare an adapted checkpoint with a merged one");
  verify_cmd->add_option("--adapted", verify_args.adapted, "Adapted checkpoint manifest")->required();
  verify_cmd->add_option("--merged", verify_args.merged, "Merged checkpoint manifest")->required();
  verify_cmd->add_option("--probes", verify_args.probes, "Probe batch size");
  verify_cmd->add_option("--probe-seed", verify_args.probe_seed, "Probe batch seed");
  verify_cmd->add_option("--report", verify_args.report, "Report path (default <out>/verify_report.json)");
  verify_cmd->add_option("--out", verify_args.out, "Output directory");

  GradArgs grad_args;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Check adapter gradients against finite differences");
  grad_cmd->add_option("--model", grad_args.model, "mlp_chain, vit_toy, vit_b or a spec file");
  grad_cmd->add_option("--dims", grad_args.dims, "Comma-separated dims");
  grad_cmd->add_option("--activation", grad_args.activation, "mlp_chain activation");
  grad_cmd->add_option("--method", grad_args.method, "Method, e.g. san, ssf, lora:2");
  grad_cmd->add_option("--seed", grad_args.seed, "First seed");
  grad_cmd->add_option("--seeds", grad_args.seeds, "Number of consecutive seeds");
  grad_cmd->add_option("--samples", grad_args.samples, "Probe inputs per check");
  grad_cmd->add_option("--eps", grad_args.eps, "Central-difference step");
  grad_cmd->add_option("--out", grad_args.out, "Output directory");

  ParamsArgs params_args;
  auto* params_cmd = app.add_subcommand("params", "Print trainable-parameter budgets per method");
  params_cmd->add_option("--model", params_args.model, "mlp_chain, vit_toy, vit_b or a spec file");
  params_cmd->add_option("--dims", params_args.dims, "Comma-separated dims");
  params_cmd->add_option("--activation", params_args.activation, "mlp_chain activation");
  params_cmd->add_option("--method,--methods", params_args.methods, "Comma-separated methods");
  params_cmd->add_option("--out", params_args.out, "Output directory");

  CompareArgs compare_args;
  auto* compare_cmd = app.add_subcommand("compare", "Run several methods over several seeds");
  compare_cmd->add_option("--config", compare_args.config, "Config file or preset name");
  compare_cmd->add_option("--preset", compare_args.preset, "Method preset (ablation-san)");
  compare_cmd->add_option("--methods", compare_args.methods, "Comma-separated methods instead of a preset");
  compare_cmd->add_option("--seeds", compare_args.seeds, "Number of seeds (at least 3)");
  compare_cmd->add_option("--first-seed", compare_args.first_seed, "First seed");
  compare_cmd->add_option("--workers", compare_args.workers, "Concurrent runs (0: hardware threads)");
  compare_cmd->add_option("--set", compare_args.overrides, "Override a config key: key.path=value")->take_all();
  compare_cmd->add_option("--out", compare_args.out, "Output directory");

  GenArgs gen_args;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic dataset as CSV");
  gen_cmd->add_option("--task", gen_args.task, "two_moons, scaled_shifted_gaussians or patch_grid");
  gen_cmd->add_option("--n", gen_args.n, "Sample count");
  gen_cmd->add_option("--seed", gen_args.seed, "Sample seed");
  gen_cmd->add_option("--classes", gen_args.opt.classes, "Class count (0: task default)");
  gen_cmd->add_option("--features", gen_args.opt.features, "Feature count (gaussians)");
  gen_cmd->add_option("--clusters", gen_args.opt.clusters, "Mixture components per class (gaussians)");
  gen_cmd->add_option("--noise", gen_args.opt.noise, "Noise standard deviation");
  gen_cmd->add_option("--eval-fraction", gen_args.opt.eval_fraction, "Held-out fraction");
  gen_cmd->add_flag("--no-shift", gen_args.no_shift, "Skip the (gamma*, beta*) shift");
  gen_cmd->add_option("--out", gen_args.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "sanpeft: " << e.what() << '\n';
    return 1;
  }

  try {
    if (*train_cmd) return cmd_train(train_args, verbose);
    if (*merge_cmd) return cmd_merge(merge_args);
    if (*verify_cmd) return cmd_verify(verify_args);
    if (*grad_cmd) return cmd_gradcheck(grad_args);
    if (*params_cmd) return cmd_params(params_args);
    if (*compare_cmd) return cmd_compare(compare_args);
    if (*gen_cmd) return cmd_gen_data(gen_args);
  } catch (const Error& e) {
    std::cerr << "sanpeft: " << e.what() << '\n';
    return e.category() == Error::Category::config ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "sanpeft: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
