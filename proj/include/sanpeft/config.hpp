// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SANPEFT_CONFIG_HPP
#define SANPEFT_CONFIG_HPP

#include <sanpeft/data.hpp>
#include <sanpeft/optim.hpp>
#include <sanpeft/serialize.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sanpeft {

enum class DType { f64, f32 };

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "file"
  SyntheticTask task = SyntheticTask::two_moons;
  std::size_t n = 200;
  SyntheticOptions synthetic;
  std::string path;
  DataFormat format = DataFormat::csv_labeled;
  LoadOptions load;
  std::optional<std::uint64_t> seed;  // unset: follow the run seed

  bool operator==(const DataConfig& o) const { return to_json_string() == o.to_json_string(); }
  [[nodiscard]] std::string to_json_string() const;
};

// Optional supervised phase that produces the frozen base. For the shifted
// Gaussian task it trains on the unshifted twin of the data.
struct PretrainConfig {
  bool enabled = false;
  std::size_t epochs = 100;
  double lr = 1e-2;
  std::size_t batch_size = 0;
};

struct TrainConfig {
  ModelSpec model = ModelSpec::mlp_chain({2, 16, 2});
  MethodSpec method = MethodSpec::san();
  DataConfig data;
  PretrainConfig pretrain;
  std::size_t epochs = 30;
  std::optional<double> lr;  // unset: 1e-4 for full fine-tuning, 1e-3 otherwise
  double warmup = 0.1;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::size_t batch_size = 0;  // 0: full batch
  std::uint64_t seed = 0;
  DType dtype = DType::f64;

  [[nodiscard]] double base_lr() const {
    if (lr) return *lr;
    return method.kind == MethodKind::full ? 1e-4 : 1e-3;
  }
  [[nodiscard]] std::uint64_t data_seed() const { return data.seed.value_or(seed); }
};

// ---------------------------------------------------------------------------
// JSON

inline Json to_json(const DataConfig& d) {
  Json j{{"source", d.source}};
  if (d.source == "synthetic") {
    j["task"] = to_string(d.task);
    j["n"] = d.n;
    j["classes"] = d.synthetic.classes;
    if (d.task == SyntheticTask::scaled_shifted_gaussians) {
      j["features"] = d.synthetic.features;
      j["clusters"] = d.synthetic.clusters;
      j["task_seed"] = d.synthetic.task_seed;
      j["shift"] = d.synthetic.shift;
      j["shift_scale"] = d.synthetic.shift_scale;
      j["shift_offset"] = d.synthetic.shift_offset;
    }
    if (d.task == SyntheticTask::patch_grid) {
      j["grid"] = d.synthetic.grid;
      j["patch_dim"] = d.synthetic.patch_dim;
    }
    j["noise"] = d.synthetic.noise;
    j["eval_fraction"] = d.synthetic.eval_fraction;
  } else {
    j["path"] = d.path;
    j["format"] = to_string(d.format);
    j["classes"] = d.load.classes;
    j["labels_path"] = d.load.labels_path;
    j["normalize"] = d.load.normalize;
    j["eval_fraction"] = d.load.eval_fraction;
  }
  j["seed"] = d.seed ? Json(*d.seed) : Json(nullptr);
  return j;
}

inline std::string DataConfig::to_json_string() const { return to_json(*this).dump(); }

inline DataConfig data_config_from_json(const Json& j, const std::string& path = "data") {
  ObjectReader r(j, path);
  DataConfig d;
  d.source = r.get<std::string>("source", "synthetic");
  if (d.source == "synthetic") {
    d.task = parse_synthetic_task(r.get<std::string>("task", "two_moons"));
    d.n = r.get("n", d.n);
    d.synthetic.classes = r.get("classes", d.synthetic.classes);
    d.synthetic.features = r.get("features", d.synthetic.features);
    d.synthetic.clusters = r.get("clusters", d.synthetic.clusters);
    d.synthetic.task_seed = r.get("task_seed", d.synthetic.task_seed);
    d.synthetic.shift = r.get("shift", d.synthetic.shift);
    d.synthetic.shift_scale = r.get("shift_scale", d.synthetic.shift_scale);
    d.synthetic.shift_offset = r.get("shift_offset", d.synthetic.shift_offset);
    d.synthetic.grid = r.get("grid", d.synthetic.grid);
    d.synthetic.patch_dim = r.get("patch_dim", d.synthetic.patch_dim);
    d.synthetic.noise = r.get("noise", d.synthetic.noise);
    d.synthetic.eval_fraction = r.get("eval_fraction", d.synthetic.eval_fraction);
  } else if (d.source == "file") {
    d.path = r.require<std::string>("path");
    d.format = parse_data_format(r.get<std::string>("format", "csv_labeled"));
    d.load.classes = r.get("classes", d.load.classes);
    d.load.labels_path = r.get<std::string>("labels_path", "");
    d.load.normalize = r.get("normalize", true);
    d.load.eval_fraction = r.get("eval_fraction", d.load.eval_fraction);
  } else {
    throw ConfigError("'" + r.child("source") + "' must be 'synthetic' or 'file'");
  }
  if (r.has("seed")) {
    const Json& s = r.raw("seed");
    if (!s.is_null()) {
      if (!s.is_number_unsigned()) throw ConfigError("'" + r.child("seed") + "' must be a non-negative integer");
      d.seed = s.get<std::uint64_t>();
    }
  }
  r.finish();
  return d;
}

inline Json to_json(const TrainConfig& c) {
  return Json{{"model", to_json(c.model)},
              {"method", to_json(c.method)},
              {"data", to_json(c.data)},
              {"pretrain",
               {{"enabled", c.pretrain.enabled},
                {"epochs", c.pretrain.epochs},
                {"lr", c.pretrain.lr},
                {"batch_size", c.pretrain.batch_size}}},
              {"train",
               {{"epochs", c.epochs},
                {"lr", c.base_lr()},
                {"warmup", c.warmup},
                {"optimizer", to_string(c.optimizer)},
                {"batch_size", c.batch_size}}},
              {"seed", c.seed},
              {"dtype", c.dtype == DType::f64 ? "f64" : "f32"}};
}

inline TrainConfig train_config_from_json(const Json& j) {
  ObjectReader r(j, "");
  TrainConfig c;
  if (r.has("model")) c.model = model_spec_from_json(r.raw("model"), "model");
  if (r.has("method")) c.method = method_from_json(r.raw("method"), "method");
  if (r.has("data")) c.data = data_config_from_json(r.raw("data"), "data");
  if (r.has("pretrain")) {
    ObjectReader p(r.raw("pretrain"), "pretrain");
    c.pretrain.enabled = p.get("enabled", c.pretrain.enabled);
    c.pretrain.epochs = p.get("epochs", c.pretrain.epochs);
    c.pretrain.lr = p.get("lr", c.pretrain.lr);
    c.pretrain.batch_size = p.get("batch_size", c.pretrain.batch_size);
    p.finish();
  }
  if (r.has("train")) {
    ObjectReader t(r.raw("train"), "train");
    c.epochs = t.get("epochs", c.epochs);
    if (t.has("lr")) {
      const Json& lr = t.raw("lr");
      if (!lr.is_null()) {
        if (!lr.is_number() || lr.get<double>() <= 0) throw ConfigError("'train.lr' must be a positive number");
        c.lr = lr.get<double>();
      }
    }
    c.warmup = t.get("warmup", c.warmup);
    c.optimizer = parse_optimizer_kind(t.get<std::string>("optimizer", "adam"));
    c.batch_size = t.get("batch_size", c.batch_size);
    t.finish();
  }
  c.seed = r.get("seed", c.seed);
  const auto dtype = r.get<std::string>("dtype", "f64");
  if (dtype != "f64" && dtype != "f32") throw ConfigError("'dtype' must be f64 or f32");
  c.dtype = dtype == "f64" ? DType::f64 : DType::f32;
  r.finish();
  if (c.epochs == 0) throw ConfigError("'train.epochs' must be positive");
  if (!(c.warmup >= 0 && c.warmup < 1)) throw ConfigError("'train.warmup' must lie in [0, 1)");
  return c;
}

/// Hash of the resolved configuration without the seed, so runs that differ
/// only by seed share a hash.
inline std::string config_hash(const TrainConfig& c) {
  Json j = to_json(c);
  j.erase("seed");
  return hex64(fnv1a(j.dump()));
}

// ---------------------------------------------------------------------------
// Presets

inline const std::map<std::string, Json>& config_presets() {
  static const std::map<std::string, Json> presets = {
      {"san_moons",
       Json::parse(R"({
         "model": {"kind": "mlp_chain", "dims": [2, 32, 32, 2], "activation": "relu"},
         "method": {"kind": "san"},
         "data": {"source": "synthetic", "task": "two_moons", "n": 200, "noise": 0.15},
         "train": {"epochs": 30, "lr": 0.02, "batch_size": 16}
       })")},
      {"shifted_gaussians",
       Json::parse(R"({
         "model": {"kind": "mlp_chain", "dims": [8, 32, 32, 4], "activation": "relu"},
         "method": {"kind": "san"},
         "data": {"source": "synthetic", "task": "scaled_shifted_gaussians", "n": 400, "features": 8,
                  "classes": 4, "clusters": 2, "noise": 0.4, "shift_scale": 0.5, "shift_offset": 4.0},
         "pretrain": {"enabled": true, "epochs": 100, "lr": 0.01},
         "train": {"epochs": 40, "lr": 0.01, "batch_size": 16}
       })")},
      {"vit_patches",
       Json::parse(R"({
         "model": {"kind": "vit_toy", "dim": 16, "grid": 2, "patch_dim": 4, "classes": 4},
         "method": {"kind": "san"},
         "data": {"source": "synthetic", "task": "patch_grid", "n": 64, "grid": 2, "patch_dim": 4, "noise": 0.6},
         "pretrain": {"enabled": true, "epochs": 30, "lr": 0.01, "batch_size": 16},
         "train": {"epochs": 10, "lr": 0.01, "batch_size": 16}
       })")},
  };
  return presets;
}

/// Splits "a.b.c=value"; the value parses as JSON and falls back to a string.
inline std::pair<std::vector<std::string>, Json> parse_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + text + "' must look like key.path=value");
  std::vector<std::string> keys;
  std::string key;
  std::istringstream in(text.substr(0, eq));
  while (std::getline(in, key, '.')) {
    if (key.empty()) throw ConfigError("override '" + text + "' has an empty key segment");
    keys.push_back(key);
  }
  const std::string raw = text.substr(eq + 1);
  Json value = Json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  return {keys, value};
}

inline void apply_override(Json& doc, const std::string& text) {
  auto [keys, value] = parse_override(text);
  Json* at = &doc;
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!at->is_object()) throw ConfigError("override '" + text + "': '" + keys[i - 1] + "' is not an object");
    at = &(*at)[keys[i]];
    if (at->is_null()) *at = Json::object();
  }
  if (!at->is_object()) throw ConfigError("override '" + text + "': parent is not an object");
  (*at)[keys.back()] = value;
}

/// Loads a config from a file path or a built-in preset name, applies
/// overrides, and validates strictly.
inline TrainConfig load_config(const std::string& source, const std::vector<std::string>& overrides = {},
                               std::optional<std::uint64_t> seed = std::nullopt) {
  Json doc;
  if (std::filesystem::exists(source)) {
    doc = read_json(source);
  } else if (auto it = config_presets().find(source); it != config_presets().end()) {
    doc = it->second;
  } else {
    std::string names;
    for (const auto& [name, j] : config_presets()) names += (names.empty() ? "" : ", ") + name;
    throw ConfigError("config '" + source + "' is neither a file nor a preset (" + names + ")");
  }
  for (const auto& o : overrides) apply_override(doc, o);
  if (seed) doc["seed"] = *seed;
  return train_config_from_json(doc);
}

/// Builds the dataset a config describes. `shifted = false` returns the
/// unshifted twin used for pretraining.
inline DatasetHandle build_dataset(const TrainConfig& c, bool shifted = true, std::uint64_t seed_offset = 0) {
  const std::uint64_t seed = c.data_seed() + seed_offset;
  if (c.data.source == "file") {
    LoadOptions opt = c.data.load;
    opt.seed = seed;
    return load_dataset(c.data.path, c.data.format, opt);
  }
  SyntheticOptions opt = c.data.synthetic;
  if (!shifted) opt.shift = false;
  return gen_synthetic(c.data.task, c.data.n, seed, opt);
}

}  // namespace sanpeft

#endif  // SANPEFT_CONFIG_HPP
