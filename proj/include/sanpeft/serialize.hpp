// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0
//
// JSON codecs shared by configs, checkpoints, and reports.

#ifndef SANPEFT_SERIALIZE_HPP
#define SANPEFT_SERIALIZE_HPP

#include <sanpeft/adapters.hpp>
#include <sanpeft/errors.hpp>
#include <sanpeft/model.hpp>
#include <sanpeft/reparam.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>

namespace sanpeft {

using Json = nlohmann::ordered_json;

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kSchemaVersion = 1;

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

// Strict reader for one JSON object: every key must be consumed before
// finish(), otherwise the first unknown key is reported with its full path.
class ObjectReader {
 public:
  ObjectReader(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError("'" + display() + "' must be an object");
  }

  [[nodiscard]] bool has(const std::string& key) const { return obj_.contains(key); }

  template <class V>
  V get(const std::string& key, V fallback) {
    if (!obj_.contains(key)) return fallback;
    return read<V>(key);
  }

  template <class V>
  V require(const std::string& key) {
    if (!obj_.contains(key)) throw ConfigError("missing required key '" + child(key) + "'");
    return read<V>(key);
  }

  const Json& raw(const std::string& key) {
    used_.insert(key);
    return obj_.at(key);
  }

  [[nodiscard]] std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!used_.count(key)) throw ConfigError("unknown key '" + child(key) + "'");
    }
  }

 private:
  template <class V>
  V read(const std::string& key) {
    used_.insert(key);
    const Json& v = obj_.at(key);
    try {
      if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("expected a boolean");
      } else if constexpr (std::is_unsigned_v<V>) {
        if (!v.is_number_unsigned()) throw std::invalid_argument("expected a non-negative integer");
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!v.is_number()) throw std::invalid_argument("expected a number");
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!v.is_string()) throw std::invalid_argument("expected a string");
      }
      return v.get<V>();
    } catch (const std::exception& e) {
      throw ConfigError("key '" + child(key) + "': " + e.what());
    }
  }

  [[nodiscard]] std::string display() const { return path_.empty() ? "<root>" : path_; }

  const Json& obj_;
  std::string path_;
  std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Model specs

inline Json to_json(const ModelSpec& spec) {
  if (spec.arch() == ArchKind::mlp_chain) {
    return Json{{"kind", "mlp_chain"}, {"dims", spec.dims()}, {"activation", to_string(spec.activation())}};
  }
  const auto& s = spec.vit_shape();
  return Json{{"kind", "vit_toy"}, {"dim", s.dim},         {"grid", s.grid},   {"patch_dim", s.patch_dim},
              {"classes", s.classes}, {"depth", s.depth}, {"mlp_dim", s.mlp_dim}};
}

/// ViT-B/16 on 224² inputs: 12 blocks, width 768, MLP 3072, head excluded.
inline VitShape vit_b_shape() { return VitShape{768, 14, 16 * 16 * 3, 0, 12, 3072}; }

inline ModelSpec model_spec_from_json(const Json& j, const std::string& path = "model") {
  ObjectReader r(j, path);
  const auto kind = r.require<std::string>("kind");
  ModelSpec spec;
  if (kind == "mlp_chain") {
    const auto dims = r.require<std::vector<std::size_t>>("dims");
    const auto act = parse_activation(r.get<std::string>("activation", "relu"));
    r.finish();
    if (dims.size() < 2 || std::find(dims.begin(), dims.end(), 0) != dims.end()) {
      throw ConfigError("'" + r.child("dims") + "' needs at least two positive widths");
    }
    spec = ModelSpec::mlp_chain(dims, act);
  } else if (kind == "vit_toy" || kind == "vit_b") {
    VitShape s = kind == "vit_b" ? vit_b_shape() : VitShape{};
    s.dim = r.get("dim", s.dim);
    s.grid = r.get("grid", s.grid);
    s.patch_dim = r.get("patch_dim", s.patch_dim);
    s.classes = r.get("classes", s.classes);
    s.depth = r.get("depth", s.depth);
    s.mlp_dim = r.get("mlp_dim", s.mlp_dim);
    r.finish();
    if (s.dim == 0 || s.grid == 0 || s.patch_dim == 0 || s.depth == 0) {
      throw ConfigError("'" + path + "': dim, grid, patch_dim and depth must be positive");
    }
    spec = ModelSpec::vit(s);
  } else {
    throw ConfigError("'" + r.child("kind") + "': unknown model kind '" + kind + "'");
  }
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Methods

inline Json to_json(const MethodSpec& m) {
  Json j{{"kind", to_string(m.kind)}};
  switch (m.kind) {
    case MethodKind::lora:
      j["rank"] = m.lora_rank;
      j["activation"] = to_string(m.lora_activation);
      break;
    case MethodKind::vpt: j["prompts"] = m.prompts; break;
    case MethodKind::san:
      j["modeling"] = m.modeling;
      j["propagate"] = m.propagate;
      j["recal"] = m.recal == RecalMode::diagonal ? "diagonal" : "full";
      break;
    default: break;
  }
  if (m.kind == MethodKind::san || m.kind == MethodKind::ssf) j["lambda"] = m.lambda;
  if (m.kind != MethodKind::full && m.kind != MethodKind::linear_probe) j["train_head"] = m.train_head;
  return j;
}

inline MethodSpec method_from_json(const Json& j, const std::string& path = "method") {
  if (j.is_string()) return method_from_json(Json{{"kind", j.get<std::string>()}}, path);
  ObjectReader r(j, path);
  MethodSpec m;
  m.kind = parse_method_kind(r.require<std::string>("kind"));
  if (m.kind == MethodKind::lora) {
    m.lora_rank = r.get("rank", m.lora_rank);
    m.lora_activation = parse_activation(r.get<std::string>("activation", "identity"));
  }
  if (m.kind == MethodKind::vpt) m.prompts = r.get("prompts", std::size_t{1});
  if (m.kind == MethodKind::san) {
    m.modeling = r.get("modeling", true);
    m.propagate = r.get("propagate", true);
    const auto recal = r.get<std::string>("recal", "diagonal");
    if (recal != "diagonal" && recal != "full") throw ConfigError("'" + r.child("recal") + "' must be diagonal or full");
    m.recal = recal == "full" ? RecalMode::full : RecalMode::diagonal;
  }
  if (m.kind == MethodKind::san || m.kind == MethodKind::ssf) {
    m.lambda = r.get("lambda", 0.0);
    if (m.lambda < 0) throw ConfigError("'" + r.child("lambda") + "' must be non-negative");
  }
  if (m.kind != MethodKind::full && m.kind != MethodKind::linear_probe) m.train_head = r.get("train_head", true);
  r.finish();
  return m;
}

/// Accepts the compact command-line forms "san", "san:modeling", "san:propagation",
/// "lora:8", "vpt:2", "san-full" and the plain method names.
inline MethodSpec parse_method_shorthand(const std::string& text) {
  const auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
  auto number = [&](std::size_t fallback) -> std::size_t {
    if (arg.empty()) return fallback;
    try {
      std::size_t used = 0;
      const auto v = std::stoul(arg, &used);
      if (used == arg.size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError("method '" + text + "': bad argument '" + arg + "'");
  };
  if (head == "san-full") {
    MethodSpec m = MethodSpec::san();
    m.recal = RecalMode::full;
    return m;
  }
  const MethodKind kind = parse_method_kind(head);
  switch (kind) {
    case MethodKind::lora: return MethodSpec::lora(number(4));
    case MethodKind::vpt: return MethodSpec::vpt(number(1));
    case MethodKind::san:
      if (arg.empty() || arg == "both") return MethodSpec::san(true, true);
      if (arg == "modeling") return MethodSpec::san(true, false);
      if (arg == "propagation") return MethodSpec::san(false, true);
      throw ConfigError("method '" + text + "': expected san:modeling, san:propagation or san:both");
    default:
      if (!arg.empty()) throw ConfigError("method '" + text + "' takes no argument");
      return MethodSpec{kind};
  }
}

// ---------------------------------------------------------------------------
// Reports

inline Json to_json(const ParamCount& c) {
  return Json{{"trainable", c.trainable}, {"total", c.total}, {"ratio", c.ratio()}};
}

inline Json to_json(const MergeReport& r) {
  Json layers = Json::array();
  for (const auto& l : r.layers) layers.push_back(Json{{"point", l.point}, {"max_abs_dev", l.max_abs_dev}});
  return Json{{"probe", {{"seed", r.probe_seed}, {"count", r.probe_count}, {"distribution", "standard_normal"}}},
              {"tolerance", r.tolerance},
              {"tolerance_class", r.tolerance_class},
              {"asserted", r.asserted},
              {"verdict", r.verdict},
              {"max_abs_dev", r.max_abs_dev},
              {"output_max_abs_dev", r.output_max_abs_dev},
              {"layers", layers},
              {"trainable_before", r.trainable_before},
              {"trainable_after", r.trainable_after}};
}

/// Provenance block placed at the top of every artifact.
inline Json artifact_header(const std::string& artifact, const std::string& config_hash, std::uint64_t seed,
                            const Json& config = Json::object()) {
  return Json{{"tool", "sanpeft"},     {"version", kVersion}, {"artifact", artifact}, {"schema_version", kSchemaVersion},
              {"config_hash", config_hash}, {"seed", seed},     {"config", config}};
}

/// Writes `doc` with a trailing newline. Output bytes depend only on `doc`.
inline void write_json(const std::filesystem::path& path, const Json& doc) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << doc.dump(2) << '\n';
  if (!out) throw ConfigError("failed writing '" + path.string() + "'");
}

inline Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": byte " + std::to_string(e.byte) + ": " + e.what());
  }
}

}  // namespace sanpeft

#endif  // SANPEFT_SERIALIZE_HPP
