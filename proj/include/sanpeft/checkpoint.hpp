// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoints are a JSON manifest plus one raw blob of little-endian 64-bit
// floats. Manifest schema (format "sanpeft-checkpoint", version 1):
//
//   header       provenance block (tool, version, config hash, seed)
//   dtype        always "f64"
//   byte_order   always "little"
//   blob         blob file name, relative to the manifest
//   model        model spec
//   method       method spec, or null for a plain (merged) model
//   tensors      [{name, group: "model"|"adapter", shape, offset}] in blob order;
//                offset is in bytes
//   meta         free-form object

#ifndef SANPEFT_CHECKPOINT_HPP
#define SANPEFT_CHECKPOINT_HPP

#include <sanpeft/adapters.hpp>
#include <sanpeft/model.hpp>
#include <sanpeft/serialize.hpp>

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace sanpeft {

inline constexpr const char* kCheckpointFormat = "sanpeft-checkpoint";
inline constexpr int kCheckpointVersion = 1;

template <std::floating_point T>
struct Checkpoint {
  ModelState<T> model;
  std::optional<AdapterSet<T>> adapters;
  Json header = Json::object();
  Json meta = Json::object();
};

inline std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

template <std::floating_point T>
void save_checkpoint(const std::filesystem::path& manifest_path, const ModelState<T>& model,
                     const AdapterSet<T>* adapters, const Json& header = Json::object(),
                     const Json& meta = Json::object()) {
  Json tensors = Json::array();
  std::vector<unsigned char> blob;
  auto append = [&](const std::string& name, const char* group, const NDArray<T>& v) {
    tensors.push_back(Json{{"name", name}, {"group", group}, {"shape", v.shape()}, {"offset", blob.size()}});
    for (T x : v.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(static_cast<double>(x));
      for (int b = 0; b < 8; ++b) blob.push_back(static_cast<unsigned char>(bits >> (8 * b)));
    }
  };
  for (const auto& [name, t] : model.params()) append(name, "model", t.value());
  if (adapters) {
    for (const auto& [name, t] : adapters->named_parameters()) append(name, "adapter", t.value());
  }
  const auto blob_path = blob_path_for(manifest_path);
  Json doc{{"format", kCheckpointFormat},
           {"version", kCheckpointVersion},
           {"header", header},
           {"dtype", "f64"},
           {"byte_order", "little"},
           {"blob", blob_path.filename().string()},
           {"blob_bytes", blob.size()},
           {"model", to_json(model.spec())},
           {"method", adapters ? to_json(adapters->method()) : Json(nullptr)},
           {"tensors", tensors},
           {"meta", meta}};
  write_json(manifest_path, doc);
  std::ofstream out(blob_path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + blob_path.string() + "'");
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!out) throw ConfigError("failed writing '" + blob_path.string() + "'");
}

template <std::floating_point T = double>
Checkpoint<T> load_checkpoint(const std::filesystem::path& manifest_path) {
  const Json doc = read_json(manifest_path);
  const std::string where = manifest_path.string();
  if (!doc.is_object() || doc.value("format", "") != kCheckpointFormat) {
    throw FormatError(where + ": not a " + std::string(kCheckpointFormat) + " manifest");
  }
  if (doc.value("version", 0) != kCheckpointVersion) throw FormatError(where + ": unsupported checkpoint version");
  if (doc.value("dtype", "") != "f64" || doc.value("byte_order", "") != "little") {
    throw FormatError(where + ": only little-endian f64 blobs are supported");
  }
  const ModelSpec spec = model_spec_from_json(doc.at("model"), "model");
  Checkpoint<T> ck;
  ck.model = ModelState<T>(spec);
  ck.header = doc.value("header", Json::object());
  ck.meta = doc.value("meta", Json::object());
  if (!doc.at("method").is_null()) {
    ck.adapters = AdapterSet<T>::create(spec, method_from_json(doc.at("method"), "method"), 0);
  }

  const auto blob_path = manifest_path.parent_path() / doc.at("blob").get<std::string>();
  std::ifstream in(blob_path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint blob '" + blob_path.string() + "'");
  const std::vector<unsigned char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() != doc.value("blob_bytes", blob.size())) {
    throw FormatError(blob_path.string() + ": size " + std::to_string(blob.size()) + " disagrees with manifest");
  }

  std::map<std::string, Tensor<T>> adapter_tensors;
  if (ck.adapters) {
    for (auto& [name, t] : ck.adapters->named_parameters()) adapter_tensors.emplace(name, t);
  }
  std::size_t model_seen = 0, adapter_seen = 0;
  for (const auto& entry : doc.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto group = entry.at("group").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t n = shape_numel(shape);
    if (offset + 8 * n > blob.size()) throw FormatError(blob_path.string() + ": byte " + std::to_string(offset) +
                                                        ": tensor '" + name + "' runs past the end");
    std::vector<T> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t bits = 0;
      for (int b = 7; b >= 0; --b) bits = (bits << 8) | blob[offset + 8 * i + static_cast<std::size_t>(b)];
      values[i] = static_cast<T>(std::bit_cast<double>(bits));
    }
    NDArray<T> value(shape, std::move(values));
    if (group == "model") {
      if (!ck.model.contains(name)) throw FormatError(where + ": unknown model tensor '" + name + "'");
      ck.model.set(name, std::move(value));
      ++model_seen;
    } else if (group == "adapter") {
      auto it = adapter_tensors.find(name);
      if (it == adapter_tensors.end()) throw FormatError(where + ": unknown adapter tensor '" + name + "'");
      if (it->second.shape() != value.shape()) {
        throw FormatError(where + ": adapter tensor '" + name + "' has shape " + shape_string(value.shape()) +
                          ", expected " + shape_string(it->second.shape()));
      }
      it->second.assign(std::move(value));
      ++adapter_seen;
    } else {
      throw FormatError(where + ": tensor '" + name + "' has unknown group '" + group + "'");
    }
  }
  if (model_seen != ck.model.params().size()) throw FormatError(where + ": manifest misses model tensors");
  if (adapter_seen != adapter_tensors.size()) throw FormatError(where + ": manifest misses adapter tensors");
  ck.model.freeze_all();
  return ck;
}

}  // namespace sanpeft

#endif  // SANPEFT_CHECKPOINT_HPP
