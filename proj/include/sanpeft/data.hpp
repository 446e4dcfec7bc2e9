// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0
//
// Datasets: seeded synthetic tasks plus CSV and IDX loaders. Features are kept
// in double precision; training code casts on use.

#ifndef SANPEFT_DATA_HPP
#define SANPEFT_DATA_HPP

#include <sanpeft/errors.hpp>
#include <sanpeft/ndarray.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace sanpeft {

enum class SyntheticTask { two_moons, scaled_shifted_gaussians, patch_grid };
enum class DataFormat { csv_labeled, idx_images };

inline const char* to_string(SyntheticTask t) {
  switch (t) {
    case SyntheticTask::two_moons: return "two_moons";
    case SyntheticTask::scaled_shifted_gaussians: return "scaled_shifted_gaussians";
    case SyntheticTask::patch_grid: return "patch_grid";
  }
  return "?";
}

inline SyntheticTask parse_synthetic_task(const std::string& s) {
  if (s == "two_moons") return SyntheticTask::two_moons;
  if (s == "scaled_shifted_gaussians") return SyntheticTask::scaled_shifted_gaussians;
  if (s == "patch_grid") return SyntheticTask::patch_grid;
  throw ConfigError("unknown synthetic task '" + s + "'");
}

inline const char* to_string(DataFormat f) { return f == DataFormat::csv_labeled ? "csv_labeled" : "idx_images"; }

inline DataFormat parse_data_format(const std::string& s) {
  if (s == "csv_labeled" || s == "csv") return DataFormat::csv_labeled;
  if (s == "idx_images" || s == "idx") return DataFormat::idx_images;
  throw ConfigError("unknown data format '" + s + "'");
}

struct DatasetHandle {
  NDArray<double> train_x{Shape{0, 1}};
  std::vector<std::size_t> train_y;
  NDArray<double> eval_x{Shape{0, 1}};
  std::vector<std::size_t> eval_y;
  std::size_t classes = 0;
  // Normalization applied to both splits, estimated on train only. Empty when
  // features are left raw.
  std::vector<double> mean, stddev;
  // Generating shift of scaled_shifted_gaussians.
  std::vector<double> gamma_star, beta_star;
  std::string descriptor;

  [[nodiscard]] std::size_t features() const { return train_x.cols(); }
  [[nodiscard]] std::size_t size() const { return train_y.size() + eval_y.size(); }
};

struct SyntheticOptions {
  std::size_t classes = 0;   // 0: task default (2 moons, 4 gaussians, grid² patches)
  std::size_t features = 8;  // gaussians only
  std::size_t clusters = 1;  // gaussians only: mixture components per class
  std::size_t grid = 2;      // patch_grid only
  std::size_t patch_dim = 4;
  double noise = 0.1;
  double eval_fraction = 0.25;
  // Seeds the class means and the (γ*, β*) draw; the sample seed is separate
  // so a base task and its shifted twin share geometry.
  std::uint64_t task_seed = 1234;
  bool shift = true;
  double shift_scale = 1.0;  // spread of log γ*
  double shift_offset = 2.0;  // spread of β*
};

namespace detail {

inline std::size_t eval_count(std::size_t n, double fraction) {
  if (fraction < 0.0 || fraction >= 1.0) throw ConfigError("eval_fraction must lie in [0, 1)");
  if (fraction == 0.0 || n < 2) return 0;
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction)), 1, n - 1);
}

// Seeded disjoint split. Row order within each split follows the permutation.
inline void split_into(DatasetHandle& d, const NDArray<double>& x, const std::vector<std::size_t>& y, double fraction,
                       std::uint64_t seed) {
  const std::size_t n = y.size(), f = x.cols();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ 0x5851f42d4c957f2dULL);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_eval = eval_count(n, fraction);
  const std::size_t n_train = n - n_eval;
  d.train_x = NDArray<double>(Shape{n_train, f});
  d.eval_x = NDArray<double>(Shape{n_eval, f});
  d.train_y.clear();
  d.eval_y.clear();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = order[i];
    auto& dst = i < n_train ? d.train_x : d.eval_x;
    const std::size_t row = i < n_train ? i : i - n_train;
    for (std::size_t c = 0; c < f; ++c) dst(row, c) = x(src, c);
    (i < n_train ? d.train_y : d.eval_y).push_back(y[src]);
  }
}

}  // namespace detail

/// Per-channel standardization with statistics from the train split only.
/// Constant channels keep unit scale.
inline void normalize(DatasetHandle& d) {
  const std::size_t n = d.train_x.rows(), f = d.features();
  if (n == 0) throw DataError("cannot normalize an empty train split");
  d.mean.assign(f, 0.0);
  d.stddev.assign(f, 0.0);
  for (std::size_t c = 0; c < f; ++c) {
    double s = 0;
    for (std::size_t r = 0; r < n; ++r) s += d.train_x(r, c);
    const double mu = s / static_cast<double>(n);
    double v = 0;
    for (std::size_t r = 0; r < n; ++r) v += (d.train_x(r, c) - mu) * (d.train_x(r, c) - mu);
    const double sd = std::sqrt(v / static_cast<double>(n));
    d.mean[c] = mu;
    d.stddev[c] = sd > 0 ? sd : 1.0;
  }
  for (auto* m : {&d.train_x, &d.eval_x}) {
    for (std::size_t r = 0; r < m->rows(); ++r)
      for (std::size_t c = 0; c < f; ++c) (*m)(r, c) = ((*m)(r, c) - d.mean[c]) / d.stddev[c];
  }
}

/// Seeded synthetic classification task. Class of sample i is i mod classes,
/// so every class holds n/classes samples up to one.
inline DatasetHandle gen_synthetic(SyntheticTask task, std::size_t n, std::uint64_t seed,
                                   const SyntheticOptions& opt = {}) {
  std::size_t classes = opt.classes;
  std::size_t f = 0;
  switch (task) {
    case SyntheticTask::two_moons:
      if (classes == 0) classes = 2;
      if (classes != 2) throw ConfigError("two_moons has exactly 2 classes");
      f = 2;
      break;
    case SyntheticTask::scaled_shifted_gaussians:
      if (classes == 0) classes = 4;
      if (opt.features == 0) throw ConfigError("features must be positive");
      f = opt.features;
      break;
    case SyntheticTask::patch_grid:
      if (opt.grid == 0 || opt.patch_dim == 0) throw ConfigError("grid and patch_dim must be positive");
      if (classes == 0) classes = opt.grid * opt.grid;
      if (classes > opt.grid * opt.grid) throw ConfigError("patch_grid supports at most grid² classes");
      f = opt.grid * opt.grid * opt.patch_dim;
      break;
  }
  if (classes < 2) throw ConfigError("need at least 2 classes");
  if (n < 2 * classes) {
    throw ConfigError("n = " + std::to_string(n) + " is below 2·classes = " + std::to_string(2 * classes));
  }
  if (!(opt.noise >= 0.0)) throw ConfigError("noise must be non-negative");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  NDArray<double> x(Shape{n, f});
  std::vector<std::size_t> y(n);
  DatasetHandle d;
  d.classes = classes;

  if (task == SyntheticTask::two_moons) {
    std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = i % 2;
      const double t = angle(rng);
      const double px = c == 0 ? std::cos(t) : 1.0 - std::cos(t);
      const double py = c == 0 ? std::sin(t) : 0.5 - std::sin(t);
      x(i, 0) = px + opt.noise * gauss(rng);
      x(i, 1) = py + opt.noise * gauss(rng);
      y[i] = c;
    }
  } else if (task == SyntheticTask::scaled_shifted_gaussians) {
    std::mt19937_64 task_rng(opt.task_seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    if (opt.clusters == 0) throw ConfigError("clusters must be positive");
    NDArray<double> means(Shape{classes * opt.clusters, f});
    for (auto& v : means.data()) v = unit(task_rng);
    d.gamma_star.assign(f, 1.0);
    d.beta_star.assign(f, 0.0);
    if (opt.shift) {
      for (std::size_t c = 0; c < f; ++c) d.gamma_star[c] = std::exp(opt.shift_scale * unit(task_rng));
      for (std::size_t c = 0; c < f; ++c) d.beta_star[c] = opt.shift_offset * unit(task_rng);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = i % classes;
      const std::size_t component = k * opt.clusters + (i / classes) % opt.clusters;
      for (std::size_t c = 0; c < f; ++c) {
        const double base = means(component, c) + opt.noise * gauss(rng);
        x(i, c) = opt.shift ? d.gamma_star[c] * base + d.beta_star[c] : base;
      }
      y[i] = k;
    }
  } else {
    // One patch carries a bright signature; its position is the label.
    const std::size_t patches = opt.grid * opt.grid;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = i % classes;
      for (std::size_t p = 0; p < patches; ++p)
        for (std::size_t j = 0; j < opt.patch_dim; ++j) {
          const double signal = p == k ? 1.0 + 0.5 * std::cos(static_cast<double>(j)) : 0.0;
          x(i, p * opt.patch_dim + j) = signal + opt.noise * gauss(rng);
        }
      y[i] = k;
    }
  }

  detail::split_into(d, x, y, opt.eval_fraction, seed);
  std::ostringstream desc;
  desc << "synthetic:" << to_string(task) << ":n=" << n << ":seed=" << seed << ":classes=" << classes
       << ":features=" << f;
  if (task == SyntheticTask::scaled_shifted_gaussians) {
    desc << ":clusters=" << opt.clusters << ":task_seed=" << opt.task_seed << ":shift=" << (opt.shift ? 1 : 0) << ":scale=" << opt.shift_scale
         << ":offset=" << opt.shift_offset;
  }
  desc << ":noise=" << opt.noise << ":eval=" << opt.eval_fraction;
  d.descriptor = desc.str();
  return d;
}

struct LoadOptions {
  std::size_t classes = 0;  // 0: infer as max label + 1
  double eval_fraction = 0.25;
  std::uint64_t seed = 0;
  std::string labels_path;  // idx only; derived from the image path when empty
  bool normalize = true;
};

namespace detail {

inline void check_labels(const std::vector<std::size_t>& y, std::size_t& classes, const std::string& path) {
  if (y.empty()) throw DataError(path + ": no samples");
  const std::size_t top = *std::max_element(y.begin(), y.end());
  if (classes == 0) classes = top + 1;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] >= classes) {
      throw DataError(path + ": sample " + std::to_string(i) + " has label " + std::to_string(y[i]) +
                      " outside [0, " + std::to_string(classes) + ")");
    }
  }
  if (classes < 2) throw DataError(path + ": need at least 2 classes");
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline DatasetHandle load_csv(const std::string& path, LoadOptions opt) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ":1: missing header row");
  const auto header = split_csv_line(line);
  if (header.size() < 2 || trim(header[0]) != "label") {
    throw FormatError(path + ":1: header must be 'label,f0,f1,...'");
  }
  for (std::size_t c = 1; c < header.size(); ++c) {
    if (trim(header[c]) != "f" + std::to_string(c - 1)) {
      throw FormatError(path + ":1:" + std::to_string(c + 1) + ": expected column 'f" + std::to_string(c - 1) +
                        "', found '" + trim(header[c]) + "'");
    }
  }
  const std::size_t f = header.size() - 1;
  std::vector<double> values;
  std::vector<std::size_t> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string where = path + ":" + std::to_string(line_no);
    if (cells.size() != f + 1) {
      throw FormatError(where + ": expected " + std::to_string(f + 1) + " columns, found " +
                        std::to_string(cells.size()));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string cell = trim(cells[c]);
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (cell.empty() || used != cell.size() || !std::isfinite(v)) {
        throw FormatError(where + ":" + std::to_string(c + 1) + ": cannot parse '" + cell + "' as a number");
      }
      if (c == 0) {
        if (v < 0) throw DataError(where + ": negative label " + cell);
        if (v != std::floor(v)) throw FormatError(where + ":1: label '" + cell + "' is not an integer");
        labels.push_back(static_cast<std::size_t>(v));
      } else {
        values.push_back(v);
      }
    }
  }
  check_labels(labels, opt.classes, path);
  const NDArray<double> x(Shape{labels.size(), f}, std::move(values));
  DatasetHandle d;
  d.classes = opt.classes;
  split_into(d, x, labels, opt.eval_fraction, opt.seed);
  d.descriptor = "csv:" + path + ":seed=" + std::to_string(opt.seed) + ":eval=" + std::to_string(opt.eval_fraction);
  return d;
}

// Reads a whole IDX file: magic (two zero bytes, type code, rank), big-endian
// u32 extents, then big-endian payload.
struct IdxFile {
  std::vector<std::size_t> dims;
  std::vector<double> values;
};

inline IdxFile read_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto need = [&](std::size_t offset, std::size_t count) {
    if (offset + count > bytes.size()) {
      throw FormatError(path + ": byte " + std::to_string(offset) + ": truncated file (" +
                        std::to_string(bytes.size()) + " bytes)");
    }
  };
  need(0, 4);
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError(path + ": byte 0: bad magic, expected leading zero bytes");
  const unsigned type = bytes[2];
  const std::size_t rank = bytes[3];
  std::size_t width = 0;
  switch (type) {
    case 0x08: case 0x09: width = 1; break;
    case 0x0B: width = 2; break;
    case 0x0C: case 0x0D: width = 4; break;
    case 0x0E: width = 8; break;
    default: throw FormatError(path + ": byte 2: unknown element type 0x" + [&] {
      std::ostringstream h;
      h << std::hex << type;
      return h.str();
    }());
  }
  if (rank == 0) throw FormatError(path + ": byte 3: rank must be positive");
  auto be = [&](std::size_t offset, std::size_t n) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v = (v << 8) | bytes[offset + i];
    return v;
  };
  IdxFile out;
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    need(4 + 4 * i, 4);
    const auto d = static_cast<std::size_t>(be(4 + 4 * i, 4));
    if (d == 0) throw FormatError(path + ": byte " + std::to_string(4 + 4 * i) + ": zero extent");
    out.dims.push_back(d);
    count *= d;
  }
  const std::size_t start = 4 + 4 * rank;
  need(start, count * width);
  if (bytes.size() != start + count * width) {
    throw FormatError(path + ": byte " + std::to_string(start + count * width) + ": trailing data after payload");
  }
  out.values.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t at = start + i * width;
    const std::uint64_t raw = be(at, width);
    double v = 0;
    switch (type) {
      case 0x08: v = static_cast<double>(raw); break;
      case 0x09: v = static_cast<double>(static_cast<std::int8_t>(raw)); break;
      case 0x0B: v = static_cast<double>(static_cast<std::int16_t>(raw)); break;
      case 0x0C: v = static_cast<double>(static_cast<std::int32_t>(raw)); break;
      case 0x0D: v = static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(raw))); break;
      case 0x0E: v = std::bit_cast<double>(raw); break;
    }
    if (!std::isfinite(v)) throw FormatError(path + ": byte " + std::to_string(at) + ": non-finite value");
    out.values.push_back(v);
  }
  return out;
}

inline std::string derive_labels_path(const std::string& images) {
  std::string p = images;
  for (const auto& [from, to] : {std::pair<std::string, std::string>{"images", "labels"}, {"idx3", "idx1"}}) {
    if (auto at = p.rfind(from); at != std::string::npos) p.replace(at, from.size(), to);
  }
  if (p == images) throw ConfigError("cannot derive a labels file from '" + images + "'; set labels_path");
  return p;
}

inline DatasetHandle load_idx(const std::string& path, LoadOptions opt) {
  const IdxFile images = read_idx(path);
  if (images.dims.size() < 2) throw FormatError(path + ": byte 3: image file needs rank >= 2");
  const std::string labels_path = opt.labels_path.empty() ? derive_labels_path(path) : opt.labels_path;
  const IdxFile labels = read_idx(labels_path);
  if (labels.dims.size() != 1) throw FormatError(labels_path + ": byte 3: label file must have rank 1");
  const std::size_t n = images.dims[0];
  if (labels.dims[0] != n) {
    throw DataError(labels_path + ": " + std::to_string(labels.dims[0]) + " labels for " + std::to_string(n) +
                    " images");
  }
  std::vector<std::size_t> y;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = labels.values[i];
    if (v < 0 || v != std::floor(v)) {
      throw DataError(labels_path + ": sample " + std::to_string(i) + " has invalid label " + std::to_string(v));
    }
    y.push_back(static_cast<std::size_t>(v));
  }
  check_labels(y, opt.classes, labels_path);
  const std::size_t f = images.values.size() / n;
  const NDArray<double> x(Shape{n, f}, images.values);
  DatasetHandle d;
  d.classes = opt.classes;
  split_into(d, x, y, opt.eval_fraction, opt.seed);
  d.descriptor = "idx:" + path + ":seed=" + std::to_string(opt.seed) + ":eval=" + std::to_string(opt.eval_fraction);
  return d;
}

}  // namespace detail

/// Loads a labeled dataset from disk, splits it with `opt.seed`, and
/// standardizes features with train-split statistics.
inline DatasetHandle load_dataset(const std::string& path, DataFormat format, const LoadOptions& opt = {}) {
  DatasetHandle d = format == DataFormat::csv_labeled ? detail::load_csv(path, opt) : detail::load_idx(path, opt);
  if (opt.normalize) normalize(d);
  return d;
}

/// Writes every sample (train rows first) as `label,f0,f1,...`.
inline void write_csv(const DatasetHandle& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << "label";
  for (std::size_t c = 0; c < d.features(); ++c) out << ",f" << c;
  out << '\n';
  out.precision(17);
  auto rows = [&](const NDArray<double>& x, const std::vector<std::size_t>& y) {
    for (std::size_t r = 0; r < y.size(); ++r) {
      out << y[r];
      for (std::size_t c = 0; c < x.cols(); ++c) out << ',' << x(r, c);
      out << '\n';
    }
  };
  rows(d.train_x, d.train_y);
  rows(d.eval_x, d.eval_y);
}

}  // namespace sanpeft

#endif  // SANPEFT_DATA_HPP
