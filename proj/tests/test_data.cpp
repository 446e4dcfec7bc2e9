// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <sanpeft/data.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace sanpeft;
using Catch::Matchers::ContainsSubstring;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "sanpeft_test_data";
  fs::create_directories(dir);
  return dir / name;
}

fs::path write_text(const std::string& name, const std::string& text) {
  const fs::path p = scratch(name);
  std::ofstream(p) << text;
  return p;
}

void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<unsigned char>(v >> s));
}

fs::path write_idx(const std::string& name, std::uint32_t magic, const std::vector<std::uint32_t>& dims,
                   const std::vector<unsigned char>& payload) {
  std::vector<unsigned char> bytes;
  put_be32(bytes, magic);
  for (auto d : dims) put_be32(bytes, d);
  bytes.insert(bytes.end(), payload.begin(), payload.end());
  const fs::path p = scratch(name);
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                           static_cast<std::streamsize>(bytes.size()));
  return p;
}

std::string csv_bytes(const DatasetHandle& d) {
  const fs::path p = scratch("roundtrip.csv");
  write_csv(d, p.string());
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::size_t> all_labels(const DatasetHandle& d) {
  std::vector<std::size_t> y = d.train_y;
  y.insert(y.end(), d.eval_y.begin(), d.eval_y.end());
  return y;
}

}  // namespace

TEST_CASE("gen_synthetic is deterministic", "[data][synthetic]") {
  const auto a = gen_synthetic(SyntheticTask::two_moons, 200, 7);
  const auto b = gen_synthetic(SyntheticTask::two_moons, 200, 7);
  CHECK(csv_bytes(a) == csv_bytes(b));
  CHECK(a.descriptor == b.descriptor);
  CHECK(csv_bytes(a) != csv_bytes(gen_synthetic(SyntheticTask::two_moons, 200, 8)));
  CHECK(a.size() == 200);
  CHECK(a.features() == 2);
}

TEST_CASE("an identity shift reproduces the base task", "[data][synthetic]") {
  SyntheticOptions plain;
  plain.shift = false;
  SyntheticOptions identity;
  identity.shift_scale = 0.0;
  identity.shift_offset = 0.0;
  const auto a = gen_synthetic(SyntheticTask::scaled_shifted_gaussians, 120, 3, plain);
  const auto b = gen_synthetic(SyntheticTask::scaled_shifted_gaussians, 120, 3, identity);
  CHECK(a.train_x == b.train_x);
  CHECK(a.eval_x == b.eval_x);
  CHECK(a.train_y == b.train_y);
  for (double g : b.gamma_star) CHECK(g == 1.0);
  for (double s : b.beta_star) CHECK(s == 0.0);
}

TEST_CASE("the shift is the recorded affine map", "[data][synthetic]") {
  SyntheticOptions plain;
  plain.shift = false;
  const auto base = gen_synthetic(SyntheticTask::scaled_shifted_gaussians, 80, 4, plain);
  const auto shifted = gen_synthetic(SyntheticTask::scaled_shifted_gaussians, 80, 4);
  REQUIRE(shifted.gamma_star.size() == shifted.features());
  for (std::size_t r = 0; r < base.train_y.size(); ++r)
    for (std::size_t c = 0; c < base.features(); ++c) {
      CHECK(std::abs(shifted.train_x(r, c) - (shifted.gamma_star[c] * base.train_x(r, c) + shifted.beta_star[c])) <
            1e-12);
    }
}

TEST_CASE("synthetic classes are balanced and labels in range", "[data][synthetic][property]") {
  for (auto task : {SyntheticTask::two_moons, SyntheticTask::scaled_shifted_gaussians, SyntheticTask::patch_grid}) {
    for (std::size_t n : {8, 37, 101, 400}) {
      const auto d = gen_synthetic(task, n, n);
      std::vector<std::size_t> counts(d.classes);
      for (auto y : all_labels(d)) {
        REQUIRE(y < d.classes);
        ++counts[y];
      }
      for (auto c : counts) {
        CHECK(static_cast<double>(c) >= static_cast<double>(n) / d.classes - 1.0);
        CHECK(static_cast<double>(c) <= static_cast<double>(n) / d.classes + 1.0);
      }
      CHECK(d.train_y.size() + d.eval_y.size() == n);
      CHECK(!d.train_y.empty());
      CHECK(!d.eval_y.empty());
    }
  }
}

TEST_CASE("the split is disjoint and seeded", "[data][split][property]") {
  // Every sample has a unique feature row, so rows identify samples.
  const auto d = gen_synthetic(SyntheticTask::scaled_shifted_gaussians, 60, 9);
  std::set<std::vector<double>> seen;
  for (const auto* x : {&d.train_x, &d.eval_x})
    for (std::size_t r = 0; r < x->rows(); ++r) {
      std::vector<double> row(x->values().begin() + r * x->cols(), x->values().begin() + (r + 1) * x->cols());
      CHECK(seen.insert(row).second);
    }
  CHECK(seen.size() == 60);
}

TEST_CASE("gen_synthetic rejects invalid counts", "[data][synthetic][errors]") {
  REQUIRE_THROWS_AS(gen_synthetic(SyntheticTask::two_moons, 3, 0), ConfigError);
  SyntheticOptions opt;
  opt.classes = 5;
  REQUIRE_THROWS_AS(gen_synthetic(SyntheticTask::scaled_shifted_gaussians, 9, 0, opt), ConfigError);
  REQUIRE_THROWS_AS(gen_synthetic(SyntheticTask::two_moons, 100, 0, opt), ConfigError);
  REQUIRE_THROWS_AS(parse_synthetic_task("spirals"), ConfigError);
}

TEST_CASE("load_dataset reads a csv fixture", "[data][csv]") {
  const auto p = write_text("three.csv", "label,f0,f1,f2\n0,1.5,2,3\n1,-1,0.25,4\n0,2,2,2\n");
  LoadOptions opt;
  opt.normalize = false;
  const auto d = load_dataset(p.string(), DataFormat::csv_labeled, opt);
  CHECK(d.size() == 3);
  CHECK(d.features() == 3);
  CHECK(d.classes == 2);
}

TEST_CASE("csv loading normalizes with train statistics", "[data][csv][property]") {
  const auto src = gen_synthetic(SyntheticTask::scaled_shifted_gaussians, 200, 1);
  const auto p = scratch("gauss.csv");
  write_csv(src, p.string());
  const auto d = load_dataset(p.string(), DataFormat::csv_labeled);
  for (std::size_t c = 0; c < d.features(); ++c) {
    double mean = 0, var = 0;
    const std::size_t n = d.train_y.size();
    for (std::size_t r = 0; r < n; ++r) mean += d.train_x(r, c);
    mean /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) var += (d.train_x(r, c) - mean) * (d.train_x(r, c) - mean);
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(std::sqrt(var / static_cast<double>(n)) - 1.0) < 1e-6);
  }
  CHECK(d.mean.size() == d.features());
}

TEST_CASE("csv errors carry positions", "[data][csv][errors]") {
  const auto bad_header = write_text("bad_header.csv", "y,f0\n0,1\n");
  REQUIRE_THROWS_AS(load_dataset(bad_header.string(), DataFormat::csv_labeled), FormatError);

  const auto bad_value = write_text("bad_value.csv", "label,f0,f1\n0,1,2\n1,3,abc\n");
  REQUIRE_THROWS_AS(load_dataset(bad_value.string(), DataFormat::csv_labeled), FormatError);
  REQUIRE_THROWS_WITH(load_dataset(bad_value.string(), DataFormat::csv_labeled), ContainsSubstring(":3:"));

  const auto short_row = write_text("short_row.csv", "label,f0,f1\n0,1\n");
  REQUIRE_THROWS_AS(load_dataset(short_row.string(), DataFormat::csv_labeled), FormatError);

  const auto negative = write_text("negative.csv", "label,f0\n0,1\n-1,2\n");
  REQUIRE_THROWS_AS(load_dataset(negative.string(), DataFormat::csv_labeled), DataError);

  const auto range = write_text("range.csv", "label,f0\n0,1\n3,2\n1,1\n");
  LoadOptions opt;
  opt.classes = 2;
  REQUIRE_THROWS_AS(load_dataset(range.string(), DataFormat::csv_labeled, opt), DataError);

  REQUIRE_THROWS_AS(load_dataset(scratch("missing.csv").string(), DataFormat::csv_labeled), ConfigError);
}

TEST_CASE("load_dataset reads idx images", "[data][idx]") {
  std::vector<unsigned char> pixels;
  for (int i = 0; i < 4 * 3 * 2; ++i) pixels.push_back(static_cast<unsigned char>(i * 7));
  const auto images = write_idx("digits-images-idx3-ubyte", 0x00000803, {4, 3, 2}, pixels);
  write_idx("digits-labels-idx1-ubyte", 0x00000801, {4}, {0, 1, 2, 1});
  LoadOptions opt;
  opt.normalize = false;
  opt.eval_fraction = 0.25;
  const auto d = load_dataset(images.string(), DataFormat::idx_images, opt);
  CHECK(d.size() == 4);
  CHECK(d.features() == 6);
  CHECK(d.classes == 3);
  double total = 0;
  for (double v : d.train_x.data()) total += v;
  for (double v : d.eval_x.data()) total += v;
  double expected = 0;
  for (auto v : pixels) expected += v;
  CHECK(total == expected);
}

TEST_CASE("idx errors carry byte positions", "[data][idx][errors]") {
  const auto magic = write_idx("bad-images-idx3-ubyte", 0x01000803, {1, 1, 1}, {0});
  REQUIRE_THROWS_WITH(load_dataset(magic.string(), DataFormat::idx_images), ContainsSubstring("byte 0"));
  const auto truncated = write_idx("short-images-idx3-ubyte", 0x00000803, {2, 2, 2}, {1, 2, 3});
  REQUIRE_THROWS_AS(load_dataset(truncated.string(), DataFormat::idx_images), FormatError);

  const auto images = write_idx("range-images-idx3-ubyte", 0x00000803, {2, 1, 1}, {1, 2});
  write_idx("range-labels-idx1-ubyte", 0x00000801, {2}, {0, 5});
  LoadOptions opt;
  opt.classes = 3;
  REQUIRE_THROWS_AS(load_dataset(images.string(), DataFormat::idx_images, opt), DataError);
}

TEST_CASE("csv round trip preserves samples", "[data][csv]") {
  const auto src = gen_synthetic(SyntheticTask::patch_grid, 40, 2);
  const auto p = scratch("patch.csv");
  write_csv(src, p.string());
  LoadOptions opt;
  opt.normalize = false;
  const auto d = load_dataset(p.string(), DataFormat::csv_labeled, opt);
  CHECK(d.size() == src.size());
  CHECK(d.features() == src.features());
  double a = 0, b = 0;
  for (double v : src.train_x.data()) a += v;
  for (double v : src.eval_x.data()) a += v;
  for (double v : d.train_x.data()) b += v;
  for (double v : d.eval_x.data()) b += v;
  CHECK(std::abs(a - b) < 1e-9);
}
