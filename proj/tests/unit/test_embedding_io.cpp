#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "mcmfh/binary_io.hpp"
#include "mcmfh/embedding_io.hpp"
#include "mcmfh/errors.hpp"
#include "mcmfh/moe_fusion.hpp"

using namespace mcmfh;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mcmfh_test_embedding_io";
  fs::create_directories(dir);
  return dir / name;
}

RecordSet small_set(std::uint32_t dim = 4, std::size_t n = 3) {
  RecordSet s;
  s.dim_image = s.dim_text = dim;
  s.num_classes = 2;
  for (std::size_t i = 0; i < n; ++i) {
    EmbeddingRecord r;
    for (std::uint32_t d = 0; d < dim; ++d) {
      r.image.push_back(static_cast<float>(i + 0.25 * d));
      r.text.push_back(static_cast<float>(-1.0 * i - 0.5 * d));
    }
    r.class_id = static_cast<std::uint32_t>(i % 2);
    s.records.push_back(r);
  }
  return s;
}

}  // namespace

TEST_CASE("write then read reproduces every record") {
  const auto path = temp_file("roundtrip.meb");
  const RecordSet s = small_set();
  write_records(path, s);
  CHECK(read_records(path) == s);
}

TEST_CASE("file layout is little-endian with the declared header") {
  const auto path = temp_file("layout.meb");
  write_records(path, small_set(2, 1));
  const auto bytes = bin::read_file(path);
  REQUIRE(bytes.size() == 4 + 4 + 4 + 4 + 8 + (2 + 2) * 4 + 4);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MEB1");
  CHECK(bytes[4] == 2);
  CHECK(bytes[8] == 2);
  CHECK(bytes[12] == 2);
  CHECK(bytes[16] == 1);
}

TEST_CASE("bad magic is reported as such") {
  const auto path = temp_file("magic.meb");
  write_records(path, small_set());
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  try {
    read_records(path);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatErrorKind::BadMagic);
  }
}

TEST_CASE("missing last record is a truncation error") {
  const auto path = temp_file("trunc.meb");
  write_records(path, small_set(512, 4));
  fs::resize_file(path, fs::file_size(path) - (512 * 2 * 4 + 4));
  try {
    read_records(path);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatErrorKind::Truncated);
  }
}

TEST_CASE("trailing bytes and unexpected dims are rejected") {
  const auto path = temp_file("trailing.meb");
  write_records(path, small_set());
  {
    std::ofstream f(path, std::ios::app | std::ios::binary);
    f.put('\0');
  }
  CHECK_THROWS_AS(read_records(path), FormatError);

  write_records(path, small_set(4));
  try {
    read_records(path, EmbeddingDims{512, 512});
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatErrorKind::DimMismatch);
  }
}

TEST_CASE("class ids beyond num_classes are invalid") {
  RecordSet s = small_set();
  s.records[0].class_id = 7;
  CHECK_THROWS_AS(validate_records(s), FormatError);
}

TEST_CASE("concat places image first and text second") {
  EmbeddingRecord r;
  r.image.assign(512, 1.0f);
  r.text.assign(512, 0.0f);
  const Tensor z = concat_embedding(r);
  REQUIRE(z.size() == 1024);
  for (std::size_t i = 0; i < 512; ++i) CHECK(z[i] == 1.0);
  for (std::size_t i = 512; i < 1024; ++i) CHECK(z[i] == 0.0);

  const FusedPair pair = split_fused(z);
  for (std::size_t i = 0; i < 512; ++i) {
    CHECK(pair.z_v[i] == static_cast<double>(r.image[i]));
    CHECK(pair.z_t[i] == static_cast<double>(r.text[i]));
  }

  r.text.resize(100);
  CHECK_THROWS_AS(concat_embedding(r), ShapeError);
}

TEST_CASE("split sizes follow largest-remainder rounding") {
  CHECK(split_sizes(100) == std::array<std::size_t, 3>{10, 60, 30});
  CHECK(split_sizes(101) == std::array<std::size_t, 3>{10, 61, 30});
  CHECK(split_sizes(2000) == std::array<std::size_t, 3>{200, 1200, 600});
  // 11 * (0.1, 0.6, 0.3) = (1.1, 6.6, 3.3): the single leftover goes to retrieval.
  CHECK(split_sizes(11) == std::array<std::size_t, 3>{1, 7, 3});
  // 15 * ... = (1.5, 9, 4.5): tied remainders favor the query set.
  CHECK(split_sizes(15) == std::array<std::size_t, 3>{2, 9, 4});
}

TEST_CASE("splits are disjoint, exhaustive and seed-deterministic") {
  const DatasetSplit a = split_dataset(257, 3);
  const DatasetSplit b = split_dataset(257, 3);
  const DatasetSplit c = split_dataset(257, 4);
  CHECK(a.query == b.query);
  CHECK(a.train == b.train);
  CHECK(a.query != c.query);
  std::set<std::size_t> all;
  for (const auto* part : {&a.query, &a.retrieval, &a.train}) all.insert(part->begin(), part->end());
  CHECK(all.size() == 257);
  CHECK(*all.rbegin() == 256);
  CHECK(a.query.size() + a.retrieval.size() + a.train.size() == 257);
  CHECK_THROWS_AS(split_dataset(9, 1), ConfigError);
}

TEST_CASE("synthetic samples are unit-norm and equal their centroid at zero noise") {
  SyntheticSpec spec;
  spec.num_classes = 3;
  spec.samples_per_class = 4;
  spec.dim = 32;
  spec.cluster_spread = 0.0;
  const RecordSet s = generate_synthetic(spec);
  REQUIRE(s.records.size() == 12);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t k = 1; k < 4; ++k) CHECK(s.records[c * 4 + k] == s.records[c * 4]);
  }
  spec.cluster_spread = 0.1;
  for (const auto& r : generate_synthetic(spec).records) {
    double ni = 0, nt = 0;
    for (float v : r.image) ni += static_cast<double>(v) * v;
    for (float v : r.text) nt += static_cast<double>(v) * v;
    CHECK(std::abs(std::sqrt(ni) - 1.0) < 1e-6);
    CHECK(std::abs(std::sqrt(nt) - 1.0) < 1e-6);
  }
}

TEST_CASE("synthetic classes are separable by nearest centroid") {
  SyntheticSpec spec;
  spec.num_classes = 10;
  spec.samples_per_class = 50;
  spec.cluster_spread = 0.1;
  const RecordSet s = generate_synthetic(spec);
  SyntheticSpec clean = spec;
  clean.cluster_spread = 0.0;
  clean.samples_per_class = 1;
  const RecordSet centroids = generate_synthetic(clean);
  std::size_t correct = 0;
  for (const auto& r : s.records) {
    std::size_t best = 0;
    double best_dot = -1e300;
    for (std::size_t c = 0; c < centroids.records.size(); ++c) {
      double d = 0;
      for (std::size_t i = 0; i < r.image.size(); ++i) d += static_cast<double>(r.image[i]) * centroids.records[c].image[i];
      if (d > best_dot) {
        best_dot = d;
        best = c;
      }
    }
    correct += best == r.class_id;
  }
  CHECK(static_cast<double>(correct) / s.records.size() >= 0.99);
}
