#include "mcmfh/embedding_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "mcmfh/binary_io.hpp"
#include "mcmfh/rng.hpp"

namespace mcmfh {

namespace bin {

void Writer::save(const std::filesystem::path& path) const {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string Reader::bytes(std::size_t n) {
  std::string s(data_.begin() + static_cast<std::ptrdiff_t>(pos_), data_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
  pos_ += n;
  return s;
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace bin

namespace {

constexpr std::string_view kMagic = "MEB1";
constexpr std::size_t kHeaderBytes = 4 + 4 + 4 + 4 + 8;

}  // namespace

void validate_records(const RecordSet& set) {
  for (std::size_t i = 0; i < set.records.size(); ++i) {
    const auto& r = set.records[i];
    if (r.image.size() != set.dim_image || r.text.size() != set.dim_text) {
      throw FormatError(FormatErrorKind::DimMismatch,
                        "record " + std::to_string(i) + " has dims " + std::to_string(r.image.size()) + "/" +
                            std::to_string(r.text.size()) + ", header declares " + std::to_string(set.dim_image) +
                            "/" + std::to_string(set.dim_text));
    }
    if (r.class_id >= set.num_classes) {
      throw FormatError(FormatErrorKind::InvalidRecord, "record " + std::to_string(i) + " class_id " +
                                                            std::to_string(r.class_id) + " >= num_classes " +
                                                            std::to_string(set.num_classes));
    }
    auto finite = [](float v) { return std::isfinite(v); };
    if (!std::all_of(r.image.begin(), r.image.end(), finite) || !std::all_of(r.text.begin(), r.text.end(), finite)) {
      throw FormatError(FormatErrorKind::InvalidRecord, "record " + std::to_string(i) + " has non-finite values");
    }
  }
}

void write_records(const std::filesystem::path& path, const RecordSet& set) {
  validate_records(set);
  bin::Writer w;
  w.bytes(kMagic);
  w.u32(set.dim_image);
  w.u32(set.dim_text);
  w.u32(set.num_classes);
  w.u64(set.records.size());
  for (const auto& r : set.records) {
    for (float v : r.image) w.f32(v);
    for (float v : r.text) w.f32(v);
    w.u32(r.class_id);
  }
  w.save(path);
}

RecordSet read_records(const std::filesystem::path& path, std::optional<EmbeddingDims> expected) {
  std::vector<char> raw;
  try {
    raw = bin::read_file(path);
  } catch (const DataError& e) {
    throw FormatError(FormatErrorKind::Io, e.what());
  }
  bin::Reader in(std::move(raw));
  if (!in.has(4) || in.bytes(4) != kMagic) {
    throw FormatError(FormatErrorKind::BadMagic, path.string() + ": not an MEB1 file (bad magic)");
  }
  if (!in.has(kHeaderBytes - 4)) throw FormatError(FormatErrorKind::Truncated, path.string() + ": truncated header");
  RecordSet set;
  set.dim_image = in.u32();
  set.dim_text = in.u32();
  set.num_classes = in.u32();
  const std::uint64_t count = in.u64();
  if (expected && (expected->image != set.dim_image || expected->text != set.dim_text)) {
    throw FormatError(FormatErrorKind::DimMismatch, path.string() + ": header dims " + std::to_string(set.dim_image) +
                                                        "/" + std::to_string(set.dim_text) + ", expected " +
                                                        std::to_string(expected->image) + "/" +
                                                        std::to_string(expected->text));
  }
  const std::size_t record_bytes = 4ull * (set.dim_image + set.dim_text) + 4;
  if (count > in.remaining() / record_bytes) {
    throw FormatError(FormatErrorKind::Truncated,
                      path.string() + ": header declares " + std::to_string(count) + " records but payload holds " +
                          std::to_string(in.remaining() / record_bytes));
  }
  set.records.resize(count);
  for (auto& r : set.records) {
    r.image.resize(set.dim_image);
    r.text.resize(set.dim_text);
    for (float& v : r.image) v = in.f32();
    for (float& v : r.text) v = in.f32();
    r.class_id = in.u32();
  }
  if (in.remaining() != 0) {
    throw FormatError(FormatErrorKind::TrailingData,
                      path.string() + ": " + std::to_string(in.remaining()) + " bytes after the last record");
  }
  validate_records(set);
  return set;
}

Tensor concat_embedding(const EmbeddingRecord& rec, EmbeddingDims dims) {
  if (rec.image.size() != dims.image || rec.text.size() != dims.text) {
    throw ShapeError("concat_embedding: record dims " + std::to_string(rec.image.size()) + "+" +
                     std::to_string(rec.text.size()) + ", expected " + std::to_string(dims.image) + "+" +
                     std::to_string(dims.text));
  }
  Tensor z({static_cast<std::size_t>(dims.image) + dims.text});
  std::size_t i = 0;
  for (float v : rec.image) z[i++] = v;
  for (float v : rec.text) z[i++] = v;
  return z;
}

std::array<std::size_t, 3> split_sizes(std::size_t n, SplitRatio ratio) {
  const std::array<std::size_t, 3> weights{ratio.query, ratio.retrieval, ratio.train};
  const std::size_t total = weights[0] + weights[1] + weights[2];
  if (total == 0) throw ConfigError("split ratio must have a positive part");
  std::array<std::size_t, 3> sizes{};
  std::array<std::size_t, 3> remainders{};
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    sizes[k] = n * weights[k] / total;
    remainders[k] = n * weights[k] % total;
    assigned += sizes[k];
  }
  for (std::size_t left = n - assigned; left > 0; --left) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 3; ++k)
      if (remainders[k] > remainders[best]) best = k;
    ++sizes[best];
    remainders[best] = 0;
  }
  return sizes;
}

DatasetSplit split_dataset(std::size_t n, std::uint64_t seed, SplitRatio ratio) {
  if (n < 10) throw ConfigError("dataset of " + std::to_string(n) + " records is too small to split (need >= 10)");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  RngStream rng = RngStream(seed).split("split");
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  const auto sizes = split_sizes(n, ratio);
  DatasetSplit split;
  auto it = order.begin();
  split.query.assign(it, it + static_cast<std::ptrdiff_t>(sizes[0]));
  it += static_cast<std::ptrdiff_t>(sizes[0]);
  split.retrieval.assign(it, it + static_cast<std::ptrdiff_t>(sizes[1]));
  it += static_cast<std::ptrdiff_t>(sizes[1]);
  split.train.assign(it, order.end());
  return split;
}

namespace {

std::vector<double> unit_gaussian(std::size_t dim, RngStream& rng) {
  std::vector<double> v(dim);
  double ss = 0.0;
  for (double& x : v) {
    x = rng.normal();
    ss += x * x;
  }
  const double inv = 1.0 / std::sqrt(ss);
  for (double& x : v) x *= inv;
  return v;
}

std::vector<float> noisy_sample(const std::vector<double>& centroid, double spread, RngStream& rng) {
  std::vector<double> v(centroid.size());
  double ss = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = centroid[i] + spread * rng.normal();
    ss += v[i] * v[i];
  }
  const double inv = 1.0 / std::sqrt(ss);
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] * inv);
  return out;
}

}  // namespace

RecordSet generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes == 0 || spec.samples_per_class == 0 || spec.dim == 0) {
    throw ConfigError("synthetic spec needs positive class count, samples per class, and dim");
  }
  if (!(spec.cluster_spread >= 0.0) || !std::isfinite(spec.cluster_spread)) {
    throw ConfigError("synthetic cluster spread must be finite and non-negative");
  }
  RngStream root = RngStream(spec.seed).split("synthetic");
  RngStream centroid_rng = root.split("centroids");
  RngStream sample_rng = root.split("samples");
  RecordSet set;
  set.dim_image = spec.dim;
  set.dim_text = spec.dim;
  set.num_classes = spec.num_classes;
  set.records.reserve(static_cast<std::size_t>(spec.num_classes) * spec.samples_per_class);
  for (std::uint32_t c = 0; c < spec.num_classes; ++c) {
    const auto image_centroid = unit_gaussian(spec.dim, centroid_rng);
    const auto text_centroid = unit_gaussian(spec.dim, centroid_rng);
    for (std::uint32_t s = 0; s < spec.samples_per_class; ++s) {
      EmbeddingRecord r;
      r.image = noisy_sample(image_centroid, spec.cluster_spread, sample_rng);
      r.text = noisy_sample(text_centroid, spec.cluster_spread, sample_rng);
      r.class_id = c;
      set.records.push_back(std::move(r));
    }
  }
  return set;
}

}  // namespace mcmfh
