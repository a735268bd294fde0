#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "mcmfh/errors.hpp"
#include "mcmfh/tensor.hpp"

namespace mcmfh {

inline constexpr std::uint32_t kEmbeddingDim = 512;

struct EmbeddingRecord {
  std::vector<float> image;
  std::vector<float> text;
  std::uint32_t class_id = 0;

  bool operator==(const EmbeddingRecord&) const = default;
};

struct RecordSet {
  std::uint32_t dim_image = kEmbeddingDim;
  std::uint32_t dim_text = kEmbeddingDim;
  std::uint32_t num_classes = 0;
  std::vector<EmbeddingRecord> records;

  bool operator==(const RecordSet&) const = default;
};

enum class FormatErrorKind { Io, BadMagic, Truncated, TrailingData, DimMismatch, InvalidRecord };

class FormatError : public DataError {
 public:
  FormatError(FormatErrorKind kind, const std::string& what) : DataError(what), kind_(kind) {}
  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

struct EmbeddingDims {
  std::uint32_t image;
  std::uint32_t text;
};

// MEB1 on-disk format (little-endian, no padding):
//   "MEB1" | u32 dim_image | u32 dim_text | u32 num_classes | u64 record_count
//   then per record: dim_image x f32 | dim_text x f32 | u32 class_id
void write_records(const std::filesystem::path& path, const RecordSet& set);
RecordSet read_records(const std::filesystem::path& path, std::optional<EmbeddingDims> expected = std::nullopt);

// Validates dims, finiteness, and class range; throws FormatError(InvalidRecord/DimMismatch).
void validate_records(const RecordSet& set);

// z = [image ; text] widened to 64-bit.
Tensor concat_embedding(const EmbeddingRecord& rec, EmbeddingDims dims = {kEmbeddingDim, kEmbeddingDim});

struct DatasetSplit {
  std::vector<std::size_t> query;
  std::vector<std::size_t> retrieval;
  std::vector<std::size_t> train;
};

struct SplitRatio {
  std::size_t query = 1;
  std::size_t retrieval = 6;
  std::size_t train = 3;
};

// Part sizes for n items under largest-remainder rounding; remainder ties go
// to the earlier part (query, then retrieval, then train).
std::array<std::size_t, 3> split_sizes(std::size_t n, SplitRatio ratio = {});

// Seeded Fisher-Yates shuffle followed by contiguous partition. Requires n >= 10.
DatasetSplit split_dataset(std::size_t n, std::uint64_t seed, SplitRatio ratio = {});

struct SyntheticSpec {
  std::uint32_t num_classes = 10;
  std::uint32_t samples_per_class = 200;
  std::uint32_t dim = kEmbeddingDim;
  double cluster_spread = 0.1;
  std::uint64_t seed = 7;
};

// Per class, one unit-norm image centroid and one unit-norm text centroid; each
// sample is centroid + N(0, spread^2) noise, L2-normalized. Records are class-major.
RecordSet generate_synthetic(const SyntheticSpec& spec);

}  // namespace mcmfh
