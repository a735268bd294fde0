#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mcmfh/autodiff.hpp"
#include "mcmfh/layers.hpp"
#include "mcmfh/rng.hpp"

namespace mcmfh {

struct HashHeadConfig {
  std::size_t input_dim = 512;
  std::size_t hidden_dim = 512;
  std::uint32_t code_bits = 16;
  double dropout_p = 0.2;

  void validate() const;
};

bool valid_code_bits(std::uint32_t bits);

// linear -> ReLU -> dropout -> linear -> tanh. One instance per modality.
class HashHead {
 public:
  static HashHead create(const HashHeadConfig& cfg, RngStream& rng);

  // Relaxed codes in (-1, 1). Dropout is applied only when dropout_rng is given.
  ad::Var forward(const ad::Var& features, RngStream* dropout_rng = nullptr) const;

  void collect(ParamList& out, const std::string& prefix) const;
  const HashHeadConfig& config() const { return cfg_; }
  Linear& hidden_layer() { return hidden_; }
  Linear& code_layer() { return code_; }

 private:
  HashHeadConfig cfg_;
  Linear hidden_;
  Linear code_;
};

// Bit i lives in words[i / 64] at position i % 64; bits past `bits` are zero.
struct HashCode {
  std::uint32_t bits = 0;
  std::vector<std::uint64_t> words;

  static HashCode zeros(std::uint32_t bits);
  bool bit(std::uint32_t i) const { return (words[i / 64] >> (i % 64)) & 1u; }
  void set(std::uint32_t i) { words[i / 64] |= std::uint64_t{1} << (i % 64); }
  bool operator==(const HashCode&) const = default;
};

// bit_i = 1 iff relaxed_i >= 0.
HashCode sign_quantize(std::span<const double> relaxed);
std::vector<HashCode> sign_quantize_rows(const Tensor& relaxed);

std::uint32_t hamming(const HashCode& a, const HashCode& b);

enum class Modality { Image, Text };
const char* to_string(Modality m);

// Immutable code database. Codes are stored back to back using exactly
// bits/8 bytes each, so the payload scales linearly with code length.
class RetrievalIndex {
 public:
  static RetrievalIndex build(std::span<const HashCode> codes, std::span<const std::uint32_t> class_ids, Modality modality);

  std::size_t size() const { return class_ids_.size(); }
  bool empty() const { return class_ids_.empty(); }
  std::uint32_t code_bits() const { return bits_; }
  Modality modality() const { return modality_; }
  std::uint32_t class_id(std::size_t i) const { return class_ids_[i]; }
  std::span<const std::uint32_t> class_ids() const { return class_ids_; }
  HashCode code(std::size_t i) const;
  std::size_t payload_bytes() const { return packed_.size(); }

  // distances[i] = hamming(query, code(i)).
  void distances(const HashCode& query, std::vector<std::uint32_t>& out) const;

 private:
  std::uint32_t bits_ = 0;
  Modality modality_ = Modality::Text;
  std::vector<std::uint8_t> packed_;
  std::vector<std::uint32_t> class_ids_;
};

// All index items by ascending Hamming distance, ties by ascending item index.
std::vector<std::uint32_t> retrieve(const HashCode& query, const RetrievalIndex& index);

enum class Direction { I2T, T2I };
const char* to_string(Direction d);

struct QuerySet {
  std::vector<HashCode> codes;
  std::vector<std::uint32_t> class_ids;
  Modality modality = Modality::Image;
};

struct MapResult {
  double map = 0.0;
  std::size_t evaluated = 0;
  std::size_t excluded = 0;  // queries with no same-class item in the index
};

// AP of one ranked relevance list: mean of precision at each relevant rank.
// With top_k > 0 only the first top_k ranks count and the mean is over the
// relevant items found there (zero if none).
double average_precision(std::span<const bool> relevant_in_rank_order, std::size_t top_k = 0);

// Relevance is class_id equality; ranking follows retrieve(). top_k = 0 means mAP@all.
MapResult mean_average_precision(const QuerySet& queries, const RetrievalIndex& index, Direction direction,
                                 std::size_t top_k = 0);

// MHC1 code dump, little-endian:
//   "MHC1" | u32 code_bits | u64 count | count x (ceil(bits/64) x u64 words | u32 class_id)
void write_codes(const std::filesystem::path& path, std::span<const HashCode> codes,
                 std::span<const std::uint32_t> class_ids);
struct CodeDump {
  std::uint32_t code_bits = 0;
  std::vector<HashCode> codes;
  std::vector<std::uint32_t> class_ids;
};
CodeDump read_codes(const std::filesystem::path& path);

}  // namespace mcmfh
