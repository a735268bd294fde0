#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mcmfh/hash_retrieval.hpp"

namespace mcmfh {

struct BenchmarkOptions {
  std::vector<std::size_t> corpus_sizes{50000};
  std::vector<std::uint32_t> code_bits{16, 32, 64};
  std::size_t float_dim = 512;
  std::size_t repetitions = 20;
  std::size_t queries = 100;
  // Queries are split across this many threads; rankings do not depend on it.
  std::size_t threads = 1;
  std::uint64_t seed = 7;
};

struct BenchmarkRow {
  std::size_t corpus_size = 0;
  std::uint32_t code_bits = 0;
  double median_us_hash = 0.0;
  double median_us_float = 0.0;
  double ratio = 0.0;  // float latency / hash latency
  std::size_t bytes_hash = 0;
  std::size_t bytes_float = 0;
  // FNV-1a digests over every query's full ranking (last repetition).
  std::uint64_t hash_ranking_digest = 0;
  std::uint64_t float_ranking_digest = 0;
};

struct BenchmarkReport {
  std::vector<BenchmarkRow> rows;
};

// Real-valued baseline ranking: descending inner product, ties by ascending index.
// `features` is row-major (n x dim).
std::vector<std::uint32_t> rank_by_inner_product(std::span<const float> query, std::span<const float> features,
                                                 std::size_t dim);

// Times full-corpus ranking per query for packed Hamming codes and for
// L2-normalized float features; reports medians over repetitions.
BenchmarkReport benchmark(const BenchmarkOptions& options);

std::string benchmark_csv(const BenchmarkReport& report);
std::string benchmark_json(const BenchmarkReport& report, double reference_ratio = 1.73);

}  // namespace mcmfh
