#include "mcmfh/benchmark.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "mcmfh/errors.hpp"
#include "mcmfh/rng.hpp"

namespace mcmfh {

namespace {

using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::vector<float> random_unit_rows(std::size_t n, std::size_t dim, RngStream& rng) {
  std::vector<float> out(n * dim);
  for (std::size_t r = 0; r < n; ++r) {
    double ss = 0.0;
    std::vector<double> v(dim);
    for (double& x : v) {
      x = rng.normal();
      ss += x * x;
    }
    const double inv = 1.0 / std::sqrt(ss);
    for (std::size_t c = 0; c < dim; ++c) out[r * dim + c] = static_cast<float>(v[c] * inv);
  }
  return out;
}

HashCode random_code(std::uint32_t bits, RngStream& rng) {
  HashCode c = HashCode::zeros(bits);
  const std::uint64_t w = rng.next_u64();
  c.words[0] = bits == 64 ? w : (w & ((std::uint64_t{1} << bits) - 1));
  return c;
}

void digest_ranking(std::uint64_t& h, const std::vector<std::uint32_t>& ranking) {
  for (std::uint32_t v : ranking) {
    for (int b = 0; b < 4; ++b) {
      h ^= (v >> (8 * b)) & 0xFF;
      h *= 0x100000001B3ULL;
    }
  }
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Runs fn(q) for every query, split into contiguous chunks over threads.
template <typename Fn>
void for_each_query(std::size_t queries, std::size_t threads, Fn&& fn) {
  if (threads <= 1) {
    for (std::size_t q = 0; q < queries; ++q) fn(q);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (queries + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * chunk, end = std::min(queries, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&, begin, end] {
      for (std::size_t q = begin; q < end; ++q) fn(q);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

std::vector<std::uint32_t> rank_by_inner_product(std::span<const float> query, std::span<const float> features,
                                                 std::size_t dim) {
  if (query.size() != dim || features.size() % dim != 0) throw ShapeError("rank_by_inner_product: dimension mismatch");
  const std::size_t n = features.size() / dim;
  Eigen::Map<const FloatMatrix> corpus(features.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  Eigen::Map<const Eigen::VectorXf> q(query.data(), static_cast<Eigen::Index>(dim));
  const Eigen::VectorXf scores = corpus * q;
  std::vector<std::uint32_t> ranking(n);
  std::iota(ranking.begin(), ranking.end(), 0u);
  std::sort(ranking.begin(), ranking.end(), [&](std::uint32_t a, std::uint32_t b) {
    return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
  });
  return ranking;
}

BenchmarkReport benchmark(const BenchmarkOptions& options) {
  if (options.repetitions == 0 || options.queries == 0) throw ConfigError("benchmark needs repetitions and queries > 0");
  BenchmarkReport report;
  RngStream root = RngStream(options.seed).split("benchmark");
  for (std::size_t n : options.corpus_sizes) {
    RngStream float_rng = root.split("float").split(n);
    const auto corpus = random_unit_rows(n, options.float_dim, float_rng);
    const auto float_queries = random_unit_rows(options.queries, options.float_dim, float_rng);

    // Float timing does not depend on code length; measure once per corpus size.
    std::vector<double> float_times;
    std::uint64_t float_digest = 0;
    std::vector<std::vector<std::uint32_t>> float_rankings(options.queries);
    for (std::size_t rep = 0; rep < options.repetitions; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      for_each_query(options.queries, options.threads, [&](std::size_t q) {
        float_rankings[q] = rank_by_inner_product(
            std::span<const float>(float_queries).subspan(q * options.float_dim, options.float_dim), corpus,
            options.float_dim);
      });
      const auto t1 = std::chrono::steady_clock::now();
      float_times.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count() /
                            static_cast<double>(options.queries));
    }
    float_digest = 0xCBF29CE484222325ULL;
    for (const auto& r : float_rankings) digest_ranking(float_digest, r);

    for (std::uint32_t bits : options.code_bits) {
      if (!valid_code_bits(bits)) throw ConfigError("benchmark: unsupported code length " + std::to_string(bits));
      RngStream code_rng = root.split("codes").split(n).split(bits);
      std::vector<HashCode> codes;
      codes.reserve(n);
      for (std::size_t i = 0; i < n; ++i) codes.push_back(random_code(bits, code_rng));
      std::vector<HashCode> queries;
      for (std::size_t q = 0; q < options.queries; ++q) queries.push_back(random_code(bits, code_rng));
      const std::vector<std::uint32_t> labels(n, 0);
      const RetrievalIndex index = RetrievalIndex::build(codes, labels, Modality::Text);

      std::vector<double> hash_times;
      std::vector<std::vector<std::uint32_t>> rankings(options.queries);
      for (std::size_t rep = 0; rep < options.repetitions; ++rep) {
        const auto t0 = std::chrono::steady_clock::now();
        for_each_query(options.queries, options.threads, [&](std::size_t q) { rankings[q] = retrieve(queries[q], index); });
        const auto t1 = std::chrono::steady_clock::now();
        hash_times.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count() /
                             static_cast<double>(options.queries));
      }
      BenchmarkRow row;
      row.corpus_size = n;
      row.code_bits = bits;
      row.median_us_hash = median(hash_times);
      row.median_us_float = median(float_times);
      row.ratio = row.median_us_float / row.median_us_hash;
      row.bytes_hash = index.payload_bytes();
      row.bytes_float = n * options.float_dim * sizeof(float);
      row.hash_ranking_digest = 0xCBF29CE484222325ULL;
      for (const auto& r : rankings) digest_ranking(row.hash_ranking_digest, r);
      row.float_ranking_digest = float_digest;
      report.rows.push_back(row);
    }
  }
  return report;
}

std::string benchmark_csv(const BenchmarkReport& report) {
  std::ostringstream out;
  out.precision(17);
  out << "corpus_size,code_bits,median_us_hash,median_us_float,ratio,bytes_hash,bytes_float\n";
  for (const auto& r : report.rows) {
    out << r.corpus_size << ',' << r.code_bits << ',' << r.median_us_hash << ',' << r.median_us_float << ','
        << r.ratio << ',' << r.bytes_hash << ',' << r.bytes_float << '\n';
  }
  return out.str();
}

std::string benchmark_json(const BenchmarkReport& report, double reference_ratio) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"corpus_size", r.corpus_size},
                    {"code_bits", r.code_bits},
                    {"median_us_hash", r.median_us_hash},
                    {"median_us_float", r.median_us_float},
                    {"ratio", r.ratio},
                    {"bytes_hash", r.bytes_hash},
                    {"bytes_float", r.bytes_float}});
  }
  return nlohmann::json{{"rows", rows}, {"reference_float_over_hash_ratio", reference_ratio}}.dump(2);
}

}  // namespace mcmfh
