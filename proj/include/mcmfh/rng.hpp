#pragma once

#include <cstdint>
#include <string_view>

namespace mcmfh {

// Counter-based random stream. The n-th draw of a stream is a pure function of
// (key, n), so a stream can be split into independent named children without
// touching the parent's position.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0);

  RngStream split(std::string_view label) const;
  RngStream split(std::uint64_t index) const;

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  // Standard normal via Box-Muller (both values of the pair are used).
  double normal();
  // Uniform integer in [0, bound). bound must be positive.
  std::uint64_t below(std::uint64_t bound);

  std::uint64_t key() const { return key_; }
  std::uint64_t position() const { return counter_; }

 private:
  RngStream(std::uint64_t key, std::uint64_t counter) : key_(key), counter_(counter) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view text);

}  // namespace mcmfh
