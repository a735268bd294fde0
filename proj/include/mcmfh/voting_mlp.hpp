#pragma once

#include <cstdint>
#include <span>

#include "mcmfh/autodiff.hpp"
#include "mcmfh/layers.hpp"
#include "mcmfh/rng.hpp"

namespace mcmfh {

struct VotingConfig {
  bool enabled = true;
  std::size_t input_dim = 1024;
  std::size_t hidden_dim = 1024;
  std::size_t output_dim = 1024;
  double dropout_p = 0.2;
  std::size_t votes = 5;
  bool frozen = true;
  std::uint64_t seed = 7;

  void validate() const;
};

// Two-layer bias-free MLP f(z) = W2 GELU(Dropout_p(W1 z)) whose dropout stays
// active in every mode. forward_vote averages K independently masked passes.
class VotingMlp {
 public:
  // Kaiming-uniform (fan-in, ReLU-family gain) weights drawn from cfg.seed.
  // Weights are trainable only when cfg.frozen is false.
  static VotingMlp init_frozen(const VotingConfig& cfg);

  // z is (batch x input_dim); row i's K masks are drawn in vote order from streams[i].
  ad::Var forward_vote(const ad::Var& z, std::span<RngStream> streams) const;
  // All rows draw from one stream, row by row.
  ad::Var forward_vote(const ad::Var& z, RngStream& rng) const;
  // The MLP without dropout.
  ad::Var forward_deterministic(const ad::Var& z) const;

  ParamList parameters() const;
  const VotingConfig& config() const { return cfg_; }
  const ad::Var& w1() const { return w1_; }
  const ad::Var& w2() const { return w2_; }

 private:
  ad::Var forward_with_mask(const ad::Var& z, const Tensor& mask) const;

  VotingConfig cfg_;
  ad::Var w1_;  // input_dim x hidden_dim
  ad::Var w2_;  // hidden_dim x output_dim
};

}  // namespace mcmfh
