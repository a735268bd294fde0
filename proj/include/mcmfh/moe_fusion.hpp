#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mcmfh/autodiff.hpp"
#include "mcmfh/layers.hpp"

namespace mcmfh {

struct MoEConfig {
  bool enabled = true;
  std::size_t num_experts = 4;
  std::size_t token_count = 2;
  std::size_t token_dim = 512;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 1024;
  std::size_t layers_per_expert = 2;
  double switch_lambda = 1e-2;
  double w_switch = 0.85;
  double w_var = 0.15;
  std::uint64_t seed = 7;

  void validate() const;
  std::size_t input_dim() const { return token_count * token_dim; }
  // A disabled MoE is a single always-selected expert with no gate.
  std::size_t active_experts() const { return enabled ? num_experts : 1; }
};

struct GateOutput {
  ad::Var probs;                   // batch x N softmax scores
  std::vector<std::size_t> top1;   // argmax per row, lowest index on ties
};

// probs = softmax(x W_gate) row-wise; top-1 selection.
GateOutput gate(const ad::Var& x, const ad::Var& w_gate);

// Batch routing statistics: T (traffic), P (mean scores), r (routes), s (scores).
struct RoutingBatchStats {
  std::vector<double> traffic;
  std::vector<double> mean_probs;
  std::vector<std::size_t> routed;
  Tensor scores;

  std::size_t num_experts() const { return traffic.size(); }
  std::size_t batch_size() const { return routed.size(); }
  static RoutingBatchStats from_gate(const GateOutput& g);
  // One-hot indicator r_{n,i}.
  double route_indicator(std::size_t n, std::size_t i) const { return routed[n] == i ? 1.0 : 0.0; }
};

struct Expert {
  std::vector<EncoderLayer> layers;

  // x is (batch x tokens*width); returns the same shape.
  ad::Var operator()(const ad::Var& x, std::size_t tokens) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct MoeOutput {
  ad::Var z;
  ad::Var probs;
  ad::Var mean_probs;  // differentiable P
  RoutingBatchStats stats;
};

// Top-1 gated mixture of transformer-encoder experts with residual layer norm:
//   h = g(x)[top1] * Expert_top1(x);  z = LayerNorm(h + x)
class MoeFusion {
 public:
  static MoeFusion create(const MoEConfig& cfg);

  GateOutput gate(const ad::Var& x) const;
  ad::Var expert_forward(const ad::Var& x, std::size_t expert) const;
  MoeOutput forward(const ad::Var& x) const;

  ParamList parameters() const;
  const MoEConfig& config() const { return cfg_; }
  const ad::Var& gate_weight() const { return w_gate_; }
  std::vector<Expert>& experts() { return experts_; }
  const std::vector<Expert>& experts() const { return experts_; }

 private:
  MoEConfig cfg_;
  ad::Var w_gate_;  // input_dim x N; undefined when disabled
  std::vector<Expert> experts_;
  LayerNormParams output_norm_;
};

// lambda * N * sum_i T_i P_i. T is a constant; the gradient flows through P.
ad::Var switch_loss(const ad::Var& mean_probs, std::span<const double> traffic, double lambda);
double switch_loss(const RoutingBatchStats& stats, double lambda);

// N * sum_i (p_i - 1/N)^2. Throws InputError unless p sums to 1 within 1e-6.
ad::Var variance_loss(const ad::Var& mean_probs);
double variance_loss(std::span<const double> mean_probs);

ad::Var hybrid_gating_loss(const ad::Var& mean_probs, std::span<const double> traffic, const MoEConfig& cfg);
double hybrid_gating_loss(const RoutingBatchStats& stats, const MoEConfig& cfg);

struct FusedPair {
  Tensor z_v;
  Tensor z_t;
};

// Splits a fused vector into its image half and text half.
FusedPair split_fused(const Tensor& z, std::size_t token_dim = 512);

}  // namespace mcmfh
