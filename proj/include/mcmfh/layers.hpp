#pragma once

#include <string>
#include <vector>

#include "mcmfh/autodiff.hpp"
#include "mcmfh/rng.hpp"

namespace mcmfh {

struct NamedParam {
  std::string name;
  ad::Var var;
};
using ParamList = std::vector<NamedParam>;

Tensor uniform_tensor(Shape shape, double bound, RngStream& rng);

// y = x W + b with W stored (in x out).
struct Linear {
  ad::Var weight;
  ad::Var bias;  // undefined for bias-free layers

  // Weights and bias ~ U(-bound, bound); bound defaults to 1/sqrt(in).
  static Linear create(std::size_t in, std::size_t out, RngStream& rng, bool with_bias = true, double bound = 0.0);
  ad::Var operator()(const ad::Var& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }
};

struct LayerNormParams {
  ad::Var gamma;
  ad::Var beta;

  static LayerNormParams create(std::size_t features);
  ad::Var operator()(const ad::Var& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct AttentionParams {
  Linear query, key, value, output;
  std::size_t heads = 1;

  static AttentionParams create(std::size_t width, std::size_t heads, RngStream& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

// Self-attention over sequences of `tokens` consecutive rows of x (batch*tokens x d).
// No positional encoding is applied.
ad::Var multi_head_self_attention(const ad::Var& x, std::size_t tokens, const AttentionParams& params);

// Post-norm transformer encoder layer:
//   x = LN(x + MHSA(x)); x = LN(x + W2 ReLU(W1 x)).
struct EncoderLayer {
  AttentionParams attention;
  LayerNormParams norm1;
  Linear ffn1, ffn2;
  LayerNormParams norm2;

  static EncoderLayer create(std::size_t width, std::size_t heads, std::size_t ffn_hidden, RngStream& rng);
  ad::Var operator()(const ad::Var& x, std::size_t tokens) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

void set_trainable(const ParamList& params, bool trainable);
std::size_t parameter_count(const ParamList& params);

}  // namespace mcmfh
