#include "mcmfh/layers.hpp"

#include <cmath>

#include "mcmfh/errors.hpp"

namespace mcmfh {

Tensor uniform_tensor(Shape shape, double bound, RngStream& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = (2.0 * rng.uniform() - 1.0) * bound;
  return t;
}

Linear Linear::create(std::size_t in, std::size_t out, RngStream& rng, bool with_bias, double bound) {
  if (bound <= 0.0) bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear layer;
  layer.weight = ad::Var(uniform_tensor({in, out}, bound, rng), true);
  if (with_bias) layer.bias = ad::Var(uniform_tensor({out}, bound, rng), true);
  return layer;
}

ad::Var Linear::operator()(const ad::Var& x) const {
  ad::Var y = ad::matmul(x, weight);
  return bias.defined() ? ad::add_bias(y, bias) : y;
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

LayerNormParams LayerNormParams::create(std::size_t features) {
  return {ad::Var(Tensor({features}, 1.0), true), ad::Var(Tensor({features}, 0.0), true)};
}

ad::Var LayerNormParams::operator()(const ad::Var& x) const { return ad::layer_norm(x, gamma, beta); }

void LayerNormParams::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

AttentionParams AttentionParams::create(std::size_t width, std::size_t heads, RngStream& rng) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("attention width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  AttentionParams p;
  p.query = Linear::create(width, width, rng);
  p.key = Linear::create(width, width, rng);
  p.value = Linear::create(width, width, rng);
  p.output = Linear::create(width, width, rng);
  p.heads = heads;
  return p;
}

void AttentionParams::collect(ParamList& out, const std::string& prefix) const {
  query.collect(out, prefix + ".query");
  key.collect(out, prefix + ".key");
  value.collect(out, prefix + ".value");
  output.collect(out, prefix + ".output");
}

ad::Var multi_head_self_attention(const ad::Var& x, std::size_t tokens, const AttentionParams& params) {
  if (params.heads == 0 || x.cols() % params.heads != 0) {
    throw ConfigError("attention width " + std::to_string(x.cols()) + " is not divisible by " +
                      std::to_string(params.heads) + " heads");
  }
  ad::Var mixed = ad::attention(params.query(x), params.key(x), params.value(x), tokens, params.heads);
  return params.output(mixed);
}

EncoderLayer EncoderLayer::create(std::size_t width, std::size_t heads, std::size_t ffn_hidden, RngStream& rng) {
  EncoderLayer layer;
  layer.attention = AttentionParams::create(width, heads, rng);
  layer.norm1 = LayerNormParams::create(width);
  layer.ffn1 = Linear::create(width, ffn_hidden, rng);
  layer.ffn2 = Linear::create(ffn_hidden, width, rng);
  layer.norm2 = LayerNormParams::create(width);
  return layer;
}

ad::Var EncoderLayer::operator()(const ad::Var& x, std::size_t tokens) const {
  ad::Var h = norm1(ad::add(x, multi_head_self_attention(x, tokens, attention)));
  ad::Var f = ffn2(ad::activation(ffn1(h), ad::Activation::ReLU));
  return norm2(ad::add(h, f));
}

void EncoderLayer::collect(ParamList& out, const std::string& prefix) const {
  attention.collect(out, prefix + ".attn");
  norm1.collect(out, prefix + ".norm1");
  ffn1.collect(out, prefix + ".ffn1");
  ffn2.collect(out, prefix + ".ffn2");
  norm2.collect(out, prefix + ".norm2");
}

void set_trainable(const ParamList& params, bool trainable) {
  for (const auto& p : params) {
    ad::Var v = p.var;
    v.set_requires_grad(trainable);
  }
}

std::size_t parameter_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.size();
  return n;
}

}  // namespace mcmfh
