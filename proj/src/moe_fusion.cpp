#include "mcmfh/moe_fusion.hpp"

#include <cmath>

#include "mcmfh/errors.hpp"

namespace mcmfh {

void MoEConfig::validate() const {
  if (num_experts < 1) throw ConfigError("moe.num_experts must be >= 1");
  if (token_count < 1 || token_dim < 1) throw ConfigError("moe token layout must be positive");
  if (heads < 1 || token_dim % heads != 0) {
    throw ConfigError("token width " + std::to_string(token_dim) + " is not divisible by moe.heads=" +
                      std::to_string(heads));
  }
  if (ffn_hidden < 1 || layers_per_expert < 1) throw ConfigError("moe.ffn_hidden and moe.layers_per_expert must be >= 1");
  if (!(switch_lambda > 0.0)) throw ConfigError("moe.switch_lambda must be positive");
  if (!(w_switch >= 0.0) || !(w_var >= 0.0)) throw ConfigError("gating loss weights must be non-negative");
}

GateOutput gate(const ad::Var& x, const ad::Var& w_gate) {
  GateOutput out;
  out.probs = ad::softmax(ad::matmul(x, w_gate));
  const Tensor& p = out.probs.value();
  out.top1.resize(p.rows());
  for (std::size_t r = 0; r < p.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < p.cols(); ++c)
      if (p.at(r, c) > p.at(r, best)) best = c;
    out.top1[r] = best;
  }
  return out;
}

RoutingBatchStats RoutingBatchStats::from_gate(const GateOutput& g) {
  RoutingBatchStats s;
  const Tensor& p = g.probs.value();
  const std::size_t batch = p.rows(), n = p.cols();
  s.traffic.assign(n, 0.0);
  s.mean_probs.assign(n, 0.0);
  s.routed = g.top1;
  s.scores = p;
  for (std::size_t r = 0; r < batch; ++r) {
    s.traffic[g.top1[r]] += 1.0;
    for (std::size_t c = 0; c < n; ++c) s.mean_probs[c] += p.at(r, c);
  }
  for (std::size_t c = 0; c < n; ++c) {
    s.traffic[c] /= static_cast<double>(batch);
    s.mean_probs[c] /= static_cast<double>(batch);
  }
  return s;
}

ad::Var Expert::operator()(const ad::Var& x, std::size_t tokens) const {
  const std::size_t batch = x.rows();
  const std::size_t width = x.cols() / tokens;
  ad::Var h = ad::reshape(x, {batch * tokens, width});
  for (const auto& layer : layers) h = layer(h, tokens);
  return ad::reshape(h, {batch, tokens * width});
}

void Expert::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(out, prefix + ".layer" + std::to_string(l));
}

MoeFusion MoeFusion::create(const MoEConfig& cfg) {
  cfg.validate();
  MoeFusion moe;
  moe.cfg_ = cfg;
  RngStream root = RngStream(cfg.seed).split("moe.init");
  const std::size_t n = cfg.active_experts();
  if (cfg.enabled) {
    RngStream gate_rng = root.split("gate");
    moe.w_gate_ = Linear::create(cfg.input_dim(), n, gate_rng, false).weight;
  }
  for (std::size_t e = 0; e < n; ++e) {
    RngStream expert_rng = root.split("expert").split(e);
    Expert expert;
    for (std::size_t l = 0; l < cfg.layers_per_expert; ++l)
      expert.layers.push_back(EncoderLayer::create(cfg.token_dim, cfg.heads, cfg.ffn_hidden, expert_rng));
    moe.experts_.push_back(std::move(expert));
  }
  moe.output_norm_ = LayerNormParams::create(cfg.input_dim());
  return moe;
}

GateOutput MoeFusion::gate(const ad::Var& x) const {
  if (!cfg_.enabled) {
    GateOutput out;
    out.probs = ad::Var(Tensor({x.rows(), 1}, 1.0));
    out.top1.assign(x.rows(), 0);
    return out;
  }
  return mcmfh::gate(x, w_gate_);
}

ad::Var MoeFusion::expert_forward(const ad::Var& x, std::size_t expert) const {
  if (expert >= experts_.size()) {
    throw ShapeError("expert index " + std::to_string(expert) + " out of range for " +
                     std::to_string(experts_.size()) + " experts");
  }
  if (x.cols() != cfg_.input_dim()) {
    throw ShapeError("expert input " + shape_string(x.shape()) + " does not match width " +
                     std::to_string(cfg_.input_dim()));
  }
  return experts_[expert](x, cfg_.token_count);
}

MoeOutput MoeFusion::forward(const ad::Var& x) const {
  const std::size_t batch = x.rows();
  MoeOutput out;
  GateOutput g = gate(x);
  out.stats = RoutingBatchStats::from_gate(g);
  out.probs = g.probs;
  out.mean_probs = ad::mean_rows(g.probs);

  ad::Var mixed;
  for (std::size_t e = 0; e < experts_.size(); ++e) {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < batch; ++r)
      if (g.top1[r] == e) rows.push_back(r);
    if (rows.empty()) continue;
    ad::Var y = rows.size() == batch ? expert_forward(x, e) : ad::scatter_rows(expert_forward(ad::gather_rows(x, rows), e), rows, batch);
    mixed = mixed.defined() ? ad::add(mixed, y) : y;
  }
  ad::Var h = cfg_.enabled ? ad::scale_rows(mixed, ad::pick(g.probs, g.top1)) : mixed;
  out.z = output_norm_(ad::add(h, x));
  return out;
}

ParamList MoeFusion::parameters() const {
  ParamList out;
  if (w_gate_.defined()) out.push_back({"moe.gate", w_gate_});
  for (std::size_t e = 0; e < experts_.size(); ++e) experts_[e].collect(out, "moe.expert" + std::to_string(e));
  output_norm_.collect(out, "moe.norm");
  return out;
}

ad::Var switch_loss(const ad::Var& mean_probs, std::span<const double> traffic, double lambda) {
  const double n = static_cast<double>(traffic.size());
  return ad::scale(ad::dot_const(mean_probs, traffic), lambda * n);
}

double switch_loss(const RoutingBatchStats& stats, double lambda) {
  ad::NoGradGuard no_grad;
  return switch_loss(ad::Var(Tensor::vector(stats.mean_probs)), stats.traffic, lambda).item();
}

ad::Var variance_loss(const ad::Var& mean_probs) {
  double total = 0.0;
  for (double p : mean_probs.value().data()) total += p;
  if (!(std::abs(total - 1.0) <= 1e-6)) {
    throw InputError("variance_loss: expert probabilities sum to " + std::to_string(total) + ", expected 1");
  }
  const double n = static_cast<double>(mean_probs.size());
  return ad::scale(ad::sum(ad::square(ad::add_scalar(mean_probs, -1.0 / n))), n);
}

double variance_loss(std::span<const double> mean_probs) {
  ad::NoGradGuard no_grad;
  return variance_loss(ad::Var(Tensor::vector(mean_probs))).item();
}

ad::Var hybrid_gating_loss(const ad::Var& mean_probs, std::span<const double> traffic, const MoEConfig& cfg) {
  const ad::Var terms[] = {switch_loss(mean_probs, traffic, cfg.switch_lambda), variance_loss(mean_probs)};
  const double weights[] = {cfg.w_switch, cfg.w_var};
  return ad::weighted_sum(terms, weights);
}

double hybrid_gating_loss(const RoutingBatchStats& stats, const MoEConfig& cfg) {
  ad::NoGradGuard no_grad;
  return hybrid_gating_loss(ad::Var(Tensor::vector(stats.mean_probs)), stats.traffic, cfg).item();
}

FusedPair split_fused(const Tensor& z, std::size_t token_dim) {
  if (z.size() != 2 * token_dim) {
    throw ShapeError("split_fused: expected length " + std::to_string(2 * token_dim) + ", got " +
                     shape_string(z.shape()));
  }
  FusedPair pair{Tensor({token_dim}), Tensor({token_dim})};
  for (std::size_t i = 0; i < token_dim; ++i) {
    pair.z_v[i] = z[i];
    pair.z_t[i] = z[token_dim + i];
  }
  return pair;
}

}  // namespace mcmfh
