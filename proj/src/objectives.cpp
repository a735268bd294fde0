#include "mcmfh/objectives.hpp"

#include <cmath>
#include <numeric>
#include <vector>

namespace mcmfh {

ad::Var contrastive_loss(const ad::Var& a, const ad::Var& b, double temperature) {
  if (a.shape() != b.shape()) {
    throw ShapeError("contrastive_loss: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  if (a.rows() == 0) throw ShapeError("contrastive_loss: empty batch");
  if (!(temperature > 0.0)) throw ConfigError("contrastive temperature must be positive");
  const std::size_t n = a.rows();
  std::vector<std::size_t> diagonal(n);
  std::iota(diagonal.begin(), diagonal.end(), std::size_t{0});
  ad::Var logits = ad::scale(ad::matmul(ad::l2_normalize(a), ad::transpose(ad::l2_normalize(b))), 1.0 / temperature);
  ad::Var rows = ad::mean(ad::pick(ad::log_softmax(logits), diagonal));
  ad::Var cols = ad::mean(ad::pick(ad::log_softmax(ad::transpose(logits)), diagonal));
  return ad::scale(ad::add(rows, cols), -0.5);
}

GatingMode parse_gating_mode(const std::string& text) {
  if (text == "none") return GatingMode::None;
  if (text == "switch") return GatingMode::Switch;
  if (text == "variance") return GatingMode::Variance;
  if (text == "hybrid") return GatingMode::Hybrid;
  throw ConfigError("unknown gating mode '" + text + "' (expected switch, variance, hybrid, none)");
}

std::string to_string(GatingMode mode) {
  switch (mode) {
    case GatingMode::None: return "none";
    case GatingMode::Switch: return "switch";
    case GatingMode::Variance: return "variance";
    case GatingMode::Hybrid: return "hybrid";
  }
  return "unknown";
}

ObjectiveWeights ObjectiveWeights::for_mode(GatingMode mode) const {
  ObjectiveWeights w = *this;
  if (mode == GatingMode::None || mode == GatingMode::Variance) w.switch_term = 0.0;
  if (mode == GatingMode::None || mode == GatingMode::Switch) w.variance_term = 0.0;
  return w;
}

double total_objective(LossBreakdown& parts, const ObjectiveWeights& weights) {
  const std::pair<const char*, double> named[] = {
      {"l_fusion", parts.l_fusion}, {"l_switch", parts.l_switch}, {"l_var", parts.l_var}, {"l_hash", parts.l_hash}};
  for (const auto& [name, value] : named) {
    if (!std::isfinite(value)) throw DivergenceError(name, std::string("non-finite loss term ") + name);
  }
  double total = 0.0;
  total += weights.fusion * parts.l_fusion;
  total += weights.switch_term * parts.l_switch;
  total += weights.variance_term * parts.l_var;
  total += weights.hash * parts.l_hash;
  parts.total = total;
  return total;
}

ad::Var total_objective(const ad::Var& l_fusion, const ad::Var& l_switch, const ad::Var& l_var, const ad::Var& l_hash,
                        const ObjectiveWeights& weights) {
  const ad::Var terms[] = {l_fusion, l_switch, l_var, l_hash};
  const double w[] = {weights.fusion, weights.switch_term, weights.variance_term, weights.hash};
  return ad::weighted_sum(terms, w);
}

}  // namespace mcmfh
