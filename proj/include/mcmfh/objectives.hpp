#pragma once

#include <string>

#include "mcmfh/autodiff.hpp"
#include "mcmfh/errors.hpp"

namespace mcmfh {

struct ContrastiveConfig {
  double temperature = 0.07;
};

// Symmetric InfoNCE: rows of a and b are L2-normalized, S = A B^T / tau, and the
// loss is the mean of the row-wise and column-wise cross-entropies against the
// diagonal matching.
ad::Var contrastive_loss(const ad::Var& a, const ad::Var& b, double temperature);

enum class GatingMode { None, Switch, Variance, Hybrid };
GatingMode parse_gating_mode(const std::string& text);
std::string to_string(GatingMode mode);

struct ObjectiveWeights {
  double fusion = 1.0;
  double switch_term = 0.85;
  double variance_term = 0.15;
  double hash = 0.5;

  // Weights with the gating terms not selected by `mode` zeroed.
  ObjectiveWeights for_mode(GatingMode mode) const;
};

struct LossBreakdown {
  double l_fusion = 0.0;
  double l_switch = 0.0;
  double l_var = 0.0;
  double l_hash = 0.0;
  double total = 0.0;
};

// Thrown when a loss term is NaN or infinite; names the offending term.
class DivergenceError : public NumericError {
 public:
  DivergenceError(std::string term, const std::string& what) : NumericError(what), term_(std::move(term)) {}
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

// Fills parts.total with the weighted sum, accumulated in the fixed order
// fusion, switch, variance, hash. Throws DivergenceError on a non-finite part.
double total_objective(LossBreakdown& parts, const ObjectiveWeights& weights = {});

// Differentiable counterpart; same accumulation order as total_objective.
ad::Var total_objective(const ad::Var& l_fusion, const ad::Var& l_switch, const ad::Var& l_var, const ad::Var& l_hash,
                        const ObjectiveWeights& weights);

}  // namespace mcmfh
