#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mcmfh/autodiff.hpp"
#include "mcmfh/rng.hpp"

namespace mcmfh::testing {

struct GradCheck {
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::size_t checked = 0;
  bool finite = true;
};

// Compares backprop against central differences for every element of `params`.
// The relative error uses max(|analytic|, |numeric|, floor) as denominator so
// that near-zero gradients are judged on an absolute scale.
inline GradCheck check_gradients(const std::function<ad::Var()>& loss, const std::vector<ad::Var>& params,
                                 double h = 1e-5, double floor = 1e-4) {
  for (auto p : params) p.zero_grad();
  ad::Var root = loss();
  ad::backward(root);
  std::vector<Tensor> analytic;
  for (const auto& p : params) analytic.push_back(p.has_grad() ? p.grad() : Tensor(p.shape()));

  GradCheck out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    ad::Var p = params[k];
    ad::NoGradGuard no_grad;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double saved = p.value()[i];
      p.mutable_value()[i] = saved + h;
      const double up = loss().item();
      p.mutable_value()[i] = saved - h;
      const double down = loss().item();
      p.mutable_value()[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      if (!std::isfinite(numeric) || !std::isfinite(a)) out.finite = false;
      const double diff = std::abs(a - numeric);
      out.max_abs = std::max(out.max_abs, diff);
      out.max_rel = std::max(out.max_rel, diff / std::max({std::abs(a), std::abs(numeric), floor}));
      ++out.checked;
    }
  }
  return out;
}

inline Tensor random_tensor(Shape shape, RngStream& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

// Scalar readout sum_i c_i y_i with fixed random coefficients.
inline ad::Var readout(const ad::Var& y, std::uint64_t seed = 99) {
  RngStream rng(seed);
  std::vector<double> c(y.size());
  for (double& v : c) v = rng.normal();
  return ad::dot_const(y, c);
}

}  // namespace mcmfh::testing
