#include "mcmfh/adam.hpp"

#include <cmath>

#include "mcmfh/errors.hpp"

namespace mcmfh {

AdamState AdamState::like(const Tensor& param, double lr) {
  AdamState s;
  s.first_moment = Tensor(param.shape(), 0.0);
  s.second_moment = Tensor(param.shape(), 0.0);
  s.lr = lr;
  return s;
}

void adam_step(Tensor& param, const Tensor& grad, AdamState& state) {
  if (param.shape() != grad.shape()) {
    throw ShapeError("adam_step: parameter " + shape_string(param.shape()) + " vs gradient " +
                     shape_string(grad.shape()));
  }
  if (state.first_moment.shape() != param.shape() || state.second_moment.shape() != param.shape()) {
    throw ShapeError("adam_step: optimizer state does not match parameter " + shape_string(param.shape()));
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  const double b1 = state.beta1, b2 = state.beta2;
  double* m = state.first_moment.data().data();
  double* v = state.second_moment.data().data();
  double* p = param.data().data();
  const double* g = grad.data().data();
  const std::size_t n = param.size();
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
    const double m_hat = m[i] / correction1;
    const double v_hat = v[i] / correction2;
    p[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

AdamGroup::AdamGroup(ParamList params, double lr) : params_(std::move(params)), lr_(lr) {
  states_.reserve(params_.size());
  for (const auto& p : params_) states_.push_back(AdamState::like(p.var.value(), lr));
}

void AdamGroup::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ad::Var& v = params_[i].var;
    if (!v.requires_grad() || !v.has_grad()) continue;
    adam_step(v.mutable_value(), v.grad(), states_[i]);
  }
}

void AdamGroup::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

}  // namespace mcmfh
