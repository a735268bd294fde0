#pragma once

#include <cstdint>
#include <vector>

#include "mcmfh/layers.hpp"
#include "mcmfh/tensor.hpp"

namespace mcmfh {

struct AdamState {
  Tensor first_moment;
  Tensor second_moment;
  std::uint64_t step_count = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState like(const Tensor& param, double lr);
};

// One bias-corrected Adam update of `param` in place.
void adam_step(Tensor& param, const Tensor& grad, AdamState& state);

// Adam over a fixed group of parameters sharing one learning rate.
// Parameters that received no gradient since the last zero_grad() are skipped.
class AdamGroup {
 public:
  AdamGroup(ParamList params, double lr);

  void step();
  void zero_grad();
  const ParamList& params() const { return params_; }
  double lr() const { return lr_; }

 private:
  ParamList params_;
  std::vector<AdamState> states_;
  double lr_;
};

}  // namespace mcmfh
