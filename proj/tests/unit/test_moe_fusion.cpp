#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mcmfh/errors.hpp"
#include "mcmfh/moe_fusion.hpp"
#include "support/gradcheck.hpp"

using namespace mcmfh;
using mcmfh::testing::check_gradients;
using mcmfh::testing::random_tensor;
using mcmfh::testing::readout;

namespace {

MoEConfig toy_config(std::size_t experts = 3) {
  MoEConfig cfg;
  cfg.num_experts = experts;
  cfg.token_count = 2;
  cfg.token_dim = 4;
  cfg.heads = 2;
  cfg.ffn_hidden = 8;
  cfg.layers_per_expert = 1;
  cfg.seed = 3;
  return cfg;
}

// Smallest gap between the best and second-best gate logit over the batch.
double routing_margin(const MoeFusion& moe, const ad::Var& x) {
  const Tensor logits = ad::matmul(x, moe.gate_weight()).value();
  double margin = 1e300;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    double best = -1e300, second = -1e300;
    for (double v : logits.row(r)) {
      if (v > best) {
        second = best;
        best = v;
      } else if (v > second) {
        second = v;
      }
    }
    margin = std::min(margin, best - second);
  }
  return margin;
}

}  // namespace

TEST_CASE("zero gate weights give uniform probabilities and route to expert 0") {
  ad::Var x(Tensor({2, 8}, 0.5));
  ad::Var w(Tensor({8, 4}, 0.0));
  const GateOutput g = gate(x, w);
  for (double p : g.probs.value().data()) CHECK(p == 0.25);
  CHECK(g.top1 == std::vector<std::size_t>{0, 0});
}

TEST_CASE("gate probabilities match a long-double softmax") {
  // x = [1], W = [2 1 0 -1] gives logits [2, 1, 0, -1].
  ad::Var x(Tensor::matrix({{1.0}}));
  ad::Var w(Tensor::matrix({{2.0, 1.0, 0.0, -1.0}}));
  const GateOutput g = gate(x, w);
  CHECK(g.top1.front() == 0);
  long double denom = 0;
  for (long double l : {2.0L, 1.0L, 0.0L, -1.0L}) denom += std::exp(l);
  const long double logits[] = {2.0L, 1.0L, 0.0L, -1.0L};
  for (int i = 0; i < 4; ++i) {
    CHECK(std::abs(g.probs.value()[i] - static_cast<double>(std::exp(logits[i]) / denom)) < 1e-12);
  }
}

TEST_CASE("uniform logit shifts leave routing unchanged") {
  RngStream rng(1);
  ad::Var x(random_tensor({5, 3}, rng));
  Tensor w = random_tensor({3, 4}, rng);
  const GateOutput a = gate(x, ad::Var(w));
  // Adding a constant to every logit of a row: append a constant input column.
  Tensor x2({5, 4});
  Tensor w2({4, 4});
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 3; ++c) x2.at(r, c) = x.value().at(r, c);
    x2.at(r, 3) = 1.0;
  }
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) w2.at(r, c) = w.at(r, c);
  for (std::size_t c = 0; c < 4; ++c) w2.at(3, c) = 7.5;
  const GateOutput b = gate(ad::Var(x2), ad::Var(w2));
  CHECK(a.top1 == b.top1);
  for (std::size_t i = 0; i < a.probs.size(); ++i) CHECK(a.probs.value()[i] == doctest::Approx(b.probs.value()[i]));
}

TEST_CASE("ties in the gate go to the lowest index") {
  ad::Var x(Tensor::matrix({{1.0}}));
  ad::Var w(Tensor::matrix({{0.0, 3.0, 3.0, 1.0}}));
  CHECK(gate(x, w).top1.front() == 1);
}

TEST_CASE("expert output keeps the input shape and rejects bad indices") {
  const MoeFusion moe = MoeFusion::create(toy_config());
  RngStream rng(2);
  ad::Var x(random_tensor({3, 8}, rng));
  CHECK(moe.expert_forward(x, 2).shape() == Shape{3, 8});
  CHECK_THROWS_AS(moe.expert_forward(x, 3), ShapeError);
}

TEST_CASE("experts with identical parameters give identical outputs") {
  MoeFusion moe = MoeFusion::create(toy_config(2));
  ParamList src, dst;
  moe.experts()[0].collect(src, "a");
  moe.experts()[1].collect(dst, "b");
  for (std::size_t i = 0; i < src.size(); ++i) dst[i].var.mutable_value() = src[i].var.value();
  RngStream rng(4);
  ad::Var x(random_tensor({3, 8}, rng));
  CHECK(moe.expert_forward(x, 0).value() == moe.expert_forward(x, 1).value());

  // The mixture is then independent of routing up to the gate scale.
  const MoeOutput out = moe.forward(x);
  const Tensor e = moe.expert_forward(x, 0).value();
  for (std::size_t r = 0; r < 3; ++r) {
    const double s = out.probs.value().at(r, out.stats.routed[r]);
    Tensor h({1, 8});
    for (std::size_t c = 0; c < 8; ++c) h[c] = s * e.at(r, c) + x.value().at(r, c);
    ad::Var g(Tensor({8}, 1.0)), b(Tensor({8}, 0.0));
    const Tensor expect = ad::layer_norm(ad::Var(h), g, b).value();
    for (std::size_t c = 0; c < 8; ++c) CHECK(out.z.value().at(r, c) == doctest::Approx(expect[c]).epsilon(1e-12));
  }
}

TEST_CASE("a single expert reduces to layer_norm(expert(x) + x)") {
  const MoeFusion moe = MoeFusion::create(toy_config(1));
  RngStream rng(5);
  ad::Var x(random_tensor({2, 8}, rng));
  const MoeOutput out = moe.forward(x);
  for (double p : out.probs.value().data()) CHECK(p == 1.0);
  ad::Var g(Tensor({8}, 1.0)), b(Tensor({8}, 0.0));
  const Tensor expect = ad::layer_norm(ad::add(moe.expert_forward(x, 0), x), g, b).value();
  CHECK(out.z.value() == expect);
  CHECK(switch_loss(out.stats, 1e-2) == doctest::Approx(1e-2));
}

TEST_CASE("routing statistics of a batch of 8 over 4 experts") {
  const MoeFusion moe = MoeFusion::create(toy_config(4));
  RngStream rng(6);
  ad::Var x(random_tensor({8, 8}, rng));
  const RoutingBatchStats s = moe.forward(x).stats;
  double tsum = 0, psum = 0;
  for (double t : s.traffic) {
    tsum += t;
    CHECK(std::abs(t * 8 - std::round(t * 8)) < 1e-12);
  }
  for (double p : s.mean_probs) psum += p;
  CHECK(std::abs(tsum - 1.0) < 1e-9);
  CHECK(std::abs(psum - 1.0) < 1e-9);
  for (std::size_t n = 0; n < 8; ++n) {
    double row = 0;
    for (std::size_t i = 0; i < 4; ++i) row += s.route_indicator(n, i);
    CHECK(row == 1.0);
  }
}

TEST_CASE("finite differences through one full expert on an 8-d toy") {
  const MoeFusion moe = MoeFusion::create(toy_config(1));
  RngStream rng(7);
  ad::Var x(random_tensor({2, 8}, rng), true);
  ParamList ps = moe.parameters();
  std::vector<ad::Var> vars{x};
  for (const auto& p : ps) vars.push_back(p.var);
  const auto r = check_gradients([&] { return readout(moe.expert_forward(x, 0)); }, vars);
  CHECK(r.finite);
  CHECK(r.max_rel < 1e-5);
}

TEST_CASE("finite differences reach the gate through the selected probability") {
  const MoeFusion moe = MoeFusion::create(toy_config(3));
  RngStream rng(8);
  ad::Var x(random_tensor({4, 8}, rng), true);
  REQUIRE(routing_margin(moe, x) > 1e-3);
  ad::Var w = moe.gate_weight();
  const auto r = check_gradients([&] { return readout(moe.forward(x).z); }, {w, x});
  CHECK(r.max_rel < 1e-4);
  double norm = 0;
  for (double g : w.grad().data()) norm += std::abs(g);
  CHECK(norm > 0.0);
}

TEST_CASE("switch loss at balance and at collapse") {
  const std::vector<double> uniform{0.25, 0.25, 0.25, 0.25};
  const std::vector<double> onehot{1.0, 0.0, 0.0, 0.0};
  RoutingBatchStats balanced{uniform, uniform, {}, {}};
  RoutingBatchStats collapsed{onehot, onehot, {}, {}};
  CHECK(std::abs(switch_loss(balanced, 1e-2) - 0.01) < 1e-12);
  CHECK(std::abs(switch_loss(collapsed, 1e-2) - 0.04) < 1e-12);
}

TEST_CASE("variance loss values, symmetry, and normalization check") {
  CHECK(variance_loss(std::vector<double>{0.25, 0.25, 0.25, 0.25}) == 0.0);
  CHECK(std::abs(variance_loss(std::vector<double>{1, 0, 0, 0}) - 3.0) < 1e-12);
  const std::vector<double> p{0.1, 0.2, 0.3, 0.4};
  const std::vector<double> q{0.4, 0.1, 0.3, 0.2};
  CHECK(variance_loss(p) == doctest::Approx(variance_loss(q)).epsilon(1e-15));
  CHECK_THROWS_AS(variance_loss(std::vector<double>{0.5, 0.6}), InputError);
}

TEST_CASE("hybrid gating loss composes the two terms") {
  MoEConfig cfg;
  const std::vector<double> uniform{0.25, 0.25, 0.25, 0.25};
  const std::vector<double> onehot{1.0, 0.0, 0.0, 0.0};
  CHECK(std::abs(hybrid_gating_loss(RoutingBatchStats{uniform, uniform, {}, {}}, cfg) - 0.0085) < 1e-12);
  CHECK(std::abs(hybrid_gating_loss(RoutingBatchStats{onehot, onehot, {}, {}}, cfg) - 0.484) < 1e-12);
  cfg.w_var = 0.0;
  cfg.w_switch = 1.0;
  const RoutingBatchStats skew{{0.5, 0.5, 0, 0}, {0.4, 0.3, 0.2, 0.1}, {}, {}};
  CHECK(hybrid_gating_loss(skew, cfg) == switch_loss(skew, cfg.switch_lambda));
}

TEST_CASE("switch loss gradient flows only through P") {
  ad::Var p(Tensor::vector({0.1, 0.2, 0.3, 0.4}), true);
  const std::vector<double> t{0.5, 0.25, 0.25, 0.0};
  ad::backward(switch_loss(p, t, 1e-2));
  for (std::size_t i = 0; i < 4; ++i) CHECK(p.grad()[i] == doctest::Approx(1e-2 * 4 * t[i]));
}

TEST_CASE("descent on variance loss alone drives gate probabilities toward uniform") {
  RngStream rng(9);
  ad::Var x(random_tensor({16, 5}, rng));
  ad::Var w(random_tensor({5, 4}, rng, 2.0), true);
  const double lr = 0.1;
  double previous = 1e300;
  bool strictly_decreasing = true;
  for (int step = 0; step < 100; ++step) {
    ad::Var loss = variance_loss(ad::mean_rows(gate(x, w).probs));
    if (!(loss.item() < previous)) strictly_decreasing = false;
    previous = loss.item();
    ad::backward(loss);
    for (std::size_t i = 0; i < w.size(); ++i) w.mutable_value()[i] -= lr * w.grad()[i];
    w.zero_grad();
  }
  CHECK(strictly_decreasing);
}

TEST_CASE("split_fused halves a fused vector") {
  Tensor z({1024});
  for (std::size_t i = 0; i < 512; ++i) z[i] = 1.0;
  const FusedPair p = split_fused(z);
  for (double v : p.z_v.data()) CHECK(v == 1.0);
  for (double v : p.z_t.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(split_fused(Tensor({1000})), ShapeError);
}
