#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "mcmfh/errors.hpp"
#include "mcmfh/objectives.hpp"
#include "support/gradcheck.hpp"

using namespace mcmfh;

TEST_CASE("two orthogonal aligned pairs give ln(1 + e^-1/tau)") {
  ad::Var a(Tensor::matrix({{1, 0}, {0, 1}}));
  for (double tau : {1.0, 0.07}) {
    const double expected = std::log1p(std::exp(-1.0 / tau));
    CHECK(std::abs(contrastive_loss(a, a, tau).item() - expected) < 1e-12);
  }
}

TEST_CASE("batch of one has zero loss") {
  ad::Var a(Tensor::matrix({{0.3, -0.2, 0.9}}));
  ad::Var b(Tensor::matrix({{-1.0, 0.5, 0.1}}));
  CHECK(contrastive_loss(a, b, 0.07).item() == 0.0);
}

TEST_CASE("loss is symmetric in its arguments and scale-invariant per row") {
  RngStream rng(1);
  const Tensor ta = mcmfh::testing::random_tensor({4, 3}, rng);
  const Tensor tb = mcmfh::testing::random_tensor({4, 3}, rng);
  ad::Var a(ta), b(tb);
  CHECK(contrastive_loss(a, b, 0.5).item() == doctest::Approx(contrastive_loss(b, a, 0.5).item()).epsilon(1e-14));
  Tensor scaled = ta;
  for (double& v : scaled.data()) v *= 3.0;
  CHECK(contrastive_loss(ad::Var(scaled), b, 0.5).item() ==
        doctest::Approx(contrastive_loss(a, b, 0.5).item()).epsilon(1e-12));
}

TEST_CASE("raising one aligned pair's similarity lowers the loss") {
  Tensor a = Tensor::matrix({{1.0, 0.2, 0.0}, {0.1, 1.0, 0.3}, {0.0, 0.4, 1.0}});
  Tensor b = Tensor::matrix({{0.6, 0.8, 0.0}, {0.0, 1.0, 0.0}, {0.4, 0.0, 1.0}});
  const double base = contrastive_loss(ad::Var(a), ad::Var(b), 0.1).item();
  Tensor closer = b;
  closer.at(0, 0) = 0.9;  // b_0 rotates toward a_0; its similarity to a_1, a_2 also moves
  closer.at(0, 1) = 0.2;
  CHECK(contrastive_loss(ad::Var(a), ad::Var(closer), 0.1).item() < base);
  CHECK(base >= 0.0);
}

TEST_CASE("perfectly matched well-separated pairs approach zero loss") {
  ad::Var a(Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
  CHECK(contrastive_loss(a, a, 0.01).item() < 1e-40);
}

TEST_CASE("contrastive loss gradient matches finite differences") {
  RngStream rng(2);
  ad::Var a(mcmfh::testing::random_tensor({4, 3}, rng), true);
  ad::Var b(mcmfh::testing::random_tensor({4, 3}, rng), true);
  const auto r = mcmfh::testing::check_gradients([&] { return contrastive_loss(a, b, 0.3); }, {a, b});
  CHECK(r.max_rel < 1e-5);
}

TEST_CASE("gating modes parse and print") {
  for (GatingMode m : {GatingMode::None, GatingMode::Switch, GatingMode::Variance, GatingMode::Hybrid}) {
    CHECK(parse_gating_mode(to_string(m)) == m);
  }
  CHECK_THROWS_AS(parse_gating_mode("softmax"), ConfigError);
}

TEST_CASE("mode weights zero the unused gating terms") {
  const ObjectiveWeights w;
  CHECK(w.for_mode(GatingMode::Hybrid).switch_term == 0.85);
  CHECK(w.for_mode(GatingMode::Switch).variance_term == 0.0);
  CHECK(w.for_mode(GatingMode::Switch).switch_term == 0.85);
  CHECK(w.for_mode(GatingMode::Variance).switch_term == 0.0);
  CHECK(w.for_mode(GatingMode::None).switch_term == 0.0);
  CHECK(w.for_mode(GatingMode::None).variance_term == 0.0);
  CHECK(w.for_mode(GatingMode::None).hash == 0.5);
}

TEST_CASE("total objective is the weighted sum in fixed order") {
  LossBreakdown parts{1.0, 1.0, 1.0, 1.0, 0.0};
  CHECK(std::abs(total_objective(parts) - 2.5) < 1e-12);
  CHECK(parts.total == total_objective(parts));

  LossBreakdown p2{0.7, 0.02, 0.3, 1.1, 0.0};
  const ObjectiveWeights w;
  const double expected = ((1.0 * 0.7 + 0.85 * 0.02) + 0.15 * 0.3) + 0.5 * 1.1;
  CHECK(total_objective(p2, w) == expected);

  ad::Var vf(Tensor::vector({0.7})), vs(Tensor::vector({0.02})), vv(Tensor::vector({0.3})), vh(Tensor::vector({1.1}));
  CHECK(total_objective(vf, vs, vv, vh, w).item() == expected);
}

TEST_CASE("a non-finite term names itself") {
  LossBreakdown parts{1.0, std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0, 0.0};
  try {
    total_objective(parts);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.term() == "l_switch");
  }
  LossBreakdown inf{1.0, 0.0, 0.0, std::numeric_limits<double>::infinity(), 0.0};
  CHECK_THROWS_AS(total_objective(inf), NumericError);
}
