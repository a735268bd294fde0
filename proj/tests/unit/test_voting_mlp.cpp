#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "mcmfh/adam.hpp"
#include "mcmfh/errors.hpp"
#include "mcmfh/param_io.hpp"
#include "mcmfh/voting_mlp.hpp"
#include "support/gradcheck.hpp"

using namespace mcmfh;
using mcmfh::testing::random_tensor;

namespace {

VotingConfig small_config(std::size_t votes = 5, double p = 0.2) {
  VotingConfig cfg;
  cfg.input_dim = 6;
  cfg.hidden_dim = 10;
  cfg.output_dim = 6;
  cfg.votes = votes;
  cfg.dropout_p = p;
  return cfg;
}

// Per-coordinate variance over repeated single-row calls, averaged over coordinates.
double vote_variance(const VotingMlp& mlp, const Tensor& z, std::size_t trials, std::uint64_t seed) {
  ad::NoGradGuard no_grad;
  const std::size_t d = mlp.config().output_dim;
  std::vector<double> sum(d, 0.0), sq(d, 0.0);
  RngStream rng(seed);
  ad::Var x(z);
  for (std::size_t t = 0; t < trials; ++t) {
    const Tensor y = mlp.forward_vote(x, rng).value();
    for (std::size_t i = 0; i < d; ++i) {
      sum[i] += y[i];
      sq[i] += y[i] * y[i];
    }
  }
  double total = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double m = sum[i] / trials;
    total += sq[i] / trials - m * m;
  }
  return total / d;
}

}  // namespace

TEST_CASE("same seed gives bit-identical weights") {
  const VotingMlp a = VotingMlp::init_frozen(small_config());
  const VotingMlp b = VotingMlp::init_frozen(small_config());
  CHECK(a.w1().value() == b.w1().value());
  CHECK(a.w2().value() == b.w2().value());
  VotingConfig other = small_config();
  other.seed = 8;
  CHECK(VotingMlp::init_frozen(other).w1().value() != a.w1().value());
}

TEST_CASE("invalid configurations are rejected") {
  VotingConfig cfg = small_config();
  cfg.votes = 0;
  CHECK_THROWS_AS(VotingMlp::init_frozen(cfg), ConfigError);
  cfg = small_config();
  cfg.dropout_p = 1.0;
  CHECK_THROWS_AS(VotingMlp::init_frozen(cfg), ConfigError);
}

TEST_CASE("dropout_p = 0 reproduces the deterministic MLP for any K") {
  RngStream data(1);
  ad::Var z(random_tensor({3, 6}, data));
  for (std::size_t k : {1u, 2u, 5u}) {
    const VotingMlp mlp = VotingMlp::init_frozen(small_config(k, 0.0));
    RngStream rng(2);
    CHECK(mlp.forward_vote(z, rng).value() == mlp.forward_deterministic(z).value());
  }
}

TEST_CASE("K = 1 equals one stochastic pass drawn from the same stream") {
  const VotingMlp mlp = VotingMlp::init_frozen(small_config(1));
  RngStream data(3);
  ad::Var z(random_tensor({1, 6}, data));
  RngStream a(4), b(4);
  const Tensor voted = mlp.forward_vote(z, a).value();
  Tensor mask({1, 10});
  ad::fill_dropout_rows(mask, 0, 1, 0.2, b);
  const Tensor manual = ad::matmul(ad::activation(ad::apply_mask(ad::matmul(z, mlp.w1()), mask), ad::Activation::GELU),
                                   mlp.w2())
                            .value();
  CHECK(voted == manual);
}

TEST_CASE("output is deterministic for a fixed stream position") {
  const VotingMlp mlp = VotingMlp::init_frozen(small_config());
  RngStream data(5);
  ad::Var z(random_tensor({4, 6}, data));
  RngStream a(6), b(6);
  CHECK(mlp.forward_vote(z, a).value() == mlp.forward_vote(z, b).value());
  CHECK(a.position() == b.position());
}

TEST_CASE("voting reduces variance roughly as 1/K") {
  const VotingMlp k1 = VotingMlp::init_frozen(small_config(1));
  const VotingMlp k2 = VotingMlp::init_frozen(small_config(2));
  const VotingMlp k5 = VotingMlp::init_frozen(small_config(5));
  RngStream data(7);
  const Tensor z = random_tensor({1, 6}, data);
  const double v1 = vote_variance(k1, z, 1000, 8);
  const double v2 = vote_variance(k2, z, 1000, 9);
  const double v5 = vote_variance(k5, z, 1000, 10);
  CHECK(v5 < 0.3 * v1);
  CHECK(v2 <= v1 * 1.05);
  CHECK(v5 <= v2 * 1.05);
}

TEST_CASE("gradients reach z through the vote average with masks held fixed") {
  const VotingMlp mlp = VotingMlp::init_frozen(small_config());
  RngStream data(11);
  ad::Var z(random_tensor({2, 6}, data), true);
  auto loss = [&] {
    RngStream rng(12);
    return mcmfh::testing::readout(mlp.forward_vote(z, rng));
  };
  const auto r = mcmfh::testing::check_gradients(loss, {z});
  CHECK(r.max_rel < 1e-5);
  CHECK_FALSE(mlp.w1().has_grad());
  CHECK_FALSE(mlp.w2().has_grad());
}

TEST_CASE("frozen weights stay bit-identical through optimizer steps") {
  const VotingMlp mlp = VotingMlp::init_frozen(small_config());
  const std::string before = param_checksum(mlp.parameters());
  RngStream data(13);
  ad::Var z(random_tensor({2, 6}, data), true);
  AdamGroup group(mlp.parameters(), 0.1);
  for (int i = 0; i < 3; ++i) {
    RngStream rng(14);
    ad::backward(ad::sum(ad::square(mlp.forward_vote(z, rng))));
    group.step();
    group.zero_grad();
  }
  CHECK(param_checksum(mlp.parameters()) == before);
}

TEST_CASE("unfrozen weights change after one step with nonzero gradient") {
  VotingConfig cfg = small_config();
  cfg.frozen = false;
  const VotingMlp mlp = VotingMlp::init_frozen(cfg);
  const std::string before = param_checksum(mlp.parameters());
  RngStream data(15);
  ad::Var z(random_tensor({2, 6}, data));
  AdamGroup group(mlp.parameters(), 0.01);
  RngStream rng(16);
  ad::backward(ad::sum(ad::square(mlp.forward_vote(z, rng))));
  group.step();
  CHECK(param_checksum(mlp.parameters()) != before);
}
