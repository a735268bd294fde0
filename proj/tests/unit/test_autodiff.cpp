#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mcmfh/autodiff.hpp"
#include "mcmfh/errors.hpp"
#include "mcmfh/layers.hpp"
#include "support/gradcheck.hpp"

using namespace mcmfh;
using mcmfh::testing::check_gradients;
using mcmfh::testing::random_tensor;
using mcmfh::testing::readout;

namespace {

ad::Var param(Shape shape, std::uint64_t seed, double scale = 1.0) {
  RngStream rng(seed);
  return ad::Var(random_tensor(std::move(shape), rng, scale), true);
}

void require_close(const ad::Var& root_fn_result, double expected) { CHECK(root_fn_result.item() == doctest::Approx(expected)); }

}  // namespace

TEST_CASE("matmul of 2x2 matrices") {
  ad::Var a(Tensor::matrix({{1, 2}, {3, 4}}));
  ad::Var b(Tensor::matrix({{5, 6}, {7, 8}}));
  const Tensor c = ad::matmul(a, b).value();
  CHECK(c == Tensor::matrix({{19, 22}, {43, 50}}));
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  ad::Var a(Tensor({2, 3}));
  ad::Var b(Tensor({2, 3}));
  CHECK_THROWS_AS(ad::matmul(a, b), ShapeError);
}

TEST_CASE("backward of sum(x*x) is 2x") {
  ad::Var x(Tensor::vector({1.0, -2.0, 3.5}), true);
  ad::backward(ad::sum(ad::mul(x, x)));
  CHECK(x.grad() == Tensor::vector({2.0, -4.0, 7.0}));
}

TEST_CASE("gradients accumulate over shared subexpressions") {
  ad::Var x(Tensor::vector({3.0}), true);
  ad::Var y = ad::add(ad::mul(x, x), x);  // x^2 + x
  ad::backward(ad::sum(y));
  CHECK(x.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("no graph is recorded under NoGradGuard") {
  ad::Var x(Tensor::vector({1.0, 2.0}), true);
  ad::Var y;
  {
    ad::NoGradGuard guard;
    CHECK_FALSE(ad::grad_enabled());
    y = ad::sum(ad::square(x));
  }
  CHECK(ad::grad_enabled());
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->inputs.empty());
}

TEST_CASE("softmax is max-subtracted") {
  ad::Var x(Tensor::matrix({{1000.0, 0.0}}));
  const Tensor p = ad::softmax(x).value();
  CHECK(p[0] == 1.0);
  CHECK(p[1] == 0.0);
  CHECK(std::isfinite(ad::log_softmax(x).value()[1]));
}

TEST_CASE("layer norm output is zero-mean and unit-variance per row") {
  ad::Var x = param({3, 8}, 1);
  ad::Var g(Tensor({8}, 1.0));
  ad::Var b(Tensor({8}, 0.0));
  const Tensor y = ad::layer_norm(x, g, b).value();
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (double e : y.row(r)) m += e;
    m /= 8;
    for (double e : y.row(r)) v += (e - m) * (e - m);
    v /= 8;
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("l2_normalize rejects a zero row") {
  ad::Var x(Tensor({2, 3}, 0.0));
  CHECK_THROWS_AS(ad::l2_normalize(x), NumericError);
}

TEST_CASE("inverted dropout preserves the mean") {
  RngStream rng(5);
  const Tensor mask = ad::dropout_mask({200000}, 0.2, rng);
  double s = 0;
  std::size_t zeros = 0;
  for (double m : mask.data()) {
    s += m;
    zeros += m == 0.0;
  }
  CHECK(s / mask.size() == doctest::Approx(1.0).epsilon(0.02));
  CHECK(static_cast<double>(zeros) / mask.size() == doctest::Approx(0.2).epsilon(0.02));
  CHECK_THROWS_AS(ad::dropout_mask({4}, 1.0, rng), ConfigError);
}

TEST_CASE("dropout with p = 0 is the identity") {
  RngStream rng(3);
  ad::Var x = param({4, 5}, 2);
  CHECK(ad::dropout(x, 0.0, rng).value() == x.value());
}

TEST_CASE("mean_of identical inputs returns the input exactly") {
  ad::Var x = param({3, 7}, 4);
  std::vector<ad::Var> xs(5, x);
  CHECK(ad::mean_of(xs).value() == x.value());
}

TEST_CASE("gather and scatter are inverse on selected rows") {
  ad::Var x = param({5, 3}, 6);
  const std::vector<std::size_t> rows{4, 1, 2};
  ad::Var g = ad::gather_rows(x, rows);
  ad::Var s = ad::scatter_rows(g, rows, 5);
  for (std::size_t r : rows)
    for (std::size_t c = 0; c < 3; ++c) CHECK(s.value().at(r, c) == x.value().at(r, c));
  for (std::size_t c = 0; c < 3; ++c) CHECK(s.value().at(0, c) == 0.0);
}

TEST_CASE("weighted_sum accumulates in index order") {
  std::vector<ad::Var> terms{ad::Var(Tensor::vector({1.0})), ad::Var(Tensor::vector({2.0})),
                             ad::Var(Tensor::vector({3.0}))};
  const std::vector<double> w{0.5, 0.25, 2.0};
  require_close(ad::weighted_sum(terms, w), 0.5 + 0.5 + 6.0);
}

TEST_CASE("finite differences: elementwise and linear-algebra ops") {
  ad::Var a = param({3, 4}, 10);
  ad::Var b = param({4, 2}, 11);
  ad::Var c = param({3, 4}, 12);
  ad::Var bias = param({4}, 13);

  auto ok = [](const mcmfh::testing::GradCheck& r) {
    CHECK(r.finite);
    CHECK(r.max_rel < 1e-5);
  };
  ok(check_gradients([&] { return readout(ad::matmul(a, b)); }, {a, b}));
  ok(check_gradients([&] { return readout(ad::transpose(a)); }, {a}));
  ok(check_gradients([&] { return readout(ad::add(a, c)); }, {a, c}));
  ok(check_gradients([&] { return readout(ad::sub(a, c)); }, {a, c}));
  ok(check_gradients([&] { return readout(ad::mul(a, c)); }, {a, c}));
  ok(check_gradients([&] { return readout(ad::scale(a, -1.7)); }, {a}));
  ok(check_gradients([&] { return readout(ad::add_scalar(a, 0.3)); }, {a}));
  ok(check_gradients([&] { return readout(ad::add_bias(a, bias)); }, {a, bias}));
  ok(check_gradients([&] { return readout(ad::square(a)); }, {a}));
  ok(check_gradients([&] { return ad::sum(a); }, {a}));
  ok(check_gradients([&] { return ad::mean(ad::square(a)); }, {a}));
  ok(check_gradients([&] { return readout(ad::mean_rows(a)); }, {a}));
}

TEST_CASE("finite differences: activations and row-wise ops") {
  ad::Var x = param({3, 5}, 20);
  ad::Var g = param({5}, 21);
  ad::Var b = param({5}, 22);
  auto ok = [](const mcmfh::testing::GradCheck& r) {
    CHECK(r.finite);
    CHECK(r.max_rel < 1e-5);
  };
  ok(check_gradients([&] { return readout(ad::activation(x, ad::Activation::GELU)); }, {x}));
  ok(check_gradients([&] { return readout(ad::activation(x, ad::Activation::Tanh)); }, {x}));
  ok(check_gradients([&] { return readout(ad::activation(x, ad::Activation::ReLU)); }, {x}));
  ok(check_gradients([&] { return readout(ad::softmax(x)); }, {x}));
  ok(check_gradients([&] { return readout(ad::log_softmax(x)); }, {x}));
  ok(check_gradients([&] { return readout(ad::layer_norm(x, g, b)); }, {x, g, b}));
  ok(check_gradients([&] { return readout(ad::l2_normalize(x)); }, {x}));
}

TEST_CASE("finite differences: structural ops") {
  ad::Var x = param({4, 6}, 30);
  ad::Var y = param({4, 2}, 31);
  ad::Var s = param({4}, 32);
  const std::vector<std::size_t> rows{3, 0};
  const std::vector<std::size_t> cols{5, 0, 2, 2};
  RngStream rng(33);
  const Tensor mask = ad::dropout_mask({4, 6}, 0.3, rng);
  auto ok = [](const mcmfh::testing::GradCheck& r) {
    CHECK(r.finite);
    CHECK(r.max_rel < 1e-5);
  };
  ok(check_gradients([&] { return readout(ad::reshape(x, {8, 3})); }, {x}));
  ok(check_gradients([&] { return readout(ad::slice_cols(x, 1, 4)); }, {x}));
  ok(check_gradients([&] { return readout(ad::concat_cols(x, y)); }, {x, y}));
  ok(check_gradients([&] { return readout(ad::gather_rows(x, rows)); }, {x}));
  ok(check_gradients([&] { return readout(ad::scatter_rows(y, std::vector<std::size_t>{2, 0, 3, 1}, 4)); }, {y}));
  ok(check_gradients([&] { return readout(ad::pick(x, cols)); }, {x}));
  ok(check_gradients([&] { return readout(ad::scale_rows(x, s)); }, {x, s}));
  ok(check_gradients([&] { return readout(ad::apply_mask(x, mask)); }, {x}));
  ok(check_gradients(
      [&] {
        std::vector<ad::Var> xs{x, ad::square(x), ad::scale(x, 3.0)};
        return readout(ad::mean_of(xs));
      },
      {x}));
  const std::vector<double> c{1.0, -2.0, 0.5, 4.0, 0.0, 1.0, 1.0, 1.0, -1.0, 2.0, 3.0, 0.1,
                              1.0, -2.0, 0.5, 4.0, 0.0, 1.0, 1.0, 1.0, -1.0, 2.0, 3.0, 0.1};
  ok(check_gradients([&] { return ad::dot_const(x, c); }, {x}));
  ok(check_gradients(
      [&] {
        std::vector<ad::Var> terms{ad::sum(x), ad::sum(ad::square(y))};
        const std::vector<double> w{0.3, 0.7};
        return ad::weighted_sum(terms, w);
      },
      {x, y}));
}

TEST_CASE("finite differences: fused attention and an encoder layer") {
  const std::size_t tokens = 2, width = 4, heads = 2;
  ad::Var q = param({3 * tokens, width}, 40);
  ad::Var k = param({3 * tokens, width}, 41);
  ad::Var v = param({3 * tokens, width}, 42);
  auto r = check_gradients([&] { return readout(ad::attention(q, k, v, tokens, heads)); }, {q, k, v});
  CHECK(r.max_rel < 1e-5);

  RngStream rng(43);
  EncoderLayer layer = EncoderLayer::create(width, heads, 8, rng);
  ad::Var x = param({2 * tokens, width}, 44);
  ParamList ps;
  layer.collect(ps, "enc");
  std::vector<ad::Var> vars{x};
  for (const auto& p : ps) vars.push_back(p.var);
  auto r2 = check_gradients([&] { return readout(layer(x, tokens)); }, vars);
  CHECK(r2.finite);
  CHECK(r2.max_rel < 1e-5);
}

TEST_CASE("attention with one token returns the value rows") {
  ad::Var q = param({3, 4}, 50);
  ad::Var k = param({3, 4}, 51);
  ad::Var v = param({3, 4}, 52);
  const Tensor out = ad::attention(q, k, v, 1, 2).value();
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(v.value()[i]).epsilon(1e-15));
}
