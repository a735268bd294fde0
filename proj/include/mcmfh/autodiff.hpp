#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// Every op returns a Var holding its forward value. When any input requires a
// gradient (and no NoGradGuard is active) the op also records a backward
// closure; backward() then walks the recorded graph in reverse topological
// order, accumulating into each node's grad.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "mcmfh/rng.hpp"
#include "mcmfh/tensor.hpp"

namespace mcmfh::ad {

struct Node {
  Tensor value;
  // Empty until something is accumulated into it.
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void accumulate(std::span<const double> g);
  // Allocates the gradient buffer (zero-filled) if needed.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad = Tensor(); }

  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  std::size_t size() const { return node_->value.size(); }
  // Value of a single-element Var.
  double item() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  bool defined() const { return static_cast<bool>(node_); }

 private:
  friend Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);
  std::shared_ptr<Node> node_;
};

// Creates an op result; the backward closure is dropped when no input needs a
// gradient or grad recording is disabled.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

// Disables graph recording for its lifetime (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// Seeds the root with ones (the root is normally a scalar) and propagates.
void backward(const Var& root);

enum class Activation { GELU, ReLU, Tanh };

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// a is (rows x n), bias has n elements.
Var add_bias(const Var& a, const Var& bias);
Var square(const Var& a);
Var activation(const Var& x, Activation kind);

// Row-wise softmax over the last dimension, max-subtracted.
Var softmax(const Var& x);
Var log_softmax(const Var& x);
// Row-wise layer norm with epsilon inside the square root.
inline constexpr double kLayerNormEps = 1e-5;
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = kLayerNormEps);
// Row-wise L2 normalization; throws NumericError on a zero-norm row.
Var l2_normalize(const Var& x);

// Inverted dropout mask: entries are 0 (probability p) or 1/(1-p).
Tensor dropout_mask(const Shape& shape, double p, RngStream& rng);
// Fills the given rows of `mask` (which is rows x cols) from one stream per row.
void fill_dropout_rows(Tensor& mask, std::size_t row_begin, std::size_t row_count, double p, RngStream& rng);
Var apply_mask(const Var& x, const Tensor& mask);
Var dropout(const Var& x, double p, RngStream& rng);

Var reshape(const Var& x, Shape shape);
Var slice_cols(const Var& x, std::size_t begin, std::size_t end);
Var concat_cols(const Var& a, const Var& b);
Var gather_rows(const Var& x, std::span<const std::size_t> rows);
// Places row i of x at row rows[i] of a (total_rows x cols) zero tensor.
Var scatter_rows(const Var& x, std::span<const std::size_t> rows, std::size_t total_rows);
// out[r] = x[r, index[r]], shape (rows x 1).
Var pick(const Var& x, std::span<const std::size_t> index);
// Multiplies row r of x by s[r]; s has one element per row.
Var scale_rows(const Var& x, const Var& s);
// Element-wise mean of equally shaped tensors, computed as x_0 + sum_k (x_k - x_0) / K
// so that identical inputs average to exactly x_0.
Var mean_of(std::span<const Var> xs);
// Column means over rows: (m x n) -> (n).
Var mean_rows(const Var& x);
Var sum(const Var& x);
Var mean(const Var& x);
// sum_i x_i * c_i with c a constant.
Var dot_const(const Var& x, std::span<const double> c);
// sum_k w_k * terms_k over scalar terms, accumulated in index order.
Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);

// Scaled dot-product attention on pre-projected q/k/v, each (batch*tokens x d).
// Rows are grouped per sample; heads split d into contiguous slices.
Var attention(const Var& q, const Var& k, const Var& v, std::size_t tokens, std::size_t heads);

}  // namespace mcmfh::ad
