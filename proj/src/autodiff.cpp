#include "mcmfh/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_set>

#include "mcmfh/errors.hpp"

namespace mcmfh::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

ConstMatrixMap as_matrix(const Tensor& t) {
  return ConstMatrixMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
MatrixMap as_matrix(Tensor& t) {
  return MatrixMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

thread_local bool g_grad_enabled = true;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

Node& input(Node& self, std::size_t i) { return *self.inputs[i]; }

template <typename Fn>
Var unary_elementwise(const Var& x, Fn&& forward_and_derivative) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  Tensor deriv(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    auto [y, dy] = forward_and_derivative(xv[i]);
    out[i] = y;
    deriv[i] = dy;
  }
  return make_result(std::move(out), {x}, [deriv = std::move(deriv)](Node& self) {
    Node& a = input(self, 0);
    if (!a.requires_grad) return;
    Tensor& ga = a.grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * deriv[i];
  });
}

}  // namespace

void Node::accumulate(std::span<const double> g) {
  if (grad.empty()) {
    grad = Tensor(value.shape(), std::vector<double>(g.begin(), g.end()));
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

double Var::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return value()[0];
}

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  Var out(std::move(value), false);
  if (!g_grad_enabled) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
  if (!needs) return out;
  out.node_->requires_grad = true;
  out.node_->inputs.reserve(inputs.size());
  for (auto& v : inputs) out.node_->inputs.push_back(v.node());
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& root) {
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Node& r = *root.node();
  Tensor& g = r.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  Tensor out({a.rows(), b.cols()});
  as_matrix(out).noalias() = as_matrix(a.value()) * as_matrix(b.value());
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node& x = input(self, 0);
    Node& y = input(self, 1);
    auto g = as_matrix(static_cast<const Tensor&>(self.grad));
    if (x.requires_grad) as_matrix(x.grad_buffer()).noalias() += g * as_matrix(static_cast<const Tensor&>(y.value)).transpose();
    if (y.requires_grad) as_matrix(y.grad_buffer()).noalias() += as_matrix(static_cast<const Tensor&>(x.value)).transpose() * g;
  });
}

Var transpose(const Var& a) {
  Tensor out({a.cols(), a.rows()});
  as_matrix(out) = as_matrix(a.value()).transpose();
  return make_result(std::move(out), {a}, [](Node& self) {
    Node& x = input(self, 0);
    if (x.requires_grad) as_matrix(x.grad_buffer()) += as_matrix(static_cast<const Tensor&>(self.grad)).transpose();
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& x = input(self, k);
      if (x.requires_grad) x.accumulate(self.grad.data());
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node& x = input(self, 0);
    Node& y = input(self, 1);
    if (x.requires_grad) x.accumulate(self.grad.data());
    if (y.requires_grad) {
      Tensor& gy = y.grad_buffer();
      for (std::size_t i = 0; i < gy.size(); ++i) gy[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node& x = input(self, 0);
    Node& y = input(self, 1);
    if (x.requires_grad) {
      Tensor& gx = x.grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * y.value[i];
    }
    if (y.requires_grad) {
      Tensor& gy = y.grad_buffer();
      for (std::size_t i = 0; i < gy.size(); ++i) gy[i] += self.grad[i] * x.value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  return make_result(std::move(out), {a}, [s](Node& self) {
    Node& x = input(self, 0);
    if (!x.requires_grad) return;
    Tensor& gx = x.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * s;
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s;
  return make_result(std::move(out), {a}, [](Node& self) {
    Node& x = input(self, 0);
    if (x.requires_grad) x.accumulate(self.grad.data());
  });
}

Var add_bias(const Var& a, const Var& bias) {
  if (bias.size() != a.cols()) {
    throw ShapeError("add_bias: bias " + shape_string(bias.shape()) + " does not fit " + shape_string(a.shape()));
  }
  Tensor out = a.value();
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bias.value()[c];
  return make_result(std::move(out), {a, bias}, [n](Node& self) {
    Node& x = input(self, 0);
    Node& b = input(self, 1);
    if (x.requires_grad) x.accumulate(self.grad.data());
    if (b.requires_grad) {
      Tensor& gb = b.grad_buffer();
      const std::size_t rows = self.grad.size() / n;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += self.grad[r * n + c];
    }
  });
}

Var square(const Var& a) {
  return unary_elementwise(a, [](double x) { return std::pair{x * x, 2.0 * x}; });
}

Var activation(const Var& x, Activation kind) {
  switch (kind) {
    case Activation::GELU:
      return unary_elementwise(x, [](double v) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return std::pair{v * cdf, cdf + v * pdf};
      });
    case Activation::ReLU:
      return unary_elementwise(x, [](double v) { return v > 0.0 ? std::pair{v, 1.0} : std::pair{0.0, 0.0}; });
    case Activation::Tanh:
      return unary_elementwise(x, [](double v) {
        const double t = std::tanh(v);
        return std::pair{t, 1.0 - t * t};
      });
  }
  throw std::logic_error("unknown activation");
}

Var softmax(const Var& x) {
  if (x.size() == 0) throw ShapeError("softmax of empty tensor");
  Tensor out = x.value();
  const std::size_t n = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double& v : row) {
      v = std::exp(v - m);
      total += v;
    }
    for (double& v : row) v /= total;
  }
  return make_result(out, {x}, [out, n](Node& self) {
    Node& a = input(self, 0);
    if (!a.requires_grad) return;
    Tensor& ga = a.grad_buffer();
    for (std::size_t r = 0; r < out.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += self.grad[r * n + c] * out[r * n + c];
      for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += out[r * n + c] * (self.grad[r * n + c] - dot);
    }
  });
}

Var log_softmax(const Var& x) {
  if (x.size() == 0) throw ShapeError("log_softmax of empty tensor");
  Tensor out = x.value();
  const std::size_t n = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double v : row) total += std::exp(v - m);
    const double lse = m + std::log(total);
    for (double& v : row) v -= lse;
  }
  return make_result(out, {x}, [out, n](Node& self) {
    Node& a = input(self, 0);
    if (!a.requires_grad) return;
    Tensor& ga = a.grad_buffer();
    for (std::size_t r = 0; r < out.rows(); ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < n; ++c) total += self.grad[r * n + c];
      for (std::size_t c = 0; c < n; ++c)
        ga[r * n + c] += self.grad[r * n + c] - std::exp(out[r * n + c]) * total;
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::size_t n = x.cols();
  if (n < 2) throw ShapeError("layer_norm needs at least 2 features, got " + shape_string(x.shape()));
  if (gamma.size() != n || beta.size() != n) {
    throw ShapeError("layer_norm: affine parameters " + shape_string(gamma.shape()) + "/" +
                     shape_string(beta.shape()) + " do not fit " + shape_string(x.shape()));
  }
  const std::size_t rows = x.rows();
  Tensor normalized(x.shape());
  std::vector<double> inv_std(rows);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = x.value().row(r);
    double mu = 0.0;
    for (double v : in) mu += v;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double v : in) var += (v - mu) * (v - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      const double xh = (in[c] - mu) * inv_std[r];
      normalized[r * n + c] = xh;
      out[r * n + c] = xh * gamma.value()[c] + beta.value()[c];
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [normalized = std::move(normalized), inv_std = std::move(inv_std), n, rows](Node& self) {
                       Node& xin = input(self, 0);
                       Node& g = input(self, 1);
                       Node& b = input(self, 2);
                       const Tensor& dy = self.grad;
                       if (g.requires_grad) {
                         Tensor& gg = g.grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < n; ++c) gg[c] += dy[r * n + c] * normalized[r * n + c];
                       }
                       if (b.requires_grad) {
                         Tensor& gb = b.grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < n; ++c) gb[c] += dy[r * n + c];
                       }
                       if (!xin.requires_grad) return;
                       Tensor& gx = xin.grad_buffer();
                       std::vector<double> dxh(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double mean_d = 0.0, mean_dx = 0.0;
                         for (std::size_t c = 0; c < n; ++c) {
                           dxh[c] = dy[r * n + c] * g.value[c];
                           mean_d += dxh[c];
                           mean_dx += dxh[c] * normalized[r * n + c];
                         }
                         mean_d /= static_cast<double>(n);
                         mean_dx /= static_cast<double>(n);
                         for (std::size_t c = 0; c < n; ++c)
                           gx[r * n + c] += inv_std[r] * (dxh[c] - mean_d - normalized[r * n + c] * mean_dx);
                       }
                     });
}

Var l2_normalize(const Var& x) {
  const std::size_t n = x.cols();
  Tensor out = x.value();
  std::vector<double> norms(out.rows());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    double ss = 0.0;
    for (double v : row) ss += v * v;
    if (!(ss > 0.0) || !std::isfinite(ss)) {
      throw NumericError("l2_normalize: row " + std::to_string(r) + " has zero or non-finite norm");
    }
    norms[r] = std::sqrt(ss);
    for (double& v : row) v /= norms[r];
  }
  return make_result(out, {x}, [out, norms = std::move(norms), n](Node& self) {
    Node& a = input(self, 0);
    if (!a.requires_grad) return;
    Tensor& ga = a.grad_buffer();
    for (std::size_t r = 0; r < norms.size(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += out[r * n + c] * self.grad[r * n + c];
      for (std::size_t c = 0; c < n; ++c)
        ga[r * n + c] += (self.grad[r * n + c] - out[r * n + c] * dot) / norms[r];
    }
  });
}

void fill_dropout_rows(Tensor& mask, std::size_t row_begin, std::size_t row_count, double p, RngStream& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must be in [0, 1), got " + std::to_string(p));
  const double keep_scale = 1.0 / (1.0 - p);
  const std::size_t n = mask.cols();
  for (std::size_t i = row_begin * n; i < (row_begin + row_count) * n; ++i) {
    mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
  }
}

Tensor dropout_mask(const Shape& shape, double p, RngStream& rng) {
  Tensor mask(shape);
  fill_dropout_rows(mask, 0, mask.rows(), p, rng);
  return mask;
}

Var apply_mask(const Var& x, const Tensor& mask) {
  if (mask.size() != x.size()) {
    throw ShapeError("apply_mask: mask " + shape_string(mask.shape()) + " vs input " + shape_string(x.shape()));
  }
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_result(std::move(out), {x}, [mask](Node& self) {
    Node& a = input(self, 0);
    if (!a.requires_grad) return;
    Tensor& ga = a.grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * mask[i];
  });
}

Var dropout(const Var& x, double p, RngStream& rng) { return apply_mask(x, dropout_mask(x.shape(), p, rng)); }

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& self) {
    Node& a = input(self, 0);
    if (a.requires_grad) a.accumulate(self.grad.data());
  });
}

Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  const std::size_t n = x.cols();
  if (begin >= end || end > n) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + shape_string(x.shape()));
  }
  const std::size_t rows = x.rows();
  const std::size_t w = end - begin;
  Tensor out({rows, w});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = x.value()[r * n + begin + c];
  return make_result(std::move(out), {x}, [begin, w, n, rows](Node& self) {
    Node& a = input(self, 0);
    if (!a.requires_grad) return;
    Tensor& ga = a.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) ga[r * n + begin + c] += self.grad[r * w + c];
  });
}

Var concat_cols(const Var& a, const Var& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("concat_cols: row counts differ for " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  const std::size_t rows = a.rows(), na = a.cols(), nb = b.cols(), n = na + nb;
  Tensor out({rows, n});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < na; ++c) out[r * n + c] = a.value()[r * na + c];
    for (std::size_t c = 0; c < nb; ++c) out[r * n + na + c] = b.value()[r * nb + c];
  }
  return make_result(std::move(out), {a, b}, [rows, na, nb, n](Node& self) {
    Node& x = input(self, 0);
    Node& y = input(self, 1);
    if (x.requires_grad) {
      Tensor& g = x.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < na; ++c) g[r * na + c] += self.grad[r * n + c];
    }
    if (y.requires_grad) {
      Tensor& g = y.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < nb; ++c) g[r * nb + c] += self.grad[r * n + na + c];
    }
  });
}

Var gather_rows(const Var& x, std::span<const std::size_t> rows) {
  const std::size_t n = x.cols();
  Tensor out({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(x.value().row(rows[i]).begin(), n, out.row(i).begin());
  }
  return make_result(std::move(out), {x}, [idx = std::vector<std::size_t>(rows.begin(), rows.end()), n](Node& self) {
    Node& a = input(self, 0);
    if (!a.requires_grad) return;
    Tensor& ga = a.grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < n; ++c) ga[idx[i] * n + c] += self.grad[i * n + c];
  });
}

Var scatter_rows(const Var& x, std::span<const std::size_t> rows, std::size_t total_rows) {
  if (rows.size() != x.rows()) throw ShapeError("scatter_rows: index count does not match rows");
  const std::size_t n = x.cols();
  Tensor out({total_rows, n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total_rows) throw ShapeError("scatter_rows: row index out of range");
    std::copy_n(x.value().row(i).begin(), n, out.row(rows[i]).begin());
  }
  return make_result(std::move(out), {x}, [idx = std::vector<std::size_t>(rows.begin(), rows.end()), n](Node& self) {
    Node& a = input(self, 0);
    if (!a.requires_grad) return;
    Tensor& ga = a.grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < n; ++c) ga[i * n + c] += self.grad[idx[i] * n + c];
  });
}

Var pick(const Var& x, std::span<const std::size_t> index) {
  if (index.size() != x.rows()) throw ShapeError("pick: need one index per row of " + shape_string(x.shape()));
  const std::size_t n = x.cols();
  Tensor out({index.size(), 1});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= n) throw ShapeError("pick: column index out of range");
    out[r] = x.value()[r * n + index[r]];
  }
  return make_result(std::move(out), {x}, [idx = std::vector<std::size_t>(index.begin(), index.end()), n](Node& self) {
    Node& a = input(self, 0);
    if (!a.requires_grad) return;
    Tensor& ga = a.grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r) ga[r * n + idx[r]] += self.grad[r];
  });
}

Var scale_rows(const Var& x, const Var& s) {
  const std::size_t rows = x.rows(), n = x.cols();
  if (s.size() != rows) throw ShapeError("scale_rows: need one factor per row of " + shape_string(x.shape()));
  Tensor out = x.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] *= s.value()[r];
  return make_result(std::move(out), {x, s}, [rows, n](Node& self) {
    Node& a = input(self, 0);
    Node& f = input(self, 1);
    if (a.requires_grad) {
      Tensor& ga = a.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += self.grad[r * n + c] * f.value[r];
    }
    if (f.requires_grad) {
      Tensor& gf = f.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < n; ++c) acc += self.grad[r * n + c] * a.value[r * n + c];
        gf[r] += acc;
      }
    }
  });
}

Var mean_of(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("mean_of: no inputs");
  for (const auto& x : xs) require_same_shape(xs[0], x, "mean_of");
  const std::size_t groups = xs.size(), n = xs[0].size();
  const double inv = 1.0 / static_cast<double>(groups);
  const auto& x0 = xs[0].value();
  Tensor out(xs[0].shape());
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t g = 1; g < groups; ++g) acc += xs[g].value()[i] - x0[i];
    out[i] = x0[i] + acc * inv;
  }
  return make_result(std::move(out), std::vector<Var>(xs.begin(), xs.end()), [inv](Node& self) {
    for (std::size_t g = 0; g < self.inputs.size(); ++g) {
      Node& a = input(self, g);
      if (!a.requires_grad) continue;
      Tensor& ga = a.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * inv;
    }
  });
}

Var mean_rows(const Var& x) {
  const std::size_t rows = x.rows(), n = x.cols();
  if (rows == 0) throw ShapeError("mean_rows of empty tensor");
  Tensor out({n});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < n; ++c) out[c] += x.value()[r * n + c];
  const double inv = 1.0 / static_cast<double>(rows);
  for (std::size_t c = 0; c < n; ++c) out[c] *= inv;
  return make_result(std::move(out), {x}, [rows, n, inv](Node& self) {
    Node& a = input(self, 0);
    if (!a.requires_grad) return;
    Tensor& ga = a.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += self.grad[c] * inv;
  });
}

Var sum(const Var& x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  return make_result(Tensor({1}, {total}), {x}, [](Node& self) {
    Node& a = input(self, 0);
    if (!a.requires_grad) return;
    Tensor& ga = a.grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[0];
  });
}

Var mean(const Var& x) {
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Var dot_const(const Var& x, std::span<const double> c) {
  if (c.size() != x.size()) throw ShapeError("dot_const: constant length does not match " + shape_string(x.shape()));
  double total = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) total += x.value()[i] * c[i];
  return make_result(Tensor({1}, {total}), {x}, [coef = std::vector<double>(c.begin(), c.end())](Node& self) {
    Node& a = input(self, 0);
    if (!a.requires_grad) return;
    Tensor& ga = a.grad_buffer();
    for (std::size_t i = 0; i < coef.size(); ++i) ga[i] += self.grad[0] * coef[i];
  });
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
  if (terms.size() != weights.size()) throw ShapeError("weighted_sum: term/weight count mismatch");
  double total = 0.0;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (terms[k].size() != 1) throw ShapeError("weighted_sum: terms must be scalars");
    total += weights[k] * terms[k].item();
  }
  std::vector<Var> inputs(terms.begin(), terms.end());
  return make_result(Tensor({1}, {total}), std::move(inputs),
                     [w = std::vector<double>(weights.begin(), weights.end())](Node& self) {
                       for (std::size_t k = 0; k < w.size(); ++k) {
                         Node& t = input(self, k);
                         if (t.requires_grad) t.grad_buffer()[0] += self.grad[0] * w[k];
                       }
                     });
}

Var attention(const Var& q, const Var& k, const Var& v, std::size_t tokens, std::size_t heads) {
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: model width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (tokens == 0 || q.rows() % tokens != 0) throw ShapeError("attention: rows are not a whole number of sequences");
  const std::size_t batch = q.rows() / tokens;
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();

  // probs layout: [batch][head][query token][key token]
  std::vector<double> probs(batch * heads * tokens * tokens);
  Tensor out(q.shape());
  for (std::size_t s = 0; s < batch; ++s) {
    const std::size_t base = s * tokens;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      double* p = &probs[((s * heads) + h) * tokens * tokens];
      for (std::size_t i = 0; i < tokens; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < tokens; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += Q[(base + i) * d + off + c] * K[(base + j) * d + off + c];
          p[i * tokens + j] = dot * inv_sqrt;
          m = std::max(m, p[i * tokens + j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < tokens; ++j) {
          p[i * tokens + j] = std::exp(p[i * tokens + j] - m);
          total += p[i * tokens + j];
        }
        for (std::size_t j = 0; j < tokens; ++j) p[i * tokens + j] /= total;
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j < tokens; ++j) acc += p[i * tokens + j] * V[(base + j) * d + off + c];
          out[(base + i) * d + off + c] = acc;
        }
      }
    }
  }
  return make_result(std::move(out), {q, k, v},
                     [probs = std::move(probs), batch, tokens, heads, dh, d, inv_sqrt](Node& self) {
                       Node& qn = input(self, 0);
                       Node& kn = input(self, 1);
                       Node& vn = input(self, 2);
                       const Tensor& G = self.grad;
                       const auto& Q = qn.value;
                       const auto& K = kn.value;
                       const auto& V = vn.value;
                       Tensor* gq = qn.requires_grad ? &qn.grad_buffer() : nullptr;
                       Tensor* gk = kn.requires_grad ? &kn.grad_buffer() : nullptr;
                       Tensor* gv = vn.requires_grad ? &vn.grad_buffer() : nullptr;
                       std::vector<double> dscore(tokens * tokens);
                       for (std::size_t s = 0; s < batch; ++s) {
                         const std::size_t base = s * tokens;
                         for (std::size_t h = 0; h < heads; ++h) {
                           const std::size_t off = h * dh;
                           const double* p = &probs[((s * heads) + h) * tokens * tokens];
                           for (std::size_t i = 0; i < tokens; ++i) {
                             double rowdot = 0.0;
                             for (std::size_t j = 0; j < tokens; ++j) {
                               double dp = 0.0;
                               for (std::size_t c = 0; c < dh; ++c)
                                 dp += G[(base + i) * d + off + c] * V[(base + j) * d + off + c];
                               dscore[i * tokens + j] = dp;
                               rowdot += dp * p[i * tokens + j];
                             }
                             for (std::size_t j = 0; j < tokens; ++j)
                               dscore[i * tokens + j] = p[i * tokens + j] * (dscore[i * tokens + j] - rowdot) * inv_sqrt;
                           }
                           for (std::size_t i = 0; i < tokens; ++i) {
                             for (std::size_t j = 0; j < tokens; ++j) {
                               const double ds = dscore[i * tokens + j];
                               const double pij = p[i * tokens + j];
                               for (std::size_t c = 0; c < dh; ++c) {
                                 if (gq) (*gq)[(base + i) * d + off + c] += ds * K[(base + j) * d + off + c];
                                 if (gk) (*gk)[(base + j) * d + off + c] += ds * Q[(base + i) * d + off + c];
                                 if (gv) (*gv)[(base + j) * d + off + c] += pij * G[(base + i) * d + off + c];
                               }
                             }
                           }
                         }
                       }
                     });
}

}  // namespace mcmfh::ad
