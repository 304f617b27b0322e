#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "rasr/tensor.hpp"

// Reverse-mode automatic differentiation over a dynamically recorded graph.
//
// Every op returns a Var whose Node remembers its parents and a closure that
// pushes the node's gradient into them. backward() orders the reachable nodes
// topologically and runs each closure exactly once; gradients flowing into a
// node from several consumers are summed. Leaf gradients persist until
// zero_grad(), which is what gradient accumulation relies on.
namespace rasr::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::string name;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
    return grad;
  }
  bool is_leaf() const { return parents.empty(); }
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
} // namespace detail

// Disables graph recording on this thread for its lifetime (inference).
class NoGradGuard {
public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool prev_;
};

class Var {
public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  explicit Var(Tensor value, bool requires_grad = false, std::string name = {})
      : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->name = std::move(name);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor grad_or_zero() const {
    return node_->grad.size() == node_->value.size() ? node_->grad : Tensor(node_->value.shape(), 0.0);
  }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::string& name() const { return node_->name; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  std::size_t size() const { return node_->value.size(); }
  double item() const { return node_->value.item(); }

  void zero_grad() { node_->grad = Tensor(); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const { return node_; }

private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }
inline Var variable(Tensor t, std::string name = {}) { return Var(std::move(t), true, std::move(name)); }

using GradientMap = std::map<std::string, Tensor>;

// Records a new node. When no input requires a gradient, or recording is
// disabled, the result is a constant and the closure is dropped.
inline Var make_op(Tensor value, std::initializer_list<Var> inputs, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (detail::grad_enabled_flag()) {
    bool any = false;
    for (const Var& v : inputs) any = any || v.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const Var& v : inputs) n->parents.push_back(v.ptr());
      n->backward = std::move(fn);
    }
  }
  return Var(std::move(n));
}

inline Var make_op(Tensor value, const std::vector<Var>& inputs, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (detail::grad_enabled_flag()) {
    bool any = false;
    for (const Var& v : inputs) any = any || v.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const Var& v : inputs) n->parents.push_back(v.ptr());
      n->backward = std::move(fn);
    }
  }
  return Var(std::move(n));
}

// Propagates d(loss)/d(node) to every node reachable from `loss`. Returns the
// gradients of the named leaves that were reached.
inline GradientMap backward(const Var& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ShapeError("backward() needs a scalar loss, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  GradientMap out;
  if (!loss.requires_grad()) return out;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.ptr().get(), 0}};
  seen.insert(loss.ptr().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node().grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf()) continue;
    if (n->grad.size() == n->value.size() && n->backward) n->backward(*n);
    n->grad = Tensor();
  }
  for (Node* n : order)
    if (n->is_leaf() && !n->name.empty()) out[n->name] = n->grad_buffer();
  return out;
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

// C(m x n) += op(A) * op(B), all row-major.
inline void gemm_acc(double* c, std::size_t m, std::size_t n, const double* a, std::size_t ar,
                     std::size_t ac, bool ta, const double* b, std::size_t br, std::size_t bc, bool tb) {
  MMap C(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  CMap A(a, static_cast<Eigen::Index>(ar), static_cast<Eigen::Index>(ac));
  CMap B(b, static_cast<Eigen::Index>(br), static_cast<Eigen::Index>(bc));
  if (!ta && !tb) C.noalias() += A * B;
  else if (ta && !tb) C.noalias() += A.transpose() * B;
  else if (!ta && tb) C.noalias() += A * B.transpose();
  else C.noalias() += A.transpose() * B.transpose();
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

enum class Broadcast { Same, Row, Scalar };

inline Broadcast broadcast_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.size() == b.size() && (a.shape() == b.shape() || a.rows() == b.rows())) return Broadcast::Same;
  if (b.size() == 1) return Broadcast::Scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::Row;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
}

inline std::size_t bindex(Broadcast m, std::size_t i, std::size_t cols) {
  switch (m) {
  case Broadcast::Same: return i;
  case Broadcast::Row: return i % cols;
  default: return 0;
  }
}

// y = f(x); dfdx(x, y) gives the local derivative.
template <class F, class D>
Var unary(const Var& a, F f, D dfdx) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_op(std::move(y), {a}, [dfdx](Node& n) {
    Node& p = *n.parents[0];
    Tensor& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * dfdx(p.value[i], n.value[i]);
  });
}

// z = f(x, y) with y broadcast onto x's shape.
template <class F, class DX, class DY>
Var binary(const Var& a, const Var& b, const char* op, F f, DX dx, DY dy) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const Broadcast mode = broadcast_mode(x, y, op);
  const std::size_t cols = x.cols();
  Tensor z(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) z[i] = f(x[i], y[bindex(mode, i, cols)]);
  return make_op(std::move(z), {a, b}, [=](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    const std::size_t len = n.value.size();
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (std::size_t i = 0; i < len; ++i)
        g[i] += n.grad[i] * dx(pa.value[i], pb.value[bindex(mode, i, cols)]);
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_buffer();
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t j = bindex(mode, i, cols);
        g[j] += n.grad[i] * dy(pa.value[i], pb.value[j]);
      }
    }
  });
}

} // namespace detail

// ---------------------------------------------------------------- arithmetic

inline Var add(const Var& a, const Var& b) {
  return detail::binary(a, b, "add", [](double x, double y) { return x + y; },
                        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary(a, b, "sub", [](double x, double y) { return x - y; },
                        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary(a, b, "mul", [](double x, double y) { return x * y; },
                        [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Var scale(const Var& a, double c) {
  return detail::unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var square(const Var& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var exp(const Var& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

// log(max(x, floor)); the clamp has zero slope.
inline Var log_floor(const Var& a, double floor) {
  return detail::unary(
      a, [floor](double x) { return std::log(std::max(x, floor)); },
      [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                       [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(const Var& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}

// tanh approximation of GELU.
inline double gelu_value(double x) {
  constexpr double k = 0.7978845608028654; // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline Var gelu(const Var& a) {
  return detail::unary(a, gelu_value, [](double x, double) {
    constexpr double k = 0.7978845608028654;
    const double th = std::tanh(k * (x + 0.044715 * x * x * x));
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * k * (1.0 + 3.0 * 0.044715 * x * x);
  });
}

inline Var silu(const Var& a) {
  return detail::unary(a, [](double x) { return x / (1.0 + std::exp(-x)); },
                       [](double x, double) {
                         const double s = 1.0 / (1.0 + std::exp(-x));
                         return s * (1.0 + x * (1.0 - s));
                       });
}

// ---------------------------------------------------------------- reductions

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return make_op(Tensor::scalar(s), {a}, [](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    const double gv = n.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gv;
  });
}

inline Var mean(const Var& a) {
  detail::require(a.size() > 0, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Var mse(const Var& a, const Var& b) { return mean(square(sub(a, b))); }

// Column means over rows: (T x C) -> (1 x C).
inline Var mean_rows(const Var& a) {
  const Tensor& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  detail::require(rows > 0, "mean_rows of empty tensor");
  Tensor y = Tensor::matrix(1, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) y[c] += x(r, c);
  for (double& v : y.storage()) v /= static_cast<double>(rows);
  return make_op(std::move(y), {a}, [rows, cols](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    const double inv = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += n.grad[c] * inv;
  });
}

// Element at flat index `i` as a scalar.
inline Var pick(const Var& a, std::size_t i) {
  detail::require(i < a.size(), "pick index out of range");
  return make_op(Tensor::scalar(a.value()[i]), {a}, [i](Node& n) { n.parents[0]->grad_buffer()[i] += n.grad[0]; });
}

// ---------------------------------------------------------------- linear algebra

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t bk = B.rank() == 1 ? B.size() : B.shape()[0];
  const std::size_t bn = B.rank() == 1 ? 1 : B.cols();
  detail::require(A.cols() == bk, "matmul: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  const std::size_t m = A.rows(), k = A.cols(), n = bn;
  Tensor C = Tensor::matrix(m, n);
  detail::gemm_acc(C.data().data(), m, n, A.data().data(), m, k, false, B.data().data(), k, n, false);
  return make_op(std::move(C), {a, b}, [m, k, n](Node& node) {
    Node& pa = *node.parents[0];
    Node& pb = *node.parents[1];
    if (pa.requires_grad)
      detail::gemm_acc(pa.grad_buffer().data().data(), m, k, node.grad.data().data(), m, n, false,
                       pb.value.data().data(), k, n, true);
    if (pb.requires_grad)
      detail::gemm_acc(pb.grad_buffer().data().data(), k, n, pa.value.data().data(), m, k, true,
                       node.grad.data().data(), m, n, false);
  });
}

// y = x W + b with W of shape (d_in, d_out) and b of length d_out. `b` may be
// undefined.
inline Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  detail::require(W.rank() == 2 && X.cols() == W.shape()[0],
                  "linear: input " + shape_str(X.shape()) + " vs weight " + shape_str(W.shape()));
  const std::size_t m = X.rows(), k = X.cols(), n = W.cols();
  const bool has_bias = b.defined();
  if (has_bias) detail::require(b.size() == n, "linear: bias length mismatch");
  Tensor Y = Tensor::matrix(m, n);
  if (has_bias)
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) Y(r, c) = b.value()[c];
  detail::gemm_acc(Y.data().data(), m, n, X.data().data(), m, k, false, W.data().data(), k, n, false);
  if (X.rank() > 2) {
    Shape s = X.shape();
    s.back() = n;
    Y = Y.reshaped(s);
  }
  auto fn = [m, k, n, has_bias](Node& node) {
    Node& px = *node.parents[0];
    Node& pw = *node.parents[1];
    if (px.requires_grad)
      detail::gemm_acc(px.grad_buffer().data().data(), m, k, node.grad.data().data(), m, n, false,
                       pw.value.data().data(), k, n, true);
    if (pw.requires_grad)
      detail::gemm_acc(pw.grad_buffer().data().data(), k, n, px.value.data().data(), m, k, true,
                       node.grad.data().data(), m, n, false);
    if (has_bias && node.parents[2]->requires_grad) {
      Tensor& gb = node.parents[2]->grad_buffer();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += node.grad[r * n + c];
    }
  };
  if (has_bias) return make_op(std::move(Y), {x, w, b}, fn);
  return make_op(std::move(Y), {x, w}, fn);
}

inline Var transpose(const Var& a) {
  return make_op(rasr::transpose(a.value()), {a}, [](Node& n) {
    Node& p = *n.parents[0];
    Tensor& g = p.grad_buffer();
    const std::size_t rows = p.value.rows(), cols = p.value.cols();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += n.grad[c * rows + r];
  });
}

inline Var reshape(const Var& a, Shape s) {
  detail::require(shape_size(s) == a.size(), "reshape to " + shape_str(s) + " from " + shape_str(a.shape()));
  return make_op(a.value().reshaped(std::move(s)), {a}, [](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------- normalization

// Per-row (x - mean) / sqrt(var + eps) * gamma + beta, population variance.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const Tensor& X = x.value();
  const std::size_t rows = X.rows(), cols = X.cols();
  detail::require(gamma.size() == cols && beta.size() == cols, "layer_norm: affine size mismatch");
  Tensor xhat(X.shape());
  std::vector<double> inv_std(rows);
  Tensor Y(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += X(r, c);
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (X(r, c) - mu) * (X(r, c) - mu);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (X(r, c) - mu) * inv_std[r];
      xhat[r * cols + c] = h;
      Y[r * cols + c] = h * gamma.value()[c] + beta.value()[c];
    }
  }
  return make_op(std::move(Y), {x, gamma, beta},
                 [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols](Node& n) {
                   Node& px = *n.parents[0];
                   Node& pg = *n.parents[1];
                   Node& pb = *n.parents[2];
                   if (pg.requires_grad || pb.requires_grad) {
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t c = 0; c < cols; ++c) {
                         const double g = n.grad[r * cols + c];
                         if (pg.requires_grad) pg.grad_buffer()[c] += g * xhat[r * cols + c];
                         if (pb.requires_grad) pb.grad_buffer()[c] += g;
                       }
                   }
                   if (!px.requires_grad) return;
                   Tensor& gx = px.grad_buffer();
                   std::vector<double> dxhat(cols);
                   for (std::size_t r = 0; r < rows; ++r) {
                     double m1 = 0.0, m2 = 0.0;
                     for (std::size_t c = 0; c < cols; ++c) {
                       dxhat[c] = n.grad[r * cols + c] * pg.value[c];
                       m1 += dxhat[c];
                       m2 += dxhat[c] * xhat[r * cols + c];
                     }
                     m1 /= static_cast<double>(cols);
                     m2 /= static_cast<double>(cols);
                     for (std::size_t c = 0; c < cols; ++c)
                       gx[r * cols + c] += inv_std[r] * (dxhat[c] - m1 - xhat[r * cols + c] * m2);
                   }
                 });
}

inline Tensor softmax_rows(const Tensor& x) {
  Tensor y(x.shape());
  const std::size_t cols = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, x(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double e = std::exp(x(r, c) - mx);
      y[r * cols + c] = e;
      s += e;
    }
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] /= s;
  }
  return y;
}

// Row-wise softmax; entries equal to -inf get probability 0.
inline Var softmax_rows(const Var& x) {
  return make_op(softmax_rows(x.value()), {x}, [](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    const std::size_t cols = n.value.cols();
    for (std::size_t r = 0; r < n.value.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += n.grad[r * cols + c] * n.value[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        g[r * cols + c] += n.value[r * cols + c] * (n.grad[r * cols + c] - dot);
    }
  });
}

inline Var log_softmax_rows(const Var& x) {
  const Tensor& X = x.value();
  Tensor y(X.shape());
  const std::size_t cols = X.cols();
  for (std::size_t r = 0; r < X.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, X(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(X(r, c) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = X(r, c) - lse;
  }
  return make_op(std::move(y), {x}, [](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    const std::size_t cols = n.value.cols();
    for (std::size_t r = 0; r < n.value.rows(); ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gs += n.grad[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        g[r * cols + c] += n.grad[r * cols + c] - std::exp(n.value[r * cols + c]) * gs;
    }
  });
}

// ---------------------------------------------------------------- slicing

inline Var slice_rows(const Var& a, std::size_t start, std::size_t len) {
  const Tensor& x = a.value();
  detail::require(start + len <= x.rows(), "slice_rows out of range");
  const std::size_t cols = x.cols();
  Tensor y = Tensor::matrix(len, cols);
  std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(start * cols), len * cols, y.data().begin());
  return make_op(std::move(y), {a}, [start, len, cols](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < len * cols; ++i) g[start * cols + i] += n.grad[i];
  });
}

inline Var slice_cols(const Var& a, std::size_t start, std::size_t len) {
  const Tensor& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  detail::require(start + len <= cols, "slice_cols out of range");
  Tensor y = Tensor::matrix(rows, len);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < len; ++c) y(r, c) = x(r, start + c);
  return make_op(std::move(y), {a}, [start, len, rows, cols](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < len; ++c) g[r * cols + start + c] += n.grad[r * len + c];
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_cols of nothing");
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require(p.rows() == rows, "concat_cols row mismatch");
    total += p.cols();
  }
  Tensor y = Tensor::matrix(rows, total);
  std::size_t off = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    offsets.push_back(off);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) y(r, off + c) = p.value()(r, c);
    off += p.cols();
  }
  return make_op(std::move(y), parts, [offsets, rows, total](Node& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i) {
      Node& p = *n.parents[i];
      if (!p.requires_grad) continue;
      Tensor& g = p.grad_buffer();
      const std::size_t pc = p.value.cols();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < pc; ++c) g[r * pc + c] += n.grad[r * total + offsets[i] + c];
    }
  });
}

// Nearest-neighbour upsampling along rows.
inline Var upsample_rows(const Var& a, std::size_t factor) {
  const Tensor& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor y = Tensor::matrix(rows * factor, cols);
  for (std::size_t r = 0; r < rows * factor; ++r)
    for (std::size_t c = 0; c < cols; ++c) y(r, c) = x(r / factor, c);
  return make_op(std::move(y), {a}, [factor, rows, cols](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows * factor; ++r)
      for (std::size_t c = 0; c < cols; ++c) g[(r / factor) * cols + c] += n.grad[r * cols + c];
  });
}

// ---------------------------------------------------------------- convolution

inline std::size_t conv_output_length(std::size_t length, std::size_t kernel, std::size_t stride,
                                       std::size_t padding = 0) {
  const std::size_t padded = length + 2 * padding;
  if (padded < kernel) return 0;
  return (padded - kernel) / stride + 1;
}

// Cross-correlation of x (T x C_in) with kernels (C_out x C_in x k), zero
// padding on both ends. Output is (T' x C_out), T' = floor((T + 2p - k)/s) + 1.
inline Var conv1d(const Var& x, const Var& kernels, const Var& bias, std::size_t stride, std::size_t padding = 0) {
  const Tensor& X = x.value();
  const Tensor& W = kernels.value();
  detail::require(W.rank() == 3, "conv1d: kernels must be (C_out, C_in, k)");
  const std::size_t c_out = W.shape()[0], c_in = W.shape()[1], k = W.shape()[2];
  detail::require(X.cols() == c_in, "conv1d: input channels " + std::to_string(X.cols()) + " vs kernel " +
                                        std::to_string(c_in));
  detail::require(stride >= 1, "conv1d: stride must be >= 1");
  const std::size_t t_in = X.rows();
  if (t_in + 2 * padding < k)
    throw ShapeError("conv1d: sequence length " + std::to_string(t_in) + " shorter than kernel " + std::to_string(k));
  const std::size_t t_out = conv_output_length(t_in, k, stride, padding);
  const std::size_t width = c_in * k;
  Tensor cols = Tensor::matrix(t_out, width);
  for (std::size_t t = 0; t < t_out; ++t)
    for (std::size_t j = 0; j < k; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + j) - static_cast<std::ptrdiff_t>(padding);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_in)) continue;
      for (std::size_t c = 0; c < c_in; ++c) cols[t * width + c * k + j] = X(static_cast<std::size_t>(src), c);
    }
  const bool has_bias = bias.defined();
  Tensor Y = Tensor::matrix(t_out, c_out);
  if (has_bias)
    for (std::size_t t = 0; t < t_out; ++t)
      for (std::size_t o = 0; o < c_out; ++o) Y(t, o) = bias.value()[o];
  detail::gemm_acc(Y.data().data(), t_out, c_out, cols.data().data(), t_out, width, false, W.data().data(), c_out,
                   width, true);
  auto fn = [cols = std::move(cols), t_in, t_out, c_in, c_out, k, stride, padding, width, has_bias](Node& n) {
    Node& px = *n.parents[0];
    Node& pw = *n.parents[1];
    if (pw.requires_grad)
      detail::gemm_acc(pw.grad_buffer().data().data(), c_out, width, n.grad.data().data(), t_out, c_out, true,
                       cols.data().data(), t_out, width, false);
    if (has_bias && n.parents[2]->requires_grad) {
      Tensor& gb = n.parents[2]->grad_buffer();
      for (std::size_t t = 0; t < t_out; ++t)
        for (std::size_t o = 0; o < c_out; ++o) gb[o] += n.grad[t * c_out + o];
    }
    if (px.requires_grad) {
      Tensor gcols = Tensor::matrix(t_out, width);
      detail::gemm_acc(gcols.data().data(), t_out, width, n.grad.data().data(), t_out, c_out, false,
                       pw.value.data().data(), c_out, width, false);
      Tensor& gx = px.grad_buffer();
      for (std::size_t t = 0; t < t_out; ++t)
        for (std::size_t j = 0; j < k; ++j) {
          const std::ptrdiff_t src =
              static_cast<std::ptrdiff_t>(t * stride + j) - static_cast<std::ptrdiff_t>(padding);
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_in)) continue;
          for (std::size_t c = 0; c < c_in; ++c)
            gx[static_cast<std::size_t>(src) * c_in + c] += gcols[t * width + c * k + j];
        }
    }
  };
  if (has_bias) return make_op(std::move(Y), {x, kernels, bias}, std::move(fn));
  return make_op(std::move(Y), {x, kernels}, std::move(fn));
}

// ---------------------------------------------------------------- regularization

// Inverted dropout: kept units are scaled by 1/(1-p) so evaluation is identity.
template <class Rng>
Var dropout(const Var& x, double p, bool train, Rng& rng) {
  if (!train || p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor mask(x.shape());
  for (double& m : mask.storage()) m = u(rng) >= p ? 1.0 / (1.0 - p) : 0.0;
  return mul(x, constant(std::move(mask)));
}

} // namespace rasr::ad
