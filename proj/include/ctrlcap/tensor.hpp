#pragma once

// Dense row-major tensors of doubles with tape-free reverse-mode autodiff.
//
// Every op that has at least one input requiring a gradient records a node
// holding its parents and a closure that pushes the node's gradient back into
// them. The graph lives exactly as long as the tensors that reference it;
// backward() releases the interior edges once gradients have been propagated.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ctrlcap/error.hpp"

namespace ctrlcap {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
      throw DimensionError("tensor of shape " + shape_str(shape) + " given " +
                           std::to_string(values.size()) + " values");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    Tensor t(std::move(n));
    t.check_finite("from");
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto count = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(count, 0.0), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    Shape s{v.size()};
    return from(std::move(s), std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  // Direct mutation is for optimizers and initializers; never call it on a
  // tensor that is part of a live graph.
  std::span<double> mutable_data() { return node_->data; }
  double at(std::size_t i) const { return node_->data.at(i); }
  double item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  std::vector<double> to_vector() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

  // Fresh leaf sharing no graph history with this tensor.
  Tensor detach() const { return from(shape(), node_->data, false); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

  void check_finite(const char* op) const {
    for (double v : node_->data)
      if (!std::isfinite(v))
        throw NumericError(std::string("non-finite value produced by ") + op + " (shape " +
                           shape_str(shape()) + ")");
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds the result node, wiring it into the graph when any parent needs a
// gradient and recording is enabled.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::initializer_list<Tensor> parents,
                          std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool needs = false;
  if (grad_mode())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    n->requires_grad = true;
    n->is_leaf = false;
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  Tensor t(std::move(n));
  t.check_finite(op);
  return t;
}

inline Tensor make_result_many(const char* op, Shape shape, std::vector<double> data,
                               const std::vector<Tensor>& parents,
                               std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool needs = false;
  if (grad_mode())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    n->requires_grad = true;
    n->is_leaf = false;
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  Tensor t(std::move(n));
  t.check_finite(op);
  return t;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline void require_rank(const char* op, const Tensor& a, std::size_t r) {
  if (a.rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(a.shape()));
}

template <class F, class DF>
Tensor unary(const char* op, const Tensor& a, F f, DF df) {
  std::vector<double> out(a.numel());
  auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result(op, a.shape(), std::move(out), {a}, [df](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p.data[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& pp : self.parents) {
      if (!pp->requires_grad) continue;
      auto& g = pp->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    detail::Node& pa = *self.parents[0];
    detail::Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

/// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    detail::Node& pa = *self.parents[0];
    detail::Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("div", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
  return detail::make_result("div", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    detail::Node& pa = *self.parents[0];
    detail::Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] -= self.grad[i] * self.data[i] / pb.data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary(
      "scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor log(const Tensor& a) {
  for (double v : a.data())
    if (!(v > 0)) throw NumericError("log of non-positive value " + std::to_string(v));
  return detail::unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// log(max(x, eps)); the gradient is zero where the clamp is active.
inline Tensor log_clamped(const Tensor& a, double eps) {
  return detail::unary(
      "log_clamped", a, [eps](double x) { return std::log(std::max(x, eps)); },
      [eps](double x, double) { return x > eps ? 1.0 / x : 0.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// A[m,k] x B[k,n] -> [m,n]; a rank-1 B of length k yields a length-m vector.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank("matmul", a, 2);
  if (b.rank() != 1 && b.rank() != 2)
    throw DimensionError("matmul: right operand must be rank 1 or 2, got " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1);
  const std::size_t n = b.rank() == 1 ? 1 : b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = A.data() + i * k;
    double* orow = out.data() + i * n;
    if (n == 1) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * B[p];
      orow[0] = s;
    } else {
      for (std::size_t p = 0; p < k; ++p) {
        const double av = arow[p];
        const double* brow = B.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
  Shape shape = b.rank() == 1 ? Shape{m} : Shape{m, n};
  return detail::make_result("matmul", shape, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    detail::Node& pa = *self.parents[0];
    detail::Node& pb = *self.parents[1];
    const double* G = self.grad.data();
    if (pa.requires_grad) {
      auto& ga = pa.ensure_grad();
      // dA = G B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = G[i * n + j];
          if (gv == 0.0) continue;
          double* garow = ga.data() + i * k;
          for (std::size_t p = 0; p < k; ++p) garow[p] += gv * pb.data[p * n + j];
        }
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      // dB = A^T G
      for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa.data.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = arow[p];
          double* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * G[i * n + j];
        }
      }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank("transpose", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
  return detail::make_result("transpose", {c, r}, std::move(out), {a}, [r, c](detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

/// M[n,k] + v[k] broadcast over rows.
inline Tensor add_rowwise(const Tensor& m, const Tensor& v) {
  detail::require_rank("add_rowwise", m, 2);
  detail::require_rank("add_rowwise", v, 1);
  const std::size_t n = m.dim(0), k = m.dim(1);
  if (v.dim(0) != k)
    throw DimensionError("add_rowwise: " + shape_str(m.shape()) + " + " + shape_str(v.shape()));
  std::vector<double> out(m.data().begin(), m.data().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] += v.data()[j];
  return detail::make_result("add_rowwise", m.shape(), std::move(out), {m, v},
                             [n, k](detail::Node& self) {
                               detail::Node& pm = *self.parents[0];
                               detail::Node& pv = *self.parents[1];
                               if (pm.requires_grad) {
                                 auto& g = pm.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                               }
                               if (pv.requires_grad) {
                                 auto& g = pv.ensure_grad();
                                 for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < k; ++j) g[j] += self.grad[i * k + j];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result("sum", {1}, {s}, {a}, [](detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (auto& x : g) x += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Mean over axis 0 of a matrix: [n,k] -> [k].
inline Tensor mean_rows(const Tensor& m) {
  detail::require_rank("mean_rows", m, 2);
  const std::size_t n = m.dim(0), k = m.dim(1);
  std::vector<double> out(k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[j] += m.data()[i * k + j];
  for (auto& v : out) v /= static_cast<double>(n);
  return detail::make_result("mean_rows", {k}, std::move(out), {m}, [n, k](detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) g[i * k + j] += self.grad[j] * inv;
  });
}

namespace detail {
inline std::pair<std::size_t, std::size_t> last_axis_split(const Tensor& a) {
  const std::size_t k = a.shape().back();
  return {a.numel() / k, k};
}
}  // namespace detail

/// Softmax over the last axis, max-subtracted.
inline Tensor softmax(const Tensor& a) {
  auto [rows, k] = detail::last_axis_split(a);
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * k;
    double* y = out.data() + r * k;
    const double mx = *std::max_element(x, x + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < k; ++j) y[j] /= z;
  }
  return detail::make_result("softmax", a.shape(), std::move(out), {a},
                             [rows, k](detail::Node& self) {
                               detail::Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               auto& g = p.ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* y = self.data.data() + r * k;
                                 const double* gy = self.grad.data() + r * k;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < k; ++j) dot += y[j] * gy[j];
                                 for (std::size_t j = 0; j < k; ++j)
                                   g[r * k + j] += y[j] * (gy[j] - dot);
                               }
                             });
}

inline Tensor log_softmax(const Tensor& a) {
  auto [rows, k] = detail::last_axis_split(a);
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * k;
    double* y = out.data() + r * k;
    const double mx = *std::max_element(x, x + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(x[j] - mx);
    const double lz = std::log(z);
    for (std::size_t j = 0; j < k; ++j) y[j] = (x[j] - mx) - lz;
  }
  return detail::make_result("log_softmax", a.shape(), std::move(out), {a},
                             [rows, k](detail::Node& self) {
                               detail::Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               auto& g = p.ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* y = self.data.data() + r * k;
                                 const double* gy = self.grad.data() + r * k;
                                 double gs = 0.0;
                                 for (std::size_t j = 0; j < k; ++j) gs += gy[j];
                                 for (std::size_t j = 0; j < k; ++j)
                                   g[r * k + j] += gy[j] - std::exp(y[j]) * gs;
                               }
                             });
}

/// Divides each row of a positive matrix by its sum.
inline Tensor normalize_rows(const Tensor& m) {
  detail::require_rank("normalize_rows", m, 2);
  const std::size_t r = m.dim(0), c = m.dim(1);
  std::vector<double> out(m.numel());
  std::vector<double> sums(r, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) sums[i] += m.data()[i * c + j];
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m.data()[i * c + j] / sums[i];
  }
  return detail::make_result(
      "normalize_rows", m.shape(), std::move(out), {m}, [r, c, sums](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.data[i * c + j];
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += (self.grad[i * c + j] - dot) / sums[i];
        }
      });
}

/// Divides each column of a positive matrix by its sum.
inline Tensor normalize_cols(const Tensor& m) {
  detail::require_rank("normalize_cols", m, 2);
  const std::size_t r = m.dim(0), c = m.dim(1);
  std::vector<double> out(m.numel());
  std::vector<double> sums(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) sums[j] += m.data()[i * c + j];
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m.data()[i * c + j] / sums[j];
  return detail::make_result(
      "normalize_cols", m.shape(), std::move(out), {m}, [r, c, sums](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        std::vector<double> dots(c, 0.0);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) dots[j] += self.grad[i * c + j] * self.data[i * c + j];
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            g[i * c + j] += (self.grad[i * c + j] - dots[j]) / sums[j];
      });
}

// ---------------------------------------------------------------------------
// Structural

/// Concatenates rank-1 tensors.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat: no operands");
  std::vector<double> out;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    detail::require_rank("concat", p, 1);
    out.insert(out.end(), p.data().begin(), p.data().end());
    sizes.push_back(p.numel());
  }
  Shape s{out.size()};
  return detail::make_result_many("concat", s, std::move(out), parts, [sizes](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t q = 0; q < self.parents.size(); ++q) {
      detail::Node& p = *self.parents[q];
      if (p.requires_grad) {
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < sizes[q]; ++i) g[i] += self.grad[off + i];
      }
      off += sizes[q];
    }
  });
}

/// Concatenates matrices with equal row counts along axis 1.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  const std::size_t rows = parts[0].rank() == 2 ? parts[0].dim(0) : 0;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank("concat_cols", p, 2);
    if (p.dim(0) != rows)
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(rows * total);
  std::size_t off = 0;
  for (std::size_t q = 0; q < parts.size(); ++q) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < widths[q]; ++j)
        out[i * total + off + j] = parts[q].data()[i * widths[q] + j];
    off += widths[q];
  }
  return detail::make_result_many(
      "concat_cols", {rows, total}, std::move(out), parts, [rows, total, widths](detail::Node& self) {
        std::size_t o = 0;
        for (std::size_t q = 0; q < self.parents.size(); ++q) {
          detail::Node& p = *self.parents[q];
          if (p.requires_grad) {
            auto& g = p.ensure_grad();
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t j = 0; j < widths[q]; ++j)
                g[i * widths[q] + j] += self.grad[i * total + o + j];
          }
          o += widths[q];
        }
      });
}

/// Stacks equal-length rank-1 tensors as the rows of a matrix.
inline Tensor stack(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw DimensionError("stack: no operands");
  const std::size_t k = rows[0].numel();
  std::vector<double> out;
  out.reserve(rows.size() * k);
  for (const auto& r : rows) {
    detail::require_rank("stack", r, 1);
    if (r.numel() != k)
      throw DimensionError("stack: length mismatch " + shape_str(rows[0].shape()) + " vs " +
                           shape_str(r.shape()));
    out.insert(out.end(), r.data().begin(), r.data().end());
  }
  return detail::make_result_many("stack", {rows.size(), k}, std::move(out), rows,
                                  [k](detail::Node& self) {
                                    for (std::size_t q = 0; q < self.parents.size(); ++q) {
                                      detail::Node& p = *self.parents[q];
                                      if (!p.requires_grad) continue;
                                      auto& g = p.ensure_grad();
                                      for (std::size_t j = 0; j < k; ++j) g[j] += self.grad[q * k + j];
                                    }
                                  });
}

/// Contiguous slice [start, start+len) of a rank-1 tensor.
inline Tensor slice(const Tensor& a, std::size_t start, std::size_t len) {
  detail::require_rank("slice", a, 1);
  if (len == 0 || start + len > a.numel())
    throw DimensionError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of " + shape_str(a.shape()));
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(start),
                          a.data().begin() + static_cast<std::ptrdiff_t>(start + len));
  return detail::make_result("slice", {len}, std::move(out), {a}, [start, len](detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < len; ++i) g[start + i] += self.grad[i];
  });
}

inline Tensor index(const Tensor& a, std::size_t i) {
  if (i >= a.numel())
    throw DimensionError("index " + std::to_string(i) + " out of " + shape_str(a.shape()));
  return detail::make_result("index", {1}, {a.data()[i]}, {a}, [i](detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad()[i] += self.grad[0];
  });
}

/// Row i of a matrix as a rank-1 tensor (embedding lookup).
inline Tensor row(const Tensor& m, std::size_t i) {
  detail::require_rank("row", m, 2);
  if (i >= m.dim(0))
    throw DimensionError("row " + std::to_string(i) + " out of " + shape_str(m.shape()));
  const std::size_t k = m.dim(1);
  std::vector<double> out(m.data().begin() + static_cast<std::ptrdiff_t>(i * k),
                          m.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
  return detail::make_result("row", {k}, std::move(out), {m}, [i, k](detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t j = 0; j < k; ++j) g[i * k + j] += self.grad[j];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return detail::make_result("reshape", std::move(shape), a.to_vector(), {a}, [](detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor mse(const Tensor& a, const Tensor& b) { return mean(square(sub(a, b))); }

// ---------------------------------------------------------------------------
// Reverse pass

/// Accumulates d(root)/d(leaf) into every reachable leaf that requires a
/// gradient. Unless retain_graph is set, interior nodes drop their edges and
/// gradient buffers afterwards.
inline void backward(const Tensor& root, bool retain_graph = false) {
  if (!root.defined() || root.numel() != 1)
    throw UsageError("backward: root must be a scalar, got " +
                     (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  if (!root.requires_grad()) throw UsageError("backward: root is not on a gradient graph");

  // Iterative post-order DFS gives a topological order with each node once.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order)
    if (!n->is_leaf) n->grad.assign(n->data.size(), 0.0);
  root.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->is_leaf && n->backward_fn) n->backward_fn(*n);
  }
  for (detail::Node* n : order) {
    if (n->is_leaf) continue;
    for (double g : n->grad)
      if (!std::isfinite(g)) throw NumericError(std::string("non-finite gradient at ") + n->op);
  }
  if (!retain_graph) {
    for (detail::Node* n : order) {
      if (n->is_leaf) continue;
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

}  // namespace ctrlcap
