#pragma once

// Dense row-major matrices with a reverse-mode tape.
//
// Every Tensor is a handle to an immutable node. Operations on tensors that
// require gradients record their parents and a backward closure; calling
// backward() on a scalar result walks the recorded graph in reverse
// topological order. The tape is rebuilt on each forward pass, nothing is
// cached between passes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "chronoformer/errors.hpp"

namespace chronoformer {

using Shape = std::vector<std::size_t>;

/// Additive score used for masked attention keys: the most negative finite
/// double, so masked entries never produce NaN through inf - inf.
inline constexpr double kMaskScore = std::numeric_limits<double>::lowest();

namespace detail {

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline std::string shape_string(std::size_t r, std::size_t c) {
  std::ostringstream os;
  os << "[" << r << "x" << c << "]";
  return os.str();
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  /// Constant (non-differentiable) matrix.
  static Tensor constant(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return make(rows, cols, std::move(values), false);
  }
  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return make(rows, cols, std::vector<double>(rows * cols, 0.0), false);
  }
  static Tensor scalar(double v) { return make(1, 1, {v}, false); }
  /// Learnable leaf; gradients accumulate here across backward() calls until zero_grad().
  static Tensor parameter(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return make(rows, cols, std::move(values), true);
  }

  [[nodiscard]] bool defined() const noexcept { return node_ != nullptr; }
  [[nodiscard]] std::size_t rows() const { return node_->rows; }
  [[nodiscard]] std::size_t cols() const { return node_->cols; }
  [[nodiscard]] std::size_t size() const { return node_->value.size(); }
  [[nodiscard]] Shape shape() const { return {node_->rows, node_->cols}; }
  [[nodiscard]] std::string shape_string() const { return detail::shape_string(rows(), cols()); }
  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  [[nodiscard]] const char* op() const { return node_->op; }

  [[nodiscard]] std::span<const double> values() const { return node_->value; }
  [[nodiscard]] double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
  [[nodiscard]] double item() const {
    if (size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_string());
    return node_->value[0];
  }
  [[nodiscard]] std::vector<double> row(std::size_t r) const {
    const auto* p = node_->value.data() + r * node_->cols;
    return {p, p + node_->cols};
  }

  /// Empty span when no gradient has reached this node.
  [[nodiscard]] std::span<const double> grad() const { return node_->grad; }

  /// Direct access for parameter initialization and optimizer updates.
  [[nodiscard]] std::vector<double>& mutable_values() { return node_->value; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  /// Reverse pass from a 1x1 result. Seeds d(self)/d(self) = 1.
  void backward() const;

  [[nodiscard]] detail::Node* node() const { return node_.get(); }
  [[nodiscard]] const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  [[nodiscard]] bool same_node(const Tensor& other) const { return node_ == other.node_; }

  static Tensor make(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad) {
    if (rows * cols != values.size()) {
      throw DimensionError("tensor " + detail::shape_string(rows, cols) + " given " +
                           std::to_string(values.size()) + " values");
    }
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->rows = rows;
    t.node_->cols = cols;
    t.node_->value = std::move(values);
    t.node_->requires_grad = requires_grad;
    if (requires_grad) t.node_->ensure_grad();
    return t;
  }

  /// Result node of an operation. Parents and the backward closure are kept
  /// only when at least one parent takes part in differentiation.
  static Tensor make_op(std::size_t rows, std::size_t cols, std::vector<double> values, const char* op,
                        std::vector<Tensor> parents, std::function<void(detail::Node&)> backward) {
    Tensor t = make(rows, cols, std::move(values), false);
    t.node_->op = op;
    const bool any = std::any_of(parents.begin(), parents.end(), [](const Tensor& p) { return p.requires_grad(); });
    if (any) {
      t.node_->requires_grad = true;
      t.node_->parents.reserve(parents.size());
      for (auto& p : parents) t.node_->parents.push_back(p.node_);
      t.node_->backward = std::move(backward);
    }
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Nodes reachable from root that take part in differentiation, parents first.
inline std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  return order;
}

inline void accumulate(Node& parent, std::size_t i, double g) {
  if (!parent.requires_grad) return;
  parent.ensure_grad();
  parent.grad[i] += g;
}

// C(m x n) += A(m x k) * B(k x n)
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C(m x k) += G(m x n) * B(k x n)^T
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    double* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += gi[j] * bp[j];
      ci[p] += s;
    }
  }
}

// C(k x n) += A(m x k)^T * G(m x n)
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * gi[j];
    }
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
}

inline void require_scalar(const Tensor& s, const char* op) {
  if (s.size() != 1) throw DimensionError(std::string(op) + ": expected 1x1 scalar, got " + s.shape_string());
}

}  // namespace detail

inline void Tensor::backward() const {
  if (size() != 1) throw DimensionError("backward() requires a 1x1 result, got " + shape_string());
  if (!node_->requires_grad) return;
  auto order = detail::topo_order(node_.get());
  node_->ensure_grad();
  node_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ----------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + a.shape_string() + " x " + b.shape_string());
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  return Tensor::make_op(m, n, std::move(out), "matmul", {a, b}, [m, k, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      detail::gemm_nt(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      detail::gemm_tn(pa.value.data(), self.grad.data(), pb.grad.data(), m, k, n);
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  auto v = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return Tensor::make_op(c, r, std::move(out), "transpose", {a}, [r, c](detail::Node& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += self.grad[j * r + i];
  });
}

// ----------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return Tensor::make_op(a.rows(), a.cols(), std::move(out), "add", {a, b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return Tensor::make_op(a.rows(), a.cols(), std::move(out), "sub", {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      detail::accumulate(pa, i, self.grad[i]);
      detail::accumulate(pb, i, -self.grad[i]);
    }
  });
}

/// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor::make_op(a.rows(), a.cols(), std::move(out), "mul", {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      detail::accumulate(pa, i, self.grad[i] * pb.value[i]);
      detail::accumulate(pb, i, self.grad[i] * pa.value[i]);
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& x : out) x *= c;
  return Tensor::make_op(a.rows(), a.cols(), std::move(out), "scale", {a}, [c](detail::Node& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += c * self.grad[i];
  });
}

/// a * s for a 1x1 tensor s.
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
  detail::require_scalar(s, "scale_by");
  const double c = s.item();
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& x : out) x *= c;
  return Tensor::make_op(a.rows(), a.cols(), std::move(out), "scale_by", {a, s}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& ps = *self.parents[1];
    const double c = ps.value[0];
    double gs = 0.0;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      detail::accumulate(pa, i, c * self.grad[i]);
      gs += self.grad[i] * pa.value[i];
    }
    detail::accumulate(ps, 0, gs);
  });
}

/// Adds a 1 x n row to every row of an m x n matrix.
inline Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: cannot broadcast " + row.shape_string() + " onto " + a.shape_string());
  }
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.values().begin(), a.values().end());
  auto rv = row.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += rv[j];
  return Tensor::make_op(m, n, std::move(out), "add_row", {a, row}, [m, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pr = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pr.requires_grad) {
      pr.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) pr.grad[j] += self.grad[i * n + j];
    }
  });
}

namespace detail {

template <typename F, typename D>
Tensor unary(const Tensor& a, const char* op, F f, D df) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return Tensor::make_op(a.rows(), a.cols(), std::move(out), op, {a}, [df](Node& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * df(p.value[i], self.value[i]);
  });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus_scalar(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

}  // namespace detail

inline Tensor square(const Tensor& a) {
  return detail::unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor reciprocal(const Tensor& a) {
  return detail::unary(a, "reciprocal", [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

inline Tensor softplus(const Tensor& a) {
  return detail::unary(a, "softplus", detail::softplus_scalar,
                       [](double x, double) { return detail::sigmoid_scalar(x); });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(a, "sigmoid", detail::sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor log(const Tensor& a) {
  return detail::unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// Exact GELU, x * Phi(x). Smooth everywhere, which keeps finite-difference checks clean.
inline Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return detail::unary(
      a, "gelu", [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x); });
}

// ----------------------------------------------------------------------------
// Reductions and reshaping

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return Tensor::make_op(1, 1, {s}, "sum", {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (auto& g : p.grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Column means: m x n -> 1 x n.
inline Tensor mean_rows(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  if (m == 0) throw DimensionError("mean_rows: no rows");
  std::vector<double> out(n, 0.0);
  auto v = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += v[i * n + j];
  const double inv = 1.0 / static_cast<double>(m);
  for (auto& x : out) x *= inv;
  return Tensor::make_op(1, n, std::move(out), "mean_rows", {a}, [m, n, inv](detail::Node& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += inv * self.grad[j];
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) throw DimensionError("concat_rows: column mismatch " + parts.front().shape_string() + " vs " + p.shape_string());
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return Tensor::make_op(m, n, std::move(out), "concat_rows", parts, [](detail::Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      const std::size_t len = p->value.size();
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < len; ++i) p->grad[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw DimensionError("concat_cols: row mismatch " + parts.front().shape_string() + " vs " + p.shape_string());
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    auto v = p.values();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * n + col + j] = v[i * w + j];
    col += w;
  }
  return Tensor::make_op(m, n, std::move(out), "concat_cols", parts, [m, n](detail::Node& self) {
    std::size_t col = 0;
    for (auto& p : self.parents) {
      const std::size_t w = p->cols;
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) p->grad[i * w + j] += self.grad[i * n + col + j];
      }
      col += w;
    }
  });
}

inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  if (start + count > a.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + a.shape_string());
  }
  const std::size_t n = a.cols();
  auto v = a.values();
  std::vector<double> out(v.begin() + static_cast<std::ptrdiff_t>(start * n),
                          v.begin() + static_cast<std::ptrdiff_t>((start + count) * n));
  return Tensor::make_op(count, n, std::move(out), "slice_rows", {a}, [start, n](detail::Node& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[start * n + i] += self.grad[i];
  });
}

/// Gathers rows by index (repeats allowed). Backward scatter-adds.
inline Tensor select_rows(const Tensor& a, const std::vector<std::size_t>& index) {
  const std::size_t n = a.cols();
  auto v = a.values();
  std::vector<double> out(index.size() * n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.rows()) {
      throw DimensionError("select_rows: index " + std::to_string(index[i]) + " out of range for " + a.shape_string());
    }
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(index[i] * n), n, out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return Tensor::make_op(index.size(), n, std::move(out), "select_rows", {a}, [index, n](detail::Node& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) p.grad[index[i] * n + j] += self.grad[i * n + j];
  });
}

// ----------------------------------------------------------------------------
// Normalization

/// Row-wise softmax with max-subtraction. Entries equal to -inf or at most
/// kMaskScore / 2 are treated as masked; a row with every entry masked is an
/// error rather than a silent uniform distribution.
inline Tensor softmax_rows(const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) throw DimensionError("softmax_rows: last dimension must be >= 1");
  auto v = x.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = v.data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(xi[j])) throw NumericError("softmax_rows: NaN in row " + std::to_string(i));
      mx = std::max(mx, xi[j]);
    }
    if (!(mx > kMaskScore / 2)) {
      throw NumericError("empty attention row: every entry of row " + std::to_string(i) + " is masked");
    }
    double z = 0.0;
    double* oi = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      oi[j] = xi[j] > kMaskScore / 2 ? std::exp(xi[j] - mx) : 0.0;
      z += oi[j];
    }
    for (std::size_t j = 0; j < n; ++j) oi[j] /= z;
  }
  return Tensor::make_op(m, n, std::move(out), "softmax_rows", {x}, [m, n](detail::Node& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.value.data() + i * n;
      const double* g = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
      for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += y[j] * (g[j] - dot);
    }
  });
}

/// Per-row layer normalization with affine gamma/beta (each 1 x n).
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
    throw DimensionError("layer_norm_rows: gamma/beta " + gamma.shape_string() + "/" + beta.shape_string() +
                         " do not match " + x.shape_string());
  }
  auto v = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> xhat(m * n), inv_std(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = v.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xi[j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    }
  }
  return Tensor::make_op(m, n, std::move(out), "layer_norm", {x, gamma, beta},
                         [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    if (pg.requires_grad) pg.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    if (px.requires_grad) px.ensure_grad();
    std::vector<double> dxhat(n);
    for (std::size_t i = 0; i < m; ++i) {
      const double* g = self.grad.data() + i * n;
      const double* xh = xhat.data() + i * n;
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (pg.requires_grad) pg.grad[j] += g[j] * xh[j];
        if (pb.requires_grad) pb.grad[j] += g[j];
        dxhat[j] = g[j] * pg.value[j];
        s1 += dxhat[j];
        s2 += dxhat[j] * xh[j];
      }
      if (!px.requires_grad) continue;
      const double k = inv_std[i] / static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) {
        px.grad[i * n + j] += k * (static_cast<double>(n) * dxhat[j] - s1 - xh[j] * s2);
      }
    }
  });
}

// ----------------------------------------------------------------------------
// Losses

/// sum_i weight[i] * (-log softmax(logits[i])[target[i]]) as a 1x1 tensor.
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& target,
                                 const std::vector<double>& weight) {
  const std::size_t m = logits.rows(), n = logits.cols();
  if (target.size() != m || weight.size() != m) {
    throw DimensionError("cross_entropy_rows: " + std::to_string(target.size()) + " targets / " +
                         std::to_string(weight.size()) + " weights for " + logits.shape_string());
  }
  auto v = logits.values();
  std::vector<double> prob(m * n);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (target[i] >= n) throw DimensionError("cross_entropy_rows: target " + std::to_string(target[i]) + " >= " + std::to_string(n));
    const double* xi = v.data() + i * n;
    const double mx = *std::max_element(xi, xi + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      prob[i * n + j] = std::exp(xi[j] - mx);
      z += prob[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) prob[i * n + j] /= z;
    loss += weight[i] * (std::log(z) + mx - xi[target[i]]);
  }
  return Tensor::make_op(1, 1, {loss}, "cross_entropy", {logits},
                         [m, n, target, weight, prob = std::move(prob)](detail::Node& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    const double g = self.grad[0];
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double y = j == target[i] ? 1.0 : 0.0;
        p.grad[i * n + j] += g * weight[i] * (prob[i * n + j] - y);
      }
    }
  });
}

/// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1].
inline Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& target) {
  if (target.size() != logits.size()) {
    throw DimensionError("bce_with_logits: " + std::to_string(target.size()) + " targets for " + logits.shape_string());
  }
  auto v = logits.values();
  double loss = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    // log(1 + e^x) - y x, written stably
    loss += detail::softplus_scalar(v[i]) - target[i] * v[i];
  }
  const double inv = 1.0 / static_cast<double>(v.size());
  return Tensor::make_op(1, 1, {loss * inv}, "bce", {logits}, [target, inv](detail::Node& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      p.grad[i] += self.grad[0] * inv * (detail::sigmoid_scalar(p.value[i]) - target[i]);
    }
  });
}

// ----------------------------------------------------------------------------
// Diagnostics

/// Op tag of the first node (in evaluation order) holding a non-finite value,
/// or an empty string when the whole graph is finite.
inline std::string first_nonfinite_op(const Tensor& root) {
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      detail::Node* p = n->parents[i++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (auto* n : order) {
    for (double x : n->value) {
      if (!std::isfinite(x)) return n->op;
    }
  }
  return {};
}

struct GradCheckReport {
  double max_error = 0.0;        ///< max |analytic - numeric| / max(1, |analytic|)
  std::size_t entries = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  std::vector<double> per_param_max;  ///< worst error per parameter tensor
  bool passed = false;
};

/// Compares reverse-mode gradients of a scalar computation against central
/// differences for every entry of every parameter.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double h, double tol) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw ConfigError("grad_check: step h must lie in [1e-7, 1e-3]");
  auto evaluate = [&f]() {
    Tensor loss = f();
    if (!std::isfinite(loss.item())) {
      throw NumericError("grad_check: non-finite loss produced by op '" + first_nonfinite_op(loss) + "'");
    }
    return loss;
  };
  for (auto& p : params) p.zero_grad();
  Tensor loss = evaluate();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    auto g = p.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().size() != p.size()) analytic.back().assign(p.size(), 0.0);
  }
  GradCheckReport report;
  report.per_param_max.assign(params.size(), 0.0);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& values = params[k].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double fp = evaluate().item();
      values[i] = orig - h;
      const double fm = evaluate().item();
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(analytic[k][i]));
      report.per_param_max[k] = std::max(report.per_param_max[k], err);
      if (err > report.max_error) {
        report.max_error = err;
        report.worst_param = k;
        report.worst_index = i;
      }
      ++report.entries;
    }
  }
  for (auto& p : params) p.zero_grad();
  report.passed = report.max_error < tol;
  return report;
}

}  // namespace chronoformer
