#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared storage. Operations on tensors that
// require gradients record their inputs and a backward closure on the output;
// backward() walks that record in reverse topological order and then releases
// it, so every recorded forward pass supports exactly one backward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "xrgen/error.hpp"

namespace xrgen {

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
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = checked_numel(shape);
    return make(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = checked_numel(shape);
    return make(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (checked_numel(shape) != values.size()) {
      throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    return make(std::move(shape), std::move(values), requires_grad);
  }

  /// Row vector [1, n].
  static Tensor row(std::vector<double> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return from({1, n}, std::move(values), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double at(std::size_t i) const { return node_->data.at(i); }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }
  void clear_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  const char* op() const { return node_->op; }
  /// True when this tensor is the output of a recorded operation.
  bool recorded() const { return static_cast<bool>(node_->backward); }

  /// Deep copy of values, detached from any graph.
  Tensor clone() const {
    return make(node_->shape, node_->data, node_->requires_grad);
  }

  /// Same values, fresh leaf that does not require grad.
  Tensor detach() const { return make(node_->shape, node_->data, false); }

  const void* identity() const { return node_.get(); }

  // Internal access for operations and the backward pass.
  detail::Node& node() const { return *node_; }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  static std::size_t checked_numel(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
    }
    return shape_numel(shape);
  }

  static Tensor make(Shape shape, std::vector<double> values, bool requires_grad) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void check_finite(const char* op, std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite ") + what + " in op '" + op + "'");
    }
  }
}

/// Builds the output tensor of an operation and records it when needed.
inline Tensor emit(const char* op, Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward) {
  check_finite(op, values, "value");
  auto out = std::make_shared<Node>();
  out->shape = std::move(shape);
  out->data = std::move(values);
  out->op = op;
  bool any = false;
  if (grad_enabled) {
    for (const Tensor* t : inputs) any = any || t->requires_grad();
  }
  if (any) {
    out->requires_grad = true;
    for (const Tensor* t : inputs) out->inputs.push_back(t->node_ptr());
    out->backward = std::move(backward);
  }
  return Tensor(std::move(out));
}

inline Tensor emit_n(const char* op, Shape shape, std::vector<double> values,
                     const std::vector<Tensor>& inputs, std::function<void(Node&)> backward) {
  check_finite(op, values, "value");
  auto out = std::make_shared<Node>();
  out->shape = std::move(shape);
  out->data = std::move(values);
  out->op = op;
  bool any = false;
  if (grad_enabled) {
    for (const Tensor& t : inputs) any = any || t.requires_grad();
  }
  if (any) {
    out->requires_grad = true;
    for (const Tensor& t : inputs) out->inputs.push_back(t.node_ptr());
    out->backward = std::move(backward);
  }
  return Tensor(std::move(out));
}

inline void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline double sigmoid_scalar(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same("add", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  return detail::emit("add", a.shape(), std::move(v), {&a, &b}, [](detail::Node& o) {
    for (auto& in : o.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same("sub", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  return detail::emit("sub", a.shape(), std::move(v), {&a, &b}, [](detail::Node& o) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& in = o.inputs[k];
      if (!in->requires_grad) continue;
      const double s = k == 0 ? 1.0 : -1.0;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * o.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same("mul", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  return detail::emit("mul", a.shape(), std::move(v), {&a, &b}, [](detail::Node& o) {
    auto& x = *o.inputs[0];
    auto& y = *o.inputs[1];
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * y.data[i];
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * x.data[i];
    }
  });
}

inline Tensor add(const Tensor& a, double s) {
  std::vector<double> v(a.data().begin(), a.data().end());
  for (double& x : v) x += s;
  return detail::emit("add_scalar", a.shape(), std::move(v), {&a}, [](detail::Node& o) {
    auto& g = o.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

inline Tensor mul(const Tensor& a, double s) {
  std::vector<double> v(a.data().begin(), a.data().end());
  for (double& x : v) x *= s;
  return detail::emit("mul_scalar", a.shape(), std::move(v), {&a}, [s](detail::Node& o) {
    auto& g = o.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * o.grad[i];
  });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = detail::sigmoid_scalar(a.data()[i]);
  return detail::emit("sigmoid", a.shape(), std::move(v), {&a}, [](detail::Node& o) {
    auto& g = o.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * o.data[i] * (1.0 - o.data[i]);
  });
}

inline Tensor tanh(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a.data()[i]);
  return detail::emit("tanh", a.shape(), std::move(v), {&a}, [](detail::Node& o) {
    auto& g = o.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * (1.0 - o.data[i] * o.data[i]);
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  return detail::emit("relu", a.shape(), std::move(v), {&a}, [](detail::Node& o) {
    auto& g = o.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (o.data[i] > 0.0) g[i] += o.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions
// ---------------------------------------------------------------------------

/// [n,k] x [k,m] -> [n,m]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> v(n * m, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = v.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = B + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += aip * brow[j];
    }
  }
  return detail::emit("matmul", {n, m}, std::move(v), {&a, &b}, [n, k, m](detail::Node& o) {
    auto& x = *o.inputs[0];
    auto& y = *o.inputs[1];
    const double* G = o.grad.data();
    if (x.requires_grad) {
      auto& gx = x.grad_buffer();  // G * B^T
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = y.data.data() + p * m;
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += G[i * m + j] * brow[j];
          gx[i * k + p] += s;
        }
      }
    }
    if (y.requires_grad) {
      auto& gy = y.grad_buffer();  // A^T * G
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = x.data[i * k + p];
          if (aip == 0.0) continue;
          double* grow = gy.data() + p * m;
          for (std::size_t j = 0; j < m; ++j) grow[j] += aip * G[i * m + j];
        }
      }
    }
  });
}

/// x W + b for row-vector batches: x [n,k], W [k,m], b [1,m].
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  if (b.rank() != 2 || b.dim(0) != 1 || b.dim(1) != y.dim(1)) {
    throw ShapeError("affine: bias shape " + shape_str(b.shape()) + " does not match output " +
                     shape_str(y.shape()));
  }
  if (y.dim(0) == 1) return add(y, b);
  const std::size_t n = y.dim(0), m = y.dim(1);
  std::vector<double> v(y.data().begin(), y.data().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) v[i * m + j] += b.data()[j];
  return detail::emit("add_bias", y.shape(), std::move(v), {&y, &b}, [n, m](detail::Node& o) {
    if (o.inputs[0]->requires_grad) {
      auto& g = o.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (o.inputs[1]->requires_grad) {
      auto& g = o.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += o.grad[i * m + j];
    }
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::emit("sum", {1}, {s}, {&a}, [](detail::Node& o) {
    auto& g = o.inputs[0]->grad_buffer();
    for (double& x : g) x += o.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return mul(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Sum of equally shaped tensors.
inline Tensor add_n(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("add_n: empty input list");
  std::vector<double> v(xs[0].size(), 0.0);
  for (const auto& x : xs) {
    detail::require_same("add_n", xs[0], x);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += x.data()[i];
  }
  return detail::emit_n("add_n", xs[0].shape(), std::move(v), xs, [](detail::Node& o) {
    for (auto& in : o.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

/// Stacks [1,n] (or [r_i,n]) tensors vertically.
inline Tensor concat_rows(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_rows: empty input list");
  const std::size_t cols = xs[0].shape().back();
  std::size_t rows = 0;
  std::vector<double> v;
  for (const auto& x : xs) {
    if (x.rank() != 2 || x.dim(1) != cols) {
      throw ShapeError("concat_rows: shape mismatch " + shape_str(xs[0].shape()) + " vs " +
                       shape_str(x.shape()));
    }
    rows += x.dim(0);
    v.insert(v.end(), x.data().begin(), x.data().end());
  }
  return detail::emit_n("concat_rows", {rows, cols}, std::move(v), xs, [](detail::Node& o) {
    std::size_t off = 0;
    for (auto& in : o.inputs) {
      const std::size_t n = in->data.size();
      if (in->requires_grad) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[off + i];
      }
      off += n;
    }
  });
}

/// Joins [1,n_i] row vectors end to end.
inline Tensor concat(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat: empty input list");
  std::vector<double> v;
  for (const auto& x : xs) {
    if (x.rank() != 2 || x.dim(0) != 1) {
      throw ShapeError("concat: expected row vector, got " + shape_str(x.shape()));
    }
    v.insert(v.end(), x.data().begin(), x.data().end());
  }
  const std::size_t n = v.size();
  return detail::emit_n("concat", {1, n}, std::move(v), xs, [](detail::Node& o) {
    std::size_t off = 0;
    for (auto& in : o.inputs) {
      const std::size_t k = in->data.size();
      if (in->requires_grad) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < k; ++i) g[i] += o.grad[off + i];
      }
      off += k;
    }
  });
}

/// Columns [start, start+len) of a row vector [1,n].
inline Tensor slice(const Tensor& a, std::size_t start, std::size_t len) {
  if (a.rank() != 2 || a.dim(0) != 1 || len == 0 || start + len > a.dim(1)) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") invalid for " + shape_str(a.shape()));
  }
  std::vector<double> v(a.data().begin() + static_cast<std::ptrdiff_t>(start),
                        a.data().begin() + static_cast<std::ptrdiff_t>(start + len));
  return detail::emit("slice", {1, len}, std::move(v), {&a}, [start](detail::Node& o) {
    auto& g = o.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[start + i] += o.grad[i];
  });
}

/// Row `index` of a matrix [r,c] as [1,c] (embedding lookup).
inline Tensor row_of(const Tensor& m, std::size_t index) {
  if (m.rank() != 2 || index >= m.dim(0)) {
    throw ShapeError("row_of: index " + std::to_string(index) + " out of range for " +
                     shape_str(m.shape()));
  }
  const std::size_t c = m.dim(1);
  std::vector<double> v(m.data().begin() + static_cast<std::ptrdiff_t>(index * c),
                        m.data().begin() + static_cast<std::ptrdiff_t>((index + 1) * c));
  return detail::emit("row_of", {1, c}, std::move(v), {&m}, [index, c](detail::Node& o) {
    auto& g = o.inputs[0]->grad_buffer();
    for (std::size_t j = 0; j < c; ++j) g[index * c + j] += o.grad[j];
  });
}

/// Column-wise maximum of [k,n] -> [1,n]. Gradient goes to the first
/// (lowest row index) maximal entry of each column.
inline Tensor reduce_max_rows(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("reduce_max_rows: expected matrix, got " + shape_str(a.shape()));
  const std::size_t k = a.dim(0), n = a.dim(1);
  std::vector<double> v(a.data().begin(), a.data().begin() + static_cast<std::ptrdiff_t>(n));
  std::vector<std::size_t> arg(n, 0);
  for (std::size_t r = 1; r < k; ++r) {
    for (std::size_t j = 0; j < n; ++j) {
      const double x = a.data()[r * n + j];
      if (x > v[j]) {
        v[j] = x;
        arg[j] = r;
      }
    }
  }
  return detail::emit("reduce_max_rows", {1, n}, std::move(v), {&a},
                      [arg = std::move(arg), n](detail::Node& o) {
                        auto& g = o.inputs[0]->grad_buffer();
                        for (std::size_t j = 0; j < n; ++j) g[arg[j] * n + j] += o.grad[j];
                      });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> v(a.data().begin(), a.data().end());
  return detail::emit("reshape", std::move(shape), std::move(v), {&a}, [](detail::Node& o) {
    auto& g = o.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Numerically stable softmax of a flat vector (no graph).
inline std::vector<double> softmax_values(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (double& x : p) x /= z;
  return p;
}

/// -log softmax(logits)[target]; logits is any shape with V entries.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::size_t target) {
  const std::size_t V = logits.size();
  if (target >= V) {
    throw UsageError("softmax_cross_entropy: target " + std::to_string(target) +
                     " out of range for " + std::to_string(V) + " classes");
  }
  auto l = logits.data();
  const std::size_t amax =
      static_cast<std::size_t>(std::max_element(l.begin(), l.end()) - l.begin());
  // log-sum-exp split as max + log1p(sum of the rest) keeps tiny losses exact.
  double rest = 0.0;
  for (std::size_t i = 0; i < V; ++i) {
    if (i != amax) rest += std::exp(l[i] - l[amax]);
  }
  const double loss = (l[amax] - l[target]) + std::log1p(rest);
  return detail::emit("softmax_cross_entropy", {1}, {loss}, {&logits}, [target](detail::Node& o) {
    auto& in = *o.inputs[0];
    auto p = softmax_values(in.data);
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += o.grad[0] * (p[i] - (i == target ? 1.0 : 0.0));
    }
  });
}

/// Mean squared error between equally shaped tensors.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  detail::require_same("mse_loss", pred, target);
  Tensor d = sub(pred, target);
  return mean(mul(d, d));
}

// ---------------------------------------------------------------------------
// Image ops on [C,H,W] tensors
// ---------------------------------------------------------------------------

/// Stride-1 convolution with zero "same" padding. in [C,H,W], w [O,C,k,k]
/// (k odd), b [O] -> [O,H,W].
inline Tensor conv2d(const Tensor& in, const Tensor& w, const Tensor& b) {
  if (in.rank() != 3 || w.rank() != 4 || w.dim(1) != in.dim(0) || w.dim(2) != w.dim(3) ||
      w.dim(2) % 2 == 0 || b.size() != w.dim(0)) {
    throw ShapeError("conv2d: incompatible shapes input " + shape_str(in.shape()) + ", weight " +
                     shape_str(w.shape()) + ", bias " + shape_str(b.shape()));
  }
  const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const std::size_t O = w.dim(0), K = w.dim(2);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(K / 2);
  std::vector<double> out(O * H * W);
  const double* X = in.data().data();
  const double* Wt = w.data().data();

  // Visits every (o, c, ky, kx) tap with the valid output row/col ranges.
  auto for_taps = [=](auto&& body) {
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < K; ++ky)
          for (std::size_t kx = 0; kx < K; ++kx) {
            const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
            const std::size_t y0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dy));
            const std::size_t y1 = static_cast<std::size_t>(
                std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(H), static_cast<std::ptrdiff_t>(H) - dy));
            const std::size_t x0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dx));
            const std::size_t x1 = static_cast<std::size_t>(
                std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(W), static_cast<std::ptrdiff_t>(W) - dx));
            body(o, c, ((o * C + c) * K + ky) * K + kx, dy, dx, y0, y1, x0, x1);
          }
  };

  for (std::size_t o = 0; o < O; ++o)
    std::fill(out.begin() + static_cast<std::ptrdiff_t>(o * H * W),
              out.begin() + static_cast<std::ptrdiff_t>((o + 1) * H * W), b.data()[o]);
  for_taps([&](std::size_t o, std::size_t c, std::size_t wi, std::ptrdiff_t dy, std::ptrdiff_t dx,
               std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1) {
    const double wv = Wt[wi];
    if (wv == 0.0) return;
    const std::size_t span = x1 - x0;
    const std::size_t sx = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(x0) + dx);
    for (std::size_t y = y0; y < y1; ++y) {
      double* orow = out.data() + (o * H + y) * W + x0;
      const double* irow =
          X + (c * H + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y) + dy)) * W + sx;
      for (std::size_t x = 0; x < span; ++x) orow[x] += wv * irow[x];
    }
  });

  return detail::emit("conv2d", {O, H, W}, std::move(out), {&in, &w, &b},
                      [=](detail::Node& o) {
                        auto& xin = *o.inputs[0];
                        auto& wn = *o.inputs[1];
                        auto& bn = *o.inputs[2];
                        const double* G = o.grad.data();
                        double* gx = xin.requires_grad ? xin.grad_buffer().data() : nullptr;
                        double* gw = wn.requires_grad ? wn.grad_buffer().data() : nullptr;
                        const double* Xd = xin.data.data();
                        const double* Wd = wn.data.data();
                        if (bn.requires_grad) {
                          auto& gb = bn.grad_buffer();
                          for (std::size_t oc = 0; oc < O; ++oc) {
                            double s = 0.0;
                            for (std::size_t i = 0; i < H * W; ++i) s += G[oc * H * W + i];
                            gb[oc] += s;
                          }
                        }
                        if (!gx && !gw) return;
                        for_taps([&](std::size_t oc, std::size_t c, std::size_t wi, std::ptrdiff_t dy,
                                     std::ptrdiff_t dx, std::size_t y0, std::size_t y1, std::size_t x0,
                                     std::size_t x1) {
                          double acc = 0.0;
                          const double wv = Wd[wi];
                          const std::size_t span = x1 - x0;
                          const std::size_t sx = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(x0) + dx);
                          for (std::size_t y = y0; y < y1; ++y) {
                            const double* grow = G + (oc * H + y) * W + x0;
                            const std::size_t off =
                                (c * H + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y) + dy)) * W + sx;
                            if (gw) {
                              const double* irow = Xd + off;
                              for (std::size_t x = 0; x < span; ++x) acc += grow[x] * irow[x];
                            }
                            if (gx && wv != 0.0) {
                              double* girow = gx + off;
                              for (std::size_t x = 0; x < span; ++x) girow[x] += wv * grow[x];
                            }
                          }
                          if (gw) gw[wi] += acc;
                        });
                      });
}

/// Non-overlapping max pooling with window `k` (trailing remainder dropped).
inline Tensor max_pool2d(const Tensor& in, std::size_t k = 2) {
  if (in.rank() != 3 || k == 0 || in.dim(1) < k || in.dim(2) < k) {
    throw ShapeError("max_pool2d: input " + shape_str(in.shape()) + " too small for window " +
                     std::to_string(k));
  }
  const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const std::size_t Ho = H / k, Wo = W / k;
  std::vector<double> out(C * Ho * Wo);
  std::vector<std::size_t> arg(out.size());
  const double* X = in.data().data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t x = 0; x < Wo; ++x) {
        std::size_t best = (c * H + y * k) * W + x * k;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t idx = (c * H + y * k + dy) * W + x * k + dx;
            if (X[idx] > X[best]) best = idx;
          }
        const std::size_t oi = (c * Ho + y) * Wo + x;
        out[oi] = X[best];
        arg[oi] = best;
      }
  return detail::emit("max_pool2d", {C, Ho, Wo}, std::move(out), {&in},
                      [arg = std::move(arg)](detail::Node& o) {
                        auto& g = o.inputs[0]->grad_buffer();
                        for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += o.grad[i];
                      });
}

/// Non-overlapping average pooling with window `k`.
inline Tensor avg_pool2d(const Tensor& in, std::size_t k) {
  if (in.rank() != 3 || k == 0 || in.dim(1) < k || in.dim(2) < k) {
    throw ShapeError("avg_pool2d: input " + shape_str(in.shape()) + " too small for window " +
                     std::to_string(k));
  }
  const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const std::size_t Ho = H / k, Wo = W / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  std::vector<double> out(C * Ho * Wo, 0.0);
  const double* X = in.data().data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < Ho * k; ++y)
      for (std::size_t x = 0; x < Wo * k; ++x)
        out[(c * Ho + y / k) * Wo + x / k] += X[(c * H + y) * W + x] * inv;
  return detail::emit("avg_pool2d", {C, Ho, Wo}, std::move(out), {&in},
                      [=](detail::Node& o) {
                        auto& g = o.inputs[0]->grad_buffer();
                        for (std::size_t c = 0; c < C; ++c)
                          for (std::size_t y = 0; y < Ho * k; ++y)
                            for (std::size_t x = 0; x < Wo * k; ++x)
                              g[(c * H + y) * W + x] += o.grad[(c * Ho + y / k) * Wo + x / k] * inv;
                      });
}

/// Spatial mean per channel: [C,H,W] -> [1,C].
inline Tensor global_avg_pool(const Tensor& in) {
  if (in.rank() != 3) throw ShapeError("global_avg_pool: expected [C,H,W], got " + shape_str(in.shape()));
  const std::size_t C = in.dim(0), HW = in.dim(1) * in.dim(2);
  std::vector<double> out(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < HW; ++i) s += in.data()[c * HW + i];
    out[c] = s / static_cast<double>(HW);
  }
  return detail::emit("global_avg_pool", {1, C}, std::move(out), {&in}, [C, HW](detail::Node& o) {
    auto& g = o.inputs[0]->grad_buffer();
    const double inv = 1.0 / static_cast<double>(HW);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) g[c * HW + i] += o.grad[c] * inv;
  });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Topologically ordered record of the operations reachable from a root.
class Graph {
 public:
  struct Record {
    const char* op;
    std::vector<const void*> inputs;
    const void* output;
  };

  static Graph trace(const Tensor& root) {
    Graph g;
    g.order_ = topo_order(root.node_ptr());
    for (auto& n : g.order_) {
      if (!n->backward) continue;
      Record r{n->op, {}, n.get()};
      for (auto& in : n->inputs) r.inputs.push_back(in.get());
      g.records_.push_back(std::move(r));
    }
    return g;
  }

  const std::vector<Record>& records() const { return records_; }

 private:
  friend void backward(const Tensor& loss);

  static std::vector<std::shared_ptr<detail::Node>> topo_order(const std::shared_ptr<detail::Node>& root) {
    std::vector<std::shared_ptr<detail::Node>> order;
    std::unordered_set<const detail::Node*> seen;
    // iterative post-order DFS; unrolled RNN graphs are deep
    std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        auto child = node->inputs[next++];
        if (child->requires_grad && seen.insert(child.get()).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    return order;
  }

  std::vector<std::shared_ptr<detail::Node>> order_;
  std::vector<Record> records_;
};

/// Accumulates d(loss)/d(t) into every reachable tensor that requires grad,
/// then releases the recorded graph.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || !loss.recorded()) {
    throw UsageError("backward: tensor was not produced by a recorded operation");
  }
  if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  auto order = Graph::topo_order(loss.node_ptr());
  loss.node().grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node& n = **it;
    if (!n.backward) continue;
    if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
    n.backward(n);
    for (auto& in : n.inputs) {
      if (in->requires_grad && !in->grad.empty()) detail::check_finite(n.op, in->grad, "gradient");
    }
  }
  for (auto& n : order) {
    if (!n->backward) continue;
    n->backward = nullptr;
    n->inputs.clear();
  }
}

}  // namespace xrgen
