// Dense 64-bit tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared graph node. Operations on tensors
// that require gradients record a backward rule on the node they produce;
// backward() orders the reachable nodes topologically (the tape) and replays
// those rules in reverse. Leaves accumulate gradients across calls, interior
// nodes are reset at the start of every pass.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace deepbirads {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into the grads of inputs that require them.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
    if (shape_numel(shape) != values.size())
      throw DimensionError("shape " + shape_string(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(values), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->value.size(), 0.0);
  }

  double item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->shape.back() + c]; }

  // Fresh leaf holding a copy of the values.
  Tensor detach(bool requires_grad = false) const { return from(shape(), node_->value, requires_grad); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
}

// Builds the output node of an operation. The backward rule is attached only
// when some input participates in differentiation.
inline Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward, const char* op) {
  check_finite(value, op);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (any) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& t : inputs) n->inputs.push_back(t.node());
    n->backward_fn = std::move(backward);
  }
  return Tensor(std::move(n));
}

// Grad buffer of input i, or nullptr when it does not need one.
inline double* input_grad(Node& self, std::size_t i) {
  auto& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_string(t.shape()));
}

}  // namespace detail

/// Topologically ordered record of the operations reachable from a root.
class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    std::unordered_set<const Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    if (!root.requires_grad()) return tape;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  // Inputs precede the operations that consume them.
  std::span<Node* const> order() const { return order_; }
  std::size_t size() const { return order_.size(); }

  void replay(Node& root) const {
    for (Node* n : order_)
      if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
    root.ensure_grad();
    if (root.is_leaf()) {
      root.grad[0] += 1.0;
      return;
    }
    root.grad[0] = 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it)
      if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
  }

 private:
  std::vector<Node*> order_;
};

/// Populates d(loss)/d(leaf) for every reachable leaf that requires gradients.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw UsageError("backward() needs a scalar loss, got " + shape_string(loss.shape()));
  if (!loss.requires_grad()) return;
  Tape::record(loss).replay(*loss.node());
}

// ---------------------------------------------------------------------------
// Elementwise and shape operations

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (double* g = detail::input_grad(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  }, "add");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (double* g = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    if (double* g = detail::input_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
  }, "mul");
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::make_result(a.shape(), std::move(out), {a}, [s](Node& self) {
    if (double* g = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
  }, "scale");
}

namespace debug {
// Multiplier applied to the ReLU backward rule. Anything other than 1 makes the
// rule wrong on purpose, which the gradient checker must then detect.
inline thread_local double relu_gradient_scale = 1.0;
}  // namespace debug

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  const double k = debug::relu_gradient_scale;
  return detail::make_result(a.shape(), std::move(out), {a}, [k](Node& self) {
    const auto& x = self.inputs[0]->value;
    if (double* g = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (x[i] > 0.0) g[i] += k * self.grad[i];
  }, "relu");
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result({1}, {s}, {a}, [](Node& self) {
    if (double* g = detail::input_grad(self, 0)) {
      const double up = self.grad[0];
      for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) g[i] += up;
    }
  }, "sum");
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
    if (double* g = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  }, "reshape");
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return detail::make_result({n, m}, std::move(out), {a}, [m, n](Node& self) {
    if (double* g = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  }, "transpose");
}

/// [m x n] + [n] broadcast over rows.
inline Tensor add_row_vector(const Tensor& a, const Tensor& bias) {
  detail::require_rank(a, 2, "add_row_vector");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (bias.numel() != n)
    throw DimensionError("add_row_vector: " + shape_string(a.shape()) + " with bias " + shape_string(bias.shape()));
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] + bias[j];
  return detail::make_result(a.shape(), std::move(out), {a, bias}, [m, n](Node& self) {
    if (double* g = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < m * n; ++i) g[i] += self.grad[i];
    if (double* g = detail::input_grad(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
  }, "add_row_vector");
}

/// Mean over rows of an [m x n] matrix, giving [1 x n].
inline Tensor mean_rows(const Tensor& a) {
  detail::require_rank(a, 2, "mean_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a[i * n + j];
  for (auto& v : out) v /= static_cast<double>(m);
  return detail::make_result({1, n}, std::move(out), {a}, [m, n](Node& self) {
    if (double* g = detail::input_grad(self, 0)) {
      const double inv = 1.0 / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j] * inv;
    }
  }, "mean_rows");
}

/// Horizontal concatenation of [m x n1] and [m x n2].
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "concat_cols");
  detail::require_rank(b, 2, "concat_cols");
  if (a.dim(0) != b.dim(0))
    throw DimensionError("concat_cols: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const std::size_t m = a.dim(0), n1 = a.dim(1), n2 = b.dim(1), n = n1 + n2;
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.data().begin() + i * n1, n1, out.begin() + i * n);
    std::copy_n(b.data().begin() + i * n2, n2, out.begin() + i * n + n1);
  }
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, n1, n2, n](Node& self) {
    if (double* g = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n1; ++j) g[i * n1 + j] += self.grad[i * n + j];
    if (double* g = detail::input_grad(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n2; ++j) g[i * n2 + j] += self.grad[i * n + n1 + j];
  }, "concat_cols");
}

/// Vertical concatenation of [m1 x n] and [m2 x n].
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "concat_rows");
  detail::require_rank(b, 2, "concat_rows");
  if (a.dim(1) != b.dim(1))
    throw DimensionError("concat_rows: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const std::size_t na = a.numel(), nb = b.numel();
  std::vector<double> out(na + nb);
  std::copy(a.data().begin(), a.data().end(), out.begin());
  std::copy(b.data().begin(), b.data().end(), out.begin() + static_cast<std::ptrdiff_t>(na));
  return detail::make_result({a.dim(0) + b.dim(0), a.dim(1)}, std::move(out), {a, b}, [na, nb](Node& self) {
    if (double* g = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < na; ++i) g[i] += self.grad[i];
    if (double* g = detail::input_grad(self, 1))
      for (std::size_t i = 0; i < nb; ++i) g[i] += self.grad[na + i];
  }, "concat_rows");
}

/// Columns [start, start + count) of an [m x n] matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  detail::require_rank(a, 2, "slice_cols");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (count == 0 || start + count > n)
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of " + shape_string(a.shape()));
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(a.data().begin() + i * n + start, count, out.begin() + i * count);
  return detail::make_result({m, count}, std::move(out), {a}, [m, n, start, count](Node& self) {
    if (double* g = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) g[i * n + start + j] += self.grad[i * count + j];
  }, "slice_cols");
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {
// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}
// c[m x k] += g[m x n] * b[k x n]^T
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double s = 0.0;
      const double* grow = g + i * n;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      c[i * k + p] += s;
    }
}
// c[k x n] += a[m x k]^T * g[m x n]
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      const double* grow = g + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
}
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* av = self.inputs[0]->value.data();
    const double* bv = self.inputs[1]->value.data();
    if (double* g = detail::input_grad(self, 0)) detail::gemm_nt(self.grad.data(), bv, g, m, n, k);
    if (double* g = detail::input_grad(self, 1)) detail::gemm_tn(av, self.grad.data(), g, m, k, n);
  }, "matmul");
}

/// Numerically stable softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  std::vector<double> out(x.numel());
  auto v = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = v[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, v[base + j * inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < len; ++j) s += (out[base + j * inner] = std::exp(v[base + j * inner] - mx));
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= s;
    }
  return detail::make_result(x.shape(), std::move(out), {x}, [outer, inner, len](Node& self) {
    double* g = detail::input_grad(self, 0);
    if (!g) return;
    const auto& y = self.value;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += self.grad[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += y[idx] * (self.grad[idx] - dot);
        }
      }
  }, "softmax");
}

// ---------------------------------------------------------------------------
// Normalization

/// Standardizes each contiguous segment of `segment` elements to zero mean and
/// unit (population) variance: (x - mean) / sqrt(var + eps).
inline Tensor standardize_segments(const Tensor& x, std::size_t segment, double eps) {
  if (segment == 0 || x.numel() % segment != 0)
    throw DimensionError("standardize_segments: segment " + std::to_string(segment) + " does not divide " +
                         shape_string(x.shape()));
  const std::size_t count = x.numel() / segment;
  std::vector<double> out(x.numel());
  std::vector<double> inv_std(count);
  auto v = x.data();
  for (std::size_t s = 0; s < count; ++s) {
    const double* p = v.data() + s * segment;
    double mean = 0.0;
    for (std::size_t i = 0; i < segment; ++i) mean += p[i];
    mean /= static_cast<double>(segment);
    double var = 0.0;
    for (std::size_t i = 0; i < segment; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= static_cast<double>(segment);
    inv_std[s] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < segment; ++i) out[s * segment + i] = (p[i] - mean) * inv_std[s];
  }
  return detail::make_result(x.shape(), std::move(out), {x},
                             [segment, count, inv_std = std::move(inv_std)](Node& self) {
    double* g = detail::input_grad(self, 0);
    if (!g) return;
    const auto& xhat = self.value;
    const double n = static_cast<double>(segment);
    for (std::size_t s = 0; s < count; ++s) {
      const double* dy = self.grad.data() + s * segment;
      const double* xh = xhat.data() + s * segment;
      double mean_dy = 0.0, mean_dy_xh = 0.0;
      for (std::size_t i = 0; i < segment; ++i) {
        mean_dy += dy[i];
        mean_dy_xh += dy[i] * xh[i];
      }
      mean_dy /= n;
      mean_dy_xh /= n;
      for (std::size_t i = 0; i < segment; ++i)
        g[s * segment + i] += inv_std[s] * (dy[i] - mean_dy - xh[i] * mean_dy_xh);
    }
  }, "standardize_segments");
}

/// y[i] = x[i] * gamma[c] + beta[c] with c = (i / inner) % channels.
inline Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t inner) {
  const std::size_t channels = gamma.numel();
  if (beta.numel() != channels || inner == 0 || x.numel() % (channels * inner) != 0)
    throw DimensionError("channel_affine: " + shape_string(x.shape()) + " with gamma " +
                         shape_string(gamma.shape()) + " and beta " + shape_string(beta.shape()));
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = (i / inner) % channels;
    out[i] = x[i] * gamma[c] + beta[c];
  }
  return detail::make_result(x.shape(), std::move(out), {x, gamma, beta}, [channels, inner](Node& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& gv = self.inputs[1]->value;
    double* gx = detail::input_grad(self, 0);
    double* gg = detail::input_grad(self, 1);
    double* gb = detail::input_grad(self, 2);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const std::size_t c = (i / inner) % channels;
      const double up = self.grad[i];
      if (gx) gx[i] += up * gv[c];
      if (gg) gg[c] += up * xv[i];
      if (gb) gb[c] += up;
    }
  }, "channel_affine");
}

inline constexpr double kNormEps = 1e-5;
inline constexpr double kStandardizeEps = 1e-8;

/// Normalizes over the last axis, then applies the per-feature affine.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kNormEps) {
  const std::size_t n = x.shape().back();
  if (gamma.numel() != n || beta.numel() != n)
    throw DimensionError("layer_norm: " + shape_string(x.shape()) + " with affine of " +
                         shape_string(gamma.shape()));
  return channel_affine(standardize_segments(x, n, eps), gamma, beta, 1);
}

/// Group normalization of a [C x H x W] activation.
inline Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                         double eps = kNormEps) {
  detail::require_rank(x, 3, "group_norm");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (groups == 0 || c % groups != 0)
    throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("group_norm: affine of " + shape_string(gamma.shape()) + " for " + std::to_string(c) +
                         " channels");
  return channel_affine(standardize_segments(x, (c / groups) * hw, eps), gamma, beta, hw);
}

/// Per-output-filter standardization of a [Cout x Cin x kh x kw] kernel.
inline Tensor weight_standardize(const Tensor& w, double eps = kStandardizeEps) {
  if (w.rank() < 2) throw DimensionError("weight_standardize: kernel " + shape_string(w.shape()));
  return standardize_segments(w, w.numel() / w.dim(0), eps);
}

/// Largest divisor of `channels` not exceeding 32.
inline std::size_t default_groups(std::size_t channels) {
  std::size_t g = std::min<std::size_t>(32, channels);
  while (channels % g != 0) --g;
  return g;
}

// ---------------------------------------------------------------------------
// Convolution and pooling on [C x H x W]

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

/// Cross-correlation plus per-channel bias. `b` may be undefined for no bias.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t padding) {
  detail::require_rank(x, 3, "conv2d input");
  detail::require_rank(w, 4, "conv2d kernel");
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin)
    throw DimensionError("conv2d: kernel " + shape_string(w.shape()) + " vs input " + shape_string(x.shape()));
  if (kh > h + 2 * padding || kw > wd + 2 * padding)
    throw DimensionError("conv2d: kernel " + shape_string(w.shape()) + " larger than padded input " +
                         shape_string(x.shape()));
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const bool has_bias = b.defined();
  if (has_bias && b.numel() != cout)
    throw DimensionError("conv2d: bias " + shape_string(b.shape()) + " for " + std::to_string(cout) + " filters");
  const std::size_t ho = conv_out_extent(h, kh, stride, padding), wo = conv_out_extent(wd, kw, stride, padding);

  // Flattened receptive-field offsets; -1 marks padding.
  struct Geometry {
    std::size_t cin, h, w, cout, kh, kw, ho, wo, stride, pad;
  } geo{cin, h, wd, cout, kh, kw, ho, wo, stride, padding};
  auto for_each_tap = [geo](auto&& fn) {
    for (std::size_t oy = 0; oy < geo.ho; ++oy)
      for (std::size_t ky = 0; ky < geo.kh; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geo.stride + ky) - static_cast<std::ptrdiff_t>(geo.pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(geo.h)) continue;
        for (std::size_t ox = 0; ox < geo.wo; ++ox)
          for (std::size_t kx = 0; kx < geo.kw; ++kx) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * geo.stride + kx) - static_cast<std::ptrdiff_t>(geo.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(geo.w)) continue;
            fn(oy * geo.wo + ox, static_cast<std::size_t>(iy) * geo.w + static_cast<std::size_t>(ix),
               ky * geo.kw + kx);
          }
      }
  };

  std::vector<double> out(cout * ho * wo, 0.0);
  const double* xv = x.data().data();
  const double* wv = w.data().data();
  const std::size_t plane_in = h * wd, plane_out = ho * wo, ksz = kh * kw;
  for (std::size_t co = 0; co < cout; ++co) {
    double* op = out.data() + co * plane_out;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* ip = xv + ci * plane_in;
      const double* kp = wv + (co * cin + ci) * ksz;
      for_each_tap([&](std::size_t o, std::size_t i, std::size_t k) { op[o] += kp[k] * ip[i]; });
    }
    if (has_bias)
      for (std::size_t o = 0; o < plane_out; ++o) op[o] += b[co];
  }
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return detail::make_result({cout, ho, wo}, std::move(out), std::move(inputs),
                             [geo, for_each_tap, has_bias](Node& self) {
    const std::size_t plane_in = geo.h * geo.w, plane_out = geo.ho * geo.wo, ksz = geo.kh * geo.kw;
    const double* xv = self.inputs[0]->value.data();
    const double* wv = self.inputs[1]->value.data();
    double* gx = detail::input_grad(self, 0);
    double* gw = detail::input_grad(self, 1);
    double* gb = has_bias ? detail::input_grad(self, 2) : nullptr;
    for (std::size_t co = 0; co < geo.cout; ++co) {
      const double* gp = self.grad.data() + co * plane_out;
      for (std::size_t ci = 0; ci < geo.cin; ++ci) {
        const std::size_t koff = (co * geo.cin + ci) * ksz;
        if (gx) {
          double* gxp = gx + ci * plane_in;
          const double* kp = wv + koff;
          for_each_tap([&](std::size_t o, std::size_t i, std::size_t k) { gxp[i] += kp[k] * gp[o]; });
        }
        if (gw) {
          const double* ip = xv + ci * plane_in;
          double* gwp = gw + koff;
          for_each_tap([&](std::size_t o, std::size_t i, std::size_t k) { gwp[k] += ip[i] * gp[o]; });
        }
      }
      if (gb)
        for (std::size_t o = 0; o < plane_out; ++o) gb[co] += gp[o];
    }
  }, "conv2d");
}

/// Max pooling with a square window; gradients go to the first maximum.
inline Tensor max_pool2d(const Tensor& x, std::size_t window, std::size_t stride) {
  detail::require_rank(x, 3, "max_pool2d");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (window == 0 || stride == 0 || window > h || window > w)
    throw DimensionError("max_pool2d: window " + std::to_string(window) + " on " + shape_string(x.shape()));
  const std::size_t ho = (h - window) / stride + 1, wo = (w - window) / stride + 1;
  std::vector<double> out(c * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  auto v = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = ch * h * w + oy * stride * w + ox * stride;
        for (std::size_t ky = 0; ky < window; ++ky)
          for (std::size_t kx = 0; kx < window; ++kx) {
            const std::size_t idx = ch * h * w + (oy * stride + ky) * w + ox * stride + kx;
            if (v[idx] > v[best]) best = idx;
          }
        const std::size_t o = (ch * ho + oy) * wo + ox;
        out[o] = v[best];
        argmax[o] = best;
      }
  return detail::make_result({c, ho, wo}, std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
    if (double* g = detail::input_grad(self, 0))
      for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
  }, "max_pool2d");
}

// ---------------------------------------------------------------------------
// Regularization and optimization

/// Inverted dropout; identity when not training or p == 0.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: p must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = unif(rng) < p ? 0.0 : keep_scale;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  return detail::make_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node& self) {
    if (double* g = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < mask.size(); ++i) g[i] += self.grad[i] * mask[i];
  }, "dropout");
}

/// Heavy-ball momentum: v <- momentum * v + g; w <- w - lr * v.
/// `velocity` holds one buffer per parameter, created zero-filled on first use.
inline void sgd_momentum_step(std::span<Tensor> params, std::vector<std::vector<double>>& velocity, double lr,
                              double momentum) {
  if (velocity.empty())
    for (auto& p : params) velocity.emplace_back(p.numel(), 0.0);
  if (velocity.size() != params.size()) throw UsageError("sgd_momentum_step: velocity/parameter count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].mutable_data();
    auto& v = velocity[k];
    if (!params[k].has_grad()) continue;
    auto g = params[k].grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum * v[i] + g[i];
      w[i] -= lr * v[i];
    }
  }
}

}  // namespace deepbirads
