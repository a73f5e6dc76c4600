#pragma once

// Dense row-major float64 tensors with a dynamic reverse-mode tape.
//
// Every operation on tensors that require gradients records its parents and a
// backward closure. Backward closures are themselves written with tensor
// operations, so gradients can be differentiated again (create_graph), which
// the path-length regularizer needs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "acelab/errors.hpp"

namespace acelab {

/// Additive guard used at every log-of-probability site.
inline constexpr double kLogEps = 1e-12;

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class Tensor;

namespace detail {

using BackwardFn = std::function<std::vector<Tensor>(const Tensor&)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a backward pass reaches this leaf
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
  const char* op = "leaf";
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

/// Disables tape recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Re-enables tape recording (used for create_graph passes).
class EnableGradGuard {
 public:
  EnableGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = true; }
  ~EnableGradGuard() { detail::grad_enabled = prev_; }
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

/// Shared handle to a node of the differentiation graph. Copies alias the same
/// storage; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " +
                       std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor zeros(Shape shape) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double v) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> v;
    v.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged rows in Tensor::from_rows");
      v.insert(v.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(v));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t size() const { return node().value.size(); }
  std::size_t rows() const {
    require_rank2("rows");
    return node().shape[0];
  }
  std::size_t cols() const {
    require_rank2("cols");
    return node().shape[1];
  }

  std::span<const double> values() const { return node().value; }
  std::span<double> mutable_values() { return node().value; }
  double operator[](std::size_t i) const { return node().value[i]; }
  double at(std::size_t r, std::size_t c) const { return node().value[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node().value[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  /// Marks a leaf as trainable. Only leaves may change this flag.
  Tensor& set_requires_grad(bool on = true) {
    if (!is_leaf()) throw ContractError("set_requires_grad on a non-leaf tensor");
    node().requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return node().parents.empty() && !node().backward; }
  bool has_grad() const { return !node().grad.empty(); }
  std::span<const double> grad() const { return node().grad; }
  std::span<double> mutable_grad() { return node().grad; }
  void zero_grad() { node().grad.clear(); }

  /// Same values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), node().value); }
  /// Independent deep copy; leaves keep their requires_grad flag, gradients are dropped.
  Tensor clone() const {
    Tensor t(shape(), node().value);
    if (is_leaf()) t.node().requires_grad = requires_grad();
    return t;
  }

  const detail::Node* id() const { return node_.get(); }

 private:
  friend Tensor make_op(Shape, std::vector<double>, std::vector<Tensor>, const char*,
                        detail::BackwardFn);
  friend void backward(const Tensor&);
  friend std::vector<Tensor> grad(const Tensor&, const std::vector<Tensor>&, const Tensor&,
                                  bool);

  detail::Node& node() const {
    if (!node_) throw ContractError("use of an undefined tensor");
    return *node_;
  }
  void require_rank2(const char* what) const {
    if (node().shape.size() != 2) {
      throw ShapeError(std::string(what) + "() needs a rank-2 tensor, got " +
                       shape_str(node().shape));
    }
  }

  std::shared_ptr<detail::Node> node_;
};

/// Builds an op result, attaching it to the tape when any parent requires grad
/// and recording is enabled.
inline Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                      const char* op, detail::BackwardFn fn) {
  Tensor out(std::move(shape), std::move(values));
  if (!detail::grad_enabled) return out;
  bool any = false;
  for (const auto& p : parents) any = any || (p.defined() && p.requires_grad());
  if (!any) return out;
  auto& n = out.node();
  n.requires_grad = true;
  n.op = op;
  for (auto& p : parents) n.parents.push_back(p.node_);
  n.backward = std::move(fn);
  return out;
}

// ---------------------------------------------------------------------------
// Broadcasting (numpy-style, right-aligned; a dimension broadcasts when it is 1)

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Flat index into `in` for each flat index of `out`, where `in` broadcasts to `out`.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > 0;) {
    const std::size_t k = r - i;  // position from the right
    if (k <= in.size()) {
      const std::size_t d = in[in.size() - k];
      stride[i] = d == 1 ? 0 : s;
      s *= d;
    }
  }
  const std::size_t n = numel(out);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t flat = 0;
  for (std::size_t j = 0; j < n; ++j) {
    idx[j] = flat;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      flat += stride[d];
      if (counter[d] < out[d]) break;
      flat -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

template <class F>
std::vector<double> binary_kernel(const Tensor& a, const Tensor& b, const Shape& out, F f) {
  const auto av = a.values();
  const auto bv = b.values();
  const std::size_t n = numel(out);
  std::vector<double> r(n);
  if (a.shape() == out && b.shape() == out) {
    for (std::size_t i = 0; i < n; ++i) r[i] = f(av[i], bv[i]);
  } else if (a.shape() == out && bv.size() == 1) {
    for (std::size_t i = 0; i < n; ++i) r[i] = f(av[i], bv[0]);
  } else if (b.shape() == out && av.size() == 1) {
    for (std::size_t i = 0; i < n; ++i) r[i] = f(av[0], bv[i]);
  } else {
    const auto ia = broadcast_index(a.shape(), out);
    const auto ib = broadcast_index(b.shape(), out);
    for (std::size_t i = 0; i < n; ++i) r[i] = f(av[ia[i]], bv[ib[i]]);
  }
  return r;
}

template <class F>
std::vector<double> unary_kernel(const Tensor& a, F f) {
  const auto av = a.values();
  std::vector<double> r(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) r[i] = f(av[i]);
  return r;
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + " expects a rank-2 tensor, got " + shape_str(t.shape()));
  }
}

}  // namespace detail

Tensor sum_to(const Tensor& a, const Shape& target);
Tensor broadcast_to(const Tensor& a, const Shape& target);

/// Reduces `a` by summation onto `target`, a shape that broadcasts to a.shape().
inline Tensor sum_to(const Tensor& a, const Shape& target) {
  if (a.shape() == target) return a;
  if (detail::broadcast_shape(target, a.shape()) != a.shape()) {
    throw ShapeError("sum_to: " + shape_str(target) + " does not broadcast to " +
                     shape_str(a.shape()));
  }
  const auto idx = detail::broadcast_index(target, a.shape());
  std::vector<double> r(numel(target), 0.0);
  const auto av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) r[idx[i]] += av[i];
  const Shape src = a.shape();
  return make_op(target, std::move(r), {a}, "sum_to",
                 [src](const Tensor& g) { return std::vector<Tensor>{broadcast_to(g, src)}; });
}

/// Expands `a` to `target` following broadcasting rules.
inline Tensor broadcast_to(const Tensor& a, const Shape& target) {
  if (a.shape() == target) return a;
  if (detail::broadcast_shape(a.shape(), target) != target) {
    throw ShapeError("broadcast_to: " + shape_str(a.shape()) + " does not broadcast to " +
                     shape_str(target));
  }
  const auto idx = detail::broadcast_index(a.shape(), target);
  std::vector<double> r(idx.size());
  const auto av = a.values();
  for (std::size_t i = 0; i < idx.size(); ++i) r[i] = av[idx[i]];
  const Shape src = a.shape();
  return make_op(target, std::move(r), {a}, "broadcast_to",
                 [src](const Tensor& g) { return std::vector<Tensor>{sum_to(g, src)}; });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  const Shape out = detail::broadcast_shape(a.shape(), b.shape());
  auto r = detail::binary_kernel(a, b, out, [](double x, double y) { return x + y; });
  const Shape sa = a.shape(), sb = b.shape();
  return make_op(out, std::move(r), {a, b}, "add", [sa, sb](const Tensor& g) {
    return std::vector<Tensor>{sum_to(g, sa), sum_to(g, sb)};
  });
}

inline Tensor operator-(const Tensor& a) {
  auto r = detail::unary_kernel(a, [](double x) { return -x; });
  return make_op(a.shape(), std::move(r), {a}, "neg",
                 [](const Tensor& g) { return std::vector<Tensor>{-g}; });
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
  const Shape out = detail::broadcast_shape(a.shape(), b.shape());
  auto r = detail::binary_kernel(a, b, out, [](double x, double y) { return x - y; });
  const Shape sa = a.shape(), sb = b.shape();
  return make_op(out, std::move(r), {a, b}, "sub", [sa, sb](const Tensor& g) {
    return std::vector<Tensor>{sum_to(g, sa), sum_to(-g, sb)};
  });
}

inline Tensor operator*(const Tensor& a, const Tensor& b) {
  const Shape out = detail::broadcast_shape(a.shape(), b.shape());
  auto r = detail::binary_kernel(a, b, out, [](double x, double y) { return x * y; });
  const Shape sa = a.shape(), sb = b.shape();
  return make_op(out, std::move(r), {a, b}, "mul", [a, b, sa, sb](const Tensor& g) {
    return std::vector<Tensor>{sum_to(g * b, sa), sum_to(g * a, sb)};
  });
}

inline Tensor operator/(const Tensor& a, const Tensor& b) {
  const Shape out = detail::broadcast_shape(a.shape(), b.shape());
  auto r = detail::binary_kernel(a, b, out, [](double x, double y) { return x / y; });
  const Shape sa = a.shape(), sb = b.shape();
  return make_op(out, std::move(r), {a, b}, "div", [a, b, sa, sb](const Tensor& g) {
    return std::vector<Tensor>{sum_to(g / b, sa), sum_to(-(g * a) / (b * b), sb)};
  });
}

inline Tensor operator*(const Tensor& a, double s) {
  auto r = detail::unary_kernel(a, [s](double x) { return x * s; });
  return make_op(a.shape(), std::move(r), {a}, "scale",
                 [s](const Tensor& g) { return std::vector<Tensor>{g * s}; });
}
inline Tensor operator*(double s, const Tensor& a) { return a * s; }
inline Tensor operator/(const Tensor& a, double s) { return a * (1.0 / s); }

inline Tensor operator+(const Tensor& a, double s) {
  auto r = detail::unary_kernel(a, [s](double x) { return x + s; });
  return make_op(a.shape(), std::move(r), {a}, "add_scalar",
                 [](const Tensor& g) { return std::vector<Tensor>{g}; });
}
inline Tensor operator+(double s, const Tensor& a) { return a + s; }
inline Tensor operator-(const Tensor& a, double s) { return a + (-s); }
inline Tensor operator-(double s, const Tensor& a) { return (-a) + s; }

namespace detail {
// Constant 0/1 tensor of a's shape where pred(value) holds.
template <class P>
Tensor mask_where(const Tensor& a, P pred) {
  return Tensor(a.shape(), unary_kernel(a, [&](double x) { return pred(x) ? 1.0 : 0.0; }));
}
}  // namespace detail

inline Tensor relu(const Tensor& a) {
  auto r = detail::unary_kernel(a, [](double x) { return x > 0.0 ? x : 0.0; });
  return make_op(a.shape(), std::move(r), {a}, "relu", [a](const Tensor& g) {
    return std::vector<Tensor>{g * detail::mask_where(a, [](double x) { return x > 0.0; })};
  });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  auto r = detail::unary_kernel(a, sigmoid_scalar);
  return make_op(a.shape(), std::move(r), {a}, "sigmoid", [a](const Tensor& g) {
    const Tensor s = sigmoid(a);
    return std::vector<Tensor>{g * s * (1.0 - s)};
  });
}

inline Tensor tanh(const Tensor& a) {
  auto r = detail::unary_kernel(a, [](double x) { return std::tanh(x); });
  return make_op(a.shape(), std::move(r), {a}, "tanh", [a](const Tensor& g) {
    const Tensor t = tanh(a);
    return std::vector<Tensor>{g * (1.0 - t * t)};
  });
}

inline Tensor exp(const Tensor& a) {
  auto r = detail::unary_kernel(a, [](double x) { return std::exp(x); });
  return make_op(a.shape(), std::move(r), {a}, "exp",
                 [a](const Tensor& g) { return std::vector<Tensor>{g * exp(a)}; });
}

/// Natural log; every input must be at least kLogEps.
inline Tensor log(const Tensor& a) {
  for (double x : a.values()) {
    if (!(x >= kLogEps)) {
      throw DomainError("log of " + std::to_string(x) + " (below guard " +
                        std::to_string(kLogEps) + "); use safe_log");
    }
  }
  auto r = detail::unary_kernel(a, [](double x) { return std::log(x); });
  return make_op(a.shape(), std::move(r), {a}, "log",
                 [a](const Tensor& g) { return std::vector<Tensor>{g / a}; });
}

/// log(a + kLogEps), the guarded form used for probabilities.
inline Tensor safe_log(const Tensor& a) {
  auto r = detail::unary_kernel(a, [](double x) { return std::log(x + kLogEps); });
  return make_op(a.shape(), std::move(r), {a}, "safe_log",
                 [a](const Tensor& g) { return std::vector<Tensor>{g / (a + kLogEps)}; });
}

inline Tensor sqrt(const Tensor& a) {
  auto r = detail::unary_kernel(a, [](double x) { return std::sqrt(x); });
  return make_op(a.shape(), std::move(r), {a}, "sqrt", [a](const Tensor& g) {
    return std::vector<Tensor>{g / (sqrt(a) * 2.0)};
  });
}

inline Tensor abs(const Tensor& a) {
  auto r = detail::unary_kernel(a, [](double x) { return std::fabs(x); });
  return make_op(a.shape(), std::move(r), {a}, "abs", [a](const Tensor& g) {
    const Tensor sign(a.shape(), detail::unary_kernel(a, [](double x) {
                        return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
                      }));
    return std::vector<Tensor>{g * sign};
  });
}

inline Tensor square(const Tensor& a) { return a * a; }

/// Elementwise max(a, floor). Ties route no gradient to `a`.
inline Tensor maximum(const Tensor& a, double floor) {
  auto r = detail::unary_kernel(a, [floor](double x) { return x > floor ? x : floor; });
  return make_op(a.shape(), std::move(r), {a}, "maximum", [a, floor](const Tensor& g) {
    return std::vector<Tensor>{g * detail::mask_where(a, [floor](double x) { return x > floor; })};
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> r(m * n);
  const auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) r[j * m + i] = av[i * n + j];
  return make_op(Shape{n, m}, std::move(r), {a}, "transpose",
                 [](const Tensor& g) { return std::vector<Tensor>{transpose(g)}; });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> r(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = r.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += x * brow[j];
    }
  }
  return make_op(Shape{m, n}, std::move(r), {a, b}, "matmul", [a, b](const Tensor& g) {
    return std::vector<Tensor>{matmul(g, transpose(b)), matmul(transpose(a), g)};
  });
}

/// Sum of all elements as a rank-0 tensor.
inline Tensor sum(const Tensor& a) { return sum_to(a, Shape{}); }

inline Tensor mean(const Tensor& a) {
  return sum(a) * (1.0 / static_cast<double>(a.size()));
}

/// Row sums of an [n x m] tensor, as [n x 1].
inline Tensor sum_rows(const Tensor& a) {
  detail::require_rank2(a, "sum_rows");
  return sum_to(a, Shape{a.rows(), 1});
}

/// Column means of an [n x m] tensor, as [1 x m].
inline Tensor mean_over_batch(const Tensor& a) {
  detail::require_rank2(a, "mean_over_batch");
  return sum_to(a, Shape{1, a.cols()}) * (1.0 / static_cast<double>(a.rows()));
}

Tensor pad_cols(const Tensor& a, std::size_t start, std::size_t total);

/// Columns [start, start+len) of an [n x m] tensor.
inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len) {
  detail::require_rank2(a, "slice_cols");
  const std::size_t n = a.rows(), m = a.cols();
  if (start + len > m) {
    throw ShapeError("slice_cols: columns [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of " + shape_str(a.shape()));
  }
  std::vector<double> r(n * len);
  const auto av = a.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < len; ++j) r[i * len + j] = av[i * m + start + j];
  return make_op(Shape{n, len}, std::move(r), {a}, "slice_cols", [start, m](const Tensor& g) {
    return std::vector<Tensor>{pad_cols(g, start, m)};
  });
}

/// Zero-pads an [n x len] tensor into columns [start, start+len) of [n x total].
inline Tensor pad_cols(const Tensor& a, std::size_t start, std::size_t total) {
  detail::require_rank2(a, "pad_cols");
  const std::size_t n = a.rows(), len = a.cols();
  if (start + len > total) throw ShapeError("pad_cols: target too narrow");
  std::vector<double> r(n * total, 0.0);
  const auto av = a.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < len; ++j) r[i * total + start + j] = av[i * len + j];
  return make_op(Shape{n, total}, std::move(r), {a}, "pad_cols", [start, len](const Tensor& g) {
    return std::vector<Tensor>{slice_cols(g, start, len)};
  });
}

/// Column-wise concatenation of rank-2 tensors with equal row counts.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t n = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.rows() != n) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " +
                       shape_str(p.shape()));
    }
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> r(n * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto pv = p.values();
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) r[i * total + off + j] = pv[i * w + j];
    off += w;
  }
  return make_op(Shape{n, total}, std::move(r), parts, "concat_cols", [widths](const Tensor& g) {
    std::vector<Tensor> out;
    std::size_t o = 0;
    for (std::size_t w : widths) {
      out.push_back(slice_cols(g, o, w));
      o += w;
    }
    return out;
  });
}

Tensor scatter_cols(const Tensor& a, const std::vector<std::size_t>& index, std::size_t width);

/// Picks a[i, index[i]] for each row, as [n x 1].
inline Tensor gather_cols(const Tensor& a, const std::vector<std::size_t>& index) {
  detail::require_rank2(a, "gather_cols");
  const std::size_t n = a.rows(), m = a.cols();
  if (index.size() != n) throw ShapeError("gather_cols: one index per row required");
  std::vector<double> r(n);
  const auto av = a.values();
  for (std::size_t i = 0; i < n; ++i) {
    if (index[i] >= m) throw ShapeError("gather_cols: column index out of range");
    r[i] = av[i * m + index[i]];
  }
  return make_op(Shape{n, 1}, std::move(r), {a}, "gather_cols", [index, m](const Tensor& g) {
    return std::vector<Tensor>{scatter_cols(g, index, m)};
  });
}

/// Inverse of gather_cols: places a[i,0] at column index[i] of a zero [n x width].
inline Tensor scatter_cols(const Tensor& a, const std::vector<std::size_t>& index,
                           std::size_t width) {
  detail::require_rank2(a, "scatter_cols");
  const std::size_t n = a.rows();
  std::vector<double> r(n * width, 0.0);
  const auto av = a.values();
  for (std::size_t i = 0; i < n; ++i) r[i * width + index[i]] = av[i];
  return make_op(Shape{n, width}, std::move(r), {a}, "scatter_cols", [index](const Tensor& g) {
    return std::vector<Tensor>{gather_cols(g, index)};
  });
}

/// Row-wise softmax with max subtraction.
inline Tensor softmax(const Tensor& a) {
  detail::require_rank2(a, "softmax");
  const std::size_t n = a.rows(), k = a.cols();
  if (k < 2) throw ShapeError("softmax needs at least two classes, got " + shape_str(a.shape()));
  std::vector<double> r(n * k);
  const auto av = a.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = av.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (r[i * k + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) r[i * k + j] /= z;
  }
  return make_op(a.shape(), std::move(r), {a}, "softmax", [a](const Tensor& g) {
    const Tensor s = softmax(a);
    return std::vector<Tensor>{s * (g - sum_rows(g * s))};
  });
}

/// Row-wise log-softmax via log-sum-exp.
inline Tensor log_softmax(const Tensor& a) {
  detail::require_rank2(a, "log_softmax");
  const std::size_t n = a.rows(), k = a.cols();
  if (k < 2) throw ShapeError("log_softmax needs at least two classes");
  std::vector<double> r(n * k);
  const auto av = a.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = av.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) r[i * k + j] = row[j] - lse;
  }
  return make_op(a.shape(), std::move(r), {a}, "log_softmax", [a](const Tensor& g) {
    return std::vector<Tensor>{g - softmax(a) * sum_rows(g)};
  });
}

/// Euclidean norm of each row, as [n x 1]. Zero rows get zero gradient.
inline Tensor row_norm(const Tensor& a) {
  detail::require_rank2(a, "row_norm");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> r(n);
  const auto av = a.values();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += av[i * m + j] * av[i * m + j];
    r[i] = std::sqrt(s);
  }
  std::vector<double> zero_rows(n);
  for (std::size_t i = 0; i < n; ++i) zero_rows[i] = r[i] == 0.0 ? 1.0 : 0.0;
  const Tensor guard(Shape{n, 1}, std::move(zero_rows));
  return make_op(Shape{n, 1}, std::move(r), {a}, "row_norm", [a, guard](const Tensor& g) {
    return std::vector<Tensor>{a * (g / (row_norm(a) + guard))};
  });
}

/// Softmax cross-entropy against hard labels, averaged over the batch.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  return -mean(gather_cols(log_softmax(logits), labels));
}

// ---------------------------------------------------------------------------
// Reverse pass

namespace detail {

// Nodes from which some target is reachable, in topological (parents-first) order.
inline std::vector<Node*> relevant_topo(Node* root, const std::unordered_set<const Node*>* targets) {
  std::vector<Node*> order;
  std::unordered_map<Node*, bool> relevant;
  struct Frame {
    Node* node;
    std::size_t next;
  };
  std::vector<Frame> stack{{root, 0}};
  relevant[root] = false;
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      Node* p = f.node->parents[f.next++].get();
      if (!p->requires_grad) continue;
      if (relevant.find(p) == relevant.end()) {
        relevant[p] = false;
        stack.push_back({p, 0});
      }
      continue;
    }
    Node* n = f.node;
    stack.pop_back();
    bool rel = targets ? targets->count(n) > 0 : true;
    for (const auto& p : n->parents)
      if (p->requires_grad && relevant[p.get()]) rel = true;
    relevant[n] = rel;
    if (rel) order.push_back(n);
  }
  return order;
}

}  // namespace detail

/// Accumulates d(loss)/d(leaf) into every leaf that requires grad.
/// Repeated calls without zero_grad() accumulate.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  NoGradGuard no_grad;
  detail::Node* root = loss.node_.get();
  const auto order = detail::relevant_topo(root, nullptr);
  std::unordered_map<detail::Node*, Tensor> pending;
  pending[root] = Tensor::full(loss.shape(), 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    auto found = pending.find(n);
    if (found == pending.end()) continue;
    Tensor g = std::move(found->second);
    pending.erase(found);
    if (!n->backward) {
      auto gv = g.values();
      if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
      for (std::size_t i = 0; i < gv.size(); ++i) n->grad[i] += gv[i];
      continue;
    }
    auto parent_grads = n->backward(g);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      detail::Node* p = n->parents[i].get();
      if (!p->requires_grad || !parent_grads[i].defined()) continue;
      auto slot = pending.find(p);
      if (slot == pending.end()) {
        pending.emplace(p, std::move(parent_grads[i]));
      } else {
        slot->second = slot->second + parent_grads[i];
      }
    }
  }
}

/// Gradients of `output` with respect to `inputs` (any tensors on its graph),
/// seeded with `grad_output` (ones if undefined, which requires a scalar output).
/// With create_graph the returned gradients are themselves differentiable.
/// Leaf .grad buffers are not touched.
inline std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                                const Tensor& grad_output = Tensor(),
                                bool create_graph = false) {
  if (!grad_output.defined() && output.size() != 1) {
    throw ContractError("grad of non-scalar output " + shape_str(output.shape()) +
                        " needs an explicit grad_output");
  }
  if (grad_output.defined() && grad_output.shape() != output.shape()) {
    throw ShapeError("grad_output shape " + shape_str(grad_output.shape()) +
                     " does not match output " + shape_str(output.shape()));
  }
  std::unordered_set<const detail::Node*> targets;
  for (const auto& in : inputs) {
    if (!in.requires_grad()) throw ContractError("grad input does not require grad");
    targets.insert(in.node_.get());
  }
  if (!output.requires_grad()) {
    throw ContractError("grad: inputs are not on the output's graph");
  }
  detail::Node* root = output.node_.get();
  const auto order = detail::relevant_topo(root, &targets);
  bool reached = false;
  for (auto* n : order) reached = reached || targets.count(n);
  const std::unordered_set<detail::Node*> relevant(order.begin(), order.end());
  if (!reached) throw ContractError("grad: inputs are not on the output's graph");

  std::unique_ptr<NoGradGuard> no_grad;
  std::unique_ptr<EnableGradGuard> with_grad;
  if (create_graph) {
    with_grad = std::make_unique<EnableGradGuard>();
  } else {
    no_grad = std::make_unique<NoGradGuard>();
  }
  std::unordered_map<const detail::Node*, Tensor> done;
  std::unordered_map<detail::Node*, Tensor> pending;
  pending[root] = grad_output.defined() ? grad_output : Tensor::full(output.shape(), 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    auto found = pending.find(n);
    if (found == pending.end()) continue;
    Tensor g = std::move(found->second);
    pending.erase(found);
    if (targets.count(n)) done[n] = g;
    if (!n->backward) continue;
    bool propagate = false;
    for (const auto& p : n->parents) propagate = propagate || relevant.count(p.get()) > 0;
    if (!propagate) continue;
    auto parent_grads = n->backward(g);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      detail::Node* p = n->parents[i].get();
      if (!relevant.count(p) || !parent_grads[i].defined()) continue;
      auto slot = pending.find(p);
      if (slot == pending.end()) {
        pending.emplace(p, std::move(parent_grads[i]));
      } else {
        slot->second = slot->second + parent_grads[i];
      }
    }
  }
  std::vector<Tensor> out;
  for (const auto& in : inputs) {
    auto f = done.find(in.node_.get());
    out.push_back(f == done.end() ? Tensor::zeros(in.shape()) : f->second);
  }
  return out;
}

/// Vector-Jacobian product J^T probe, where J = d(output)/d(latent).
inline Tensor vjp(const Tensor& output, const Tensor& latent, const Tensor& probe,
                  bool create_graph = false) {
  if (probe.shape() != output.shape()) {
    throw ShapeError("vjp probe " + shape_str(probe.shape()) + " must match output " +
                     shape_str(output.shape()));
  }
  return grad(output, {latent}, probe, create_graph).front();
}

/// Euclidean norm of J^T probe.
inline double vjp_norm(const Tensor& output, const Tensor& latent, const Tensor& probe) {
  const Tensor v = vjp(output, latent, probe, false);
  double s = 0.0;
  for (double x : v.values()) s += x * x;
  return std::sqrt(s);
}

}  // namespace acelab
