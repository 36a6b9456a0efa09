#pragma once

// Dense double-precision tensor engine with reverse-mode automatic
// differentiation. Operations record backward closures onto the active
// GradTape; GradTape::backward replays them in reverse execution order.
//
// Reductions that mix rows of a variable-length context (softmax
// denominators, attention value mixing) accumulate their summands in a
// canonical value order, so those outputs are bit-identical under any
// permutation of the context rows.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cerd/errors.hpp"
#include "cerd/random.hpp"

namespace cerd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until backward reaches this node
  bool requires_grad = false;
};

namespace detail {

inline std::vector<double>& grad_buf(TensorNode& n) {
  if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
  return n.grad;
}

// Total order on doubles by bit pattern; used to fix a canonical summation
// order that depends only on the multiset of summands.
inline std::uint64_t total_order_key(double v) {
  const std::uint64_t b = std::bit_cast<std::uint64_t>(v);
  return (b & 0x8000000000000000ull) ? ~b : (b | 0x8000000000000000ull);
}

inline double canonical_sum(std::span<const double> xs) {
  thread_local std::vector<double> scratch;
  scratch.assign(xs.begin(), xs.end());
  std::sort(scratch.begin(), scratch.end(),
            [](double a, double b) { return total_order_key(a) < total_order_key(b); });
  double s = 0.0;
  for (double v : scratch) s += v;
  return s;
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<TensorNode>();
    t.node_->shape = std::move(shape);
    t.node_->values.assign(shape_size(t.node_->shape), value);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_size(shape) != values.size())
      throw DimensionError("tensor: shape " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    Tensor t;
    t.node_ = std::make_shared<TensorNode>();
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({}, {value}, requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(values), requires_grad);
  }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return from({n}, std::move(values), requires_grad);
  }

  static Tensor identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.node_->values[i * n + i] = 1.0;
    return t;
  }

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->values.size(); }

  std::span<const double> values() const { return node_->values; }
  std::span<double> values_mut() { return node_->values; }

  double value() const {
    if (size() != 1) throw ContractError("tensor: value() requires a scalar, got " + shape_str(shape()));
    return node_->values[0];
  }

  double at(std::size_t i) const { return node_->values.at(i); }
  double at(std::size_t r, std::size_t c) const {
    return node_->values.at(r * node_->shape.at(1) + c);
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  double grad_at(std::size_t i) const { return node_->grad.at(i); }
  void zero_grad() { node_->grad.clear(); }

  // Leaf copy: same values, detached from any tape.
  Tensor detach() const {
    Tensor t;
    t.node_ = std::make_shared<TensorNode>();
    t.node_->shape = node_->shape;
    t.node_->values = node_->values;
    t.node_->requires_grad = false;
    return t;
  }

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

inline void fill_uniform(Tensor& t, double lo, double hi, Rng& rng) {
  for (double& v : t.values_mut()) v = rng.uniform(lo, hi);
}

inline void fill_normal(Tensor& t, double mean, double stddev, Rng& rng) {
  for (double& v : t.values_mut()) v = rng.normal(mean, stddev);
}

// Suppresses gradient tracking for the enclosed scope (evaluation paths).
class NoGradGuard {
 public:
  NoGradGuard() { ++depth(); }
  ~NoGradGuard() { --depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool active() { return depth() > 0; }

 private:
  static int& depth() {
    thread_local int d = 0;
    return d;
  }
};

// Ordered record of executed operations. One tape per optimization step;
// nesting is allowed and the innermost tape records.
class GradTape {
 public:
  GradTape() {
    parent_ = current();
    current() = this;
  }
  ~GradTape() { current() = parent_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return current(); }

  static bool recording() { return current() != nullptr && !NoGradGuard::active(); }

  void record(std::shared_ptr<TensorNode> output, std::function<void()> backward_step) {
    produced_.push_back(std::move(output));
    steps_.push_back(std::move(backward_step));
  }

  std::size_t size() const { return steps_.size(); }

  // Populates grad = d(loss)/d(node) for every node the loss depends on.
  // Grads of tape-produced intermediates are reset first; leaf tensors
  // accumulate across calls and are zeroed explicitly by the optimizer.
  void backward(const Tensor& loss) {
    if (loss.size() != 1)
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    for (auto& n : produced_) n->grad.clear();
    detail::grad_buf(*loss.node())[0] += 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

 private:
  static GradTape*& current() {
    thread_local GradTape* t = nullptr;
    return t;
  }

  std::vector<std::function<void()>> steps_;
  std::vector<std::shared_ptr<TensorNode>> produced_;
  GradTape* parent_ = nullptr;
};

namespace detail {

inline bool track(std::initializer_list<const Tensor*> inputs) {
  if (!GradTape::recording()) return false;
  for (const Tensor* t : inputs)
    if ((*t).requires_grad()) return true;
  return false;
}

inline Tensor make_out(Shape shape, bool tracked) {
  Tensor t = Tensor::zeros(std::move(shape));
  t.set_requires_grad(tracked);
  return t;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  const bool tracked = detail::track({&a, &b});
  Tensor out = detail::make_out(a.shape(), tracked);
  for (std::size_t i = 0; i < a.size(); ++i) out.values_mut()[i] = a.values()[i] + b.values()[i];
  if (tracked) {
    GradTape::active()->record(out.node(), [an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        auto& g = detail::grad_buf(*an);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        auto& g = detail::grad_buf(*bn);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  const bool tracked = detail::track({&a, &b});
  Tensor out = detail::make_out(a.shape(), tracked);
  for (std::size_t i = 0; i < a.size(); ++i) out.values_mut()[i] = a.values()[i] - b.values()[i];
  if (tracked) {
    GradTape::active()->record(out.node(), [an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        auto& g = detail::grad_buf(*an);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        auto& g = detail::grad_buf(*bn);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= on->grad[i];
      }
    });
  }
  return out;
}

// Elementwise (Hadamard) product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  const bool tracked = detail::track({&a, &b});
  Tensor out = detail::make_out(a.shape(), tracked);
  for (std::size_t i = 0; i < a.size(); ++i) out.values_mut()[i] = a.values()[i] * b.values()[i];
  if (tracked) {
    GradTape::active()->record(out.node(), [an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        auto& g = detail::grad_buf(*an);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * bn->values[i];
      }
      if (bn->requires_grad) {
        auto& g = detail::grad_buf(*bn);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * an->values[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  const bool tracked = detail::track({&a});
  Tensor out = detail::make_out(a.shape(), tracked);
  for (std::size_t i = 0; i < a.size(); ++i) out.values_mut()[i] = c * a.values()[i];
  if (tracked) {
    GradTape::active()->record(out.node(), [an = a.node(), on = out.node(), c] {
      if (on->grad.empty()) return;
      auto& g = detail::grad_buf(*an);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * on->grad[i];
    });
  }
  return out;
}

inline Tensor add_scalar(const Tensor& a, double c) {
  const bool tracked = detail::track({&a});
  Tensor out = detail::make_out(a.shape(), tracked);
  for (std::size_t i = 0; i < a.size(); ++i) out.values_mut()[i] = a.values()[i] + c;
  if (tracked) {
    GradTape::active()->record(out.node(), [an = a.node(), on = out.node()] {
      if (on->grad.empty()) return;
      auto& g = detail::grad_buf(*an);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    });
  }
  return out;
}

// Scale by a scalar tensor (gradient flows into both factors).
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw DimensionError("scale_by: scale must be scalar, got " + shape_str(s.shape()));
  const bool tracked = detail::track({&a, &s});
  Tensor out = detail::make_out(a.shape(), tracked);
  const double sv = s.values()[0];
  for (std::size_t i = 0; i < a.size(); ++i) out.values_mut()[i] = sv * a.values()[i];
  if (tracked) {
    GradTape::active()->record(out.node(), [an = a.node(), sn = s.node(), on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        auto& g = detail::grad_buf(*an);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += sn->values[0] * on->grad[i];
      }
      if (sn->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < on->grad.size(); ++i) acc += on->grad[i] * an->values[i];
        detail::grad_buf(*sn)[0] += acc;
      }
    });
  }
  return out;
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {

inline void check_matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
}

inline void record_matmul_backward(const Tensor& a, const Tensor& b, const Tensor& out) {
  // dA = dC * B^T, dB = A^T * dC
  GradTape::active()->record(out.node(), [an = a.node(), bn = b.node(), on = out.node()] {
    if (on->grad.empty()) return;
    const std::size_t m = an->shape[0], k = an->shape[1], n = bn->shape[1];
    if (an->requires_grad) {
      auto& ga = detail::grad_buf(*an);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += on->grad[i * n + j] * bn->values[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (bn->requires_grad) {
      auto& gb = detail::grad_buf(*bn);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i) acc += an->values[i * k + p] * on->grad[i * n + j];
          gb[p * n + j] += acc;
        }
    }
  });
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check_matmul(a, b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool tracked = detail::track({&a, &b});
  Tensor out = detail::make_out({m, n}, tracked);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  double* ov = out.values_mut().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) ov[i * n + j] += aip * bv[p * n + j];
    }
  if (tracked) detail::record_matmul_backward(a, b, out);
  return out;
}

// Matrix product whose inner-axis accumulation uses the canonical summation
// order; the result is invariant to matched permutations of a's columns and
// b's rows. Used where the inner axis ranges over context rows.
inline Tensor matmul_canonical(const Tensor& a, const Tensor& b) {
  detail::check_matmul(a, b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool tracked = detail::track({&a, &b});
  Tensor out = detail::make_out({m, n}, tracked);
  std::vector<double> terms(k);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t p = 0; p < k; ++p) terms[p] = a.values()[i * k + p] * b.values()[p * n + j];
      out.values_mut()[i * n + j] = detail::canonical_sum(terms);
    }
  if (tracked) detail::record_matmul_backward(a, b, out);
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expects rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  const bool tracked = detail::track({&a});
  Tensor out = detail::make_out({n, m}, tracked);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.values_mut()[j * m + i] = a.values()[i * n + j];
  if (tracked) {
    GradTape::active()->record(out.node(), [an = a.node(), on = out.node(), m, n] {
      if (on->grad.empty()) return;
      auto& g = detail::grad_buf(*an);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += on->grad[j * m + i];
    });
  }
  return out;
}

// Adds a row vector to every row of a matrix (bias broadcast).
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0))
    throw DimensionError("add_rowvec: incompatible shapes " + shape_str(x.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  const bool tracked = detail::track({&x, &b});
  Tensor out = detail::make_out({m, n}, tracked);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.values_mut()[i * n + j] = x.values()[i * n + j] + b.values()[j];
  if (tracked) {
    GradTape::active()->record(out.node(), [xn = x.node(), bn = b.node(), on = out.node(), m, n] {
      if (on->grad.empty()) return;
      if (xn->requires_grad) {
        auto& g = detail::grad_buf(*xn);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        auto& g = detail::grad_buf(*bn);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += on->grad[i * n + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

namespace detail {
inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace detail

inline Tensor sigmoid(const Tensor& a) {
  const bool tracked = detail::track({&a});
  Tensor out = detail::make_out(a.shape(), tracked);
  for (std::size_t i = 0; i < a.size(); ++i) out.values_mut()[i] = detail::stable_sigmoid(a.values()[i]);
  if (tracked) {
    GradTape::active()->record(out.node(), [an = a.node(), on = out.node()] {
      if (on->grad.empty()) return;
      auto& g = detail::grad_buf(*an);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = on->values[i];
        g[i] += on->grad[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

inline Tensor abs(const Tensor& a) {
  const bool tracked = detail::track({&a});
  Tensor out = detail::make_out(a.shape(), tracked);
  for (std::size_t i = 0; i < a.size(); ++i) out.values_mut()[i] = std::abs(a.values()[i]);
  if (tracked) {
    GradTape::active()->record(out.node(), [an = a.node(), on = out.node()] {
      if (on->grad.empty()) return;
      auto& g = detail::grad_buf(*an);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = an->values[i];
        g[i] += on->grad[i] * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
      }
    });
  }
  return out;
}

// Smooth ramp x * sigmoid(1.702 x); the feed-forward nonlinearity.
inline Tensor smooth_ramp(const Tensor& a) { return mul(a, sigmoid(scale(a, 1.702))); }

namespace detail {

// Row-wise tempered softmax over the trailing axis; rows = 1 for rank-1.
inline Tensor softmax_impl(const Tensor& x, double temperature, std::size_t rows, std::size_t cols) {
  if (temperature <= 0.0)
    throw ParameterError("softmax: temperature must be positive, got " + std::to_string(temperature));
  const bool tracked = track({&x});
  Tensor out = make_out(x.shape(), tracked);
  std::vector<double> e(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xv = x.values().data() + r * cols;
    double* ov = out.values_mut().data() + r * cols;
    double mx = xv[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xv[j]);
    for (std::size_t j = 0; j < cols; ++j) e[j] = std::exp((xv[j] - mx) / temperature);
    const double denom = canonical_sum(e);
    for (std::size_t j = 0; j < cols; ++j) ov[j] = e[j] / denom;
  }
  if (tracked) {
    GradTape::active()->record(out.node(), [xn = x.node(), on = out.node(), rows, cols, temperature] {
      if (on->grad.empty()) return;
      auto& g = grad_buf(*xn);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = on->values.data() + r * cols;
        const double* gy = on->grad.data() + r * cols;
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) dot += gy[j] * y[j];
        for (std::size_t j = 0; j < cols; ++j) g[r * cols + j] += y[j] * (gy[j] - dot) / temperature;
      }
    });
  }
  return out;
}

}  // namespace detail

inline Tensor softmax(const Tensor& x, double temperature = 1.0) {
  if (x.rank() != 1) throw DimensionError("softmax: expects rank 1, got " + shape_str(x.shape()));
  return detail::softmax_impl(x, temperature, 1, x.dim(0));
}

inline Tensor softmax_rows(const Tensor& x, double temperature = 1.0) {
  if (x.rank() != 2) throw DimensionError("softmax_rows: expects rank 2, got " + shape_str(x.shape()));
  return detail::softmax_impl(x, temperature, x.dim(0), x.dim(1));
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class Reduce { sum, mean };

inline Tensor reduce(const Tensor& x, Reduce op, std::size_t axis) {
  if (axis >= x.rank())
    throw DimensionError("reduce: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(x.shape()));
  const bool tracked = detail::track({&x});
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out = detail::make_out(out_shape, tracked);

  const std::size_t axis_len = x.dim(axis);
  // Row-major iteration split into outer/inner strides around the axis.
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = x.size() / (axis_len * inner);
  const double inv = op == Reduce::mean ? 1.0 / static_cast<double>(axis_len) : 1.0;

  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      double acc = 0.0;
      for (std::size_t a = 0; a < axis_len; ++a) acc += x.values()[(o * axis_len + a) * inner + in];
      out.values_mut()[o * inner + in] = acc * inv;
    }
  if (tracked) {
    GradTape::active()->record(out.node(), [xn = x.node(), on = out.node(), outer, inner, axis_len, inv] {
      if (on->grad.empty()) return;
      auto& g = detail::grad_buf(*xn);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const double gy = on->grad[o * inner + in] * inv;
          for (std::size_t a = 0; a < axis_len; ++a) g[(o * axis_len + a) * inner + in] += gy;
        }
    });
  }
  return out;
}

inline Tensor sum_all(const Tensor& x) {
  const bool tracked = detail::track({&x});
  Tensor out = detail::make_out({}, tracked);
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  out.values_mut()[0] = acc;
  if (tracked) {
    GradTape::active()->record(out.node(), [xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      auto& g = detail::grad_buf(*xn);
      for (double& gi : g) gi += on->grad[0];
    });
  }
  return out;
}

inline Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

// log(sum(exp(x))) with max subtraction; backward distributes softmax(x).
inline Tensor log_sum_exp(const Tensor& x) {
  if (x.rank() != 1) throw DimensionError("log_sum_exp: expects rank 1, got " + shape_str(x.shape()));
  const bool tracked = detail::track({&x});
  Tensor out = detail::make_out({}, tracked);
  double mx = x.values()[0];
  for (double v : x.values()) mx = std::max(mx, v);
  std::vector<double> e(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) e[i] = std::exp(x.values()[i] - mx);
  out.values_mut()[0] = mx + std::log(detail::canonical_sum(e));
  if (tracked) {
    GradTape::active()->record(out.node(), [xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      auto& g = detail::grad_buf(*xn);
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += on->grad[0] * std::exp(xn->values[i] - on->values[0]);
    });
  }
  return out;
}

// Rank-1 renormalization x / sum(x); the top-k gate weights go through this.
inline Tensor normalize_sum(const Tensor& x) {
  if (x.rank() != 1) throw DimensionError("normalize_sum: expects rank 1, got " + shape_str(x.shape()));
  const bool tracked = detail::track({&x});
  Tensor out = detail::make_out(x.shape(), tracked);
  const double s = detail::canonical_sum(x.values());
  if (s == 0.0) throw ContractError("normalize_sum: entries sum to zero");
  for (std::size_t i = 0; i < x.size(); ++i) out.values_mut()[i] = x.values()[i] / s;
  if (tracked) {
    GradTape::active()->record(out.node(), [xn = x.node(), on = out.node(), s] {
      if (on->grad.empty()) return;
      auto& g = detail::grad_buf(*xn);
      double dot = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) dot += on->grad[i] * on->values[i];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += (on->grad[i] - dot) / s;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_size(new_shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  const bool tracked = detail::track({&x});
  Tensor out = detail::make_out(std::move(new_shape), tracked);
  std::copy(x.values().begin(), x.values().end(), out.values_mut().begin());
  if (tracked) {
    GradTape::active()->record(out.node(), [xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      auto& g = detail::grad_buf(*xn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    });
  }
  return out;
}

inline Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const std::size_t rank = parts[0].rank();
  if (axis >= rank) throw DimensionError("concat: axis out of range");
  for (const Tensor& p : parts)
    if (p.rank() != rank) throw DimensionError("concat: mixed ranks");

  bool tracked = false;
  if (GradTape::recording())
    for (const Tensor& p : parts) tracked = tracked || p.requires_grad();

  if (rank == 1) {
    std::size_t total = 0;
    for (const Tensor& p : parts) total += p.dim(0);
    Tensor out = detail::make_out({total}, tracked);
    std::size_t off = 0;
    for (const Tensor& p : parts) {
      std::copy(p.values().begin(), p.values().end(), out.values_mut().begin() + off);
      off += p.size();
    }
    if (tracked) {
      std::vector<std::shared_ptr<TensorNode>> ins;
      for (const Tensor& p : parts) ins.push_back(p.node());
      GradTape::active()->record(out.node(), [ins, on = out.node()] {
        if (on->grad.empty()) return;
        std::size_t off = 0;
        for (auto& n : ins) {
          if (n->requires_grad) {
            auto& g = detail::grad_buf(*n);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[off + i];
          }
          off += n->values.size();
        }
      });
    }
    return out;
  }

  if (rank != 2) throw DimensionError("concat: supports rank 1 and 2");
  if (axis == 0) {
    const std::size_t cols = parts[0].dim(1);
    std::size_t rows = 0;
    for (const Tensor& p : parts) {
      if (p.dim(1) != cols) throw DimensionError("concat: column counts differ");
      rows += p.dim(0);
    }
    Tensor out = detail::make_out({rows, cols}, tracked);
    std::size_t off = 0;
    for (const Tensor& p : parts) {
      std::copy(p.values().begin(), p.values().end(), out.values_mut().begin() + off);
      off += p.size();
    }
    if (tracked) {
      std::vector<std::shared_ptr<TensorNode>> ins;
      for (const Tensor& p : parts) ins.push_back(p.node());
      GradTape::active()->record(out.node(), [ins, on = out.node()] {
        if (on->grad.empty()) return;
        std::size_t off = 0;
        for (auto& n : ins) {
          if (n->requires_grad) {
            auto& g = detail::grad_buf(*n);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[off + i];
          }
          off += n->values.size();
        }
      });
    }
    return out;
  }

  // axis == 1
  const std::size_t rows = parts[0].dim(0);
  std::size_t cols = 0;
  for (const Tensor& p : parts) {
    if (p.dim(0) != rows) throw DimensionError("concat: row counts differ");
    cols += p.dim(1);
  }
  Tensor out = detail::make_out({rows, cols}, tracked);
  std::size_t col_off = 0;
  for (const Tensor& p : parts) {
    const std::size_t pc = p.dim(1);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < pc; ++c)
        out.values_mut()[r * cols + col_off + c] = p.values()[r * pc + c];
    col_off += pc;
  }
  if (tracked) {
    std::vector<std::shared_ptr<TensorNode>> ins;
    for (const Tensor& p : parts) ins.push_back(p.node());
    GradTape::active()->record(out.node(), [ins, on = out.node(), rows, cols] {
      if (on->grad.empty()) return;
      std::size_t col_off = 0;
      for (auto& n : ins) {
        const std::size_t pc = n->shape[1];
        if (n->requires_grad) {
          auto& g = detail::grad_buf(*n);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < pc; ++c) g[r * pc + c] += on->grad[r * cols + col_off + c];
        }
        col_off += pc;
      }
    });
  }
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.data(), parts.size()), axis);
}

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
  if (x.rank() != 2) throw DimensionError("slice_rows: expects rank 2, got " + shape_str(x.shape()));
  if (r0 >= r1 || r1 > x.dim(0)) throw DimensionError("slice_rows: bad row range");
  const std::size_t cols = x.dim(1);
  const bool tracked = detail::track({&x});
  Tensor out = detail::make_out({r1 - r0, cols}, tracked);
  std::copy(x.values().begin() + static_cast<std::ptrdiff_t>(r0 * cols),
            x.values().begin() + static_cast<std::ptrdiff_t>(r1 * cols), out.values_mut().begin());
  if (tracked) {
    GradTape::active()->record(out.node(), [xn = x.node(), on = out.node(), r0, cols] {
      if (on->grad.empty()) return;
      auto& g = detail::grad_buf(*xn);
      for (std::size_t i = 0; i < on->grad.size(); ++i) g[r0 * cols + i] += on->grad[i];
    });
  }
  return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
  if (x.rank() != 2) throw DimensionError("slice_cols: expects rank 2, got " + shape_str(x.shape()));
  if (c0 >= c1 || c1 > x.dim(1)) throw DimensionError("slice_cols: bad column range");
  const std::size_t rows = x.dim(0), cols = x.dim(1), w = c1 - c0;
  const bool tracked = detail::track({&x});
  Tensor out = detail::make_out({rows, w}, tracked);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out.values_mut()[r * w + c] = x.values()[r * cols + c0 + c];
  if (tracked) {
    GradTape::active()->record(out.node(), [xn = x.node(), on = out.node(), rows, cols, c0, w] {
      if (on->grad.empty()) return;
      auto& g = detail::grad_buf(*xn);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) g[r * cols + c0 + c] += on->grad[r * w + c];
    });
  }
  return out;
}

// Extracts row r of a matrix as a rank-1 tensor.
inline Tensor row(const Tensor& x, std::size_t r) {
  if (x.rank() != 2) throw DimensionError("row: expects rank 2, got " + shape_str(x.shape()));
  if (r >= x.dim(0)) throw DimensionError("row: index out of range");
  const std::size_t cols = x.dim(1);
  const bool tracked = detail::track({&x});
  Tensor out = detail::make_out({cols}, tracked);
  std::copy(x.values().begin() + static_cast<std::ptrdiff_t>(r * cols),
            x.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * cols), out.values_mut().begin());
  if (tracked) {
    GradTape::active()->record(out.node(), [xn = x.node(), on = out.node(), r, cols] {
      if (on->grad.empty()) return;
      auto& g = detail::grad_buf(*xn);
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += on->grad[c];
    });
  }
  return out;
}

// Stacks rank-1 tensors of equal length into a matrix, one per row.
inline Tensor stack_rows(std::span<const Tensor> rows_in) {
  if (rows_in.empty()) throw ContractError("stack_rows: no inputs");
  const std::size_t cols = rows_in[0].dim(0);
  for (const Tensor& t : rows_in)
    if (t.rank() != 1 || t.dim(0) != cols) throw DimensionError("stack_rows: rows must be rank 1, equal length");
  bool tracked = false;
  if (GradTape::recording())
    for (const Tensor& t : rows_in) tracked = tracked || t.requires_grad();
  Tensor out = detail::make_out({rows_in.size(), cols}, tracked);
  for (std::size_t r = 0; r < rows_in.size(); ++r)
    std::copy(rows_in[r].values().begin(), rows_in[r].values().end(),
              out.values_mut().begin() + static_cast<std::ptrdiff_t>(r * cols));
  if (tracked) {
    std::vector<std::shared_ptr<TensorNode>> ins;
    for (const Tensor& t : rows_in) ins.push_back(t.node());
    GradTape::active()->record(out.node(), [ins, on = out.node(), cols] {
      if (on->grad.empty()) return;
      for (std::size_t r = 0; r < ins.size(); ++r) {
        if (!ins[r]->requires_grad) continue;
        auto& g = detail::grad_buf(*ins[r]);
        for (std::size_t c = 0; c < cols; ++c) g[c] += on->grad[r * cols + c];
      }
    });
  }
  return out;
}

inline Tensor stack_rows(const std::vector<Tensor>& rows_in) {
  return stack_rows(std::span<const Tensor>(rows_in.data(), rows_in.size()));
}

// Gathers the listed elements of a rank-1 tensor into a new rank-1 tensor.
inline Tensor gather(const Tensor& x, const std::vector<std::size_t>& indices) {
  if (x.rank() != 1) throw DimensionError("gather: expects rank 1, got " + shape_str(x.shape()));
  for (std::size_t i : indices)
    if (i >= x.dim(0)) throw DimensionError("gather: index out of range");
  const bool tracked = detail::track({&x});
  Tensor out = detail::make_out({indices.size()}, tracked);
  for (std::size_t i = 0; i < indices.size(); ++i) out.values_mut()[i] = x.values()[indices[i]];
  if (tracked) {
    GradTape::active()->record(out.node(), [xn = x.node(), on = out.node(), indices] {
      if (on->grad.empty()) return;
      auto& g = detail::grad_buf(*xn);
      for (std::size_t i = 0; i < indices.size(); ++i) g[indices[i]] += on->grad[i];
    });
  }
  return out;
}

// Selects element i of a rank-1 tensor as a scalar.
inline Tensor pick(const Tensor& x, std::size_t i) {
  if (x.rank() != 1) throw DimensionError("pick: expects rank 1, got " + shape_str(x.shape()));
  if (i >= x.dim(0)) throw DimensionError("pick: index out of range");
  const bool tracked = detail::track({&x});
  Tensor out = detail::make_out({}, tracked);
  out.values_mut()[0] = x.values()[i];
  if (tracked) {
    GradTape::active()->record(out.node(), [xn = x.node(), on = out.node(), i] {
      if (on->grad.empty()) return;
      detail::grad_buf(*xn)[i] += on->grad[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer normalization and dropout
// ---------------------------------------------------------------------------

inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              double eps = 1e-5) {
  if (x.rank() != 2) throw DimensionError("layer_norm_rows: expects rank 2, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gamma.rank() != 1 || gamma.dim(0) != n || beta.rank() != 1 || beta.dim(0) != n)
    throw DimensionError("layer_norm_rows: gamma/beta must be rank-1 of width " + std::to_string(n));
  const bool tracked = detail::track({&x, &gamma, &beta});
  Tensor out = detail::make_out({m, n}, tracked);

  std::vector<double> xhat(m * n);
  std::vector<double> inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* xv = x.values().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xv[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xv[j] - mu) * (xv[j] - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xv[j] - mu) * inv;
      out.values_mut()[r * n + j] = gamma.values()[j] * xhat[r * n + j] + beta.values()[j];
    }
  }
  if (tracked) {
    GradTape::active()->record(out.node(), [xn = x.node(), gn = gamma.node(), bn = beta.node(),
                                            on = out.node(), xhat = std::move(xhat),
                                            inv_std = std::move(inv_std), m, n] {
      if (on->grad.empty()) return;
      for (std::size_t r = 0; r < m; ++r) {
        const double* gy = on->grad.data() + r * n;
        const double* xh = xhat.data() + r * n;
        if (gn->requires_grad) {
          auto& gg = detail::grad_buf(*gn);
          for (std::size_t j = 0; j < n; ++j) gg[j] += gy[j] * xh[j];
        }
        if (bn->requires_grad) {
          auto& gb = detail::grad_buf(*bn);
          for (std::size_t j = 0; j < n; ++j) gb[j] += gy[j];
        }
        if (xn->requires_grad) {
          auto& gx = detail::grad_buf(*xn);
          double mean_gxh = 0.0, mean_gxh_xh = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double gxh = gy[j] * gn->values[j];
            mean_gxh += gxh;
            mean_gxh_xh += gxh * xh[j];
          }
          mean_gxh /= static_cast<double>(n);
          mean_gxh_xh /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const double gxh = gy[j] * gn->values[j];
            gx[r * n + j] += inv_std[r] * (gxh - mean_gxh - xh[j] * mean_gxh_xh);
          }
        }
      }
    });
  }
  return out;
}

// Inverted dropout: scales kept entries by 1/(1-p) at train time so that
// evaluation is the identity.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool train) {
  if (p < 0.0 || p >= 1.0) throw ParameterError("dropout: probability must lie in [0,1), got " + std::to_string(p));
  if (!train || p == 0.0) return x;
  const bool tracked = detail::track({&x});
  Tensor out = detail::make_out(x.shape(), tracked);
  std::vector<double> mask(x.size());
  const double keep = 1.0 - p;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
    out.values_mut()[i] = x.values()[i] * mask[i];
  }
  if (tracked) {
    GradTape::active()->record(out.node(), [xn = x.node(), on = out.node(), mask = std::move(mask)] {
      if (on->grad.empty()) return;
      auto& g = detail::grad_buf(*xn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * mask[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline Tensor mse_loss(const Tensor& predicted, const Tensor& target) {
  detail::check_same_shape(predicted, target, "mse_loss");
  const Tensor d = sub(predicted, target);
  return mean_all(mul(d, d));
}

inline Tensor l1_loss(const Tensor& predicted, const Tensor& target) {
  detail::check_same_shape(predicted, target, "l1_loss");
  return mean_all(abs(sub(predicted, target)));
}

// Cross-entropy of logits against an integer class index.
inline Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  if (logits.rank() != 1) throw DimensionError("cross_entropy: expects rank-1 logits");
  if (label >= logits.dim(0))
    throw DataError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                    std::to_string(logits.dim(0)) + " classes");
  return sub(log_sum_exp(logits), pick(logits, label));
}

inline void backward(const Tensor& loss) {
  GradTape* tape = GradTape::active();
  if (tape == nullptr) throw ContractError("backward: no active tape");
  tape->backward(loss);
}

}  // namespace cerd
