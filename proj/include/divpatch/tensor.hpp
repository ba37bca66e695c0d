#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace divpatch {

// Shape mismatch or out-of-range access on a tensor operation.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// API misuse: non-scalar backward root, double backward, non-deterministic
// function handed to the gradient checker.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// A row with (near) zero L2 norm where a direction is required.
struct DegenerateRowError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << "]";
  return os.str();
}

inline long shape_numel(const std::vector<int>& s) {
  long n = 1;
  for (int d : s) n *= d;
  return n;
}

template <typename S>
class TapeT;

// Dense row-major tensor participating in reverse-mode differentiation.
// A TensorT is a shared handle to its node; copies alias the same storage.
// Scalars are rank-0 (empty shape, one element).
template <typename S>
class TensorT {
 public:
  TensorT() = default;

  static TensorT leaf(std::vector<int> shape, std::vector<S> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<long>(data.size()))
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    TensorT t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    t.n_->requires_grad = requires_grad;
    t.n_->needs_grad = requires_grad;
    return t;
  }

  static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
    std::vector<S> v(static_cast<size_t>(shape_numel(shape)), S(0));
    return leaf(std::move(shape), std::move(v), requires_grad);
  }

  static TensorT scalar(S v) { return leaf({}, {v}); }

  bool defined() const { return n_ != nullptr; }
  const std::vector<int>& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  long numel() const { return static_cast<long>(n_->value.size()); }

  int rows() const {
    if (rank() != 2) throw ShapeError("rows(): tensor is not rank 2: " + shape_str(shape()));
    return n_->shape[0];
  }
  int cols() const {
    if (rank() != 2) throw ShapeError("cols(): tensor is not rank 2: " + shape_str(shape()));
    return n_->shape[1];
  }

  const std::vector<S>& values() const { return n_->value; }
  std::vector<S>& values() { return n_->value; }

  bool requires_grad() const { return n_->requires_grad; }
  bool needs_grad() const { return n_->needs_grad; }

  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<S>& grad() const {
    if (n_->grad.empty()) throw ContractError("grad(): no gradient has been recorded");
    return n_->grad;
  }
  void zero_grad() { n_->grad.clear(); }

  // Adds into the gradient buffer; the hook for custom ops built on
  // TapeT::record().
  void accumulate_grad(const std::vector<S>& g) {
    if (static_cast<long>(g.size()) != numel())
      throw ShapeError("accumulate_grad: size mismatch");
    if (n_->grad.empty()) n_->grad.assign(n_->value.size(), S(0));
    for (size_t i = 0; i < g.size(); ++i) n_->grad[i] += g[i];
  }

  S item() const {
    if (numel() != 1) throw ContractError("item(): tensor is not scalar: " + shape_str(shape()));
    return n_->value[0];
  }

  // Value copy detached from any gradient bookkeeping.
  TensorT detached() const { return leaf(n_->shape, n_->value, false); }

  bool same_node(const TensorT& o) const { return n_ == o.n_; }

 private:
  struct Node {
    std::vector<int> shape;
    std::vector<S> value;
    std::vector<S> grad;        // empty until backward touches it
    bool requires_grad = false; // user-marked differentiable leaf
    bool needs_grad = false;    // reachable from a requires_grad leaf
  };

  std::shared_ptr<Node> n_;
  friend class TapeT<S>;
};

namespace detail {

// c[m,p] += a[m,k] * b[k,p]
template <typename S>
void mm_nn_acc(const S* a, const S* b, S* c, int m, int k, int p) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<long>(i) * k;
    S* crow = c + static_cast<long>(i) * p;
    for (int kk = 0; kk < k; ++kk) {
      const S av = arow[kk];
      const S* brow = b + static_cast<long>(kk) * p;
      for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] += a[m,p] * b[k,p]^T   (rows of both operands are contiguous)
template <typename S>
void mm_nt_acc(const S* a, const S* b, S* c, int m, int p, int k) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<long>(i) * p;
    S* crow = c + static_cast<long>(i) * k;
    for (int j = 0; j < k; ++j) {
      const S* brow = b + static_cast<long>(j) * p;
      S acc = 0;
      for (int t = 0; t < p; ++t) acc += arow[t] * brow[t];
      crow[j] += acc;
    }
  }
}

// c[k,p] += a[m,k]^T * b[m,p]
template <typename S>
void mm_tn_acc(const S* a, const S* b, S* c, int m, int k, int p) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<long>(i) * k;
    const S* brow = b + static_cast<long>(i) * p;
    for (int kk = 0; kk < k; ++kk) {
      const S av = arow[kk];
      S* crow = c + static_cast<long>(kk) * p;
      for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename S>
S gelu_value(S x) {
  // Exact (erf) formulation.
  return S(0.5) * x * (S(1) + S(std::erf(static_cast<double>(x) / std::sqrt(2.0))));
}

template <typename S>
S gelu_derivative(S x) {
  double xd = static_cast<double>(x);
  double cdf = 0.5 * (1.0 + std::erf(xd / std::sqrt(2.0)));
  double pdf = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * 3.14159265358979323846);
  return S(cdf + xd * pdf);
}

}  // namespace detail

// Ordered record of differentiable operations. Operations are appended in
// execution order, which is a topological order by construction; backward()
// replays them once, in reverse. One backward per tape: a second call is
// rejected until reset().
//
// The tape holds no global state, so independent TapeT instances may be used
// concurrently from different threads. With recording disabled the ops
// compute values only (the eval path).
template <typename S>
class TapeT {
 public:
  using Tensor = TensorT<S>;

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }
  size_t num_ops() const { return steps_.size(); }
  bool consumed() const { return consumed_; }

  void reset() {
    steps_.clear();
    consumed_ = false;
  }

  // Populates grad on every needs_grad tensor reachable from root.
  // Gradients accumulate additively across fan-out within this call and
  // across calls on *different* tapes until zero_grad().
  void backward(const Tensor& root) {
    if (root.numel() != 1)
      throw ContractError("backward: root must be scalar, got shape " + shape_str(root.shape()));
    if (consumed_)
      throw ContractError("backward: tape already consumed; call reset() before reuse");
    consumed_ = true;
    ensure_grad(root.n_.get());
    root.n_->grad[0] += S(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  // Registers a raw backward closure. All built-in ops funnel through this;
  // it is public so custom ops can be composed on top of the primitive set.
  void record(std::function<void()> back) {
    if (recording_) steps_.push_back(std::move(back));
  }

  // ---------------------------------------------------------------- matmul
  // Supports [m,k]x[k,p], batched [b,m,k]x[b,k,p], and [b,m,k]x[k,p] with
  // the right-hand side broadcast across the batch.
  Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    auto fail = [&] {
      throw ShapeError("matmul: incompatible shapes " + shape_str(as) + " x " + shape_str(bs));
    };
    if (a.rank() == 2 && b.rank() == 2) {
      if (as[1] != bs[0]) fail();
      return matmul_impl(a, b, 1, as[0], as[1], bs[1], false);
    }
    if (a.rank() == 3 && b.rank() == 3) {
      if (as[0] != bs[0] || as[2] != bs[1]) fail();
      return matmul_impl(a, b, as[0], as[1], as[2], bs[2], false);
    }
    if (a.rank() == 3 && b.rank() == 2) {
      if (as[2] != bs[0]) fail();
      return matmul_impl(a, b, as[0], as[1], as[2], bs[1], true);
    }
    fail();
    return {};
  }

  Tensor transpose(const Tensor& a) {
    int m = a.rows(), n = a.cols();
    std::vector<S> v(static_cast<size_t>(a.numel()));
    const S* src = a.values().data();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) v[static_cast<long>(j) * m + i] = src[static_cast<long>(i) * n + j];
    Tensor out = derived({n, m}, std::move(v), a.needs_grad());
    if (out.needs_grad())
      record([an = a.n_, on = out.n_, m, n] {
        if (on->grad.empty()) return;
        ensure_grad(an.get());
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            an->grad[static_cast<long>(i) * n + j] += on->grad[static_cast<long>(j) * m + i];
      });
    return out;
  }

  // ------------------------------------------------------------ elementwise
  Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
      throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<S> v(a.values());
    const S* bv = b.values().data();
    for (long i = 0; i < a.numel(); ++i) v[i] += bv[i];
    Tensor out = derived(a.shape(), std::move(v), a.needs_grad() || b.needs_grad());
    if (out.needs_grad())
      record([an = a.n_, bn = b.n_, on = out.n_] {
        if (on->grad.empty()) return;
        if (an->needs_grad) {
          ensure_grad(an.get());
          for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        }
        if (bn->needs_grad) {
          ensure_grad(bn.get());
          for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
        }
      });
    return out;
  }

  // a[..., d] + v[d]: the vector is broadcast over leading dimensions.
  Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    int d = a.shape().empty() ? 0 : a.shape().back();
    if (v.rank() != 1 || v.shape()[0] != d || d == 0)
      throw ShapeError("add_rowvec: cannot broadcast " + shape_str(v.shape()) + " over " +
                       shape_str(a.shape()));
    long rows = a.numel() / d;
    std::vector<S> out_v(a.values());
    const S* vv = v.values().data();
    for (long r = 0; r < rows; ++r)
      for (int j = 0; j < d; ++j) out_v[r * d + j] += vv[j];
    Tensor out = derived(a.shape(), std::move(out_v), a.needs_grad() || v.needs_grad());
    if (out.needs_grad())
      record([an = a.n_, vn = v.n_, on = out.n_, rows, d] {
        if (on->grad.empty()) return;
        if (an->needs_grad) {
          ensure_grad(an.get());
          for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        }
        if (vn->needs_grad) {
          ensure_grad(vn.get());
          for (long r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j) vn->grad[j] += on->grad[r * d + j];
        }
      });
    return out;
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
      throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<S> v(a.values());
    const S* bv = b.values().data();
    for (long i = 0; i < a.numel(); ++i) v[i] *= bv[i];
    Tensor out = derived(a.shape(), std::move(v), a.needs_grad() || b.needs_grad());
    if (out.needs_grad())
      record([an = a.n_, bn = b.n_, on = out.n_] {
        if (on->grad.empty()) return;
        if (an->needs_grad) {
          ensure_grad(an.get());
          for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
        }
        if (bn->needs_grad) {
          ensure_grad(bn.get());
          for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
        }
      });
    return out;
  }

  Tensor scale(const Tensor& a, double c) {
    std::vector<S> v(a.values());
    for (auto& x : v) x = S(x * c);
    Tensor out = derived(a.shape(), std::move(v), a.needs_grad());
    if (out.needs_grad())
      record([an = a.n_, on = out.n_, c] {
        if (on->grad.empty()) return;
        ensure_grad(an.get());
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += S(on->grad[i] * c);
      });
    return out;
  }

  // Multiplies slice i along axis 0 by factors[i]. The factors are runtime
  // constants (drop-path masks), not differentiable inputs.
  Tensor scale_rows(const Tensor& a, const std::vector<S>& factors) {
    if (a.rank() < 1 || a.shape()[0] != static_cast<int>(factors.size()))
      throw ShapeError("scale_rows: " + std::to_string(factors.size()) + " factors for shape " +
                       shape_str(a.shape()));
    long stride = a.numel() / a.shape()[0];
    std::vector<S> v(a.values());
    for (size_t r = 0; r < factors.size(); ++r)
      for (long j = 0; j < stride; ++j) v[r * stride + j] *= factors[r];
    Tensor out = derived(a.shape(), std::move(v), a.needs_grad());
    if (out.needs_grad())
      record([an = a.n_, on = out.n_, factors, stride] {
        if (on->grad.empty()) return;
        ensure_grad(an.get());
        for (size_t r = 0; r < factors.size(); ++r)
          for (long j = 0; j < stride; ++j)
            an->grad[r * stride + j] += on->grad[r * stride + j] * factors[r];
      });
    return out;
  }

  Tensor gelu(const Tensor& a) {
    std::vector<S> v(a.values());
    for (auto& x : v) x = detail::gelu_value(x);
    Tensor out = derived(a.shape(), std::move(v), a.needs_grad());
    if (out.needs_grad())
      record([an = a.n_, on = out.n_] {
        if (on->grad.empty()) return;
        ensure_grad(an.get());
        for (size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i] * detail::gelu_derivative(an->value[i]);
      });
    return out;
  }

  // |x| with subgradient 0 at x == 0.
  Tensor abs(const Tensor& a) {
    std::vector<S> v(a.values());
    for (auto& x : v) x = std::fabs(x);
    Tensor out = derived(a.shape(), std::move(v), a.needs_grad());
    if (out.needs_grad())
      record([an = a.n_, on = out.n_] {
        if (on->grad.empty()) return;
        ensure_grad(an.get());
        for (size_t i = 0; i < on->grad.size(); ++i) {
          S x = an->value[i];
          S sign = x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0));
          an->grad[i] += on->grad[i] * sign;
        }
      });
    return out;
  }

  // ------------------------------------------------------------- reductions
  Tensor sum_all(const Tensor& a) {
    S acc = 0;
    for (S x : a.values()) acc += x;
    Tensor out = derived({}, {acc}, a.needs_grad());
    if (out.needs_grad())
      record([an = a.n_, on = out.n_] {
        if (on->grad.empty()) return;
        ensure_grad(an.get());
        for (auto& g : an->grad) g += on->grad[0];
      });
    return out;
  }

  Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

  // Mean along one axis; the axis is removed from the shape.
  Tensor mean_axis(const Tensor& a, int axis) {
    if (axis < 0 || axis >= a.rank())
      throw ShapeError("mean_axis: axis " + std::to_string(axis) + " out of range for " +
                       shape_str(a.shape()));
    const auto& s = a.shape();
    long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (int i = axis + 1; i < a.rank(); ++i) inner *= s[i];
    int k = s[axis];
    std::vector<int> out_shape;
    for (int i = 0; i < a.rank(); ++i)
      if (i != axis) out_shape.push_back(s[i]);
    std::vector<S> v(static_cast<size_t>(outer * inner), S(0));
    const S* src = a.values().data();
    for (long o = 0; o < outer; ++o)
      for (int t = 0; t < k; ++t)
        for (long j = 0; j < inner; ++j) v[o * inner + j] += src[(o * k + t) * inner + j];
    const S inv = S(1.0 / k);
    for (auto& x : v) x *= inv;
    Tensor out = derived(std::move(out_shape), std::move(v), a.needs_grad());
    if (out.needs_grad())
      record([an = a.n_, on = out.n_, outer, inner, k, inv] {
        if (on->grad.empty()) return;
        ensure_grad(an.get());
        for (long o = 0; o < outer; ++o)
          for (int t = 0; t < k; ++t)
            for (long j = 0; j < inner; ++j)
              an->grad[(o * k + t) * inner + j] += on->grad[o * inner + j] * inv;
      });
    return out;
  }

  // ------------------------------------------------------- structure ops
  Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    int rank = parts[0].rank();
    if (axis < 0 || axis >= rank)
      throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                       shape_str(parts[0].shape()));
    std::vector<int> out_shape = parts[0].shape();
    out_shape[axis] = 0;
    bool needs = false;
    for (const auto& p : parts) {
      if (p.rank() != rank)
        throw ShapeError("concat: rank mismatch " + shape_str(parts[0].shape()) + " vs " +
                         shape_str(p.shape()));
      for (int i = 0; i < rank; ++i)
        if (i != axis && p.shape()[i] != out_shape[i])
          throw ShapeError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
      out_shape[axis] += p.shape()[axis];
      needs = needs || p.needs_grad();
    }
    long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[i];
    for (int i = axis + 1; i < rank; ++i) inner *= out_shape[i];
    long out_axis = out_shape[axis];
    std::vector<S> v(static_cast<size_t>(outer * out_axis * inner));
    long offset = 0;
    for (const auto& p : parts) {
      long pk = p.shape()[axis];
      const S* src = p.values().data();
      for (long o = 0; o < outer; ++o)
        for (long t = 0; t < pk; ++t)
          for (long j = 0; j < inner; ++j)
            v[(o * out_axis + offset + t) * inner + j] = src[(o * pk + t) * inner + j];
      offset += pk;
    }
    Tensor out = derived(std::move(out_shape), std::move(v), needs);
    if (out.needs_grad()) {
      std::vector<std::shared_ptr<typename Tensor::Node>> nodes;
      std::vector<long> sizes;
      for (const auto& p : parts) {
        nodes.push_back(p.n_);
        sizes.push_back(p.shape()[axis]);
      }
      record([nodes, sizes, on = out.n_, outer, inner, out_axis] {
        if (on->grad.empty()) return;
        long offset = 0;
        for (size_t pi = 0; pi < nodes.size(); ++pi) {
          long pk = sizes[pi];
          auto& pn = nodes[pi];
          if (pn->needs_grad) {
            ensure_grad(pn.get());
            for (long o = 0; o < outer; ++o)
              for (long t = 0; t < pk; ++t)
                for (long j = 0; j < inner; ++j)
                  pn->grad[(o * pk + t) * inner + j] +=
                      on->grad[(o * out_axis + offset + t) * inner + j];
          }
          offset += pk;
        }
      });
    }
    return out;
  }

  Tensor concat(const Tensor& a, const Tensor& b, int axis) { return concat(std::vector<Tensor>{a, b}, axis); }

  // Half-open range [lo, hi) along the given axis.
  Tensor slice(const Tensor& a, int axis, int lo, int hi) {
    if (axis < 0 || axis >= a.rank())
      throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for " +
                       shape_str(a.shape()));
    if (lo < 0 || hi > a.shape()[axis] || lo >= hi)
      throw ShapeError("slice: range [" + std::to_string(lo) + ", " + std::to_string(hi) +
                       ") out of bounds for axis " + std::to_string(axis) + " of " +
                       shape_str(a.shape()));
    const auto& s = a.shape();
    long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (int i = axis + 1; i < a.rank(); ++i) inner *= s[i];
    long k = s[axis], nk = hi - lo;
    std::vector<int> out_shape = s;
    out_shape[axis] = static_cast<int>(nk);
    std::vector<S> v(static_cast<size_t>(outer * nk * inner));
    const S* src = a.values().data();
    for (long o = 0; o < outer; ++o)
      for (long t = 0; t < nk; ++t)
        for (long j = 0; j < inner; ++j)
          v[(o * nk + t) * inner + j] = src[(o * k + lo + t) * inner + j];
    Tensor out = derived(std::move(out_shape), std::move(v), a.needs_grad());
    if (out.needs_grad())
      record([an = a.n_, on = out.n_, outer, inner, k, nk, lo] {
        if (on->grad.empty()) return;
        ensure_grad(an.get());
        for (long o = 0; o < outer; ++o)
          for (long t = 0; t < nk; ++t)
            for (long j = 0; j < inner; ++j)
              an->grad[(o * k + lo + t) * inner + j] += on->grad[(o * nk + t) * inner + j];
      });
    return out;
  }

  Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
    if (shape_numel(new_shape) != a.numel())
      throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                       shape_str(new_shape));
    Tensor out = derived(std::move(new_shape), a.values(), a.needs_grad());
    if (out.needs_grad())
      record([an = a.n_, on = out.n_] {
        if (on->grad.empty()) return;
        ensure_grad(an.get());
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      });
    return out;
  }

  // --------------------------------------------------------- normalization
  // Per-vector zero mean / unit variance over the last axis, then affine.
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.rank() < 1 || x.shape().back() == 0)
      throw ShapeError("layer_norm: empty normalization axis in " + shape_str(x.shape()));
    if (eps <= 0) throw ContractError("layer_norm: eps must be > 0");
    int d = x.shape().back();
    if (gain.rank() != 1 || gain.shape()[0] != d || bias.rank() != 1 || bias.shape()[0] != d)
      throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                       shape_str(bias.shape()) + " do not match axis size " + std::to_string(d));
    long rows = x.numel() / d;
    std::vector<S> v(x.values().size());
    std::vector<S> inv_std(static_cast<size_t>(rows));
    std::vector<S> xhat(x.values().size());
    const S* src = x.values().data();
    const S* g = gain.values().data();
    const S* b = bias.values().data();
    for (long r = 0; r < rows; ++r) {
      const S* row = src + r * d;
      S mean = 0;
      for (int j = 0; j < d; ++j) mean += row[j];
      mean /= S(d);
      S var = 0;
      for (int j = 0; j < d; ++j) {
        S c = row[j] - mean;
        var += c * c;
      }
      var /= S(d);
      S istd = S(1) / std::sqrt(var + S(eps));
      inv_std[r] = istd;
      for (int j = 0; j < d; ++j) {
        S xh = (row[j] - mean) * istd;
        xhat[r * d + j] = xh;
        v[r * d + j] = g[j] * xh + b[j];
      }
    }
    bool needs = x.needs_grad() || gain.needs_grad() || bias.needs_grad();
    Tensor out = derived(x.shape(), std::move(v), needs);
    if (out.needs_grad())
      record([xn = x.n_, gn = gain.n_, bn = bias.n_, on = out.n_, rows, d,
              inv_std = std::move(inv_std), xhat = std::move(xhat)] {
        if (on->grad.empty()) return;
        const S* go = on->grad.data();
        if (gn->needs_grad) ensure_grad(gn.get());
        if (bn->needs_grad) ensure_grad(bn.get());
        if (xn->needs_grad) ensure_grad(xn.get());
        for (long r = 0; r < rows; ++r) {
          const S* gr = go + r * d;
          const S* xh = xhat.data() + r * d;
          if (gn->needs_grad)
            for (int j = 0; j < d; ++j) gn->grad[j] += gr[j] * xh[j];
          if (bn->needs_grad)
            for (int j = 0; j < d; ++j) bn->grad[j] += gr[j];
          if (xn->needs_grad) {
            // dxhat = g*gain; dx = istd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
            S sum_dxh = 0, sum_dxh_xh = 0;
            for (int j = 0; j < d; ++j) {
              S dxh = gr[j] * gn->value[j];
              sum_dxh += dxh;
              sum_dxh_xh += dxh * xh[j];
            }
            S m1 = sum_dxh / S(d), m2 = sum_dxh_xh / S(d);
            for (int j = 0; j < d; ++j) {
              S dxh = gr[j] * gn->value[j];
              xn->grad[r * d + j] += inv_std[r] * (dxh - m1 - xh[j] * m2);
            }
          }
        }
      });
    return out;
  }

  // Rows scaled to unit L2 norm. Rows with norm < 1e-12 are rejected.
  Tensor row_l2_normalize(const Tensor& x) {
    int n = x.rows(), d = x.cols();
    std::vector<S> v(x.values().size());
    std::vector<S> inv_norm(static_cast<size_t>(n));
    const S* src = x.values().data();
    for (int r = 0; r < n; ++r) {
      double ss = 0;
      for (int j = 0; j < d; ++j) ss += static_cast<double>(src[r * d + j]) * src[r * d + j];
      double norm = std::sqrt(ss);
      if (norm < 1e-12)
        throw DegenerateRowError("row_l2_normalize: row " + std::to_string(r) +
                                 " has near-zero norm");
      inv_norm[r] = S(1.0 / norm);
      for (int j = 0; j < d; ++j) v[r * d + j] = src[r * d + j] * inv_norm[r];
    }
    Tensor out = derived(x.shape(), std::move(v), x.needs_grad());
    if (out.needs_grad())
      record([xn = x.n_, on = out.n_, n, d, inv_norm = std::move(inv_norm)] {
        if (on->grad.empty()) return;
        ensure_grad(xn.get());
        for (int r = 0; r < n; ++r) {
          const S* g = on->grad.data() + r * d;
          const S* y = on->value.data() + r * d;
          S dot = 0;
          for (int j = 0; j < d; ++j) dot += g[j] * y[j];
          for (int j = 0; j < d; ++j) xn->grad[r * d + j] += inv_norm[r] * (g[j] - dot * y[j]);
        }
      });
    return out;
  }

  // ----------------------------------------------------------- soft(max)es
  Tensor softmax(const Tensor& x) { return softmax_impl(x, false); }
  Tensor log_softmax(const Tensor& x) { return softmax_impl(x, true); }

 private:
  Tensor derived(std::vector<int> shape, std::vector<S> value, bool needs) {
    Tensor t = Tensor::leaf(std::move(shape), std::move(value), false);
    t.n_->needs_grad = needs && recording_;
    return t;
  }

  static void ensure_grad(typename Tensor::Node* n) {
    if (n->grad.empty()) n->grad.assign(n->value.size(), S(0));
  }

  Tensor matmul_impl(const Tensor& a, const Tensor& b, long batch, int m, int k, int p,
                     bool broadcast_b) {
    std::vector<int> out_shape =
        a.rank() == 2 ? std::vector<int>{m, p} : std::vector<int>{static_cast<int>(batch), m, p};
    std::vector<S> v(static_cast<size_t>(batch) * m * p, S(0));
    const S* av = a.values().data();
    const S* bv = b.values().data();
    for (long t = 0; t < batch; ++t)
      detail::mm_nn_acc(av + t * static_cast<long>(m) * k,
                        bv + (broadcast_b ? 0 : t * static_cast<long>(k) * p),
                        v.data() + t * static_cast<long>(m) * p, m, k, p);
    Tensor out = derived(std::move(out_shape), std::move(v), a.needs_grad() || b.needs_grad());
    if (out.needs_grad())
      record([an = a.n_, bn = b.n_, on = out.n_, batch, m, k, p, broadcast_b] {
        if (on->grad.empty()) return;
        for (long t = 0; t < batch; ++t) {
          const S* go = on->grad.data() + t * static_cast<long>(m) * p;
          const S* av = an->value.data() + t * static_cast<long>(m) * k;
          const S* bv = bn->value.data() + (broadcast_b ? 0 : t * static_cast<long>(k) * p);
          if (an->needs_grad) {
            ensure_grad(an.get());
            detail::mm_nt_acc(go, bv, an->grad.data() + t * static_cast<long>(m) * k, m, p, k);
          }
          if (bn->needs_grad) {
            ensure_grad(bn.get());
            detail::mm_tn_acc(av, go,
                              bn->grad.data() + (broadcast_b ? 0 : t * static_cast<long>(k) * p), m,
                              k, p);
          }
        }
      });
    return out;
  }

  Tensor softmax_impl(const Tensor& x, bool log_form) {
    if (x.rank() < 1 || x.shape().back() == 0)
      throw ShapeError("softmax: empty axis in " + shape_str(x.shape()));
    int d = x.shape().back();
    long rows = x.numel() / d;
    std::vector<S> v(x.values().size());
    const S* src = x.values().data();
    for (long r = 0; r < rows; ++r) {
      const S* row = src + r * d;
#ifndef NDEBUG
      for (int j = 0; j < d; ++j)
        assert(!std::isnan(static_cast<double>(row[j])) && "softmax: NaN input");
#endif
      S mx = row[0];
      for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
      S denom = 0;
      for (int j = 0; j < d; ++j) denom += std::exp(row[j] - mx);
      if (log_form) {
        S log_denom = std::log(denom);
        for (int j = 0; j < d; ++j) v[r * d + j] = row[j] - mx - log_denom;
      } else {
        for (int j = 0; j < d; ++j) v[r * d + j] = std::exp(row[j] - mx) / denom;
      }
    }
    Tensor out = derived(x.shape(), std::move(v), x.needs_grad());
    if (out.needs_grad())
      record([xn = x.n_, on = out.n_, rows, d, log_form] {
        if (on->grad.empty()) return;
        ensure_grad(xn.get());
        for (long r = 0; r < rows; ++r) {
          const S* g = on->grad.data() + r * d;
          const S* y = on->value.data() + r * d;
          if (log_form) {
            // dx = g - softmax(x) * sum(g)
            S gsum = 0;
            for (int j = 0; j < d; ++j) gsum += g[j];
            for (int j = 0; j < d; ++j) xn->grad[r * d + j] += g[j] - std::exp(y[j]) * gsum;
          } else {
            S dot = 0;
            for (int j = 0; j < d; ++j) dot += g[j] * y[j];
            for (int j = 0; j < d; ++j) xn->grad[r * d + j] += y[j] * (g[j] - dot);
          }
        }
      });
    return out;
  }

  std::vector<std::function<void()>> steps_;
  bool recording_ = true;
  bool consumed_ = false;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

// Central-difference gradient oracle. The callable f must deterministically
// map (tape, x) to a scalar tensor; x is rebuilt per evaluation. Runs in the
// scalar type of F's instantiation; the test suites instantiate at double so
// the comparison is free of f32 rounding noise.
//
// Returns max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
template <typename S, typename F>
double finite_diff_check(F&& f, const std::vector<int>& shape, const std::vector<S>& x0,
                         double eps) {
  if (eps < 1e-4 || eps > 1e-2)
    throw ContractError("finite_diff_check: eps must lie in [1e-4, 1e-2]");

  auto eval = [&](const std::vector<S>& xs) -> S {
    TapeT<S> tape;
    tape.set_recording(false);
    auto x = TensorT<S>::leaf(shape, xs, false);
    return f(tape, x).item();
  };

  // Two base evaluations must agree bitwise, otherwise f has hidden state.
  S base0 = eval(x0);
  S base1 = eval(x0);
  if (std::memcmp(&base0, &base1, sizeof(S)) != 0)
    throw ContractError("finite_diff_check: f is not deterministic");

  TapeT<S> tape;
  auto x = TensorT<S>::leaf(shape, x0, true);
  auto y = f(tape, x);
  tape.backward(y);
  std::vector<S> analytic = x.has_grad() ? x.grad() : std::vector<S>(x0.size(), S(0));

  double max_err = 0;
  std::vector<S> xs = x0;
  for (size_t i = 0; i < xs.size(); ++i) {
    S keep = xs[i];
    xs[i] = keep + S(eps);
    double fp = static_cast<double>(eval(xs));
    xs[i] = keep - S(eps);
    double fm = static_cast<double>(eval(xs));
    xs[i] = keep;
    double numeric = (fp - fm) / (2.0 * eps);
    double a = static_cast<double>(analytic[i]);
    double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
    max_err = std::max(max_err, std::fabs(a - numeric) / denom);
  }
  return max_err;
}

}  // namespace divpatch
