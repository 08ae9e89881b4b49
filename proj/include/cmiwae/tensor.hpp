// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace cmiwae {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;

  double* grad_data() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

}  // namespace detail

/// Dense row-major array of doubles with optional gradient tracking.
///
/// Copies are shallow: two Tensor values may share one buffer, the same way
/// a parameter handle and the network holding it do.
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->data.assign(1, 0.0);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    Tensor t(std::make_shared<detail::TensorImpl>());
    t.impl_->data.assign(shape_numel(shape), value);
    t.impl_->shape = std::move(shape);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false) {
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape));
    }
    Tensor t(std::make_shared<detail::TensorImpl>());
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }

  explicit Tensor(detail::ImplPtr impl) : impl_(std::move(impl)) {}

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t extent(std::size_t axis) const {
    if (axis >= dim()) throw ShapeError("extent: axis out of range");
    return impl_->shape[axis];
  }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> values() const { return impl_->data; }
  std::span<double> values() { return impl_->data; }
  const double* ptr() const { return impl_->data.data(); }
  double* ptr() { return impl_->data.data(); }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor is not a scalar");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> grad_mut() { return {impl_->grad_data(), numel()}; }
  void zero_grad() { impl_->grad.clear(); }

  /// Throws NumericError naming `what` if any value is NaN or infinite.
  void validate_finite(std::string_view what = "tensor") const {
    for (std::size_t i = 0; i < numel(); ++i) {
      if (!std::isfinite(impl_->data[i])) {
        throw NumericError(std::string(what) + ": non-finite value at flat index " +
                           std::to_string(i));
      }
    }
  }

  Tensor clone() const {
    return from(impl_->shape, impl_->data, false);
  }

  const detail::ImplPtr& impl() const { return impl_; }

 private:
  detail::ImplPtr impl_;
};

/// Ordered record of differentiable operations for one forward pass.
///
/// Ops append their backward closures as they execute, so inputs always
/// precede the ops that consume them. run_backward() visits every record
/// once in reverse and then drops the whole record.
class Tape {
 public:
  using Backward = std::function<void()>;

  void record(Backward fn) { ops_.push_back(std::move(fn)); }
  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  void run_backward() {
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

  static Tape& current() {
    thread_local Tape tape;
    return tape;
  }

 private:
  std::vector<Backward> ops_;
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

/// Disables tape recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

inline bool tracks(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t && t->requires_grad()) return true;
  }
  return false;
}

inline Tensor make_output(Shape shape, bool tracked) {
  Tensor out = Tensor::zeros(std::move(shape));
  out.set_requires_grad(tracked);
  return out;
}

// Strides of `in` viewed inside `out` under trailing alignment; broadcast
// dimensions get stride zero.
inline std::vector<std::size_t> broadcast_strides(const Shape& in,
                                                  const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[offset + i] = (in[i] == 1 && out[offset + i] != 1) ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Calls f(out_index, a_index, b_index) over every element of `out`.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t rank = out.size();
  const std::size_t total = shape_numel(out);
  if (total == 0) return;
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = out[rank - 1];
  const std::size_t ia_step = sa[rank - 1];
  const std::size_t ib_step = sb[rank - 1];
  std::vector<std::size_t> counter(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    std::size_t ja = ia, jb = ib;
    for (std::size_t k = 0; k < inner; ++k) {
      f(o + k, ja, jb);
      ja += ia_step;
      jb += ib_step;
    }
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++counter[d];
      ia += sa[d];
      ib += sb[d];
      if (counter[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      counter[d] = 0;
    }
  }
}

enum class BinaryKind { add, sub, mul, div };

inline Tensor binary(BinaryKind kind, const Tensor& a, const Tensor& b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  const bool tracked = tracks({&a, &b});
  Tensor out = make_output(out_shape, tracked);
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.ptr();
  switch (kind) {
    case BinaryKind::add:
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] + pb[j]; });
      break;
    case BinaryKind::sub:
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] - pb[j]; });
      break;
    case BinaryKind::mul:
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] * pb[j]; });
      break;
    case BinaryKind::div:
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] / pb[j]; });
      break;
  }
  if (tracked) {
    Tape::current().record([kind, ai = a.impl(), bi = b.impl(), oi = out.impl(),
                            out_shape, sa, sb] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      const double* va = ai->data.data();
      const double* vb = bi->data.data();
      double* ga = ai->requires_grad ? ai->grad_data() : nullptr;
      double* gb = bi->requires_grad ? bi->grad_data() : nullptr;
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
        switch (kind) {
          case BinaryKind::add:
            if (ga) ga[i] += g[o];
            if (gb) gb[j] += g[o];
            break;
          case BinaryKind::sub:
            if (ga) ga[i] += g[o];
            if (gb) gb[j] -= g[o];
            break;
          case BinaryKind::mul:
            if (ga) ga[i] += g[o] * vb[j];
            if (gb) gb[j] += g[o] * va[i];
            break;
          case BinaryKind::div:
            if (ga) ga[i] += g[o] / vb[j];
            if (gb) gb[j] -= g[o] * va[i] / (vb[j] * vb[j]);
            break;
        }
      });
    });
  }
  return out;
}

// y = f(x) elementwise; dy/dx = df(x, y).
template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  const bool tracked = tracks({&x});
  Tensor out = make_output(x.shape(), tracked);
  const double* px = x.ptr();
  double* po = out.ptr();
  for (std::size_t i = 0; i < x.numel(); ++i) po[i] = f(px[i]);
  if (tracked) {
    Tape::current().record([xi = x.impl(), oi = out.impl(), df] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      double* gx = xi->grad_data();
      const double* g = oi->grad.data();
      for (std::size_t i = 0; i < xi->data.size(); ++i) {
        gx[i] += g[i] * df(xi->data[i], oi->data[i]);
      }
    });
  }
  return out;
}

inline double softplus_value(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " invalid for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

inline std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinaryKind::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinaryKind::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinaryKind::mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinaryKind::div, a, b); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }

inline Tensor neg(const Tensor& x) {
  return detail::unary(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}
inline Tensor operator-(const Tensor& x) { return neg(x); }

inline Tensor exp(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0.0)) throw DomainError("log of nonpositive value " + std::to_string(v));
  }
  return detail::unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary(x, detail::softplus_value,
                       [](double v, double) { return detail::sigmoid_value(v); });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(x, detail::sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

/// Same values, no tracking; gradients never flow back through the result.
inline Tensor detach(const Tensor& x) { return x.clone(); }

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  const bool tracked = detail::tracks({&x});
  Tensor out = Tensor::from(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()));
  out.set_requires_grad(tracked);
  if (tracked) {
    Tape::current().record([xi = x.impl(), oi = out.impl()] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      double* gx = xi->grad_data();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) gx[i] += oi->grad[i];
    });
  }
  return out;
}

/// Sums over `axes`; reduced dimensions are dropped unless keepdim.
inline Tensor sum(const Tensor& x, std::vector<long> axes, bool keepdim = false) {
  const std::size_t rank = x.dim();
  Shape kept = x.shape();
  std::vector<bool> reduced(rank, false);
  for (long a : axes) reduced[detail::normalize_axis(a, rank)] = true;
  Shape dropped;
  for (std::size_t i = 0; i < rank; ++i) {
    if (reduced[i]) kept[i] = 1;
    else dropped.push_back(x.shape()[i]);
  }
  const auto sx = detail::contiguous_strides(x.shape());
  const auto sy = detail::broadcast_strides(kept, x.shape());
  const bool tracked = detail::tracks({&x});
  Tensor out = detail::make_output(keepdim ? kept : dropped, tracked);
  const double* px = x.ptr();
  double* po = out.ptr();
  detail::for_each_broadcast(x.shape(), sx, sy, [&](std::size_t, std::size_t i, std::size_t j) { po[j] += px[i]; });
  if (tracked) {
    Tape::current().record([xi = x.impl(), oi = out.impl(), sx, sy] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      double* gx = xi->grad_data();
      const double* g = oi->grad.data();
      detail::for_each_broadcast(xi->shape, sx, sy, [&](std::size_t, std::size_t i, std::size_t j) { gx[i] += g[j]; });
    });
  }
  return out;
}

inline Tensor sum_all(const Tensor& x) {
  std::vector<long> axes(x.dim());
  std::iota(axes.begin(), axes.end(), 0L);
  return sum(x, axes);
}

inline Tensor mean(const Tensor& x, std::vector<long> axes, bool keepdim = false) {
  std::size_t count = 1;
  for (long a : axes) count *= x.shape()[detail::normalize_axis(a, x.dim())];
  return sum(x, std::move(axes), keepdim) * (1.0 / static_cast<double>(count));
}

/// log Σ exp(x) along one axis, computed as max + log Σ exp(x - max).
inline Tensor logsumexp(const Tensor& x, long axis, bool keepdim = false) {
  const std::size_t rank = x.dim();
  const std::size_t ax = detail::normalize_axis(axis, rank);
  Shape kept = x.shape();
  kept[ax] = 1;
  Shape dropped = x.shape();
  dropped.erase(dropped.begin() + static_cast<long>(ax));
  const auto sx = detail::contiguous_strides(x.shape());
  const auto sy = detail::broadcast_strides(kept, x.shape());
  const std::size_t n_out = shape_numel(kept);
  std::vector<double> mx(n_out, -std::numeric_limits<double>::infinity());
  std::vector<double> acc(n_out, 0.0);
  const double* px = x.ptr();
  detail::for_each_broadcast(x.shape(), sx, sy, [&](std::size_t, std::size_t i, std::size_t j) { mx[j] = std::max(mx[j], px[i]); });
  detail::for_each_broadcast(x.shape(), sx, sy, [&](std::size_t, std::size_t i, std::size_t j) { acc[j] += std::exp(px[i] - mx[j]); });
  const bool tracked = detail::tracks({&x});
  Tensor out = detail::make_output(keepdim ? kept : dropped, tracked);
  double* po = out.ptr();
  for (std::size_t j = 0; j < n_out; ++j) po[j] = mx[j] + std::log(acc[j]);
  if (tracked) {
    Tape::current().record([xi = x.impl(), oi = out.impl(), sx, sy] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      double* gx = xi->grad_data();
      const double* g = oi->grad.data();
      const double* y = oi->data.data();
      const double* v = xi->data.data();
      detail::for_each_broadcast(xi->shape, sx, sy, [&](std::size_t, std::size_t i, std::size_t j) {
        gx[i] += g[j] * std::exp(v[i] - y[j]);
      });
    });
  }
  return out;
}

/// Standard 2-D matrix product; [m,k]·[k,n] -> [m,n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto m = static_cast<Eigen::Index>(a.shape()[0]);
  const auto k = static_cast<Eigen::Index>(a.shape()[1]);
  const auto n = static_cast<Eigen::Index>(b.shape()[1]);
  const bool tracked = detail::tracks({&a, &b});
  Tensor out = detail::make_output({a.shape()[0], b.shape()[1]}, tracked);
  Eigen::Map<RowMat>(out.ptr(), m, n).noalias() =
      Eigen::Map<const RowMat>(a.ptr(), m, k) * Eigen::Map<const RowMat>(b.ptr(), k, n);
  if (tracked) {
    Tape::current().record([ai = a.impl(), bi = b.impl(), oi = out.impl(), m, k, n] {
      if (oi->grad.empty()) return;
      Eigen::Map<const RowMat> g(oi->grad.data(), m, n);
      if (ai->requires_grad) {
        Eigen::Map<RowMat>(ai->grad_data(), m, k).noalias() +=
            g * Eigen::Map<const RowMat>(bi->data.data(), k, n).transpose();
      }
      if (bi->requires_grad) {
        Eigen::Map<RowMat>(bi->grad_data(), k, n).noalias() +=
            Eigen::Map<const RowMat>(ai->data.data(), m, k).transpose() * g;
      }
    });
  }
  return out;
}

/// Concatenates along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, long axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const std::size_t rank = parts[0].dim();
  const std::size_t ax = detail::normalize_axis(axis, rank);
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  bool tracked = false;
  for (const Tensor& p : parts) {
    if (p.dim() != rank) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < rank; ++i) {
      if (i != ax && p.shape()[i] != parts[0].shape()[i]) {
        throw ShapeError("concat extent mismatch: " + shape_str(p.shape()) + " vs " +
                         shape_str(parts[0].shape()));
      }
    }
    out_shape[ax] += p.shape()[ax];
    tracked = tracked || detail::tracks({&p});
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out_shape[i];
  for (std::size_t i = ax + 1; i < rank; ++i) inner *= out_shape[i];
  const std::size_t out_row = out_shape[ax] * inner;
  Tensor out = detail::make_output(out_shape, tracked);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t row = p.shape()[ax] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.ptr() + o * row, row, out.ptr() + o * out_row + offset);
    }
    offset += row;
  }
  if (tracked) {
    std::vector<detail::ImplPtr> impls;
    for (const Tensor& p : parts) impls.push_back(p.impl());
    Tape::current().record([impls, oi = out.impl(), offsets, outer, inner, out_row, ax] {
      if (oi->grad.empty()) return;
      for (std::size_t n = 0; n < impls.size(); ++n) {
        if (!impls[n]->requires_grad) continue;
        const std::size_t row = impls[n]->shape[ax] * inner;
        double* g = impls[n]->grad_data();
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = oi->grad.data() + o * out_row + offsets[n];
          for (std::size_t i = 0; i < row; ++i) g[o * row + i] += src[i];
        }
      }
    });
  }
  return out;
}

/// Half-open range [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, long axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::normalize_axis(axis, x.dim());
  if (begin > end || end > x.shape()[ax]) throw ShapeError("slice out of range");
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out_shape[i];
  for (std::size_t i = ax + 1; i < x.dim(); ++i) inner *= out_shape[i];
  const std::size_t in_row = x.shape()[ax] * inner;
  const std::size_t out_row = (end - begin) * inner;
  const bool tracked = detail::tracks({&x});
  Tensor out = detail::make_output(out_shape, tracked);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.ptr() + o * in_row + begin * inner, out_row, out.ptr() + o * out_row);
  }
  if (tracked) {
    Tape::current().record([xi = x.impl(), oi = out.impl(), outer, inner, in_row, out_row, begin] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      double* gx = xi->grad_data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < out_row; ++i) {
          gx[o * in_row + begin * inner + i] += oi->grad[o * out_row + i];
        }
      }
    });
  }
  return out;
}

/// Rows of a [R, C] table picked by index; result is [indices.size(), C].
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& indices) {
  if (table.dim() != 2) throw ShapeError("gather_rows expects a 2-D table");
  const std::size_t cols = table.shape()[1];
  for (std::size_t r : indices) {
    if (r >= table.shape()[0]) throw ShapeError("gather_rows index out of range");
  }
  const bool tracked = detail::tracks({&table});
  Tensor out = detail::make_output({indices.size(), cols}, tracked);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(table.ptr() + indices[i] * cols, cols, out.ptr() + i * cols);
  }
  if (tracked) {
    Tape::current().record([ti = table.impl(), oi = out.impl(), indices, cols] {
      if (oi->grad.empty() || !ti->requires_grad) return;
      double* g = ti->grad_data();
      for (std::size_t i = 0; i < indices.size(); ++i) {
        for (std::size_t c = 0; c < cols; ++c) g[indices[i] * cols + c] += oi->grad[i * cols + c];
      }
    });
  }
  return out;
}

/// Per-block gradient multipliers that are filled in after the forward pass.
struct GradientScale {
  std::vector<double> factors;
};

/// Identity in the forward pass. In backward, the incoming gradient of block
/// b (numel / factors.size() consecutive elements) is multiplied by
/// scale->factors[b]. The factors may be written any time before backward().
inline Tensor rescale_gradient(const Tensor& x, std::shared_ptr<const GradientScale> scale) {
  const bool tracked = detail::tracks({&x});
  Tensor out = Tensor::from(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
  out.set_requires_grad(tracked);
  if (tracked) {
    Tape::current().record([xi = x.impl(), oi = out.impl(), scale] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      const std::size_t blocks = scale->factors.size();
      if (blocks == 0 || oi->grad.size() % blocks != 0) {
        throw ShapeError("rescale_gradient: factor count does not tile the tensor");
      }
      const std::size_t block = oi->grad.size() / blocks;
      double* gx = xi->grad_data();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        gx[i] += oi->grad[i] * scale->factors[i / block];
      }
    });
  }
  return out;
}

/// Seeds d(loss)/d(loss) = 1 and replays the current thread's tape.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    Tape::current().clear();
    return;
  }
  loss.impl()->grad_data()[0] += 1.0;
  Tape::current().run_backward();
}

}  // namespace cmiwae
