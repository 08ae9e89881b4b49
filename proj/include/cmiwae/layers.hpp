// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cmiwae/random.hpp"
#include "cmiwae/tensor.hpp"

namespace cmiwae {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

struct ConvGeometry {
  std::size_t channels, in_w, in_h, kernel, stride, pad, out_w, out_h;
  std::size_t rows() const { return channels * kernel * kernel; }
  std::size_t cols() const { return out_w * out_h; }
};

// Unfolds one [C, in_w, in_h] image into [C*k*k, out_w*out_h] patches.
inline void im2col(const double* src, const ConvGeometry& g, double* cols) {
  const std::size_t plane = g.out_w * g.out_h;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * plane;
        for (std::size_t ow = 0; ow < g.out_w; ++ow) {
          const long iw = static_cast<long>(ow * g.stride + ki) - static_cast<long>(g.pad);
          double* dst = row + ow * g.out_h;
          if (iw < 0 || iw >= static_cast<long>(g.in_w)) {
            std::fill_n(dst, g.out_h, 0.0);
            continue;
          }
          const double* src_row = src + (c * g.in_w + static_cast<std::size_t>(iw)) * g.in_h;
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const long ih = static_cast<long>(oh * g.stride + kj) - static_cast<long>(g.pad);
            dst[oh] = (ih < 0 || ih >= static_cast<long>(g.in_h)) ? 0.0 : src_row[ih];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters patches back, accumulating into dst.
inline void col2im(const double* cols, const ConvGeometry& g, double* dst) {
  const std::size_t plane = g.out_w * g.out_h;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * plane;
        for (std::size_t ow = 0; ow < g.out_w; ++ow) {
          const long iw = static_cast<long>(ow * g.stride + ki) - static_cast<long>(g.pad);
          if (iw < 0 || iw >= static_cast<long>(g.in_w)) continue;
          double* dst_row = dst + (c * g.in_w + static_cast<std::size_t>(iw)) * g.in_h;
          const double* src = row + ow * g.out_h;
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const long ih = static_cast<long>(oh * g.stride + kj) - static_cast<long>(g.pad);
            if (ih >= 0 && ih < static_cast<long>(g.in_h)) dst_row[ih] += src[oh];
          }
        }
      }
    }
  }
}

inline void add_channel_bias(double* out, const double* bias, std::size_t channels, std::size_t plane) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] += bias[c];
  }
}

inline void bias_grad(const double* g, double* gb, std::size_t channels, std::size_t plane) {
  for (std::size_t c = 0; c < channels; ++c) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += g[c * plane + p];
    gb[c] += s;
  }
}

}  // namespace detail

/// Zero-padded 2-D convolution of x [N, Cin, W, H] with kernel
/// [Cout, Cin, k, k]. Output extents are (W + 2*pad - k) / stride + 1.
namespace fault {

/// Multiplier applied to conv2d kernel gradients. Only the gradient-check
/// negative control sets it to anything other than 1.
inline thread_local double conv_kernel_grad_scale = 1.0;

}  // namespace fault

inline Tensor conv2d(const Tensor& x, const Tensor& kernel, const std::optional<Tensor>& bias,
                     std::size_t stride, std::size_t pad) {
  if (x.dim() != 4 || kernel.dim() != 4) throw ShapeError("conv2d expects 4-D input and kernel");
  const std::size_t n = x.shape()[0], cin = x.shape()[1], w = x.shape()[2], h = x.shape()[3];
  const std::size_t cout = kernel.shape()[0], k = kernel.shape()[2];
  if (kernel.shape()[1] != cin) {
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(cin) +
                     ", kernel expects " + std::to_string(kernel.shape()[1]));
  }
  if (stride > 1 && (w % stride != 0 || h % stride != 0)) {
    throw ShapeError("conv2d: extents " + std::to_string(w) + "x" + std::to_string(h) +
                     " not divisible by stride " + std::to_string(stride));
  }
  if (w + 2 * pad < k || h + 2 * pad < k) throw ShapeError("conv2d: kernel larger than padded input");
  if (bias && (bias->dim() != 1 || bias->shape()[0] != cout)) throw ShapeError("conv2d bias shape");
  const detail::ConvGeometry g{cin, w, h, k, stride, pad, (w + 2 * pad - k) / stride + 1,
                               (h + 2 * pad - k) / stride + 1};
  const bool tracked = bias ? detail::tracks({&x, &kernel, &*bias}) : detail::tracks({&x, &kernel});
  Tensor out = detail::make_output({n, cout, g.out_w, g.out_h}, tracked);
  const auto rows = static_cast<Eigen::Index>(g.rows());
  const auto cols = static_cast<Eigen::Index>(g.cols());
  std::vector<double> buf(g.rows() * g.cols());
  detail::CMapMat kmat(kernel.ptr(), static_cast<Eigen::Index>(cout), rows);
  for (std::size_t i = 0; i < n; ++i) {
    detail::im2col(x.ptr() + i * cin * w * h, g, buf.data());
    detail::MapMat(out.ptr() + i * cout * g.cols(), static_cast<Eigen::Index>(cout), cols).noalias() =
        kmat * detail::CMapMat(buf.data(), rows, cols);
    if (bias) detail::add_channel_bias(out.ptr() + i * cout * g.cols(), bias->ptr(), cout, g.cols());
  }
  if (tracked) {
    detail::ImplPtr bi = bias ? bias->impl() : nullptr;
    Tape::current().record([xi = x.impl(), ki = kernel.impl(), bi, oi = out.impl(), g, n, cout] {
      if (oi->grad.empty()) return;
      const auto rows = static_cast<Eigen::Index>(g.rows());
      const auto cols = static_cast<Eigen::Index>(g.cols());
      const auto co = static_cast<Eigen::Index>(cout);
      const std::size_t in_plane = g.channels * g.in_w * g.in_h;
      std::vector<double> buf(g.rows() * g.cols());
      std::vector<double> gbuf(g.rows() * g.cols());
      detail::CMapMat kmat(ki->data.data(), co, rows);
      for (std::size_t i = 0; i < n; ++i) {
        detail::CMapMat gi(oi->grad.data() + i * cout * g.cols(), co, cols);
        if (ki->requires_grad) {
          detail::im2col(xi->data.data() + i * in_plane, g, buf.data());
          detail::MapMat(ki->grad_data(), co, rows).noalias() +=
              fault::conv_kernel_grad_scale * gi * detail::CMapMat(buf.data(), rows, cols).transpose();
        }
        if (xi->requires_grad) {
          detail::MapMat(gbuf.data(), rows, cols).noalias() = kmat.transpose() * gi;
          detail::col2im(gbuf.data(), g, xi->grad_data() + i * in_plane);
        }
        if (bi && bi->requires_grad) {
          detail::bias_grad(oi->grad.data() + i * cout * g.cols(), bi->grad_data(), cout, g.cols());
        }
      }
    });
  }
  return out;
}

/// Transposed convolution (the adjoint of conv2d) of x [N, Cin, W, H] with
/// kernel [Cin, Cout, k, k]. Output extents are
/// (W - 1) * stride - 2 * pad + k + output_pad.
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& kernel, const std::optional<Tensor>& bias,
                               std::size_t stride, std::size_t pad, std::size_t output_pad) {
  if (x.dim() != 4 || kernel.dim() != 4) throw ShapeError("conv_transpose2d expects 4-D input and kernel");
  const std::size_t n = x.shape()[0], cin = x.shape()[1], w = x.shape()[2], h = x.shape()[3];
  const std::size_t cout = kernel.shape()[1], k = kernel.shape()[2];
  if (kernel.shape()[0] != cin) {
    throw ShapeError("conv_transpose2d channel mismatch: input has " + std::to_string(cin) +
                     ", kernel expects " + std::to_string(kernel.shape()[0]));
  }
  if (bias && (bias->dim() != 1 || bias->shape()[0] != cout)) throw ShapeError("conv_transpose2d bias shape");
  const std::size_t ow = (w - 1) * stride + k + output_pad - 2 * pad;
  const std::size_t oh = (h - 1) * stride + k + output_pad - 2 * pad;
  // Geometry of the forward convolution this op is the adjoint of.
  const detail::ConvGeometry g{cout, ow, oh, k, stride, pad, w, h};
  const bool tracked = bias ? detail::tracks({&x, &kernel, &*bias}) : detail::tracks({&x, &kernel});
  Tensor out = detail::make_output({n, cout, ow, oh}, tracked);
  const auto rows = static_cast<Eigen::Index>(g.rows());
  const auto cols = static_cast<Eigen::Index>(g.cols());
  const auto ci = static_cast<Eigen::Index>(cin);
  std::vector<double> buf(g.rows() * g.cols());
  detail::CMapMat kmat(kernel.ptr(), ci, rows);
  for (std::size_t i = 0; i < n; ++i) {
    detail::MapMat(buf.data(), rows, cols).noalias() =
        kmat.transpose() * detail::CMapMat(x.ptr() + i * cin * w * h, ci, cols);
    detail::col2im(buf.data(), g, out.ptr() + i * cout * ow * oh);
    if (bias) detail::add_channel_bias(out.ptr() + i * cout * ow * oh, bias->ptr(), cout, ow * oh);
  }
  if (tracked) {
    detail::ImplPtr bi = bias ? bias->impl() : nullptr;
    Tape::current().record([xi = x.impl(), ki = kernel.impl(), bi, oi = out.impl(), g, n, cin, cout] {
      if (oi->grad.empty()) return;
      const auto rows = static_cast<Eigen::Index>(g.rows());
      const auto cols = static_cast<Eigen::Index>(g.cols());
      const auto ci = static_cast<Eigen::Index>(cin);
      const std::size_t out_plane = cout * g.in_w * g.in_h;
      std::vector<double> gcols(g.rows() * g.cols());
      detail::CMapMat kmat(ki->data.data(), ci, rows);
      for (std::size_t i = 0; i < n; ++i) {
        detail::im2col(oi->grad.data() + i * out_plane, g, gcols.data());
        detail::CMapMat gc(gcols.data(), rows, cols);
        if (xi->requires_grad) {
          detail::MapMat(xi->grad_data() + i * cin * g.cols(), ci, cols).noalias() += kmat * gc;
        }
        if (ki->requires_grad) {
          detail::MapMat(ki->grad_data(), ci, rows).noalias() +=
              detail::CMapMat(xi->data.data() + i * cin * g.cols(), ci, cols) * gc.transpose();
        }
        if (bi && bi->requires_grad) {
          detail::bias_grad(oi->grad.data() + i * out_plane, bi->grad_data(), cout, g.in_w * g.in_h);
        }
      }
    });
  }
  return out;
}

/// Per-channel normalization of x [N, C, ...] over the batch and all
/// trailing axes. Training mode normalizes with batch statistics and
/// updates the running estimates by exponential moving average; inference
/// mode applies the running estimates only.
inline Tensor batch_norm(const Tensor& x, const Tensor& scale, const Tensor& shift, Tensor& running_mean,
                         Tensor& running_var, bool training, double momentum, double eps) {
  if (x.dim() < 2) throw ShapeError("batch_norm expects at least [N, C]");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const std::size_t inner = x.numel() / (n * c);
  const std::size_t count = n * inner;
  if (scale.numel() != c || shift.numel() != c) throw ShapeError("batch_norm parameter shape");
  std::vector<double> mu(c, 0.0), inv_std(c, 0.0);
  const double* px = x.ptr();
  if (training) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = px + (b * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) s += p[i];
      }
      mu[ch] = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = px + (b * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) v += (p[i] - mu[ch]) * (p[i] - mu[ch]);
      }
      v /= static_cast<double>(count);
      inv_std[ch] = 1.0 / std::sqrt(v + eps);
      const double unbiased = count > 1 ? v * static_cast<double>(count) / static_cast<double>(count - 1) : v;
      running_mean.ptr()[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mu[ch];
      running_var.ptr()[ch] = (1.0 - momentum) * running_var[ch] + momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(running_var[ch] + eps);
    }
  }
  const bool tracked = detail::tracks({&x, &scale, &shift});
  Tensor out = detail::make_output(x.shape(), tracked);
  std::vector<double> xhat(x.numel());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        xhat[base + i] = (px[base + i] - mu[ch]) * inv_std[ch];
        out.ptr()[base + i] = scale[ch] * xhat[base + i] + shift[ch];
      }
    }
  }
  if (tracked) {
    Tape::current().record([xi = x.impl(), si = scale.impl(), hi = shift.impl(), oi = out.impl(),
                            xhat = std::move(xhat), inv_std, n, c, inner, count, training] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      for (std::size_t ch = 0; ch < c; ++ch) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t base = (b * c + ch) * inner;
          for (std::size_t i = 0; i < inner; ++i) {
            sum_g += g[base + i];
            sum_gx += g[base + i] * xhat[base + i];
          }
        }
        if (si->requires_grad) si->grad_data()[ch] += sum_gx;
        if (hi->requires_grad) hi->grad_data()[ch] += sum_g;
        if (!xi->requires_grad) continue;
        double* gx = xi->grad_data();
        const double gamma = si->data[ch];
        const double m = static_cast<double>(count);
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t base = (b * c + ch) * inner;
          for (std::size_t i = 0; i < inner; ++i) {
            if (training) {
              gx[base + i] += gamma * inv_std[ch] / m *
                              (m * g[base + i] - sum_g - xhat[base + i] * sum_gx);
            } else {
              gx[base + i] += gamma * inv_std[ch] * g[base + i];
            }
          }
        }
      }
    });
  }
  return out;
}

/// Inverted dropout: zeroes each element with probability p and scales the
/// survivors by 1/(1-p). Identity when not training or p == 0.
inline Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) return x * 0.0;
  std::bernoulli_distribution keep(1.0 - p);
  const double scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = keep(rng) ? scale : 0.0;
  return x * Tensor::from(x.shape(), std::move(mask));
}

/// Named handle to a tensor owned by a layer.
struct NamedTensor {
  std::string name;
  Tensor value;
  bool decay = true;  // subject to weight decay
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) values.
inline Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (double& e : v) e = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

/// Per-call switches for layers that behave differently while training.
struct ForwardMode {
  bool training = false;
  Rng* rng = nullptr;  // dropout draws; required when training
};

struct ConvLayer {
  Tensor kernel;  // [out, in, k, k], or [in, out, k, k] when transposed
  Tensor bias;    // [out]
  std::size_t stride = 1;
  bool transposed = false;

  ConvLayer() = default;
  ConvLayer(std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t stride_, bool transposed_, Rng& rng)
      : stride(stride_), transposed(transposed_) {
    if (k % 2 == 0) throw ShapeError("kernel size must be odd");
    kernel = transposed ? uniform_init({in_ch, out_ch, k, k}, in_ch * k * k, rng)
                        : uniform_init({out_ch, in_ch, k, k}, in_ch * k * k, rng);
    bias = Tensor::zeros({out_ch}, true);
  }

  std::size_t in_channels() const { return transposed ? kernel.shape()[0] : kernel.shape()[1]; }
  std::size_t out_channels() const { return transposed ? kernel.shape()[1] : kernel.shape()[0]; }
  std::size_t kernel_size() const { return kernel.shape()[2]; }

  Tensor forward(const Tensor& x) const {
    const std::size_t pad = kernel_size() / 2;
    if (transposed) return conv_transpose2d(x, kernel, bias, stride, pad, stride - 1);
    return conv2d(x, kernel, bias, stride, pad);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor>& params) const {
    params.push_back({prefix + ".kernel", kernel, true});
    params.push_back({prefix + ".bias", bias, false});
  }
};

struct NormLayer {
  Tensor scale, shift;                 // fittable
  Tensor running_mean, running_var;    // buffers
  double momentum = 0.1;
  double eps = 1e-5;

  NormLayer() = default;
  explicit NormLayer(std::size_t channels)
      : scale(Tensor::full({channels}, 1.0, true)),
        shift(Tensor::zeros({channels}, true)),
        running_mean(Tensor::zeros({channels})),
        running_var(Tensor::full({channels}, 1.0)) {}

  Tensor forward(const Tensor& x, const ForwardMode& mode) {
    return batch_norm(x, scale, shift, running_mean, running_var, mode.training, momentum, eps);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor>& params,
               std::vector<NamedTensor>& buffers) const {
    params.push_back({prefix + ".scale", scale, false});
    params.push_back({prefix + ".shift", shift, false});
    buffers.push_back({prefix + ".running_mean", running_mean, false});
    buffers.push_back({prefix + ".running_var", running_var, false});
  }
};

struct DropoutLayer {
  double p = 0.0;

  Tensor forward(const Tensor& x, const ForwardMode& mode) const {
    if (!mode.training || p <= 0.0) return x;
    if (!mode.rng) throw Error("dropout in training mode needs an rng");
    return dropout(x, p, true, *mode.rng);
  }
};

/// Single affine map x [N, in] -> [N, out].
struct LinearLayer {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  LinearLayer() = default;
  LinearLayer(std::size_t in, std::size_t out, Rng& rng)
      : weight(uniform_init({in, out}, in, rng)), bias(Tensor::zeros({out}, true)) {}

  Tensor forward(const Tensor& x) const { return matmul(x, weight) + bias; }

  void collect(const std::string& prefix, std::vector<NamedTensor>& params) const {
    params.push_back({prefix + ".weight", weight, true});
    params.push_back({prefix + ".bias", bias, false});
  }
};

}  // namespace cmiwae
