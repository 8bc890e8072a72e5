// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pan/errors.hpp"

namespace pan {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major float64 array with an optional gradient buffer of the
/// same length. A default-constructed tensor is empty (rank 0, no data).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_dims();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool has_grad() const { return grad_.has_value(); }
  /// Allocates a zeroed gradient buffer if none exists.
  std::span<double> grad() {
    if (!grad_) grad_.emplace(data_.size(), 0.0);
    return *grad_;
  }
  std::span<const double> grad() const {
    if (!grad_) throw ContractViolation("tensor has no gradient buffer");
    return *grad_;
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
  }
  void drop_grad() { grad_.reset(); }

  /// Gradient buffer as a standalone tensor of the same shape.
  Tensor grad_tensor() const { return Tensor(shape_, std::vector<double>(grad().begin(), grad().end())); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
  std::optional<std::vector<double>> grad_;
};

namespace detail {

// C[M x P] += A[M x N] * B[N x P]; per output element the sum runs over n
// in ascending order.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                     std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * p;
    const double* arow = a + i * n;
    for (std::size_t k = 0; k < n; ++k) {
      const double av = arow[k];
      const double* brow = b + k * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M x N] += A[M x P] * B[N x P]^T
inline void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                        std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * p;
    for (std::size_t k = 0; k < n; ++k) {
      const double* brow = b + k * p;
      double s = 0.0;
      for (std::size_t j = 0; j < p; ++j) s += arow[j] * brow[j];
      c[i * n + k] += s;
    }
  }
}

// C[N x P] += A[M x N]^T * B[M x P]
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                        std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    const double* brow = b + i * p;
    for (std::size_t k = 0; k < n; ++k) {
      const double av = arow[k];
      double* crow = c + k * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

struct ConvGeometry {
  std::size_t batch, in_ch, height, width;
  std::size_t out_ch, kernel, stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_ch * kernel * kernel; }
  std::size_t positions() const { return out_h * out_w; }
};

inline ConvGeometry conv_geometry(const Shape& in, const Shape& k, std::size_t stride, std::size_t pad) {
  if (in.size() != 4 || k.size() != 4) {
    throw ShapeError("conv2d expects rank-4 input and kernel, got " + shape_str(in) + " and " + shape_str(k));
  }
  if (in[1] != k[1]) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(in) + ", kernel " + shape_str(k));
  }
  if (k[2] != k[3]) throw ShapeError("conv2d kernel must be square, got " + shape_str(k));
  if (stride == 0) throw ParameterError("conv2d stride must be >= 1");
  const std::size_t ks = k[2];
  if (ks > in[2] + 2 * pad || ks > in[3] + 2 * pad) {
    throw ShapeError("conv2d kernel " + shape_str(k) + " larger than padded input " + shape_str(in) +
                     " (pad " + std::to_string(pad) + ")");
  }
  ConvGeometry g{in[0], in[1], in[2], in[3], k[0], ks, stride, pad, 0, 0};
  g.out_h = (in[2] + 2 * pad - ks) / stride + 1;
  g.out_w = (in[3] + 2 * pad - ks) / stride + 1;
  return g;
}

// cols[(c*k+ky)*k+kx][oy*out_w+ox] for one sample.
inline void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const std::size_t pos = g.positions();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * pos;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            row[oy * g.out_w + ox] = inside ? img[(c * g.height + iy) * g.width + ix] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_acc(const double* cols, const ConvGeometry& g, double* img) {
  const std::size_t pos = g.positions();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * pos;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            img[(c * g.height + iy) * g.width + ix] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// c = a * b for a[M x N], b[N x P].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor c({a.dim(0), b.dim(1)});
  detail::gemm_acc(a.data().data(), b.data().data(), c.data().data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

/// Accumulates dL/da = g * b^T and dL/db = a^T * g into the grad buffers.
inline void matmul_backward(Tensor& a, Tensor& b, const Tensor& grad_c) {
  if (grad_c.rank() != 2 || grad_c.dim(0) != a.dim(0) || grad_c.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_backward gradient shape " + shape_str(grad_c.shape()) + " does not match " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1), p = b.dim(1);
  detail::gemm_nt_acc(grad_c.data().data(), b.data().data(), a.grad().data(), m, n, p);
  detail::gemm_tn_acc(a.data().data(), grad_c.data().data(), b.grad().data(), m, n, p);
}

/// Cross-correlation with zero padding. `bias` may be empty.
/// input [B x C x H x W], kernel [O x C x k x k] -> [B x O x H' x W'].
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                     std::size_t pad) {
  const auto g = detail::conv_geometry(input.shape(), kernel.shape(), stride, pad);
  if (!bias.empty() && bias.numel() != g.out_ch) {
    throw ShapeError("conv2d bias " + shape_str(bias.shape()) + " does not match kernel " +
                     shape_str(kernel.shape()));
  }
  Tensor out({g.batch, g.out_ch, g.out_h, g.out_w});
  const std::size_t pos = g.positions();
  std::vector<double> cols(g.patch() * pos);
  const double* w = kernel.data().data();
  for (std::size_t b = 0; b < g.batch; ++b) {
    detail::im2col(input.data().data() + b * g.in_ch * g.height * g.width, g, cols.data());
    double* o = out.data().data() + b * g.out_ch * pos;
    detail::gemm_acc(w, cols.data(), o, g.out_ch, g.patch(), pos);
    if (!bias.empty()) {
      for (std::size_t oc = 0; oc < g.out_ch; ++oc) {
        for (std::size_t i = 0; i < pos; ++i) o[oc * pos + i] += bias[oc];
      }
    }
  }
  return out;
}

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t pad) {
  return conv2d(input, kernel, Tensor{}, stride, pad);
}

/// Accumulates input, kernel and (when non-empty) bias gradients.
inline void conv2d_backward(Tensor& input, Tensor& kernel, Tensor& bias, std::size_t stride, std::size_t pad,
                            const Tensor& grad_out) {
  const auto g = detail::conv_geometry(input.shape(), kernel.shape(), stride, pad);
  const Shape expected{g.batch, g.out_ch, g.out_h, g.out_w};
  if (grad_out.shape() != expected) {
    throw ShapeError("conv2d_backward gradient " + shape_str(grad_out.shape()) + ", expected " +
                     shape_str(expected));
  }
  const std::size_t pos = g.positions();
  const std::size_t img = g.in_ch * g.height * g.width;
  std::vector<double> cols(g.patch() * pos);
  std::vector<double> dcols(g.patch() * pos);
  auto dw = kernel.grad();
  auto dx = input.grad();
  std::span<double> db = bias.empty() ? std::span<double>{} : bias.grad();
  for (std::size_t b = 0; b < g.batch; ++b) {
    const double* go = grad_out.data().data() + b * g.out_ch * pos;
    detail::im2col(input.data().data() + b * img, g, cols.data());
    detail::gemm_nt_acc(go, cols.data(), dw.data(), g.out_ch, g.patch(), pos);
    std::fill(dcols.begin(), dcols.end(), 0.0);
    detail::gemm_tn_acc(kernel.data().data(), go, dcols.data(), g.out_ch, g.patch(), pos);
    detail::col2im_acc(dcols.data(), g, dx.data() + b * img);
    if (!db.empty()) {
      for (std::size_t oc = 0; oc < g.out_ch; ++oc) {
        double s = 0.0;
        for (std::size_t i = 0; i < pos; ++i) s += go[oc * pos + i];
        db[oc] += s;
      }
    }
  }
}

/// Compares analytic gradients against central differences.
///
/// `loss(true)` must zero and refill the grad buffers of every tensor in
/// `params`; `loss(false)` only evaluates. Returns the maximum over all
/// entries of |analytic - numeric| / max(1, |analytic|, |numeric|).
template <typename LossFn>
double grad_check(LossFn&& loss, std::span<Tensor* const> params, double eps) {
  if (!(eps > 0.0)) throw ParameterError("grad_check eps must be positive");
  const double base = loss(true);
  if (!std::isfinite(base)) throw NumericalError("grad_check: non-finite loss at the unperturbed point");
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Tensor* p : params) {
    auto g = p->grad();
    analytic.emplace_back(g.begin(), g.end());
  }
  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t]->data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = loss(false);
      values[i] = saved - eps;
      const double down = loss(false);
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericalError("grad_check: non-finite loss while perturbing tensor " + std::to_string(t) +
                             " entry " + std::to_string(i));
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[t][i];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

inline double grad_check(const std::function<double(bool)>& loss, std::initializer_list<Tensor*> params,
                         double eps) {
  std::vector<Tensor*> v(params);
  return grad_check(loss, std::span<Tensor* const>(v), eps);
}

}  // namespace pan
