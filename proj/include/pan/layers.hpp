// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "pan/errors.hpp"
#include "pan/rng.hpp"
#include "pan/tensor.hpp"

namespace pan {

// ---------------------------------------------------------------------------
// Batch-normalization statistics
// ---------------------------------------------------------------------------

/// Statistics and affine parameters of one BN layer.
struct BNLayerStats {
  std::vector<double> mean;
  std::vector<double> var;
  std::vector<double> gamma;
  std::vector<double> beta;
  double eps = 1e-5;

  std::size_t channels() const { return mean.size(); }

  void validate() const {
    const std::size_t d = mean.size();
    if (var.size() != d || gamma.size() != d || beta.size() != d) {
      throw ConfigError("BN stats vectors disagree in length (mean " + std::to_string(d) + ", var " +
                        std::to_string(var.size()) + ", gamma " + std::to_string(gamma.size()) + ", beta " +
                        std::to_string(beta.size()) + ")");
    }
    for (double v : var) {
      if (!(v >= 0.0)) throw ConfigError("BN variance must be non-negative");
    }
    if (!(eps >= 0.0)) throw ConfigError("BN eps must be non-negative");
  }

  friend bool operator==(const BNLayerStats&, const BNLayerStats&) = default;
};

/// One BNLayerStats per BN layer of a model, in forward order.
struct BNStatsSet {
  std::vector<BNLayerStats> layers;

  std::size_t size() const { return layers.size(); }

  bool same_layout(const BNStatsSet& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].channels() != other.layers[i].channels()) return false;
    }
    return true;
  }

  friend bool operator==(const BNStatsSet&, const BNStatsSet&) = default;
};

/// Biased per-channel batch moments.
struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;
};

enum class BnMode { kUseStored, kUseBatch };

namespace detail {

struct ChannelLayout {
  std::size_t batch, channels, spatial;
};

inline ChannelLayout channel_layout(const Tensor& f) {
  if (f.empty()) throw ContractViolation("batch statistics of an empty tensor");
  if (f.rank() < 2) throw ShapeError("BN input must have rank >= 2, got " + shape_str(f.shape()));
  std::size_t spatial = 1;
  for (std::size_t i = 2; i < f.rank(); ++i) spatial *= f.dim(i);
  return {f.dim(0), f.dim(1), spatial};
}

}  // namespace detail

/// Per-channel mean and biased variance over the B*L positions of f[B x D x ...].
inline BatchStats batch_stats(const Tensor& f) {
  const auto lay = detail::channel_layout(f);
  const double n = static_cast<double>(lay.batch * lay.spatial);
  BatchStats s{std::vector<double>(lay.channels, 0.0), std::vector<double>(lay.channels, 0.0)};
  const auto x = f.data();
  for (std::size_t c = 0; c < lay.channels; ++c) {
    double sum = 0.0;
    for (std::size_t b = 0; b < lay.batch; ++b) {
      const double* p = x.data() + (b * lay.channels + c) * lay.spatial;
      for (std::size_t l = 0; l < lay.spatial; ++l) sum += p[l];
    }
    const double mu = sum / n;
    double sq = 0.0;
    for (std::size_t b = 0; b < lay.batch; ++b) {
      const double* p = x.data() + (b * lay.channels + c) * lay.spatial;
      for (std::size_t l = 0; l < lay.spatial; ++l) sq += (p[l] - mu) * (p[l] - mu);
    }
    s.mean[c] = mu;
    s.var[c] = sq / n;
  }
  return s;
}

/// gamma * (f - mu) / sqrt(var + eps) + beta, per channel.
///
/// In kUseBatch mode mu and var are the batch moments of f, written to
/// `batch_out` when given; in kUseStored mode `stats.mean/var` are used.
inline Tensor bn_forward(const Tensor& f, const BNLayerStats& stats, BnMode mode,
                         BatchStats* batch_out = nullptr) {
  const auto lay = detail::channel_layout(f);
  stats.validate();
  if (lay.channels != stats.channels()) {
    throw ShapeError("BN channel mismatch: input " + shape_str(f.shape()) + " vs stats with " +
                     std::to_string(stats.channels()) + " channels");
  }
  BatchStats local;
  const std::vector<double>* mu = &stats.mean;
  const std::vector<double>* var = &stats.var;
  if (mode == BnMode::kUseBatch) {
    if (lay.batch * lay.spatial < 2) {
      throw ContractViolation("use-batch BN needs at least two positions per channel, got " +
                              shape_str(f.shape()));
    }
    local = batch_stats(f);
    mu = &local.mean;
    var = &local.var;
  }
  Tensor out(f.shape());
  const auto x = f.data();
  auto y = out.data();
  for (std::size_t c = 0; c < lay.channels; ++c) {
    const double inv = 1.0 / std::sqrt((*var)[c] + stats.eps);
    const double m = (*mu)[c], g = stats.gamma[c], b0 = stats.beta[c];
    for (std::size_t b = 0; b < lay.batch; ++b) {
      const std::size_t off = (b * lay.channels + c) * lay.spatial;
      for (std::size_t l = 0; l < lay.spatial; ++l) y[off + l] = g * ((x[off + l] - m) * inv) + b0;
    }
  }
  if (batch_out && mode == BnMode::kUseBatch) *batch_out = std::move(local);
  return out;
}

// ---------------------------------------------------------------------------
// Layers. Each stores what its backward needs during forward_train.
// ---------------------------------------------------------------------------

struct Conv2d {
  std::size_t in_ch = 0, out_ch = 0, kernel = 3, stride = 1, pad = 1;
  Tensor weight;  // [out x in x k x k]
  Tensor bias;    // [out]

  Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }
  Tensor forward_train(const Tensor& x) {
    input_ = x;
    return forward(x);
  }
  Tensor backward(const Tensor& grad_out) {
    input_.drop_grad();
    conv2d_backward(input_, weight, bias, stride, pad, grad_out);
    return input_.grad_tensor();
  }

 private:
  Tensor input_;
};

struct BatchNorm2d {
  std::size_t channels = 0;
  Tensor gamma;  // [C]
  Tensor beta;   // [C]
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  BNLayerStats stored() const {
    return {running_mean, running_var, {gamma.values().begin(), gamma.values().end()},
            {beta.values().begin(), beta.values().end()}, eps};
  }

  Tensor forward(const Tensor& x, const BNLayerStats& stats, BnMode mode, BatchStats* captured) const {
    return bn_forward(x, stats, mode, captured);
  }

  /// Batch-statistics forward; folds the batch moments into the running
  /// statistics with an exponential moving average.
  Tensor forward_train(const Tensor& x) {
    const auto lay = detail::channel_layout(x);
    if (lay.channels != channels) {
      throw ShapeError("BN channel mismatch: input " + shape_str(x.shape()) + " vs " + std::to_string(channels));
    }
    BatchStats s;
    Tensor y = bn_forward(x, stored(), BnMode::kUseBatch, &s);
    for (std::size_t c = 0; c < channels; ++c) {
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * s.mean[c];
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * s.var[c];
    }
    shape_ = x.shape();
    inv_std_.resize(channels);
    x_hat_.assign(x.numel(), 0.0);
    const auto in = x.data();
    for (std::size_t c = 0; c < channels; ++c) {
      inv_std_[c] = 1.0 / std::sqrt(s.var[c] + eps);
      for (std::size_t b = 0; b < lay.batch; ++b) {
        const std::size_t off = (b * channels + c) * lay.spatial;
        for (std::size_t l = 0; l < lay.spatial; ++l) x_hat_[off + l] = (in[off + l] - s.mean[c]) * inv_std_[c];
      }
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out) {
    if (grad_out.shape() != shape_) throw ShapeError("BN backward gradient shape mismatch");
    const std::size_t batch = shape_[0];
    const std::size_t spatial = grad_out.numel() / (batch * channels);
    const double n = static_cast<double>(batch * spatial);
    Tensor dx(shape_);
    auto dg = gamma.grad();
    auto db = beta.grad();
    const auto dy = grad_out.data();
    auto out = dx.data();
    for (std::size_t c = 0; c < channels; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t off = (b * channels + c) * spatial;
        for (std::size_t l = 0; l < spatial; ++l) {
          sum_dy += dy[off + l];
          sum_dy_xhat += dy[off + l] * x_hat_[off + l];
        }
      }
      dg[c] += sum_dy_xhat;
      db[c] += sum_dy;
      const double k = gamma[c] * inv_std_[c] / n;
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t off = (b * channels + c) * spatial;
        for (std::size_t l = 0; l < spatial; ++l) {
          out[off + l] = k * (n * dy[off + l] - sum_dy - x_hat_[off + l] * sum_dy_xhat);
        }
      }
    }
    return dx;
  }

 private:
  Shape shape_;
  std::vector<double> x_hat_;
  std::vector<double> inv_std_;
};

struct ReLU {
  Tensor forward(const Tensor& x) const {
    Tensor y = x;
    for (double& v : y.data()) v = v < 0.0 ? 0.0 : v;  // NaN passes through
    return y;
  }
  Tensor forward_train(const Tensor& x) {
    input_ = x;
    return forward(x);
  }
  Tensor backward(const Tensor& grad_out) const {
    Tensor dx = grad_out;
    auto d = dx.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!(input_[i] > 0.0)) d[i] = 0.0;
    }
    return dx;
  }

 private:
  Tensor input_;
};

struct MaxPool2d {
  std::size_t kernel = 2, stride = 2;

  Tensor forward(const Tensor& x) const { return run(x, nullptr); }
  Tensor forward_train(const Tensor& x) {
    in_shape_ = x.shape();
    return run(x, &argmax_);
  }
  Tensor backward(const Tensor& grad_out) const {
    Tensor dx(in_shape_);
    auto d = dx.data();
    const auto g = grad_out.data();
    for (std::size_t i = 0; i < g.size(); ++i) d[argmax_[i]] += g[i];
    return dx;
  }

 private:
  Tensor run(const Tensor& x, std::vector<std::size_t>* argmax) const {
    if (x.rank() != 4) throw ShapeError("maxpool2d expects rank 4, got " + shape_str(x.shape()));
    const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (kernel > h || kernel > w) throw ShapeError("maxpool2d window larger than input " + shape_str(x.shape()));
    const std::size_t oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
    Tensor y({b, c, oh, ow});
    if (argmax) argmax->assign(y.numel(), 0);
    const auto in = x.data();
    auto out = y.data();
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < b * c; ++plane) {
      const std::size_t base = plane * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
          std::size_t best = base + (oy * stride) * w + ox * stride;
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const std::size_t idx = base + (oy * stride + ky) * w + ox * stride + kx;
              if (in[idx] > in[best] || std::isnan(in[idx])) best = idx;
            }
          }
          out[o] = in[best];
          if (argmax) (*argmax)[o] = best;
        }
      }
    }
    return y;
  }

  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

struct AvgPool2d {
  std::size_t kernel = 2, stride = 2;

  Tensor forward(const Tensor& x) const {
    if (x.rank() != 4) throw ShapeError("avgpool2d expects rank 4, got " + shape_str(x.shape()));
    const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (kernel > h || kernel > w) throw ShapeError("avgpool2d window larger than input " + shape_str(x.shape()));
    const std::size_t oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
    Tensor y({b, c, oh, ow});
    const double scale = 1.0 / static_cast<double>(kernel * kernel);
    const auto in = x.data();
    auto out = y.data();
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < b * c; ++plane) {
      const std::size_t base = plane * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
          double s = 0.0;
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            for (std::size_t kx = 0; kx < kernel; ++kx) s += in[base + (oy * stride + ky) * w + ox * stride + kx];
          }
          out[o] = s * scale;
        }
      }
    }
    return y;
  }
  Tensor forward_train(const Tensor& x) {
    in_shape_ = x.shape();
    return forward(x);
  }
  Tensor backward(const Tensor& grad_out) const {
    Tensor dx(in_shape_);
    const std::size_t h = in_shape_[2], w = in_shape_[3];
    const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
    const double scale = 1.0 / static_cast<double>(kernel * kernel);
    auto d = dx.data();
    const auto g = grad_out.data();
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < in_shape_[0] * in_shape_[1]; ++plane) {
      const std::size_t base = plane * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            for (std::size_t kx = 0; kx < kernel; ++kx) d[base + (oy * stride + ky) * w + ox * stride + kx] += g[o] * scale;
          }
        }
      }
    }
    return dx;
  }

 private:
  Shape in_shape_;
};

struct Flatten {
  Tensor forward(const Tensor& x) const { return x.reshaped({x.dim(0), x.numel() / x.dim(0)}); }
  Tensor forward_train(const Tensor& x) {
    in_shape_ = x.shape();
    return forward(x);
  }
  Tensor backward(const Tensor& grad_out) const { return grad_out.reshaped(in_shape_); }

 private:
  Shape in_shape_;
};

/// y = x W + b with W stored [in x out].
struct Linear {
  std::size_t in = 0, out = 0;
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  Tensor forward(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != in) {
      throw ShapeError("linear expects [B x " + std::to_string(in) + "], got " + shape_str(x.shape()));
    }
    Tensor y = matmul(x, weight);
    auto v = y.data();
    for (std::size_t b = 0; b < x.dim(0); ++b) {
      for (std::size_t j = 0; j < out; ++j) v[b * out + j] += bias[j];
    }
    return y;
  }
  Tensor forward_train(const Tensor& x) {
    input_ = x;
    return forward(x);
  }
  Tensor backward(const Tensor& grad_out) {
    input_.drop_grad();
    matmul_backward(input_, weight, grad_out);
    auto db = bias.grad();
    const auto g = grad_out.data();
    for (std::size_t b = 0; b < grad_out.dim(0); ++b) {
      for (std::size_t j = 0; j < out; ++j) db[j] += g[b * out + j];
    }
    return input_.grad_tensor();
  }

 private:
  Tensor input_;
};

using Layer = std::variant<Conv2d, BatchNorm2d, ReLU, MaxPool2d, AvgPool2d, Flatten, Linear>;

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Row-wise softmax of logits [B x K], max-shifted.
inline Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax expects [B x K], got " + shape_str(logits.shape()));
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = logits.data().data() + i * k;
    double* out = p.data().data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += out[j] = std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) out[j] /= sum;
  }
  return p;
}

struct LossAndGrad {
  double loss = 0.0;
  Tensor grad;
};

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
inline LossAndGrad softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || labels.size() != logits.dim(0)) {
    throw ShapeError("cross-entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  LossAndGrad r{0.0, softmax(logits)};
  auto g = r.grad.data();
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= k) throw ParameterError("label " + std::to_string(labels[i]) + " out of range");
    const double* row = logits.data().data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    r.loss += (mx + std::log(sum)) - row[labels[i]];
    g[i * k + labels[i]] -= 1.0;
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  r.loss *= inv_b;
  for (double& v : g) v *= inv_b;
  return r;
}

}  // namespace pan
