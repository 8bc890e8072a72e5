// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pan/errors.hpp"
#include "pan/layers.hpp"
#include "pan/rng.hpp"
#include "pan/tensor.hpp"

namespace pan {

/// One entry of an architecture descriptor. Unused fields stay zero.
struct LayerSpec {
  std::string kind;  // conv2d | batchnorm2d | relu | maxpool2d | avgpool2d | flatten | linear
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 0;
  std::size_t pad = 0;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct Architecture {
  std::string name;
  Shape input;  // per-sample [C x H x W]
  std::vector<LayerSpec> layers;

  friend bool operator==(const Architecture&, const Architecture&) = default;

  /// Per-sample output shape; throws ConfigError if the layers do not chain.
  Shape output_shape() const {
    if (input.size() != 3) throw ConfigError("architecture input must be [C x H x W]");
    Shape s = input;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      auto fail = [&](const std::string& why) {
        throw ConfigError("architecture '" + name + "' layer " + std::to_string(i) + " (" + l.kind + "): " + why +
                          ", incoming shape " + shape_str(s));
      };
      if (l.kind == "conv2d") {
        if (s.size() != 3 || s[0] != l.in) fail("input channels do not match");
        if (l.stride == 0 || l.kernel == 0) fail("kernel and stride must be positive");
        if (l.kernel > s[1] + 2 * l.pad || l.kernel > s[2] + 2 * l.pad) fail("kernel larger than padded input");
        s = {l.out, (s[1] + 2 * l.pad - l.kernel) / l.stride + 1, (s[2] + 2 * l.pad - l.kernel) / l.stride + 1};
      } else if (l.kind == "batchnorm2d") {
        if (s.empty() || s[0] != l.in) fail("channel count does not match");
      } else if (l.kind == "relu") {
      } else if (l.kind == "maxpool2d" || l.kind == "avgpool2d") {
        if (s.size() != 3) fail("pooling needs a feature map");
        if (l.stride == 0 || l.kernel == 0 || l.kernel > s[1] || l.kernel > s[2]) fail("bad pooling window");
        s = {s[0], (s[1] - l.kernel) / l.stride + 1, (s[2] - l.kernel) / l.stride + 1};
      } else if (l.kind == "flatten") {
        s = {shape_numel(s)};
      } else if (l.kind == "linear") {
        if (s.size() != 1 || s[0] != l.in) fail("input width does not match");
        s = {l.out};
      } else {
        fail("unknown layer kind");
      }
    }
    return s;
  }
};

inline void to_json(nlohmann::json& j, const LayerSpec& l) {
  j = nlohmann::json{{"kind", l.kind}};
  if (l.in) j["in"] = l.in;
  if (l.out) j["out"] = l.out;
  if (l.kernel) j["kernel"] = l.kernel;
  if (l.stride) j["stride"] = l.stride;
  if (l.pad) j["pad"] = l.pad;
}

inline void from_json(const nlohmann::json& j, LayerSpec& l) {
  l.kind = j.at("kind").get<std::string>();
  l.in = j.value("in", std::size_t{0});
  l.out = j.value("out", std::size_t{0});
  l.kernel = j.value("kernel", std::size_t{0});
  l.stride = j.value("stride", std::size_t{0});
  l.pad = j.value("pad", std::size_t{0});
}

inline void to_json(nlohmann::json& j, const Architecture& a) {
  j = nlohmann::json{{"name", a.name}, {"input", a.input}, {"layers", a.layers}};
}

inline void from_json(const nlohmann::json& j, Architecture& a) {
  a.name = j.at("name").get<std::string>();
  a.input = j.at("input").get<Shape>();
  a.layers = j.at("layers").get<std::vector<LayerSpec>>();
}

/// Three conv(3x3)-BN-ReLU-maxpool blocks of widths 16/32/64 followed by a
/// linear map to `outputs`. Used both for the classifier and the CIM encoder.
inline Architecture conv_trunk(std::string name, std::size_t outputs, Shape input = {3, 32, 32}) {
  Architecture a{std::move(name), input, {}};
  std::size_t ch = input.at(0);
  std::size_t h = input.at(1), w = input.at(2);
  for (std::size_t width : {16, 32, 64}) {
    a.layers.push_back({"conv2d", ch, width, 3, 1, 1});
    a.layers.push_back({"batchnorm2d", width, 0, 0, 0, 0});
    a.layers.push_back({"relu", 0, 0, 0, 0, 0});
    a.layers.push_back({"maxpool2d", 0, 0, 2, 2, 0});
    ch = width;
    h /= 2;
    w /= 2;
  }
  a.layers.push_back({"flatten", 0, 0, 0, 0, 0});
  a.layers.push_back({"linear", ch * h * w, outputs, 0, 0, 0});
  return a;
}

inline Architecture source_classifier(std::size_t num_classes) { return conv_trunk("source_cnn", num_classes); }
inline Architecture cim_encoder(std::size_t feature_dim) { return conv_trunk("cim_encoder", feature_dim); }

/// How a forward pass treats BN layers.
struct ForwardOptions {
  /// Injected statistics; nullptr means the model's own stored statistics.
  const BNStatsSet* stats = nullptr;
  /// batch_layers[i] selects batch statistics for BN layer i. Empty = none.
  std::vector<bool> batch_layers;
  /// Receives the batch moments of every batch-mode BN layer (index-aligned).
  std::vector<BatchStats>* captured = nullptr;

  static ForwardOptions with(const BNStatsSet& s, BnMode mode, std::size_t num_bn) {
    ForwardOptions o;
    o.stats = &s;
    if (mode == BnMode::kUseBatch) o.batch_layers.assign(num_bn, true);
    return o;
  }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// A sequential network: its descriptor plus all weights W and stored BN
/// statistics. Copyable; forward() is const and side-effect free.
class Model {
 public:
  Model() = default;

  /// Builds and initializes: He-normal conv/linear weights, zero biases,
  /// gamma 1, beta 0, stored mean 0, stored var 1.
  Model(Architecture arch, Rng rng) : arch_(std::move(arch)) {
    arch_.output_shape();
    std::uint64_t stream = 0;
    for (const auto& spec : arch_.layers) {
      Rng init = rng.derive(stream++);
      if (spec.kind == "conv2d") {
        Conv2d c;
        c.in_ch = spec.in;
        c.out_ch = spec.out;
        c.kernel = spec.kernel;
        c.stride = spec.stride;
        c.pad = spec.pad;
        c.weight = he_normal({spec.out, spec.in, spec.kernel, spec.kernel}, spec.in * spec.kernel * spec.kernel, init);
        c.bias = Tensor({spec.out});
        layers_.emplace_back(std::move(c));
      } else if (spec.kind == "batchnorm2d") {
        BatchNorm2d b;
        b.channels = spec.in;
        b.gamma = Tensor({spec.in}, 1.0);
        b.beta = Tensor({spec.in}, 0.0);
        b.running_mean.assign(spec.in, 0.0);
        b.running_var.assign(spec.in, 1.0);
        layers_.emplace_back(std::move(b));
      } else if (spec.kind == "relu") {
        layers_.emplace_back(ReLU{});
      } else if (spec.kind == "maxpool2d") {
        MaxPool2d p;
        p.kernel = spec.kernel;
        p.stride = spec.stride;
        layers_.emplace_back(std::move(p));
      } else if (spec.kind == "avgpool2d") {
        AvgPool2d p;
        p.kernel = spec.kernel;
        p.stride = spec.stride;
        layers_.emplace_back(std::move(p));
      } else if (spec.kind == "flatten") {
        layers_.emplace_back(Flatten{});
      } else if (spec.kind == "linear") {
        Linear l;
        l.in = spec.in;
        l.out = spec.out;
        l.weight = he_normal({spec.in, spec.out}, spec.in, init);
        l.bias = Tensor({spec.out});
        layers_.emplace_back(std::move(l));
      }
    }
  }

  const Architecture& architecture() const { return arch_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  std::size_t num_bn_layers() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += std::holds_alternative<BatchNorm2d>(l);
    return n;
  }

  /// The stored statistics (Lambda) with the current affine parameters.
  BNStatsSet bn_stats() const {
    BNStatsSet s;
    for (const auto& l : layers_) {
      if (const auto* bn = std::get_if<BatchNorm2d>(&l)) s.layers.push_back(bn->stored());
    }
    return s;
  }

  /// Overwrites stored mean/var and gamma/beta from `stats`.
  void set_bn_stats(const BNStatsSet& stats) {
    check_layout(stats);
    std::size_t i = 0;
    for (auto& l : layers_) {
      if (auto* bn = std::get_if<BatchNorm2d>(&l)) {
        const auto& s = stats.layers[i++];
        bn->running_mean = s.mean;
        bn->running_var = s.var;
        std::copy(s.gamma.begin(), s.gamma.end(), bn->gamma.data().begin());
        std::copy(s.beta.begin(), s.beta.end(), bn->beta.data().begin());
        bn->eps = s.eps;
      }
    }
  }

  void check_layout(const BNStatsSet& stats) const {
    std::size_t i = 0;
    for (const auto& l : layers_) {
      if (const auto* bn = std::get_if<BatchNorm2d>(&l)) {
        if (i >= stats.size() || stats.layers[i].channels() != bn->channels) {
          throw ConfigError("BN statistics layout does not match model '" + arch_.name + "' at BN layer " +
                            std::to_string(i));
        }
        ++i;
      }
    }
    if (i != stats.size()) {
      throw ConfigError("BN statistics carry " + std::to_string(stats.size()) + " layers, model '" + arch_.name +
                        "' has " + std::to_string(i));
    }
  }

  void check_input(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != arch_.input[0] || x.dim(2) != arch_.input[1] || x.dim(3) != arch_.input[2]) {
      throw ShapeError("model '" + arch_.name + "' expects [B x " + std::to_string(arch_.input[0]) + " x " +
                       std::to_string(arch_.input[1]) + " x " + std::to_string(arch_.input[2]) + "], got " +
                       shape_str(x.shape()));
    }
  }

  /// Inference forward. Pure function of (weights, stats, input).
  Tensor forward(const Tensor& x, const ForwardOptions& opts = {}) const {
    check_input(x);
    const std::size_t num_bn = num_bn_layers();
    BNStatsSet own;
    const BNStatsSet* stats = opts.stats;
    if (!stats) {
      own = bn_stats();
      stats = &own;
    } else {
      check_layout(*stats);
    }
    if (!opts.batch_layers.empty() && opts.batch_layers.size() != num_bn) {
      throw ConfigError("batch_layers mask has " + std::to_string(opts.batch_layers.size()) + " entries, model has " +
                        std::to_string(num_bn) + " BN layers");
    }
    if (opts.captured) opts.captured->assign(num_bn, BatchStats{});
    Tensor h = x;
    std::size_t bn_index = 0;
    for (const auto& layer : layers_) {
      if (const auto* bn = std::get_if<BatchNorm2d>(&layer)) {
        const bool batch = !opts.batch_layers.empty() && opts.batch_layers[bn_index];
        BatchStats* cap = opts.captured ? &(*opts.captured)[bn_index] : nullptr;
        h = bn->forward(h, stats->layers[bn_index], batch ? BnMode::kUseBatch : BnMode::kUseStored, cap);
        ++bn_index;
      } else {
        h = std::visit(
            [&](const auto& l) -> Tensor {
              if constexpr (std::is_same_v<std::decay_t<decltype(l)>, BatchNorm2d>) {
                return h;
              } else {
                return l.forward(h);
              }
            },
            layer);
      }
    }
    return h;
  }

  /// Training forward: batch statistics in every BN layer, running
  /// statistics updated, activations cached for backward().
  Tensor forward_train(const Tensor& x) {
    check_input(x);
    Tensor h = x;
    for (auto& layer : layers_) {
      h = std::visit([&](auto& l) { return l.forward_train(h); }, layer);
    }
    return h;
  }

  /// Backpropagates from d(loss)/d(output); accumulates parameter gradients
  /// and returns d(loss)/d(input).
  Tensor backward(const Tensor& grad_out) {
    Tensor g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      g = std::visit([&](auto& l) { return l.backward(g); }, *it);
    }
    return g;
  }

  /// Learnable tensors in a fixed order.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> p;
    for (auto& layer : layers_) {
      if (auto* c = std::get_if<Conv2d>(&layer)) {
        p.push_back(&c->weight);
        p.push_back(&c->bias);
      } else if (auto* b = std::get_if<BatchNorm2d>(&layer)) {
        p.push_back(&b->gamma);
        p.push_back(&b->beta);
      } else if (auto* l = std::get_if<Linear>(&layer)) {
        p.push_back(&l->weight);
        p.push_back(&l->bias);
      }
    }
    return p;
  }

  void zero_grad() {
    for (Tensor* p : parameters()) p->zero_grad();
  }

  /// Every weight and stored statistic, named "layers.<i>.<field>".
  std::vector<NamedTensor> state() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string pre = "layers." + std::to_string(i) + ".";
      if (const auto* c = std::get_if<Conv2d>(&layers_[i])) {
        out.push_back({pre + "weight", c->weight});
        out.push_back({pre + "bias", c->bias});
      } else if (const auto* b = std::get_if<BatchNorm2d>(&layers_[i])) {
        out.push_back({pre + "gamma", b->gamma});
        out.push_back({pre + "beta", b->beta});
        out.push_back({pre + "running_mean", Tensor({b->channels}, b->running_mean)});
        out.push_back({pre + "running_var", Tensor({b->channels}, b->running_var)});
      } else if (const auto* l = std::get_if<Linear>(&layers_[i])) {
        out.push_back({pre + "weight", l->weight});
        out.push_back({pre + "bias", l->bias});
      }
    }
    for (auto& nt : out) nt.tensor.drop_grad();
    return out;
  }

  /// Inverse of state(); every expected name must be present with its shape.
  void load_state(const std::vector<NamedTensor>& tensors) {
    auto find = [&](const std::string& name, const Shape& shape) -> const Tensor& {
      for (const auto& nt : tensors) {
        if (nt.name == name) {
          if (nt.tensor.shape() != shape) {
            throw FormatError("tensor '" + name + "' has shape " + shape_str(nt.tensor.shape()) + ", expected " +
                              shape_str(shape));
          }
          return nt.tensor;
        }
      }
      throw FormatError("missing tensor '" + name + "'");
    };
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string pre = "layers." + std::to_string(i) + ".";
      if (auto* c = std::get_if<Conv2d>(&layers_[i])) {
        c->weight = find(pre + "weight", c->weight.shape());
        c->bias = find(pre + "bias", c->bias.shape());
      } else if (auto* b = std::get_if<BatchNorm2d>(&layers_[i])) {
        b->gamma = find(pre + "gamma", b->gamma.shape());
        b->beta = find(pre + "beta", b->beta.shape());
        b->running_mean = find(pre + "running_mean", {b->channels}).values();
        b->running_var = find(pre + "running_var", {b->channels}).values();
      } else if (auto* l = std::get_if<Linear>(&layers_[i])) {
        l->weight = find(pre + "weight", l->weight.shape());
        l->bias = find(pre + "bias", l->bias.shape());
      }
    }
  }

 private:
  static Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.data()) v = rng.normal(0.0, sd);
    return t;
  }

  Architecture arch_;
  std::vector<Layer> layers_;
};

/// Class probabilities [B x K] of `model` with `stats` injected into its BN
/// layers.
inline Tensor forward_classify(const Model& model, const Tensor& x, const BNStatsSet& stats,
                               BnMode mode = BnMode::kUseStored) {
  return softmax(model.forward(x, ForwardOptions::with(stats, mode, model.num_bn_layers())));
}

/// Row-wise argmax with lowest-index tie-breaking.
inline std::vector<std::size_t> argmax_rows(const Tensor& m) {
  std::vector<std::size_t> out(m.dim(0));
  const std::size_t k = m.dim(1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double* row = m.data().data() + i * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[i] = best;
  }
  return out;
}

}  // namespace pan
