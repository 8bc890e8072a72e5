// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pan/dataset.hpp"
#include "pan/errors.hpp"
#include "pan/model.hpp"
#include "pan/rng.hpp"

namespace pan {

struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
};

/// SGD with heavy-ball momentum: v = mu v + g; w -= lr v.
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg) : cfg_(cfg) {
    if (!(cfg.lr >= 0.0)) throw ParameterError("learning rate must be >= 0");
    if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ParameterError("momentum must be in [0, 1)");
  }

  void step(std::span<Tensor* const> params) {
    if (velocity_.empty()) {
      for (const Tensor* p : params) velocity_.emplace_back(p->numel(), 0.0);
    }
    if (velocity_.size() != params.size()) throw ContractViolation("Sgd: parameter list changed between steps");
    for (std::size_t t = 0; t < params.size(); ++t) {
      auto w = params[t]->data();
      auto g = params[t]->grad();
      auto& v = velocity_[t];
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = cfg_.momentum * v[i] + g[i];
        w[i] -= cfg_.lr * v[i];
      }
    }
  }

 private:
  SgdConfig cfg_;
  std::vector<std::vector<double>> velocity_;
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  SgdConfig sgd;
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;  // percent, on the training batches as seen
};

/// Supervised cross-entropy training in place. BN layers run on batch
/// statistics and fold them into the stored statistics (momentum 0.1), which
/// become the source statistics of the trained model.
inline TrainResult train_supervised(Model& model, std::span<const LabeledImage> data, const TrainConfig& cfg) {
  if (data.empty()) throw ConfigError("train_supervised: empty dataset");
  Sgd opt(cfg.sgd);
  const Rng shuffle_root = Rng(cfg.seed).derive(0x5e1ec7);
  TrainResult result;
  auto params = model.parameters();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    const auto batches = batch_iter(data.size(), cfg.batch_size, shuffle_root.derive(epoch).next_u64());
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& idx = batches[b];
      const Tensor x = stack_images(data, idx);
      std::vector<std::size_t> labels;
      labels.reserve(idx.size());
      for (std::size_t i : idx) labels.push_back(data[i].label);
      model.zero_grad();
      const Tensor logits = model.forward_train(x);
      auto [loss, grad] = softmax_cross_entropy(logits, labels);
      if (!std::isfinite(loss)) {
        throw NumericalError("train_supervised: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b));
      }
      model.backward(grad);
      opt.step(params);
      const auto pred = argmax_rows(logits);
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
      loss_sum += loss * static_cast<double>(idx.size());
      seen += idx.size();
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(seen));
    result.epoch_accuracy.push_back(100.0 * static_cast<double>(correct) / static_cast<double>(seen));
  }
  return result;
}

}  // namespace pan
