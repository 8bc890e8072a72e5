// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

// Corruption identification: an encoder trained with class-anchor
// clustering, a prototype per corruption type, and a distance classifier.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pan/checkpoint.hpp"
#include "pan/corruption.hpp"
#include "pan/dataset.hpp"
#include "pan/errors.hpp"
#include "pan/model.hpp"
#include "pan/train.hpp"

namespace pan {

/// Fixed class centres c_k = alpha * e_k in R^q.
struct AnchorSet {
  Tensor centers;  // [K x q]
  double alpha = 10.0;

  std::size_t classes() const { return centers.dim(0); }
  std::size_t dim() const { return centers.dim(1); }
  std::span<const double> center(std::size_t k) const { return centers.data().subspan(k * dim(), dim()); }
};

inline AnchorSet make_anchors(std::size_t classes, std::size_t feature_dim, double alpha) {
  if (classes == 0) throw ConfigError("anchors need at least one class");
  if (feature_dim < classes) {
    throw ConfigError("feature dimension " + std::to_string(feature_dim) + " must be >= number of classes " +
                      std::to_string(classes) + " for axis-aligned anchors");
  }
  if (!(alpha > 0.0)) throw ParameterError("anchor scale alpha must be positive");
  AnchorSet a{Tensor({classes, feature_dim}), alpha};
  for (std::size_t k = 0; k < classes; ++k) a.centers[k * feature_dim + k] = alpha;
  return a;
}

namespace detail {

inline double l2_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace detail

struct CacLoss {
  double total = 0.0;
  double pull = 0.0;  // distance to own anchor
  double push = 0.0;  // log(1 + sum_{j != y} exp(d_y - d_j))
  std::vector<double> grad;  // d total / d z
};

/// Class-anchor clustering loss of one feature vector:
///   pull = d_y,  push = log(1 + sum_{j != y} exp(d_y - d_j)),
///   total = pull + lambda * push,  d_j = ||z - c_j||.
/// At z == c_j the subgradient of d_j is taken as 0.
inline CacLoss cac_loss(std::span<const double> z, std::size_t y, const AnchorSet& anchors, double lambda) {
  const std::size_t k = anchors.classes();
  if (y >= k) throw ParameterError("CAC label " + std::to_string(y) + " out of range for " + std::to_string(k) + " anchors");
  if (z.size() != anchors.dim()) {
    throw ShapeError("CAC feature has " + std::to_string(z.size()) + " entries, anchors have " +
                     std::to_string(anchors.dim()));
  }
  if (!(lambda >= 0.0)) throw ParameterError("CAC lambda must be >= 0");
  std::vector<double> d(k);
  for (std::size_t j = 0; j < k; ++j) d[j] = detail::l2_distance(z, anchors.center(j));

  // push = logsumexp over {0} U {d_y - d_j : j != y}
  double mx = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    if (j != y) mx = std::max(mx, d[y] - d[j]);
  }
  double sum = std::exp(-mx);
  std::vector<double> w(k, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    if (j != y) sum += w[j] = std::exp(d[y] - d[j] - mx);
  }
  CacLoss out;
  out.pull = d[y];
  out.push = mx + std::log(sum);
  out.total = out.pull + lambda * out.push;

  // d push / d d_j = -w_j / sum for j != y and sum_j w_j / sum for y.
  std::vector<double> coef(k, 0.0);
  coef[y] = 1.0;
  for (std::size_t j = 0; j < k; ++j) {
    if (j == y) continue;
    const double s = lambda * w[j] / sum;
    coef[y] += s;
    coef[j] -= s;
  }
  out.grad.assign(z.size(), 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    if (coef[j] == 0.0 || d[j] == 0.0) continue;
    const auto c = anchors.center(j);
    const double f = coef[j] / d[j];
    for (std::size_t i = 0; i < z.size(); ++i) out.grad[i] += f * (z[i] - c[i]);
  }
  return out;
}

/// exp(-d_k) / sum_j exp(-d_j), shifted by min(d).
inline std::vector<double> softmin(std::span<const double> d) {
  if (d.empty()) return {};
  const double mn = *std::min_element(d.begin(), d.end());
  std::vector<double> p(d.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) sum += p[i] = std::exp(-(d[i] - mn));
  for (double& v : p) v /= sum;
  return p;
}

/// Index of the smallest entry; ties go to the lowest index.
inline std::size_t argmin_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] < v[best]) best = i;
  }
  return best;
}

/// Row k is the mean feature of the training samples of corruption k.
struct PrototypeMatrix {
  Tensor rows;  // [K x q]
  std::vector<std::size_t> counts;

  std::size_t classes() const { return rows.dim(0); }
  std::size_t dim() const { return rows.dim(1); }
  std::span<const double> row(std::size_t k) const { return rows.data().subspan(k * dim(), dim()); }
};

/// Averages `features` [N x q] per label. Every class in [0, K) must occur.
inline PrototypeMatrix prototypes_from_features(const Tensor& features, std::span<const std::size_t> labels,
                                                std::size_t classes,
                                                const std::vector<std::string>& names = {}) {
  if (features.rank() != 2 || features.dim(0) != labels.size()) {
    throw ShapeError("prototype features " + shape_str(features.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t q = features.dim(1);
  PrototypeMatrix p{Tensor({classes, q}), std::vector<std::size_t>(classes, 0)};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw ParameterError("prototype label " + std::to_string(labels[i]) + " out of range");
    ++p.counts[labels[i]];
    for (std::size_t j = 0; j < q; ++j) p.rows[labels[i] * q + j] += features[i * q + j];
  }
  for (std::size_t k = 0; k < classes; ++k) {
    if (p.counts[k] == 0) {
      const std::string who = k < names.size() ? " (" + names[k] + ")" : "";
      throw ConfigError("incomplete coverage: no samples of corruption " + std::to_string(k) + who +
                        " to build its prototype");
    }
    for (std::size_t j = 0; j < q; ++j) p.rows[k * q + j] /= static_cast<double>(p.counts[k]);
  }
  return p;
}

struct CorruptionPrediction {
  std::size_t kappa = 0;
  std::vector<double> distances;  // d
  std::vector<double> scores;     // b = d * (1 - softmin(d))
};

/// kappa_hat = argmin_k d_k (1 - softmin(d)_k) with d_k = ||z - prototype_k||.
inline CorruptionPrediction predict_corruption(std::span<const double> z, const PrototypeMatrix& protos) {
  if (z.size() != protos.dim()) {
    throw ShapeError("feature has " + std::to_string(z.size()) + " entries, prototypes have " +
                     std::to_string(protos.dim()));
  }
  CorruptionPrediction out;
  out.distances.resize(protos.classes());
  for (std::size_t k = 0; k < protos.classes(); ++k) out.distances[k] = detail::l2_distance(z, protos.row(k));
  const auto p = softmin(out.distances);
  out.scores.resize(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) out.scores[k] = out.distances[k] * (1.0 - p[k]);
  out.kappa = argmin_lowest(out.scores);
  return out;
}

/// Marker returned by Cim::route when the open-set threshold rejects a sample.
inline constexpr std::size_t kRouteToSource = std::numeric_limits<std::size_t>::max();

/// Frozen identification snapshot: encoder g and prototypes. Immutable and
/// safe to share between threads once built.
struct Cim {
  Model encoder;
  PrototypeMatrix prototypes;
  AnchorSet anchors;
  CorruptionRegistry registry;
  double lambda = 0.1;
  /// When set, samples with min(b) above it are routed to the source statistics.
  std::optional<double> reject_threshold;

  Tensor features(const Tensor& images) const { return encoder.forward(images); }

  std::vector<CorruptionPrediction> predict(const Tensor& images) const {
    const Tensor z = features(images);
    const std::size_t q = z.dim(1);
    std::vector<CorruptionPrediction> out;
    out.reserve(z.dim(0));
    for (std::size_t i = 0; i < z.dim(0); ++i) out.push_back(predict_corruption(z.data().subspan(i * q, q), prototypes));
    return out;
  }

  std::vector<std::size_t> route(const Tensor& images) const {
    std::vector<std::size_t> out;
    for (const auto& p : predict(images)) {
      const bool reject = reject_threshold && p.scores[p.kappa] > *reject_threshold;
      out.push_back(reject ? kRouteToSource : p.kappa);
    }
    return out;
  }
};

struct CimTrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 64;
  double lambda = 0.1;
  SgdConfig sgd{0.01, 0.9};
  std::uint64_t seed = 0;
};

struct CimTrainResult {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_anchor_distance;  // mean d_y over the epoch
  std::vector<double> epoch_head_accuracy;    // linear head on detached features, percent
};

/// Head l: linear map from features to corruption logits.
inline Linear make_cim_head(std::size_t feature_dim, std::size_t classes, Rng rng) {
  Linear head;
  head.in = feature_dim;
  head.out = classes;
  head.weight = Tensor({feature_dim, classes});
  const double sd = std::sqrt(1.0 / static_cast<double>(feature_dim));
  for (double& v : head.weight.data()) v = rng.normal(0.0, sd);
  head.bias = Tensor({classes});
  return head;
}

/// Trains encoder g with the CAC loss on its features. The head is fitted
/// with cross-entropy on the detached features and never feeds gradients
/// into g; it is dropped once training ends.
inline CimTrainResult train_cim(Model& encoder, Linear& head, std::span<const CorruptedSample> data,
                                const AnchorSet& anchors, const CimTrainConfig& cfg) {
  const std::size_t k = anchors.classes();
  std::vector<std::size_t> seen_types(k, 0);
  for (const auto& s : data) {
    if (s.corruption >= k) throw ConfigError("CIM sample corruption id " + std::to_string(s.corruption) + " >= K");
    ++seen_types[s.corruption];
  }
  for (std::size_t t = 0; t < k; ++t) {
    if (seen_types[t] == 0) throw ConfigError("CIM training data has no samples of corruption " + std::to_string(t));
  }
  if (encoder.architecture().output_shape() != Shape{anchors.dim()}) {
    throw ConfigError("encoder output does not match anchor dimension " + std::to_string(anchors.dim()));
  }
  Sgd enc_opt(cfg.sgd);
  Sgd head_opt(cfg.sgd);
  auto enc_params = encoder.parameters();
  std::vector<Tensor*> head_params{&head.weight, &head.bias};
  const Rng shuffle_root = Rng(cfg.seed).derive(0xc1a);
  CimTrainResult result;
  const std::size_t q = anchors.dim();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0, dist_sum = 0.0;
    std::size_t n_seen = 0, head_correct = 0;
    const auto batches = batch_iter(data.size(), cfg.batch_size, shuffle_root.derive(epoch).next_u64());
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& idx = batches[b];
      const Tensor x = stack_images(data, idx);
      encoder.zero_grad();
      const Tensor z = encoder.forward_train(x);
      Tensor dz(z.shape());
      const double inv_b = 1.0 / static_cast<double>(idx.size());
      double batch_loss = 0.0;
      std::vector<std::size_t> labels;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const std::size_t y = data[idx[i]].corruption;
        labels.push_back(y);
        const auto l = cac_loss(z.data().subspan(i * q, q), y, anchors, cfg.lambda);
        batch_loss += l.total;
        dist_sum += l.pull;
        for (std::size_t j = 0; j < q; ++j) dz[i * q + j] = l.grad[j] * inv_b;
      }
      if (!std::isfinite(batch_loss)) {
        throw NumericalError("train_cim: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b) + " (" + std::to_string(idx.size()) + " samples, first index " +
                             std::to_string(idx.front()) + ")");
      }
      encoder.backward(dz);
      enc_opt.step(enc_params);

      head.weight.zero_grad();
      head.bias.zero_grad();
      const Tensor logits = head.forward_train(z);
      auto ce = softmax_cross_entropy(logits, labels);
      head.backward(ce.grad);
      head_opt.step(head_params);
      const auto pred = argmax_rows(logits);
      for (std::size_t i = 0; i < pred.size(); ++i) head_correct += pred[i] == labels[i];

      loss_sum += batch_loss;
      n_seen += idx.size();
    }
    const double n = static_cast<double>(n_seen);
    result.epoch_loss.push_back(loss_sum / n);
    result.epoch_anchor_distance.push_back(dist_sum / n);
    result.epoch_head_accuracy.push_back(100.0 * static_cast<double>(head_correct) / n);
  }
  return result;
}

/// Encoder features [N x q] of every sample, inference mode.
template <typename Sample>
Tensor extract_features(const Model& encoder, std::span<const Sample> data, std::size_t batch_size = 128) {
  const std::size_t q = encoder.architecture().output_shape().at(0);
  Tensor out({std::max<std::size_t>(data.size(), 1), q});
  for (const auto& idx : batch_iter(data.size(), batch_size)) {
    const Tensor z = encoder.forward(stack_images(data, idx));
    std::copy(z.data().begin(), z.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(idx.front() * q));
  }
  return out;
}

/// Prototype matrix of a frozen encoder over D_K.
inline PrototypeMatrix build_prototypes(const Model& encoder, std::span<const CorruptedSample> data,
                                        std::size_t classes, const std::vector<std::string>& names = {}) {
  if (data.empty()) throw ConfigError("build_prototypes: empty dataset");
  const Tensor z = extract_features(encoder, data);
  std::vector<std::size_t> labels;
  labels.reserve(data.size());
  for (const auto& s : data) labels.push_back(s.corruption);
  return prototypes_from_features(z, labels, classes, names);
}

// ---------------------------------------------------------------------------
// Persistence: encoder weights plus "cim.prototypes", "cim.prototype_counts",
// "cim.anchors" in one checkpoint.
// ---------------------------------------------------------------------------

inline Checkpoint cim_checkpoint(const Cim& cim, nlohmann::json extra = nlohmann::json::object()) {
  extra["kind"] = "cim";
  extra["registry"] = cim.registry.names();
  extra["alpha"] = cim.anchors.alpha;
  extra["lambda"] = cim.lambda;
  if (cim.reject_threshold) extra["reject_threshold"] = *cim.reject_threshold;
  Checkpoint c = model_checkpoint(cim.encoder, std::move(extra));
  c.tensors.push_back({"cim.prototypes", cim.prototypes.rows});
  std::vector<double> counts(cim.prototypes.counts.begin(), cim.prototypes.counts.end());
  c.tensors.push_back({"cim.prototype_counts", Tensor({counts.size()}, counts)});
  c.tensors.push_back({"cim.anchors", cim.anchors.centers});
  return c;
}

inline Cim cim_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.metadata.value("kind", "") != "cim") throw FormatError("checkpoint is not a CIM checkpoint");
  Cim cim;
  cim.encoder = model_from_checkpoint(ckpt);
  try {
    cim.registry = CorruptionRegistry::from_names(ckpt.metadata.at("registry").get<std::vector<std::string>>());
    cim.lambda = ckpt.metadata.value("lambda", 0.1);
    if (ckpt.metadata.contains("reject_threshold")) cim.reject_threshold = ckpt.metadata["reject_threshold"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("CIM checkpoint metadata: ") + e.what());
  } catch (const ParameterError& e) {
    throw FormatError(std::string("CIM checkpoint metadata: ") + e.what());
  }
  cim.prototypes.rows = ckpt.get("cim.prototypes");
  for (double c : ckpt.get("cim.prototype_counts").data()) cim.prototypes.counts.push_back(static_cast<std::size_t>(c));
  cim.anchors = {ckpt.get("cim.anchors"), ckpt.metadata.value("alpha", 10.0)};
  if (cim.prototypes.classes() != cim.registry.size()) {
    throw FormatError("CIM prototypes have " + std::to_string(cim.prototypes.classes()) + " rows, registry has " +
                      std::to_string(cim.registry.size()) + " types");
  }
  return cim;
}

}  // namespace pan
