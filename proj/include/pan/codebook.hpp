// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

// Per-corruption BN statistics: the codebook, its EMA update, streaming
// adaptation and the label-routed reference statistics.

#pragma once

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pan/checkpoint.hpp"
#include "pan/cim.hpp"
#include "pan/dataset.hpp"
#include "pan/errors.hpp"
#include "pan/model.hpp"

namespace pan {

/// K statistics sets indexed by corruption id, all starting at the source
/// statistics. Only mean and var ever change.
struct Codebook {
  BNStatsSet source;
  std::vector<BNStatsSet> entries;
  std::vector<std::size_t> update_counts;

  static Codebook init(const BNStatsSet& source, std::size_t classes) {
    if (classes == 0) throw ConfigError("codebook needs at least one entry");
    for (const auto& l : source.layers) l.validate();
    return {source, std::vector<BNStatsSet>(classes, source), std::vector<std::size_t>(classes, 0)};
  }

  std::size_t size() const { return entries.size(); }

  const BNStatsSet& lookup(std::size_t kappa) const {
    if (kappa >= entries.size()) {
      throw ParameterError("codebook id " + std::to_string(kappa) + " out of range for " +
                           std::to_string(entries.size()) + " entries");
    }
    return entries[kappa];
  }

  friend bool operator==(const Codebook&, const Codebook&) = default;
};

// ---------------------------------------------------------------------------
// Layer masks
// ---------------------------------------------------------------------------

using LayerMask = std::vector<bool>;

inline LayerMask mask_all(std::size_t num_bn) { return LayerMask(num_bn, true); }

/// The first `count` BN layers.
inline LayerMask mask_prefix(std::size_t num_bn, std::size_t count) {
  if (count > num_bn) throw ParameterError("layer prefix " + std::to_string(count) + " exceeds " + std::to_string(num_bn));
  LayerMask m(num_bn, false);
  std::fill_n(m.begin(), count, true);
  return m;
}

/// The last `count` BN layers.
inline LayerMask mask_suffix(std::size_t num_bn, std::size_t count) {
  if (count > num_bn) throw ParameterError("layer suffix " + std::to_string(count) + " exceeds " + std::to_string(num_bn));
  LayerMask m(num_bn, false);
  std::fill(m.end() - static_cast<std::ptrdiff_t>(count), m.end(), true);
  return m;
}

/// "all", "none", "i" or the inclusive range "i..j".
inline LayerMask parse_layer_mask(std::string_view text, std::size_t num_bn) {
  if (text == "all") return mask_all(num_bn);
  if (text == "none") return LayerMask(num_bn, false);
  auto parse = [&](std::string_view s) {
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
      throw ConfigError("bad layer selection '" + std::string(text) + "': expected all, none, i or i..j");
    }
    return v;
  };
  const auto dots = text.find("..");
  const std::size_t lo = parse(text.substr(0, dots));
  const std::size_t hi = dots == std::string_view::npos ? lo : parse(text.substr(dots + 2));
  if (lo > hi || hi >= num_bn) {
    throw ConfigError("layer selection '" + std::string(text) + "' outside 0.." + std::to_string(num_bn - 1));
  }
  LayerMask m(num_bn, false);
  for (std::size_t i = lo; i <= hi; ++i) m[i] = true;
  return m;
}

// ---------------------------------------------------------------------------
// Update rule
// ---------------------------------------------------------------------------

/// EMA of entry kappa toward the batch moments, layer by layer:
///   mu <- (1 - m) mu + m mu_batch,  var <- (1 - m) var + m var_batch.
/// Layers outside `mask` (when given) are left alone. gamma and beta never change.
inline const BNStatsSet& tta_update(Codebook& cb, std::size_t kappa, const std::vector<BatchStats>& batch,
                                    double momentum, const LayerMask& mask = {}) {
  if (!(momentum > 0.0 && momentum <= 1.0)) {
    throw ParameterError("momentum must be in (0, 1], got " + std::to_string(momentum));
  }
  cb.lookup(kappa);
  BNStatsSet& entry = cb.entries[kappa];
  if (!mask.empty() && mask.size() != entry.size()) {
    throw ConfigError("layer mask has " + std::to_string(mask.size()) + " entries, codebook has " +
                      std::to_string(entry.size()) + " BN layers");
  }
  if (batch.size() != entry.size()) {
    throw ConfigError("batch statistics carry " + std::to_string(batch.size()) + " layers, codebook has " +
                      std::to_string(entry.size()));
  }
  for (std::size_t l = 0; l < entry.size(); ++l) {
    if (!mask.empty() && !mask[l]) continue;
    auto& e = entry.layers[l];
    const auto& b = batch[l];
    if (b.mean.size() != e.channels() || b.var.size() != e.channels()) {
      throw ConfigError("batch statistics of BN layer " + std::to_string(l) + " have " +
                        std::to_string(b.mean.size()) + " channels, entry has " + std::to_string(e.channels()));
    }
    for (std::size_t c = 0; c < e.channels(); ++c) {
      e.mean[c] = (1.0 - momentum) * e.mean[c] + momentum * b.mean[c];
      e.var[c] = (1.0 - momentum) * e.var[c] + momentum * b.var[c];
    }
  }
  ++cb.update_counts[kappa];
  return entry;
}

// ---------------------------------------------------------------------------
// Streaming adaptation
// ---------------------------------------------------------------------------

/// Maps a batch to one codebook id per image (or kRouteToSource).
/// `indices` are the positions of the batch within the stream.
using Router = std::function<std::vector<std::size_t>(const Tensor& images, std::span<const std::size_t> indices)>;

inline Router cim_router(const Cim& cim) {
  return [&cim](const Tensor& images, std::span<const std::size_t>) { return cim.route(images); };
}

/// Routes by the ground-truth corruption id of each stream sample.
inline Router oracle_router(std::span<const CorruptedSample> stream) {
  return [stream](const Tensor&, std::span<const std::size_t> indices) {
    std::vector<std::size_t> out;
    for (std::size_t i : indices) out.push_back(stream[i].corruption);
    return out;
  };
}

/// Replays routes computed earlier (one per stream sample).
inline Router fixed_router(std::vector<std::size_t> routes) {
  return [routes = std::move(routes)](const Tensor&, std::span<const std::size_t> indices) {
    std::vector<std::size_t> out;
    for (std::size_t i : indices) out.push_back(routes.at(i));
    return out;
  };
}

struct AdaptConfig {
  std::size_t batch_size = 64;
  double momentum = 0.1;
  LayerMask mask;  // empty = all BN layers
};

struct AdaptResult {
  std::vector<std::size_t> predictions;  // task class per stream sample
  std::vector<std::size_t> routes;       // codebook id per stream sample
};

namespace detail {

/// Index groups of one batch keyed by route, in ascending key order; order
/// within a group follows the batch.
inline std::map<std::size_t, std::vector<std::size_t>> group_by(std::span<const std::size_t> batch,
                                                                std::span<const std::size_t> keys) {
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < batch.size(); ++i) groups[keys[i]].push_back(batch[i]);
  return groups;
}

inline ForwardOptions capture_options(const BNStatsSet& entry, const LayerMask& mask, std::size_t num_bn,
                                      std::vector<BatchStats>* captured) {
  ForwardOptions o;
  o.stats = &entry;
  o.batch_layers = mask.empty() ? mask_all(num_bn) : mask;
  o.captured = captured;
  return o;
}

inline bool any_layer(const LayerMask& mask) {
  return mask.empty() || std::any_of(mask.begin(), mask.end(), [](bool b) { return b; });
}

}  // namespace detail

/// Sequential test-time adaptation over `stream` in consecutive batches.
/// Each batch is routed, split into groups by route, and each group first
/// updates its entry from its own batch moments and is then classified
/// with the updated entry. Rejected samples use the source statistics.
inline AdaptResult adapt_stream(const Model& model, const Router& route, Codebook& cb,
                                std::span<const CorruptedSample> stream, const AdaptConfig& cfg) {
  if (!(cfg.momentum > 0.0 && cfg.momentum <= 1.0)) {
    throw ParameterError("momentum must be in (0, 1], got " + std::to_string(cfg.momentum));
  }
  model.check_layout(cb.source);
  const std::size_t num_bn = model.num_bn_layers();
  if (!cfg.mask.empty() && cfg.mask.size() != num_bn) {
    throw ConfigError("layer mask has " + std::to_string(cfg.mask.size()) + " entries, model has " +
                      std::to_string(num_bn) + " BN layers");
  }
  AdaptResult out;
  out.predictions.assign(stream.size(), 0);
  out.routes.assign(stream.size(), 0);
  for (const auto& batch : batch_iter(stream.size(), cfg.batch_size)) {
    const Tensor images = stack_images(stream, batch);
    const auto keys = route(images, batch);
    if (keys.size() != batch.size()) throw ContractViolation("router returned the wrong number of routes");
    for (const auto& [kappa, idx] : detail::group_by(batch, keys)) {
      const Tensor x = stack_images(stream, idx);
      const BNStatsSet* stats = &cb.source;
      if (kappa != kRouteToSource) {
        if (detail::any_layer(cfg.mask)) {
          std::vector<BatchStats> captured;
          model.forward(x, detail::capture_options(cb.lookup(kappa), cfg.mask, num_bn, &captured));
          tta_update(cb, kappa, captured, cfg.momentum, cfg.mask);
        }
        stats = &cb.lookup(kappa);
      }
      const auto pred = argmax_rows(model.forward(x, ForwardOptions::with(*stats, BnMode::kUseStored, num_bn)));
      for (std::size_t i = 0; i < idx.size(); ++i) {
        out.predictions[idx[i]] = pred[i];
        out.routes[idx[i]] = kappa;
      }
    }
  }
  return out;
}

/// Lambda_ref: per-type statistics from the same update rule, routed by
/// the true corruption id over the same batch partition as adapt_stream.
struct ReferenceStats {
  std::vector<BNStatsSet> per_type;
};

inline ReferenceStats compute_reference_stats(const Model& model, const BNStatsSet& source, std::size_t classes,
                                              std::span<const CorruptedSample> stream, const AdaptConfig& cfg) {
  for (std::size_t i = 0; i < stream.size(); ++i) {
    if (stream[i].corruption >= classes) {
      throw ContractViolation("reference statistics need a corruption label for every sample; sample " +
                              std::to_string(i) + " has id " + std::to_string(stream[i].corruption));
    }
  }
  Codebook cb = Codebook::init(source, classes);
  model.check_layout(source);
  const std::size_t num_bn = model.num_bn_layers();
  if (detail::any_layer(cfg.mask)) {
    for (const auto& batch : batch_iter(stream.size(), cfg.batch_size)) {
      std::vector<std::size_t> keys;
      for (std::size_t i : batch) keys.push_back(stream[i].corruption);
      for (const auto& [kappa, idx] : detail::group_by(batch, keys)) {
        std::vector<BatchStats> captured;
        model.forward(stack_images(stream, idx), detail::capture_options(cb.lookup(kappa), cfg.mask, num_bn, &captured));
        tta_update(cb, kappa, captured, cfg.momentum, cfg.mask);
      }
    }
  }
  return {std::move(cb.entries)};
}

// ---------------------------------------------------------------------------
// Persistence: "codebook.source.<l>.<field>" and
// "codebook.entry.<k>.<l>.<field>" tensors; counts and eps in metadata.
// ---------------------------------------------------------------------------

namespace detail {

inline void append_stats(std::vector<NamedTensor>& out, const std::string& prefix, const BNStatsSet& s) {
  for (std::size_t l = 0; l < s.size(); ++l) {
    const auto& layer = s.layers[l];
    const std::string p = prefix + std::to_string(l) + ".";
    const std::size_t n = layer.channels();
    out.push_back({p + "mean", Tensor({n}, layer.mean)});
    out.push_back({p + "var", Tensor({n}, layer.var)});
    out.push_back({p + "gamma", Tensor({n}, layer.gamma)});
    out.push_back({p + "beta", Tensor({n}, layer.beta)});
  }
}

inline BNStatsSet read_stats(const Checkpoint& c, const std::string& prefix, const std::vector<double>& eps) {
  BNStatsSet s;
  for (std::size_t l = 0; l < eps.size(); ++l) {
    const std::string p = prefix + std::to_string(l) + ".";
    auto vec = [&](const char* f) {
      const Tensor& t = c.get(p + f);
      return std::vector<double>(t.data().begin(), t.data().end());
    };
    BNLayerStats layer{vec("mean"), vec("var"), vec("gamma"), vec("beta"), eps[l]};
    try {
      layer.validate();
    } catch (const Error& e) {
      throw FormatError("codebook block '" + p + "': " + e.what());
    }
    s.layers.push_back(std::move(layer));
  }
  return s;
}

}  // namespace detail

inline Checkpoint codebook_checkpoint(const Codebook& cb, nlohmann::json extra = nlohmann::json::object()) {
  Checkpoint c;
  c.metadata = std::move(extra);
  c.metadata["kind"] = "codebook";
  c.metadata["entries"] = cb.size();
  c.metadata["update_counts"] = cb.update_counts;
  std::vector<double> eps;
  for (const auto& l : cb.source.layers) eps.push_back(l.eps);
  c.metadata["eps"] = eps;
  detail::append_stats(c.tensors, "codebook.source.", cb.source);
  for (std::size_t k = 0; k < cb.size(); ++k) {
    detail::append_stats(c.tensors, "codebook.entry." + std::to_string(k) + ".", cb.entries[k]);
  }
  return c;
}

inline Codebook codebook_from_checkpoint(const Checkpoint& c) {
  if (c.metadata.value("kind", "") != "codebook") throw FormatError("checkpoint is not a codebook");
  try {
    const auto eps = c.metadata.at("eps").get<std::vector<double>>();
    const auto k = c.metadata.at("entries").get<std::size_t>();
    Codebook cb;
    cb.source = detail::read_stats(c, "codebook.source.", eps);
    for (std::size_t i = 0; i < k; ++i) {
      cb.entries.push_back(detail::read_stats(c, "codebook.entry." + std::to_string(i) + ".", eps));
    }
    cb.update_counts = c.metadata.at("update_counts").get<std::vector<std::size_t>>();
    if (cb.update_counts.size() != k) throw FormatError("codebook update_counts length differs from entry count");
    return cb;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed codebook metadata: ") + e.what());
  }
}

}  // namespace pan
