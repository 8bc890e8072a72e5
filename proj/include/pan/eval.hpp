// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

// Metrics and reports: accuracy per (corruption, severity), mCE,
// statistics divergence, layer ablation and CSV/JSON output.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "pan/codebook.hpp"
#include "pan/dataset.hpp"
#include "pan/errors.hpp"
#include "pan/model.hpp"

namespace pan {

/// Fixed-point text for reports, so bytes do not depend on the locale or
/// on shortest-round-trip formatting.
inline std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline double percent(std::size_t correct, std::size_t n) {
  return n == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Classification accuracy
// ---------------------------------------------------------------------------

struct GroupAccuracy {
  std::size_t corruption = 0;
  int severity = 0;
  std::size_t n = 0;
  std::size_t correct = 0;
  double ca() const { return percent(correct, n); }
};

struct Tally {
  std::size_t n = 0, correct = 0;
  double ca() const { return percent(correct, n); }
};

struct AccuracyReport {
  std::vector<GroupAccuracy> groups;  // ordered by (corruption id, severity)
  Tally corrupted;                    // every non-clean sample
  Tally clean;
  Tally total;
  std::vector<std::pair<std::size_t, int>> omitted;  // expected groups with no samples
};

/// Scores `predictions` against the labels of `samples`. Expected groups
/// are every registry type at every severity in `severities`; empty ones
/// are listed in `omitted`.
inline AccuracyReport score(std::span<const CorruptedSample> samples, std::span<const std::size_t> predictions,
                            const CorruptionRegistry& registry, const std::vector<int>& severities) {
  if (predictions.size() != samples.size()) {
    throw ContractViolation("score: " + std::to_string(predictions.size()) + " predictions for " +
                            std::to_string(samples.size()) + " samples");
  }
  std::map<std::pair<std::size_t, int>, GroupAccuracy> groups;
  for (std::size_t k = 0; k < registry.size(); ++k) {
    for (int s : severities) groups[{k, s}] = {k, s, 0, 0};
  }
  AccuracyReport r;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& smp = samples[i];
    if (smp.corruption >= registry.size()) throw ContractViolation("sample corruption id outside registry");
    auto& g = groups[{smp.corruption, smp.severity.level()}];
    g.corruption = smp.corruption;
    g.severity = smp.severity.level();
    const bool ok = predictions[i] == smp.item.label;
    ++g.n;
    g.correct += ok;
    Tally& t = smp.corruption == registry.clean_id() ? r.clean : r.corrupted;
    ++t.n;
    t.correct += ok;
    ++r.total.n;
    r.total.correct += ok;
  }
  for (const auto& [key, g] : groups) {
    if (g.n == 0) {
      r.omitted.push_back(key);
    } else {
      r.groups.push_back(g);
    }
  }
  return r;
}

/// Codebook entries selected by a router, used as they are (no updates).
struct RoutedCodebook {
  const Codebook* codebook = nullptr;
  Router router;
};

using StatsSource = std::variant<BNStatsSet, RoutedCodebook>;

inline std::vector<std::size_t> predict_fixed(const Model& model, const BNStatsSet& stats,
                                              std::span<const CorruptedSample> samples, std::size_t batch_size = 128) {
  std::vector<std::size_t> out(samples.size());
  const auto opts = ForwardOptions::with(stats, BnMode::kUseStored, model.num_bn_layers());
  for (const auto& idx : batch_iter(samples.size(), batch_size)) {
    const auto pred = argmax_rows(model.forward(stack_images(samples, idx), opts));
    for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]] = pred[i];
  }
  return out;
}

inline std::vector<std::size_t> predict_codebook(const Model& model, const RoutedCodebook& src,
                                                 std::span<const CorruptedSample> samples,
                                                 std::size_t batch_size = 128) {
  std::vector<std::size_t> out(samples.size());
  const std::size_t num_bn = model.num_bn_layers();
  for (const auto& batch : batch_iter(samples.size(), batch_size)) {
    const auto keys = src.router(stack_images(samples, batch), batch);
    for (const auto& [kappa, idx] : detail::group_by(batch, keys)) {
      const BNStatsSet& stats = kappa == kRouteToSource ? src.codebook->source : src.codebook->lookup(kappa);
      const auto pred =
          argmax_rows(model.forward(stack_images(samples, idx), ForwardOptions::with(stats, BnMode::kUseStored, num_bn)));
      for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]] = pred[i];
    }
  }
  return out;
}

/// Accuracy of `model` with the given statistics source. Never mutates it.
inline AccuracyReport eval_ca(const Model& model, const StatsSource& source, std::span<const CorruptedSample> samples,
                              const CorruptionRegistry& registry, const std::vector<int>& severities) {
  const auto preds = std::visit(
      [&](const auto& s) {
        if constexpr (std::is_same_v<std::decay_t<decltype(s)>, BNStatsSet>) {
          return predict_fixed(model, s, samples);
        } else {
          return predict_codebook(model, s, samples);
        }
      },
      source);
  return score(samples, preds, registry, severities);
}

// ---------------------------------------------------------------------------
// mCE
// ---------------------------------------------------------------------------

/// Mean over corruption types (clean excluded) of
/// 100 * sum_s err(type, s) / sum_s baseline_err(type, s).
inline double eval_mce(const AccuracyReport& model, const AccuracyReport& baseline, const CorruptionRegistry& registry) {
  if (model.groups.size() != baseline.groups.size()) {
    throw ConfigError("mCE needs identical groups: model has " + std::to_string(model.groups.size()) +
                      ", baseline has " + std::to_string(baseline.groups.size()));
  }
  std::map<std::size_t, std::pair<double, double>> per_type;
  for (std::size_t i = 0; i < model.groups.size(); ++i) {
    const auto& a = model.groups[i];
    const auto& b = baseline.groups[i];
    if (a.corruption != b.corruption || a.severity != b.severity || a.n != b.n) {
      throw ConfigError("mCE group mismatch at " + registry.names()[a.corruption] + " severity " +
                        std::to_string(a.severity));
    }
    if (a.corruption == registry.clean_id()) continue;
    auto& [err, base] = per_type[a.corruption];
    err += 100.0 - a.ca();
    base += 100.0 - b.ca();
  }
  if (per_type.empty()) throw ConfigError("mCE needs at least one corruption type");
  double sum = 0.0;
  for (const auto& [k, e] : per_type) {
    if (e.second == 0.0) {
      throw NumericalError("mCE undefined: baseline error is 0 for corruption '" + registry.names()[k] + "'");
    }
    sum += e.first / e.second * 100.0;
  }
  return sum / static_cast<double>(per_type.size());
}

// ---------------------------------------------------------------------------
// Corruption-identification confusion
// ---------------------------------------------------------------------------

/// rows = true corruption id, columns = routed id; rejected samples are
/// counted in an extra last column.
inline std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const CorruptedSample> samples,
                                                              std::span<const std::size_t> routes, std::size_t classes) {
  std::vector<std::vector<std::size_t>> m(classes, std::vector<std::size_t>(classes + 1, 0));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::size_t col = routes[i] == kRouteToSource ? classes : routes[i];
    ++m.at(samples[i].corruption).at(col);
  }
  return m;
}

inline double confusion_accuracy(const std::vector<std::vector<std::size_t>>& m) {
  std::size_t n = 0, ok = 0;
  for (std::size_t k = 0; k < m.size(); ++k) {
    for (std::size_t j = 0; j < m[k].size(); ++j) n += m[k][j];
    ok += m[k][k];
  }
  return percent(ok, n);
}

// ---------------------------------------------------------------------------
// Statistics divergence
// ---------------------------------------------------------------------------

/// L2 norm of the concatenated (mean, var) difference of one BN layer.
inline double stats_distance(const BNLayerStats& a, const BNLayerStats& b) {
  if (a.channels() != b.channels()) throw ConfigError("statistics layout mismatch");
  double s = 0.0;
  for (std::size_t c = 0; c < a.channels(); ++c) {
    s += (a.mean[c] - b.mean[c]) * (a.mean[c] - b.mean[c]);
    s += (a.var[c] - b.var[c]) * (a.var[c] - b.var[c]);
  }
  return std::sqrt(s);
}

struct DivergenceRow {
  std::size_t corruption = 0;
  std::size_t layer = 0;
  double adapted_to_reference = 0.0;
  double source_to_reference = 0.0;
};

struct DivergenceSummary {
  std::size_t corruption = 0;
  double adapted_to_reference = 0.0;  // layer-averaged
  double source_to_reference = 0.0;
};

inline std::vector<DivergenceRow> stats_divergence(const Codebook& cb, const ReferenceStats& ref) {
  if (ref.per_type.size() != cb.size()) {
    throw ConfigError("reference has " + std::to_string(ref.per_type.size()) + " types, codebook has " +
                      std::to_string(cb.size()));
  }
  std::vector<DivergenceRow> rows;
  for (std::size_t k = 0; k < cb.size(); ++k) {
    const auto& e = cb.entries[k];
    const auto& r = ref.per_type[k];
    if (!e.same_layout(r) || !cb.source.same_layout(r)) {
      throw ConfigError("statistics layout mismatch for corruption " + std::to_string(k));
    }
    for (std::size_t l = 0; l < e.size(); ++l) {
      rows.push_back({k, l, stats_distance(e.layers[l], r.layers[l]), stats_distance(cb.source.layers[l], r.layers[l])});
    }
  }
  return rows;
}

inline std::vector<DivergenceSummary> summarize_divergence(const std::vector<DivergenceRow>& rows) {
  std::map<std::size_t, std::pair<DivergenceSummary, std::size_t>> acc;
  for (const auto& r : rows) {
    auto& [s, n] = acc[r.corruption];
    s.corruption = r.corruption;
    s.adapted_to_reference += r.adapted_to_reference;
    s.source_to_reference += r.source_to_reference;
    ++n;
  }
  std::vector<DivergenceSummary> out;
  for (auto& [k, v] : acc) {
    v.first.adapted_to_reference /= static_cast<double>(v.second);
    v.first.source_to_reference /= static_cast<double>(v.second);
    out.push_back(v.first);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer ablation
// ---------------------------------------------------------------------------

enum class AblationDirection { kFromFirst, kFromLast };

inline std::string_view direction_name(AblationDirection d) {
  return d == AblationDirection::kFromFirst ? "from-first" : "from-last";
}

struct AblationPoint {
  AblationDirection direction = AblationDirection::kFromFirst;
  std::size_t layers = 0;
  double corrupted_ca = 0.0;
};

/// Corrupted CA of a fresh adaptation run for every prefix (or suffix) of
/// BN layers, from 0 layers (source statistics) to all of them.
inline std::vector<AblationPoint> layer_ablation_sweep(const Model& model, const Router& router,
                                                       std::span<const CorruptedSample> stream,
                                                       const CorruptionRegistry& registry,
                                                       const std::vector<int>& severities, AdaptConfig cfg,
                                                       AblationDirection dir) {
  const std::size_t num_bn = model.num_bn_layers();
  if (num_bn < 2) throw ConfigError("layer ablation needs at least two BN layers");
  std::vector<AblationPoint> out;
  for (std::size_t n = 0; n <= num_bn; ++n) {
    cfg.mask = dir == AblationDirection::kFromFirst ? mask_prefix(num_bn, n) : mask_suffix(num_bn, n);
    Codebook cb = Codebook::init(model.bn_stats(), registry.size());
    const auto res = adapt_stream(model, router, cb, stream, cfg);
    out.push_back({dir, n, score(stream, res.predictions, registry, severities).corrupted.ca()});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// FNV-1a 64 of the canonical JSON text, as 16 hex digits.
inline std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct EvalReport {
  CorruptionRegistry registry;
  std::string baseline_name = "source";
  AccuracyReport source;
  AccuracyReport adapted;
  double mce = 0.0;
  std::vector<std::vector<std::size_t>> confusion;
  std::vector<DivergenceRow> divergence;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
};

inline nlohmann::json accuracy_json(const AccuracyReport& r, const CorruptionRegistry& reg) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : r.groups) {
    groups.push_back({{"corruption", reg.names()[g.corruption]},
                      {"severity", g.severity},
                      {"n", g.n},
                      {"correct", g.correct},
                      {"ca", fixed(g.ca())}});
  }
  nlohmann::json omitted = nlohmann::json::array();
  for (const auto& [k, s] : r.omitted) omitted.push_back({{"corruption", reg.names()[k]}, {"severity", s}});
  auto tally = [](const Tally& t) { return nlohmann::json{{"n", t.n}, {"correct", t.correct}, {"ca", fixed(t.ca())}}; };
  return {{"groups", groups},
          {"omitted", omitted},
          {"corrupted", tally(r.corrupted)},
          {"clean", tally(r.clean)},
          {"total", tally(r.total)}};
}

inline nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json div = nlohmann::json::array();
  for (const auto& s : summarize_divergence(r.divergence)) {
    div.push_back({{"corruption", r.registry.names()[s.corruption]},
                   {"adapted_to_reference", fixed(s.adapted_to_reference, 9)},
                   {"source_to_reference", fixed(s.source_to_reference, 9)}});
  }
  return {{"registry", r.registry.names()},
          {"baseline", r.baseline_name},
          {"source", accuracy_json(r.source, r.registry)},
          {"adapted", accuracy_json(r.adapted, r.registry)},
          {"mce", fixed(r.mce)},
          {"cim_confusion", r.confusion},
          {"cim_accuracy", fixed(confusion_accuracy(r.confusion))},
          {"divergence", div},
          {"config", r.config},
          {"config_hash", config_hash(r.config)},
          {"seed", r.seed}};
}

/// eval.csv: corruption,severity,n,correct,ca
inline std::string eval_csv(const AccuracyReport& r, const CorruptionRegistry& reg) {
  std::ostringstream os;
  os << "corruption,severity,n,correct,ca\n";
  for (const auto& g : r.groups) {
    os << reg.names()[g.corruption] << ',' << g.severity << ',' << g.n << ',' << g.correct << ',' << fixed(g.ca())
       << '\n';
  }
  return os.str();
}

/// divergence.csv: corruption,layer,adapted_to_reference,source_to_reference
inline std::string divergence_csv(const std::vector<DivergenceRow>& rows, const CorruptionRegistry& reg) {
  std::ostringstream os;
  os << "corruption,layer,adapted_to_reference,source_to_reference\n";
  for (const auto& r : rows) {
    os << reg.names()[r.corruption] << ',' << r.layer << ',' << fixed(r.adapted_to_reference, 9) << ','
       << fixed(r.source_to_reference, 9) << '\n';
  }
  return os.str();
}

/// confusion.csv: true,<predicted names...>,rejected
inline std::string confusion_csv(const std::vector<std::vector<std::size_t>>& m, const CorruptionRegistry& reg) {
  std::ostringstream os;
  os << "true";
  for (const auto& n : reg.names()) os << ',' << n;
  os << ",rejected\n";
  for (std::size_t k = 0; k < m.size(); ++k) {
    os << reg.names()[k];
    for (std::size_t v : m[k]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

/// ablation.csv: direction,layers,corrupted_ca
inline std::string ablation_csv(const std::vector<AblationPoint>& pts) {
  std::ostringstream os;
  os << "direction,layers,corrupted_ca\n";
  for (const auto& p : pts) os << direction_name(p.direction) << ',' << p.layers << ',' << fixed(p.corrupted_ca) << '\n';
  return os.str();
}

/// features.csv: index,corruption,severity,label,z0..z{q-1}
inline std::string features_csv(const Tensor& z, std::span<const CorruptedSample> samples,
                                const CorruptionRegistry& reg) {
  std::ostringstream os;
  const std::size_t q = z.dim(1);
  os << "index,corruption,severity,label";
  for (std::size_t j = 0; j < q; ++j) os << ",z" << j;
  os << '\n';
  for (std::size_t i = 0; i < samples.size(); ++i) {
    os << i << ',' << reg.names()[samples[i].corruption] << ',' << samples[i].severity.level() << ','
       << samples[i].item.label;
    for (std::size_t j = 0; j < q; ++j) os << ',' << fixed(z[i * q + j], 9);
    os << '\n';
  }
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + path.string() + "'");
  f << text;
}

/// report.json plus eval.csv, source_eval.csv, divergence.csv, confusion.csv.
inline void write_report(const std::filesystem::path& dir, const EvalReport& r) {
  write_text(dir / "report.json", report_json(r).dump(2) + "\n");
  write_text(dir / "eval.csv", eval_csv(r.adapted, r.registry));
  write_text(dir / "source_eval.csv", eval_csv(r.source, r.registry));
  write_text(dir / "divergence.csv", divergence_csv(r.divergence, r.registry));
  write_text(dir / "confusion.csv", confusion_csv(r.confusion, r.registry));
}

}  // namespace pan
