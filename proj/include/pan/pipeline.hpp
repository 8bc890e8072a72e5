// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

// Desk-scale experiment: data synthesis, source training, CIM training,
// streaming adaptation and evaluation, with one config for all stages.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pan/cim.hpp"
#include "pan/codebook.hpp"
#include "pan/dataset.hpp"
#include "pan/eval.hpp"
#include "pan/model.hpp"
#include "pan/train.hpp"

namespace pan {

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t num_classes = 8;
  std::size_t train_images = 2000;  // clean source training set
  std::size_t cim_images = 100;     // clean images per (type, severity) for the CIM
  std::size_t test_images = 100;    // clean images per (type, severity) in the test stream
  std::vector<std::string> types = {"gaussian_noise", "impulse_noise", "defocus_blur",
                                    "contrast",       "brightness",    "fog"};
  std::vector<int> severities = {3, 4, 5};

  std::size_t source_epochs = 10;
  double source_lr = 0.02;
  std::size_t batch_size = 64;

  std::size_t feature_dim = 32;
  std::size_t cim_epochs = 6;
  std::size_t cim_batch = 16;
  double cim_lr = 0.02;
  double alpha = 10.0;
  double lambda = 0.1;

  std::size_t adapt_batch = 64;
  double momentum = 0.1;

  CorruptionRegistry registry() const { return CorruptionRegistry::from_names(types); }
  std::vector<Severity> severity_levels() const {
    std::vector<Severity> s;
    for (int v : severities) s.emplace_back(v);
    return s;
  }
  void validate() const;
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"seed", c.seed},
       {"num_classes", c.num_classes},
       {"train_images", c.train_images},
       {"cim_images", c.cim_images},
       {"test_images", c.test_images},
       {"types", c.types},
       {"severities", c.severities},
       {"source_epochs", c.source_epochs},
       {"source_lr", c.source_lr},
       {"batch_size", c.batch_size},
       {"feature_dim", c.feature_dim},
       {"cim_epochs", c.cim_epochs},
       {"cim_batch", c.cim_batch},
       {"cim_lr", c.cim_lr},
       {"alpha", c.alpha},
       {"lambda", c.lambda},
       {"adapt_batch", c.adapt_batch},
       {"momentum", c.momentum}};
}

inline void ExperimentConfig::validate() const {
  if (num_classes < 2 || num_classes > kShapeNames.size()) {
    throw ConfigError("num_classes must be in 2.." + std::to_string(kShapeNames.size()));
  }
  if (types.empty()) throw ConfigError("types must name at least one corruption");
  for (const auto& t : types) {
    if (t == "clean") throw ConfigError("types must not list 'clean'; it is always included");
    try {
      corruption_from_name(t);
    } catch (const ParameterError& e) {
      throw ConfigError(e.what());
    }
  }
  if (severities.empty()) throw ConfigError("severities must not be empty");
  for (int s : severities) {
    if (s < 1 || s > 5) throw ConfigError("severity " + std::to_string(s) + " outside 1..5");
  }
  if (train_images < num_classes || cim_images == 0 || test_images == 0) throw ConfigError("dataset sizes too small");
  if (batch_size == 0 || cim_batch == 0 || adapt_batch == 0) throw ConfigError("batch sizes must be >= 1");
  if (feature_dim < types.size() + 1) throw ConfigError("feature_dim must be >= number of corruption types + 1");
  if (!(momentum > 0.0 && momentum <= 1.0)) throw ConfigError("momentum must be in (0, 1]");
  if (!(source_lr >= 0.0 && cim_lr >= 0.0)) throw ConfigError("learning rates must be >= 0");
}

/// Applies "key = value" settings. Lists are comma separated; severities
/// also accept a range "a..b". Unknown keys are a configuration error.
inline void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& value) {
  auto as_size = [&]() -> std::size_t {
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(value, &pos);
      if (pos != value.size() || v < 0) throw std::invalid_argument("");
      return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ConfigError("'" + key + "' expects a non-negative integer, got '" + value + "'");
    }
  };
  auto as_double = [&]() {
    try {
      std::size_t pos = 0;
      const double v = std::stod(value, &pos);
      if (pos != value.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("'" + key + "' expects a number, got '" + value + "'");
    }
  };
  auto as_list = [&]() {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : value + ",") {
      if (ch == ',') {
        if (!cur.empty()) out.push_back(cur);
        cur.clear();
      } else if (ch != ' ') {
        cur += ch;
      }
    }
    return out;
  };
  if (key == "seed") {
    c.seed = as_size();
  } else if (key == "num_classes") {
    c.num_classes = as_size();
  } else if (key == "train_images") {
    c.train_images = as_size();
  } else if (key == "cim_images") {
    c.cim_images = as_size();
  } else if (key == "test_images") {
    c.test_images = as_size();
  } else if (key == "types") {
    c.types = as_list();
  } else if (key == "severities") {
    c.severities.clear();
    const auto dots = value.find("..");
    if (dots != std::string::npos) {
      int lo = 0, hi = 0;
      try {
        lo = std::stoi(value.substr(0, dots));
        hi = std::stoi(value.substr(dots + 2));
      } catch (const std::exception&) {
        throw ConfigError("bad severity range '" + value + "'");
      }
      for (int s = lo; s <= hi; ++s) c.severities.push_back(s);
    } else {
      for (const auto& s : as_list()) {
        try {
          c.severities.push_back(std::stoi(s));
        } catch (const std::exception&) {
          throw ConfigError("bad severity '" + s + "'");
        }
      }
    }
  } else if (key == "source_epochs") {
    c.source_epochs = as_size();
  } else if (key == "source_lr") {
    c.source_lr = as_double();
  } else if (key == "batch_size") {
    c.batch_size = as_size();
  } else if (key == "feature_dim") {
    c.feature_dim = as_size();
  } else if (key == "cim_epochs") {
    c.cim_epochs = as_size();
  } else if (key == "cim_batch") {
    c.cim_batch = as_size();
  } else if (key == "cim_lr") {
    c.cim_lr = as_double();
  } else if (key == "alpha") {
    c.alpha = as_double();
  } else if (key == "lambda") {
    c.lambda = as_double();
  } else if (key == "adapt_batch") {
    c.adapt_batch = as_size();
  } else if (key == "momentum") {
    c.momentum = as_double();
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

/// Config text: one "key = value" per line; blank lines and lines starting
/// with '#' are ignored.
inline void apply_config_text(ExperimentConfig& c, const std::string& text, const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  while (std::getline(in, line)) {
    ++number;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    try {
      apply_setting(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

inline void apply_config_file(ExperimentConfig& c, const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  apply_config_text(c, std::string(bytes.begin(), bytes.end()), path.string());
}

// Stream ids for Rng(seed).derive(...), one per experiment stage.
enum class Stage : std::uint64_t { kTrainData = 1, kSourceInit, kSourceTrain, kCimData, kCimInit, kCimTrain, kTestData };

inline Rng stage_rng(const ExperimentConfig& c, Stage s) { return Rng(c.seed).derive(static_cast<std::uint64_t>(s)); }

inline std::vector<LabeledImage> source_training_data(const ExperimentConfig& c) {
  return procedural_shapes(c.train_images, c.num_classes, stage_rng(c, Stage::kTrainData).next_u64());
}

inline Model train_source(const ExperimentConfig& c, const std::vector<LabeledImage>& data,
                          TrainResult* log = nullptr) {
  Model m(source_classifier(c.num_classes), stage_rng(c, Stage::kSourceInit));
  TrainConfig tc;
  tc.epochs = c.source_epochs;
  tc.batch_size = c.batch_size;
  tc.sgd.lr = c.source_lr;
  tc.seed = stage_rng(c, Stage::kSourceTrain).next_u64();
  auto r = train_supervised(m, data, tc);
  if (log) *log = std::move(r);
  return m;
}

/// Corrupted copies of fresh clean images under every registry type
/// (clean included) at every configured severity.
inline CorruptedDataset corrupted_split(const ExperimentConfig& c, std::size_t per_group, Stage stage) {
  Rng rng = stage_rng(c, stage);
  const auto clean = procedural_shapes(per_group, c.num_classes, rng.derive(0).next_u64());
  CorruptedDataset ds;
  ds.registry = c.registry();
  ds.severities = c.severities;
  ds.seed = c.seed;
  ds.num_classes = c.num_classes;
  ds.samples = build_corrupted_dataset(clean, ds.registry, ds.registry.kinds(), c.severity_levels(), rng.derive(1));
  return ds;
}

inline CorruptedDataset cim_training_data(const ExperimentConfig& c) {
  return corrupted_split(c, c.cim_images, Stage::kCimData);
}

/// Test stream, shuffled so batches mix corruption types.
inline CorruptedDataset test_stream(const ExperimentConfig& c) {
  CorruptedDataset ds = corrupted_split(c, c.test_images, Stage::kTestData);
  Rng r = stage_rng(c, Stage::kTestData).derive(2);
  r.shuffle(std::span<CorruptedSample>(ds.samples));
  return ds;
}

inline Cim train_cim_stage(const ExperimentConfig& c, const CorruptedDataset& data, CimTrainResult* log = nullptr) {
  const std::size_t k = data.registry.size();
  Cim cim;
  cim.registry = data.registry;
  cim.lambda = c.lambda;
  cim.anchors = make_anchors(k, c.feature_dim, c.alpha);
  cim.encoder = Model(cim_encoder(c.feature_dim), stage_rng(c, Stage::kCimInit));
  Linear head = make_cim_head(c.feature_dim, k, stage_rng(c, Stage::kCimInit).derive(1));
  CimTrainConfig tc;
  tc.epochs = c.cim_epochs;
  tc.batch_size = c.cim_batch;
  tc.lambda = c.lambda;
  tc.sgd.lr = c.cim_lr;
  tc.seed = stage_rng(c, Stage::kCimTrain).next_u64();
  auto r = train_cim(cim.encoder, head, data.samples, cim.anchors, tc);
  if (log) *log = std::move(r);
  cim.prototypes = build_prototypes(cim.encoder, data.samples, k, data.registry.names());
  return cim;
}

inline AdaptConfig adapt_config(const ExperimentConfig& c) { return {c.adapt_batch, c.momentum, {}}; }

/// Everything one adaptation run produces, plus the report built from it.
struct PanRun {
  Codebook codebook;
  AdaptResult adapt;
  ReferenceStats reference;
  EvalReport report;
};

/// Frozen-source evaluation, CIM-routed adaptation over the stream, label-
/// routed reference statistics, and the report comparing them.
inline PanRun run_pan(const ExperimentConfig& c, const Model& model, const Cim& cim, const CorruptedDataset& stream,
                      const AdaptConfig& cfg) {
  if (cim.registry.names() != stream.registry.names()) {
    throw ConfigError("CIM and stream disagree on corruption types");
  }
  const auto& reg = stream.registry;
  PanRun run;
  run.codebook = Codebook::init(model.bn_stats(), reg.size());
  run.adapt = adapt_stream(model, cim_router(cim), run.codebook, stream.samples, cfg);
  run.reference = compute_reference_stats(model, model.bn_stats(), reg.size(), stream.samples, cfg);
  EvalReport& r = run.report;
  r.registry = reg;
  r.source = eval_ca(model, model.bn_stats(), stream.samples, reg, stream.severities);
  r.adapted = score(stream.samples, run.adapt.predictions, reg, stream.severities);
  r.mce = eval_mce(r.adapted, r.source, reg);
  r.confusion = confusion_matrix(stream.samples, run.adapt.routes, reg.size());
  r.divergence = stats_divergence(run.codebook, run.reference);
  r.config = c;
  r.seed = c.seed;
  return run;
}

}  // namespace pan
