// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

// pan: command-line driver for the staged experiment.
//
// Every stage reads the same key=value config (--config) and writes its
// artifacts under --out. Inputs a stage does not receive explicitly are
// synthesized from the config, so each stage also runs on its own.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pan/pan.hpp"

namespace fs = std::filesystem;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out = "pan_out";
  std::vector<std::string> set;
};

pan::ExperimentConfig load_config(const Globals& g) {
  pan::ExperimentConfig c;
  if (!g.config.empty()) pan::apply_config_file(c, g.config);
  for (const auto& kv : g.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw pan::ConfigError("--set expects key=value, got '" + kv + "'");
    pan::apply_setting(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) c.seed = *g.seed;
  c.validate();
  return c;
}

pan::CorruptedDataset load_or_synth_stream(const pan::ExperimentConfig& c, const std::string& dir) {
  if (!dir.empty()) return pan::read_dataset(dir);
  return pan::test_stream(c);
}

pan::Model load_model(const std::string& path) {
  if (path.empty()) throw pan::ConfigError("--model is required");
  const auto ckpt = pan::load_checkpoint(path);
  if (ckpt.metadata.value("kind", "") != "model") throw pan::FormatError("'" + path + "' is not a model checkpoint");
  return pan::model_from_checkpoint(ckpt);
}

pan::Cim load_cim(const std::string& path) {
  if (path.empty()) throw pan::ConfigError("--cim is required");
  return pan::cim_from_checkpoint(pan::load_checkpoint(path));
}

void print_tally(const char* what, const pan::AccuracyReport& r) {
  std::printf("%-8s corrupted CA %s  clean CA %s  total CA %s\n", what, pan::fixed(r.corrupted.ca(), 2).c_str(),
              pan::fixed(r.clean.ca(), 2).c_str(), pan::fixed(r.total.ca(), 2).c_str());
}

std::string epochs_csv(const std::vector<double>& loss, const std::vector<double>& acc) {
  std::string s = "epoch,loss,accuracy\n";
  for (std::size_t e = 0; e < loss.size(); ++e) s += std::to_string(e) + "," + pan::fixed(loss[e]) + "," + pan::fixed(acc[e]) + "\n";
  return s;
}

std::vector<pan::LabeledImage> items_of(const pan::CorruptedDataset& ds) {
  std::vector<pan::LabeledImage> out;
  out.reserve(ds.samples.size());
  for (const auto& s : ds.samples) out.push_back(s.item);
  return out;
}

pan::Model train_source_stage(const pan::ExperimentConfig& c, const std::string& data_dir, const fs::path& out) {
  const auto data = data_dir.empty() ? pan::source_training_data(c) : items_of(pan::read_dataset(data_dir));
  pan::TrainResult log;
  pan::Model m = pan::train_source(c, data, &log);
  pan::save_checkpoint(out / "source.ckpt", pan::model_checkpoint(m, {{"config", c}}));
  pan::write_text(out / "source_train.csv", epochs_csv(log.epoch_loss, log.epoch_accuracy));
  std::printf("source: %zu images, final train accuracy %s%%\n", data.size(),
              pan::fixed(log.epoch_accuracy.empty() ? 0.0 : log.epoch_accuracy.back(), 2).c_str());
  return m;
}

pan::Cim train_cim_cmd(const pan::ExperimentConfig& c, const std::string& data_dir, std::optional<double> reject,
                       const fs::path& out) {
  const auto data = data_dir.empty() ? pan::cim_training_data(c) : pan::read_dataset(data_dir);
  pan::CimTrainResult log;
  pan::Cim cim = pan::train_cim_stage(c, data, &log);
  cim.reject_threshold = reject;
  pan::save_checkpoint(out / "cim.ckpt", pan::cim_checkpoint(cim, {{"config", c}}));
  std::string csv = "epoch,loss,anchor_distance,head_accuracy\n";
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) {
    csv += std::to_string(e) + "," + pan::fixed(log.epoch_loss[e]) + "," + pan::fixed(log.epoch_anchor_distance[e]) +
           "," + pan::fixed(log.epoch_head_accuracy[e]) + "\n";
  }
  pan::write_text(out / "cim_train.csv", csv);
  std::printf("cim: %zu samples, %zu types\n", data.samples.size(), data.registry.size());
  return cim;
}

void eval_cmd(const pan::ExperimentConfig& c, const pan::Model& model, const pan::Cim& cim,
              const pan::CorruptedDataset& stream, const fs::path& out) {
  const auto run = pan::run_pan(c, model, cim, stream, pan::adapt_config(c));
  pan::write_report(out, run.report);
  pan::save_checkpoint(out / "codebook.ckpt", pan::codebook_checkpoint(run.codebook));
  print_tally("source", run.report.source);
  print_tally("pan", run.report.adapted);
  std::printf("mCE %s (baseline: %s)  CIM accuracy %s%%\n", pan::fixed(run.report.mce, 2).c_str(),
              run.report.baseline_name.c_str(), pan::fixed(pan::confusion_accuracy(run.report.confusion), 2).c_str());
}

std::vector<pan::AblationPoint> ablate_cmd(const pan::ExperimentConfig& c, const pan::Model& model,
                                           const pan::Cim& cim, const pan::CorruptedDataset& stream,
                                           const std::string& direction, const fs::path& out) {
  std::vector<pan::AblationDirection> dirs;
  if (direction == "from-first" || direction == "both") dirs.push_back(pan::AblationDirection::kFromFirst);
  if (direction == "from-last" || direction == "both") dirs.push_back(pan::AblationDirection::kFromLast);
  if (dirs.empty()) throw pan::ConfigError("--direction must be from-first, from-last or both");
  // Route once; every sweep point reuses the same routes.
  pan::Codebook scratch = pan::Codebook::init(model.bn_stats(), stream.registry.size());
  pan::AdaptConfig probe = pan::adapt_config(c);
  probe.mask.assign(model.num_bn_layers(), false);
  const auto routes = pan::adapt_stream(model, pan::cim_router(cim), scratch, stream.samples, probe).routes;
  std::vector<pan::AblationPoint> pts;
  for (auto d : dirs) {
    const auto part = pan::layer_ablation_sweep(model, pan::fixed_router(routes), stream.samples, stream.registry,
                                                stream.severities, pan::adapt_config(c), d);
    pts.insert(pts.end(), part.begin(), part.end());
  }
  pan::write_text(out / "ablation.csv", pan::ablation_csv(pts));
  for (const auto& p : pts) {
    std::printf("%-10s %zu layers: corrupted CA %s\n", std::string(pan::direction_name(p.direction)).c_str(), p.layers,
                pan::fixed(p.corrupted_ca, 2).c_str());
  }
  return pts;
}

void report_cmd(const fs::path& dir) {
  const auto bytes = pan::detail::read_file(dir / "report.json");
  nlohmann::json r;
  try {
    r = nlohmann::json::parse(bytes.begin(), bytes.end());
    std::printf("%-16s %9s %9s\n", "corruption", "source", "pan");
    std::map<std::string, std::pair<std::size_t, std::size_t>> src, ada;
    for (const auto& g : r.at("source").at("groups")) {
      auto& t = src[g.at("corruption").get<std::string>()];
      t.first += g.at("n").get<std::size_t>();
      t.second += g.at("correct").get<std::size_t>();
    }
    for (const auto& g : r.at("adapted").at("groups")) {
      auto& t = ada[g.at("corruption").get<std::string>()];
      t.first += g.at("n").get<std::size_t>();
      t.second += g.at("correct").get<std::size_t>();
    }
    for (const auto& name : r.at("registry")) {
      const auto n = name.get<std::string>();
      std::printf("%-16s %9s %9s\n", n.c_str(), pan::fixed(pan::percent(src[n].second, src[n].first), 2).c_str(),
                  pan::fixed(pan::percent(ada[n].second, ada[n].first), 2).c_str());
    }
    std::printf("%-16s %9s %9s\n", "corrupted", r.at("source").at("corrupted").at("ca").get<std::string>().c_str(),
                r.at("adapted").at("corrupted").at("ca").get<std::string>().c_str());
    std::printf("mCE %s (baseline: %s), CIM accuracy %s%%, config %s\n", r.at("mce").get<std::string>().c_str(),
                r.at("baseline").get<std::string>().c_str(), r.at("cim_accuracy").get<std::string>().c_str(),
                r.at("config_hash").get<std::string>().c_str());
  } catch (const nlohmann::json::exception& e) {
    throw pan::FormatError("report.json: " + std::string(e.what()));
  }
}

void inspect_cmd(const std::string& dir) {
  const auto ds = pan::read_dataset(dir);
  std::printf("%zu samples, %zu classes, seed %llu\n", ds.samples.size(), ds.num_classes,
              static_cast<unsigned long long>(ds.seed));
  std::map<std::pair<std::size_t, int>, std::size_t> groups;
  for (const auto& s : ds.samples) ++groups[{s.corruption, s.severity.level()}];
  const auto names = ds.registry.names();
  for (const auto& [k, n] : groups) std::printf("  %-16s severity %d: %zu\n", names[k.first].c_str(), k.second, n);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Per-corruption BN statistics adaptation: staged experiment driver"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Master seed (overrides the config)");
  app.add_option("--config", g.config, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--set", g.set, "Extra key=value setting, applied after --config");

  std::string data_dir, model_path, cim_path, stream_dir, layers = "all", direction = "both", cifar, split = "test",
                                                          in_dir;
  std::optional<double> momentum, reject;
  std::optional<std::size_t> batch, images;

  auto* source = app.add_subcommand("train-source", "Train the source classifier");
  source->add_option("--data", data_dir, "Dataset directory (default: synthesize)");

  auto* corrupt = app.add_subcommand("corrupt", "Apply every configured corruption and severity to clean images");
  corrupt->add_option("--cifar", cifar, "CIFAR-10 binary batch to corrupt (default: procedural shapes)")
      ->check(CLI::ExistingFile);
  corrupt->add_option("--images", images, "Number of clean images to use");

  auto* cim_cmd = app.add_subcommand("train-cim", "Train the corruption identification module");
  cim_cmd->add_option("--data", data_dir, "Corrupted dataset directory (default: synthesize)");
  cim_cmd->add_option("--reject-threshold", reject, "Route samples whose best score exceeds this to source stats");

  auto* adapt = app.add_subcommand("adapt", "Adapt a codebook over a test stream");
  auto* eval = app.add_subcommand("eval", "Adapt and write the full evaluation report");
  auto* ablate = app.add_subcommand("ablate-layers", "Adapt growing prefixes or suffixes of BN layers");
  auto* features = app.add_subcommand("export-features", "Write CIM features of a stream");
  for (auto* sc : {adapt, eval, ablate, features}) {
    sc->add_option("--stream", stream_dir, "Test stream dataset directory (default: synthesize)");
    sc->add_option("--cim", cim_path, "CIM checkpoint")->required();
  }
  for (auto* sc : {adapt, eval, ablate}) sc->add_option("--model", model_path, "Source model checkpoint")->required();
  adapt->add_option("--momentum", momentum, "EMA momentum in (0, 1]");
  adapt->add_option("--batch", batch, "Adaptation batch size");
  adapt->add_option("--layers", layers, "BN layers to adapt: all, none, i or i..j")->capture_default_str();
  ablate->add_option("--direction", direction, "from-first, from-last or both")->capture_default_str();

  auto* report = app.add_subcommand("report", "Print a summary of a report directory");
  report->add_option("--in", in_dir, "Report directory (default: --out)");

  auto* run = app.add_subcommand("run", "Run every stage end to end");

  auto* dataset = app.add_subcommand("dataset", "Synthesize or inspect datasets");
  dataset->require_subcommand(1);
  auto* synth = dataset->add_subcommand("synth", "Write a synthetic split");
  synth->add_option("--split", split, "train, cim or test")->capture_default_str();
  auto* inspect = dataset->add_subcommand("inspect", "Summarize a dataset directory");
  inspect->add_option("dir", in_dir, "Dataset directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const fs::path out = g.out;
    if (inspect->parsed()) {
      inspect_cmd(in_dir);
      return 0;
    }
    if (report->parsed()) {
      report_cmd(in_dir.empty() ? out : fs::path(in_dir));
      return 0;
    }
    const auto c = load_config(g);
    fs::create_directories(out);
    if (synth->parsed()) {
      pan::CorruptedDataset ds;
      if (split == "train") {
        ds.registry = pan::CorruptionRegistry::from_names({});
        ds.severities = {1};
        ds.seed = c.seed;
        ds.num_classes = c.num_classes;
        for (auto& im : pan::source_training_data(c)) ds.samples.push_back({std::move(im), 0, pan::Severity(1)});
      } else if (split == "cim") {
        ds = pan::cim_training_data(c);
      } else if (split == "test") {
        ds = pan::test_stream(c);
      } else {
        throw pan::ConfigError("--split must be train, cim or test");
      }
      pan::write_dataset(out, ds);
      std::printf("wrote %zu samples to %s\n", ds.samples.size(), out.string().c_str());
    } else if (source->parsed()) {
      train_source_stage(c, data_dir, out);
    } else if (corrupt->parsed()) {
      std::vector<pan::LabeledImage> clean;
      std::size_t classes = c.num_classes;
      if (!cifar.empty()) {
        clean = pan::read_cifar10_file(cifar);
        if (images && *images < clean.size()) clean.resize(*images);
        classes = 10;
      } else {
        clean = pan::procedural_shapes(images.value_or(c.test_images), c.num_classes,
                                       pan::stage_rng(c, pan::Stage::kTestData).next_u64());
      }
      pan::CorruptedDataset ds;
      ds.registry = c.registry();
      ds.severities = c.severities;
      ds.seed = c.seed;
      ds.num_classes = classes;
      ds.samples = pan::build_corrupted_dataset(clean, ds.registry, ds.registry.kinds(), c.severity_levels(),
                                                pan::stage_rng(c, pan::Stage::kTestData));
      pan::write_dataset(out, ds);
      std::printf("wrote %zu samples to %s\n", ds.samples.size(), out.string().c_str());
    } else if (cim_cmd->parsed()) {
      train_cim_cmd(c, data_dir, reject, out);
    } else if (adapt->parsed()) {
      const auto model = load_model(model_path);
      const auto cim = load_cim(cim_path);
      const auto stream = load_or_synth_stream(c, stream_dir);
      if (cim.registry.names() != stream.registry.names()) {
        throw pan::ConfigError("CIM and stream disagree on corruption types");
      }
      pan::AdaptConfig cfg = pan::adapt_config(c);
      if (momentum) cfg.momentum = *momentum;
      if (batch) cfg.batch_size = *batch;
      cfg.mask = pan::parse_layer_mask(layers, model.num_bn_layers());
      pan::Codebook cb = pan::Codebook::init(model.bn_stats(), stream.registry.size());
      const auto res = pan::adapt_stream(model, pan::cim_router(cim), cb, stream.samples, cfg);
      pan::save_checkpoint(out / "codebook.ckpt", pan::codebook_checkpoint(cb, {{"layers", layers}}));
      std::string csv = "index,corruption,severity,label,route,prediction\n";
      const auto names = stream.registry.names();
      for (std::size_t i = 0; i < stream.samples.size(); ++i) {
        const auto& s = stream.samples[i];
        csv += std::to_string(i) + "," + names[s.corruption] + "," + std::to_string(s.severity.level()) + "," +
               std::to_string(s.item.label) + "," +
               (res.routes[i] == pan::kRouteToSource ? std::string("source") : names[res.routes[i]]) + "," +
               std::to_string(res.predictions[i]) + "\n";
      }
      pan::write_text(out / "predictions.csv", csv);
      print_tally("pan", pan::score(stream.samples, res.predictions, stream.registry, stream.severities));
    } else if (eval->parsed()) {
      eval_cmd(c, load_model(model_path), load_cim(cim_path), load_or_synth_stream(c, stream_dir), out);
    } else if (ablate->parsed()) {
      ablate_cmd(c, load_model(model_path), load_cim(cim_path), load_or_synth_stream(c, stream_dir), direction, out);
    } else if (features->parsed()) {
      const auto cim = load_cim(cim_path);
      const auto stream = load_or_synth_stream(c, stream_dir);
      const auto z = pan::extract_features(cim.encoder, std::span<const pan::CorruptedSample>(stream.samples));
      pan::write_text(out / "features.csv", pan::features_csv(z, stream.samples, stream.registry));
      std::printf("wrote %zu feature rows\n", stream.samples.size());
    } else if (run->parsed()) {
      const auto model = train_source_stage(c, "", out);
      const auto cim = train_cim_cmd(c, "", std::nullopt, out);
      const auto stream = pan::test_stream(c);
      eval_cmd(c, model, cim, stream, out);
      ablate_cmd(c, model, cim, stream, "both", out);
    }
    return 0;
  } catch (const pan::Error& e) {
    std::fprintf(stderr, "pan: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "pan: %s\n", e.what());
    return 1;
  }
}
