// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion, measured values in
// parentheses. Artifacts of the full pipeline go under --out.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pan/pan.hpp"

namespace fs = std::filesystem;
using pan::Tensor;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_tensor(pan::Shape shape, pan::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

template <typename L>
double layer_error(L& layer, Tensor& x, std::vector<Tensor*> params, pan::Rng& rng) {
  const Tensor probe = random_tensor(layer.forward_train(x).shape(), rng);
  params.push_back(&x);
  auto loss = [&](bool with_grad) {
    const Tensor y = layer.forward_train(x);
    double l = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) l += y[i] * probe[i];
    if (with_grad) {
      for (Tensor* p : params) p->zero_grad();
      const Tensor dx = layer.backward(probe);
      std::copy(dx.data().begin(), dx.data().end(), x.grad().begin());
    }
    return l;
  };
  return pan::grad_check(loss, std::span<Tensor* const>(params), 1e-5);
}

// ---------------------------------------------------------------------------

Verdict gradient_integrity() {
  const auto t0 = std::chrono::steady_clock::now();
  pan::Rng rng(101);
  double worst = 0.0;
  std::size_t checks = 0;
  auto note = [&](double e) {
    worst = std::max(worst, e);
    ++checks;
  };
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t b = 1 + rng.below(3), c = 1 + rng.below(3), o = 1 + rng.below(3);
    const std::size_t h = 3 + rng.below(4), w = 3 + rng.below(4);
    {
      pan::Conv2d conv;
      conv.in_ch = c;
      conv.out_ch = o;
      conv.kernel = 1 + 2 * rng.below(2);
      conv.stride = 1 + rng.below(2);
      conv.pad = rng.below(2);
      conv.weight = random_tensor({o, c, conv.kernel, conv.kernel}, rng);
      conv.bias = random_tensor({o}, rng);
      Tensor x = random_tensor({b, c, h, w}, rng);
      note(layer_error(conv, x, {&conv.weight, &conv.bias}, rng));
    }
    {
      pan::BatchNorm2d bn;
      bn.channels = c;
      bn.gamma = random_tensor({c}, rng, 0.5, 1.5);
      bn.beta = random_tensor({c}, rng);
      bn.running_mean.assign(c, 0.0);
      bn.running_var.assign(c, 1.0);
      Tensor x = random_tensor({b + 1, c, h, w}, rng, -2.0, 2.0);
      note(layer_error(bn, x, {&bn.gamma, &bn.beta}, rng));
    }
    {
      pan::ReLU r;
      Tensor x = random_tensor({b, c, h, w}, rng);
      note(layer_error(r, x, {}, rng));
    }
    {
      pan::MaxPool2d p;
      Tensor x = random_tensor({b, c, h, w}, rng);
      note(layer_error(p, x, {}, rng));
    }
    {
      pan::AvgPool2d p;
      Tensor x = random_tensor({b, c, h, w}, rng);
      note(layer_error(p, x, {}, rng));
    }
    {
      pan::Flatten f;
      Tensor x = random_tensor({b, c, h, w}, rng);
      note(layer_error(f, x, {}, rng));
    }
    {
      pan::Linear l;
      l.in = h;
      l.out = o;
      l.weight = random_tensor({h, o}, rng);
      l.bias = random_tensor({o}, rng);
      Tensor x = random_tensor({b, h}, rng);
      note(layer_error(l, x, {&l.weight, &l.bias}, rng));
    }
    {
      Tensor logits = random_tensor({b + 2, o + 1}, rng, -3.0, 3.0);
      std::vector<std::size_t> labels;
      for (std::size_t i = 0; i < b + 2; ++i) labels.push_back(rng.below(o + 1));
      auto loss = [&](bool with_grad) {
        auto r = pan::softmax_cross_entropy(logits, labels);
        if (with_grad) std::copy(r.grad.data().begin(), r.grad.data().end(), logits.grad().begin());
        return r.loss;
      };
      note(pan::grad_check(loss, {&logits}, 1e-5));
    }
    {
      const std::size_t k = 2 + rng.below(4);
      const auto anchors = pan::make_anchors(k, k + rng.below(3), rng.uniform(1.0, 10.0));
      Tensor z = random_tensor({anchors.dim()}, rng, -3.0, 3.0);
      const std::size_t y = rng.below(k);
      auto loss = [&](bool with_grad) {
        const auto l = pan::cac_loss(z.data(), y, anchors, 0.1);
        if (with_grad) std::copy(l.grad.begin(), l.grad.end(), z.grad().begin());
        return l.total;
      };
      note(pan::grad_check(loss, {&z}, 1e-6));
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-4,
          std::to_string(checks) + " checks, max rel error " + pan::fixed(worst, 9) + ", " + pan::fixed(secs, 2) + " s"};
}

Verdict argmin_preservation() {
  pan::Rng rng(202);
  std::size_t ok = 0, total = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t k = 2 + rng.below(15);
    std::vector<double> d(k);
    for (double& v : d) v = rng.uniform(0.0, 20.0);
    const std::size_t want = pan::argmin_lowest(d);
    bool unique = true;
    for (std::size_t i = 0; i < k; ++i) unique = unique && (i == want || d[i] != d[want]);
    if (!unique) continue;
    const auto p = pan::softmin(d);
    std::vector<double> b(k);
    for (std::size_t i = 0; i < k; ++i) b[i] = d[i] * (1.0 - p[i]);
    ++total;
    ok += pan::argmin_lowest(b) == want;
  }
  return {ok == total && total > 0, std::to_string(ok) + "/" + std::to_string(total) + " vectors"};
}

Verdict statistics_correctness() {
  pan::Rng rng(303);
  double stat_err = 0.0, centre = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = 1 + rng.below(6), c = 1 + rng.below(5), l = 2 + rng.below(20);
    const double shift = rng.uniform(-5.0, 5.0), scale = rng.uniform(0.01, 3.0);
    Tensor f({b, c, l});
    for (double& v : f.data()) v = shift + scale * rng.normal();
    const auto s = pan::batch_stats(f);
    for (std::size_t ch = 0; ch < c; ++ch) {
      long double sum = 0.0L;
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < l; ++j) sum += f[(i * c + ch) * l + j];
      }
      const long double mu = sum / static_cast<long double>(b * l);
      long double sq = 0.0L;
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < l; ++j) {
          const long double d = f[(i * c + ch) * l + j] - mu;
          sq += d * d;
        }
      }
      const long double var = sq / static_cast<long double>(b * l);
      stat_err = std::max(stat_err, static_cast<double>(std::fabs(static_cast<long double>(s.mean[ch]) - mu)));
      stat_err = std::max(stat_err, static_cast<double>(std::fabs(static_cast<long double>(s.var[ch]) - var)));
    }
    const pan::BNLayerStats unit{std::vector<double>(c, 0.0), std::vector<double>(c, 1.0), std::vector<double>(c, 1.0),
                                 std::vector<double>(c, 0.0), 1e-5};
    const Tensor y = pan::bn_forward(f, unit, pan::BnMode::kUseBatch);
    for (double m : pan::batch_stats(y).mean) centre = std::max(centre, std::abs(m));
  }
  return {stat_err <= 1e-12 && centre <= 1e-9,
          "max |stat - oracle| " + pan::fixed(stat_err * 1e12, 4) + "e-12, max |pre-affine mean| " +
              pan::fixed(centre * 1e9, 4) + "e-9"};
}

Verdict oracle_equivalence(const pan::Model& model, const pan::CorruptedDataset& stream,
                           const pan::AdaptConfig& cfg) {
  const std::size_t n = std::min<std::size_t>(1000, stream.samples.size());
  const std::span<const pan::CorruptedSample> part(stream.samples.data(), n);
  pan::Codebook cb = pan::Codebook::init(model.bn_stats(), stream.registry.size());
  pan::adapt_stream(model, pan::oracle_router(part), cb, part, cfg);
  const auto ref = pan::compute_reference_stats(model, model.bn_stats(), stream.registry.size(), part, cfg);
  double worst = 0.0;
  for (std::size_t k = 0; k < cb.size(); ++k) {
    for (std::size_t l = 0; l < cb.entries[k].size(); ++l) {
      const auto& a = cb.entries[k].layers[l];
      const auto& r = ref.per_type[k].layers[l];
      for (std::size_t c = 0; c < a.channels(); ++c) {
        worst = std::max({worst, std::abs(a.mean[c] - r.mean[c]), std::abs(a.var[c] - r.var[c])});
      }
    }
  }
  return {worst <= 1e-12 && n == 1000, std::to_string(n) + " samples, max |adapted - reference| " + pan::fixed(worst, 15)};
}

Verdict corruption_operators() {
  const auto imgs = pan::procedural_shapes(100, 8, 404);
  std::string failures;
  std::size_t operators = 0;
  for (std::size_t t = 0; t + 1 < pan::kCorruptionNames.size(); ++t) {
    const auto kind = static_cast<pan::Corruption>(t);
    if (kind == pan::Corruption::kClean) continue;
    ++operators;
    double prev = -1.0;
    bool ok = true;
    std::string curve;
    for (int s = 1; s <= 5; ++s) {
      double total = 0.0;
      for (std::size_t i = 0; i < imgs.size(); ++i) {
        pan::Rng a = pan::Rng(405).derive(i), b = pan::Rng(405).derive(i);
        const Tensor ya = pan::corrupt(imgs[i].image, kind, pan::Severity(s), a);
        const Tensor yb = pan::corrupt(imgs[i].image, kind, pan::Severity(s), b);
        if (!(ya == yb)) ok = false;
        double d = 0.0;
        for (std::size_t j = 0; j < ya.numel(); ++j) {
          if (!(ya[j] >= 0.0 && ya[j] <= 1.0)) ok = false;
          d += (ya[j] - imgs[i].image[j]) * (ya[j] - imgs[i].image[j]);
        }
        total += std::sqrt(d);
      }
      const double mean = total / static_cast<double>(imgs.size());
      if (!(mean > prev)) ok = false;
      curve += (s > 1 ? " " : "") + pan::fixed(mean, 2);
      prev = mean;
    }
    if (!ok) failures += " " + std::string(pan::corruption_name(kind)) + "[" + curve + "]";
  }
  return {failures.empty(), std::to_string(operators) + " operators x 5 severities x 100 images" +
                                (failures.empty() ? "" : "; failing:" + failures)};
}

Verdict formats(const pan::Model& model, const pan::Cim& cim, const pan::Codebook& cb, const fs::path& dir,
                const std::string& report_a, const std::string& report_b) {
  std::string problems;
  // CIFAR-10 fixture: 2 records with a byte ramp.
  std::vector<std::uint8_t> cifar;
  for (std::size_t r = 0; r < 2; ++r) {
    cifar.push_back(static_cast<std::uint8_t>(7 * r));
    for (std::size_t i = 0; i < pan::kImageValues; ++i) cifar.push_back(static_cast<std::uint8_t>((i + 13 * r) % 256));
  }
  const auto parsed = pan::read_cifar10_binary(cifar);
  bool exact = parsed.size() == 2 && parsed[1].label == 7;
  for (std::size_t r = 0; exact && r < 2; ++r) {
    for (std::size_t i = 0; i < pan::kImageValues; ++i) {
      exact = exact && parsed[r].image[i] == static_cast<double>(cifar[r * pan::kCifarRecordBytes + 1 + i]) / 255.0;
    }
  }
  if (!exact) problems += " cifar-parse";
  if (pan::write_cifar10_binary(parsed) != cifar) problems += " cifar-roundtrip";

  for (const auto& [name, ckpt] : {std::pair{"model", pan::model_checkpoint(model)},
                                   std::pair{"cim", pan::cim_checkpoint(cim)},
                                   std::pair{"codebook", pan::codebook_checkpoint(cb)}}) {
    const fs::path p = dir / (std::string(name) + "_roundtrip.ckpt");
    pan::save_checkpoint(p, ckpt);
    const auto bytes = pan::encode_checkpoint(ckpt);
    if (pan::encode_checkpoint(pan::load_checkpoint(p)) != bytes) problems += std::string(" ckpt-") + name;
  }
  if (pan::encode_checkpoint(pan::model_checkpoint(pan::model_from_checkpoint(pan::model_checkpoint(model)))) !=
      pan::encode_checkpoint(pan::model_checkpoint(model))) {
    problems += " model-rebuild";
  }
  if (pan::codebook_from_checkpoint(pan::decode_checkpoint(pan::encode_checkpoint(pan::codebook_checkpoint(cb)))) != cb) {
    problems += " codebook-rebuild";
  }
  if (report_a != report_b) problems += " report-bytes";
  return {problems.empty(), problems.empty() ? "CIFAR fixture, 3 checkpoints and " + std::to_string(report_a.size()) +
                                                   " report bytes identical"
                                             : "failed:" + problems};
}

// All report files of one small from-scratch pipeline, concatenated.
std::string small_pipeline_bytes(const fs::path& dir) {
  pan::ExperimentConfig c;
  c.seed = 9;
  c.num_classes = 4;
  c.train_images = 96;
  c.source_epochs = 1;
  c.cim_images = 6;
  c.cim_epochs = 1;
  c.test_images = 6;
  c.types = {"gaussian_noise", "fog"};
  c.severities = {5};
  const auto model = pan::train_source(c, pan::source_training_data(c));
  const auto cim = pan::train_cim_stage(c, pan::cim_training_data(c));
  const auto run = pan::run_pan(c, model, cim, pan::test_stream(c), pan::adapt_config(c));
  pan::write_report(dir, run.report);
  std::string all;
  for (const char* f : {"report.json", "eval.csv", "source_eval.csv", "divergence.csv", "confusion.csv"}) {
    const auto b = pan::detail::read_file(dir / f);
    all.append(b.begin(), b.end());
  }
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string out = "acceptance_out";
  std::string config;
  app.add_option("--out", out, "Artifact directory")->capture_default_str();
  app.add_option("--config", config, "Optional key = value config overriding the desk-scale defaults");
  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path dir = out;
    fs::create_directories(dir);
    pan::ExperimentConfig c;
    if (!config.empty()) pan::apply_config_file(c, config);
    c.validate();

    std::vector<std::pair<std::string, Verdict>> results;
    auto record = [&](int id, const std::string& name, const Verdict& v) {
      std::printf("%s criterion %d: %s (%s)\n", v.pass ? "PASS" : "FAIL", id, name.c_str(), v.detail.c_str());
      std::fflush(stdout);
      results.emplace_back(name, v);
    };

    record(1, "gradient integrity", gradient_integrity());
    record(2, "argmin preservation", argmin_preservation());
    record(3, "batch statistics and BN centering", statistics_correctness());
    record(9, "corruption operators", corruption_operators());

    // Full desk-scale pipeline.
    const auto t0 = std::chrono::steady_clock::now();
    const auto train = pan::source_training_data(c);
    pan::TrainResult source_log;
    const pan::Model model = pan::train_source(c, train, &source_log);
    const double t_source = seconds_since(t0);
    pan::CimTrainResult cim_log;
    const pan::Cim cim = pan::train_cim_stage(c, pan::cim_training_data(c), &cim_log);
    const double t_cim = seconds_since(t0) - t_source;
    const auto stream = pan::test_stream(c);
    const auto cfg = pan::adapt_config(c);
    const auto run = pan::run_pan(c, model, cim, stream, cfg);
    pan::write_report(dir, run.report);
    pan::save_checkpoint(dir / "source.ckpt", pan::model_checkpoint(model));
    pan::save_checkpoint(dir / "cim.ckpt", pan::cim_checkpoint(cim));
    pan::save_checkpoint(dir / "codebook.ckpt", pan::codebook_checkpoint(run.codebook));
    const double t_eval = seconds_since(t0) - t_source - t_cim;

    // Ablation over the same CIM routes.
    const auto router = pan::fixed_router(run.adapt.routes);
    const auto first = pan::layer_ablation_sweep(model, router, stream.samples, stream.registry, stream.severities, cfg,
                                                 pan::AblationDirection::kFromFirst);
    const auto last = pan::layer_ablation_sweep(model, router, stream.samples, stream.registry, stream.severities, cfg,
                                                pan::AblationDirection::kFromLast);
    std::vector<pan::AblationPoint> pts = first;
    pts.insert(pts.end(), last.begin(), last.end());
    pan::write_text(dir / "ablation.csv", pan::ablation_csv(pts));
    const double total_secs = seconds_since(t0);

    record(4, "oracle equivalence", oracle_equivalence(model, stream, cfg));

    const double src_ca = run.report.source.corrupted.ca();
    const double pan_ca = run.report.adapted.corrupted.ca();
    record(5, "end-to-end directional gain",
           {pan_ca - src_ca >= 5.0 && total_secs < 1800.0,
            "source corrupted CA " + pan::fixed(src_ca, 2) + " -> PAN " + pan::fixed(pan_ca, 2) + " (+" +
                pan::fixed(pan_ca - src_ca, 2) + "), clean CA " + pan::fixed(run.report.source.clean.ca(), 2) +
                " -> " + pan::fixed(run.report.adapted.clean.ca(), 2) + ", mCE " + pan::fixed(run.report.mce, 2) +
                ", pipeline " + pan::fixed(total_secs, 0) + " s (source " + pan::fixed(t_source, 0) + ", cim " +
                pan::fixed(t_cim, 0) + ", eval " + pan::fixed(t_eval, 0) + ")"});

    const double cim_acc = pan::confusion_accuracy(run.report.confusion);
    std::string weakest;
    double weakest_acc = 101.0;
    for (std::size_t k = 0; k < run.report.confusion.size(); ++k) {
      std::size_t n = 0;
      for (std::size_t v : run.report.confusion[k]) n += v;
      const double a = pan::percent(run.report.confusion[k][k], n);
      if (a < weakest_acc) {
        weakest_acc = a;
        weakest = stream.registry.names()[k];
      }
    }
    record(6, "CIM quality",
           {cim_acc >= 80.0, "held-out type accuracy " + pan::fixed(cim_acc, 2) + "%, weakest " + weakest + " " +
                                 pan::fixed(weakest_acc, 2) + "%"});

    std::string prox;
    bool prox_ok = true;
    for (const auto& s : pan::summarize_divergence(run.report.divergence)) {
      if (s.corruption == stream.registry.clean_id()) continue;
      const bool closer = s.adapted_to_reference < s.source_to_reference;
      prox_ok = prox_ok && closer;
      prox += (prox.empty() ? "" : ", ") + stream.registry.names()[s.corruption] + " " +
              pan::fixed(s.adapted_to_reference, 3) + (closer ? "<" : ">=") + pan::fixed(s.source_to_reference, 3);
    }
    record(7, "statistics proximity", {prox_ok, prox});

    const double gain = first.back().corrupted_ca - first.front().corrupted_ca;
    const double share = gain > 0.0 ? (first[1].corrupted_ca - first.front().corrupted_ca) / gain : 0.0;
    std::string curves = "from-first";
    for (const auto& p : first) curves += " " + pan::fixed(p.corrupted_ca, 2);
    curves += ", from-last";
    for (const auto& p : last) curves += " " + pan::fixed(p.corrupted_ca, 2);
    std::size_t below = 0;
    for (std::size_t n = 1; n + 1 < first.size(); ++n) below += last[n].corrupted_ca < first[n].corrupted_ca;
    record(8, "first-layer dominance",
           {gain > 0.0 && share >= 0.5, "first layer recovers " + pan::fixed(100.0 * share, 1) + "% of the gain; " +
                                            curves + "; from-last below from-first at " + std::to_string(below) + "/" +
                                            std::to_string(first.size() - 2) + " interior counts"});

    // Same seeds, same bytes: the main eval stage rerun, then a small
    // pipeline trained from scratch twice.
    const auto rerun = pan::run_pan(c, model, cim, pan::test_stream(c), cfg);
    const std::string main_a = pan::report_json(run.report).dump(2) + pan::eval_csv(run.report.adapted, stream.registry) +
                               pan::divergence_csv(run.report.divergence, stream.registry);
    const std::string main_b = pan::report_json(rerun.report).dump(2) +
                               pan::eval_csv(rerun.report.adapted, stream.registry) +
                               pan::divergence_csv(rerun.report.divergence, stream.registry);
    const std::string small_a = small_pipeline_bytes(dir / "repeat_a");
    const std::string small_b = small_pipeline_bytes(dir / "repeat_b");
    record(10, "formats and determinism", formats(model, cim, run.codebook, dir, main_a + small_a, main_b + small_b));

    nlohmann::json summary = nlohmann::json::array();
    bool all = true;
    for (const auto& [name, v] : results) {
      summary.push_back({{"criterion", name}, {"pass", v.pass}, {"detail", v.detail}});
      all = all && v.pass;
    }
    pan::write_text(dir / "acceptance.json", summary.dump(2) + "\n");
    std::printf("%s: %zu criteria\n", all ? "ALL PASS" : "SOME CRITERIA FAILED", results.size());
    return all ? 0 : 1;
  } catch (const pan::Error& e) {
    std::fprintf(stderr, "acceptance: %s\n", e.what());
    return e.exit_code();
  }
}
