// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

// Small end-to-end run: train a source classifier and a CIM on procedural
// shapes, then adapt per-corruption BN statistics over a corrupted stream.
// Takes about a minute on one core.

#include <cstdio>

#include "pan/pan.hpp"

int main() {
  pan::ExperimentConfig c;
  c.seed = 1;
  c.train_images = 600;
  c.source_epochs = 4;
  c.cim_images = 30;
  c.cim_epochs = 3;
  c.test_images = 30;
  c.types = {"gaussian_noise", "contrast", "fog"};
  c.severities = {4};
  c.validate();

  const pan::Model model = pan::train_source(c, pan::source_training_data(c));
  const pan::Cim cim = pan::train_cim_stage(c, pan::cim_training_data(c));
  const pan::CorruptedDataset stream = pan::test_stream(c);

  const auto run = pan::run_pan(c, model, cim, stream, pan::adapt_config(c));
  std::printf("source corrupted CA %.2f\n", run.report.source.corrupted.ca());
  std::printf("pan    corrupted CA %.2f\n", run.report.adapted.corrupted.ca());
  std::printf("cim accuracy        %.2f\n", pan::confusion_accuracy(run.report.confusion));
  for (const auto& s : pan::summarize_divergence(run.report.divergence)) {
    std::printf("  %-16s |adapted - ref| %.4f  |source - ref| %.4f\n",
                stream.registry.names()[s.corruption].c_str(), s.adapted_to_reference, s.source_to_reference);
  }
  return 0;
}
