// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "pan/dataset.hpp"
#include "pan/model.hpp"

namespace pan {
namespace {

const std::vector<Corruption> kAllTypes = {Corruption::kGaussianNoise, Corruption::kShotNoise,
                                           Corruption::kImpulseNoise,  Corruption::kDefocusBlur,
                                           Corruption::kMotionBlur,    Corruption::kContrast,
                                           Corruption::kBrightness,    Corruption::kFog,
                                           Corruption::kPixelate};

double l2(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// Std of clip(0.5 + sigma Z, 0, 1) by midpoint quadrature over the normal density.
double clipped_normal_std(double mean, double sigma) {
  const int n = 200000;
  const double lo = -10.0, hi = 10.0, h = (hi - lo) / n;
  double m1 = 0.0, m2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = lo + (i + 0.5) * h;
    const double w = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi) * h;
    const double v = std::clamp(mean + sigma * z, 0.0, 1.0);
    m1 += w * v;
    m2 += w * v * v;
  }
  return std::sqrt(m2 - m1 * m1);
}

TEST(Severity, Range) {
  EXPECT_THROW(Severity(0), ParameterError);
  EXPECT_THROW(Severity(6), ParameterError);
  EXPECT_EQ(Severity(5).index(), 4u);
}

TEST(Registry, CleanIsLastAndIdsAreDense) {
  const auto r = CorruptionRegistry::from_names({"fog", "gaussian_noise", "clean", "fog"});
  EXPECT_EQ(r.size(), 3u);
  EXPECT_EQ(r.clean_id(), 2u);
  EXPECT_EQ(r.kind(2), Corruption::kClean);
  EXPECT_EQ(r.id_of(Corruption::kFog), 0u);
  EXPECT_THROW(r.id_of(Corruption::kPixelate), ParameterError);
  EXPECT_THROW(CorruptionRegistry::from_names({"snow"}), ParameterError);
}

TEST(Corrupt, CleanIsBitIdentical) {
  const auto imgs = procedural_shapes(4, 4, 1);
  Rng rng(1);
  for (const auto& im : imgs) EXPECT_EQ(corrupt(im.image, Corruption::kClean, Severity(3), rng), im.image);
}

TEST(Corrupt, ContrastFixesConstantImage) {
  const Tensor x({3, 32, 32}, 0.5);
  Rng rng(1);
  for (int s = 1; s <= 5; ++s) EXPECT_EQ(corrupt(x, Corruption::kContrast, Severity(s), rng), x);
}

TEST(Corrupt, GaussianNoiseMonteCarlo) {
  const Tensor x({3, 64, 64}, 0.5);
  Rng rng(123);
  const Tensor y = corrupt(x, Corruption::kGaussianNoise, Severity(3), rng);
  double m = 0.0;
  for (double v : y.data()) m += v;
  m /= static_cast<double>(y.numel());
  double var = 0.0;
  for (double v : y.data()) var += (v - m) * (v - m);
  const double sd = std::sqrt(var / static_cast<double>(y.numel()));
  EXPECT_NEAR(m, 0.5, 0.01);
  EXPECT_NEAR(sd, std::min(0.18, clipped_normal_std(0.5, 0.18)), 0.02);
}

TEST(Corrupt, RejectsOutOfRangeInput) {
  Tensor x({3, 4, 4}, 0.5);
  x[3] = 1.5;
  Rng rng(1);
  EXPECT_THROW(corrupt(x, Corruption::kFog, Severity(1), rng), ContractViolation);
  EXPECT_THROW(corrupt(Tensor({4, 4}), Corruption::kFog, Severity(1), rng), ShapeError);
}

TEST(Corrupt, DeterministicAndInRange) {
  const auto imgs = procedural_shapes(6, 6, 2);
  for (Corruption k : kAllTypes) {
    for (int s = 1; s <= 5; ++s) {
      for (const auto& im : imgs) {
        Rng a(99), b(99);
        const Tensor ya = corrupt(im.image, k, Severity(s), a);
        const Tensor yb = corrupt(im.image, k, Severity(s), b);
        ASSERT_EQ(ya, yb) << corruption_name(k);
        for (double v : ya.data()) ASSERT_TRUE(v >= 0.0 && v <= 1.0) << corruption_name(k);
      }
    }
  }
}

TEST(Corrupt, DistortionGrowsWithSeverity) {
  const auto imgs = procedural_shapes(100, 8, 3);
  for (Corruption k : kAllTypes) {
    double prev = -1.0;
    for (int s = 1; s <= 5; ++s) {
      double total = 0.0;
      for (std::size_t i = 0; i < imgs.size(); ++i) {
        Rng r = Rng(5).derive(i);
        total += l2(corrupt(imgs[i].image, k, Severity(s), r), imgs[i].image);
      }
      const double mean = total / static_cast<double>(imgs.size());
      EXPECT_GT(mean, prev) << corruption_name(k) << " severity " << s;
      prev = mean;
    }
  }
}

TEST(Corrupt, FirstLayerStatisticsSeparateTypes) {
  // Channel means of the first conv layer's output differ between types.
  const auto clean = procedural_shapes(32, 8, 4);
  const Model m(source_classifier(8), Rng(4));
  const auto& conv = std::get<Conv2d>(m.layers()[0]);
  std::vector<Corruption> types = kAllTypes;
  types.push_back(Corruption::kClean);
  std::vector<std::vector<double>> means;
  for (Corruption k : types) {
    std::vector<LabeledImage> batch;
    for (std::size_t i = 0; i < clean.size(); ++i) {
      Rng r = Rng(6).derive(i);
      batch.push_back({corrupt(clean[i].image, k, Severity(3), r), clean[i].label});
    }
    std::vector<std::size_t> idx(batch.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    means.push_back(batch_stats(conv.forward(stack_images(batch, idx))).mean);
  }
  std::size_t pairs = 0, separated = 0;
  for (std::size_t a = 0; a < means.size(); ++a) {
    for (std::size_t b = a + 1; b < means.size(); ++b) {
      double d = 0.0;
      for (std::size_t c = 0; c < means[a].size(); ++c) d += (means[a][c] - means[b][c]) * (means[a][c] - means[b][c]);
      ++pairs;
      separated += std::sqrt(d) >= 1e-3;
    }
  }
  EXPECT_GE(static_cast<double>(separated), 0.8 * static_cast<double>(pairs));
}

TEST(BuildCorrupted, Cardinality) {
  const auto clean = procedural_shapes(10, 5, 1);
  const auto reg = CorruptionRegistry::from_names({"fog", "pixelate"});
  const auto ds = build_corrupted_dataset(clean, reg, {Corruption::kFog, Corruption::kPixelate}, {Severity(2)}, Rng(1));
  ASSERT_EQ(ds.size(), 20u);
  std::size_t fog = 0;
  for (const auto& s : ds) fog += s.corruption == reg.id_of(Corruption::kFog);
  EXPECT_EQ(fog, 10u);
}

TEST(BuildCorrupted, CleanOnlyEqualsCleanSet) {
  const auto clean = procedural_shapes(7, 7, 2);
  const CorruptionRegistry reg;
  const auto ds = build_corrupted_dataset(clean, reg, {Corruption::kClean}, {Severity(1)}, Rng(1));
  ASSERT_EQ(ds.size(), clean.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(ds[i].item.image, clean[i].image);
    EXPECT_EQ(ds[i].item.label, clean[i].label);
    EXPECT_EQ(ds[i].corruption, reg.clean_id());
  }
}

TEST(BuildCorrupted, Errors) {
  const auto clean = procedural_shapes(4, 4, 2);
  const CorruptionRegistry reg;
  EXPECT_THROW(build_corrupted_dataset({}, reg, {Corruption::kClean}, {Severity(1)}, Rng(1)), ConfigError);
  EXPECT_THROW(build_corrupted_dataset(clean, reg, {}, {Severity(1)}, Rng(1)), ConfigError);
}

}  // namespace
}  // namespace pan
