// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "pan/codebook.hpp"

namespace pan {
namespace {

BNStatsSet two_layer_source() {
  BNStatsSet s;
  s.layers.push_back({{0.0, 1.0}, {1.0, 2.0}, {1.0, 0.5}, {0.0, 0.25}, 1e-5});
  s.layers.push_back({{0.5}, {4.0}, {2.0}, {-1.0}, 1e-5});
  return s;
}

std::vector<BatchStats> batch_of(double mean, double var) {
  return {{{mean, mean}, {var, var}}, {{mean}, {var}}};
}

TEST(Codebook, InitCopiesSourceIntoEveryEntry) {
  const auto cb = Codebook::init(two_layer_source(), 3);
  EXPECT_EQ(cb.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(cb.lookup(k), cb.source);
  EXPECT_THROW(cb.lookup(3), ParameterError);
  EXPECT_THROW(Codebook::init(two_layer_source(), 0), ConfigError);
}

TEST(TtaUpdate, MomentumOneReplacesWithBatchMoments) {
  auto cb = Codebook::init(two_layer_source(), 2);
  tta_update(cb, 1, batch_of(3.0, 0.5), 1.0);
  EXPECT_EQ(cb.entries[1].layers[0].mean, (std::vector<double>{3.0, 3.0}));
  EXPECT_EQ(cb.entries[1].layers[1].var, (std::vector<double>{0.5}));
}

TEST(TtaUpdate, SmallMomentumMovesTenPercent) {
  BNStatsSet s;
  s.layers.push_back({{0.0}, {1.0}, {1.0}, {0.0}, 1e-5});
  auto cb = Codebook::init(s, 1);
  tta_update(cb, 0, {{{1.0}, {1.0}}}, 0.1);
  EXPECT_DOUBLE_EQ(cb.entries[0].layers[0].mean[0], 0.1);
  EXPECT_DOUBLE_EQ(cb.entries[0].layers[0].var[0], 1.0);
  EXPECT_EQ(cb.update_counts[0], 1u);
}

TEST(TtaUpdate, AffineFrozenAndOtherEntriesUntouched) {
  auto cb = Codebook::init(two_layer_source(), 3);
  const auto before = cb;
  Rng rng(3);
  for (int i = 0; i < 20; ++i) tta_update(cb, 1, batch_of(rng.uniform(-2, 2), rng.uniform(0, 3)), 0.3);
  EXPECT_EQ(cb.source, before.source);
  EXPECT_EQ(cb.entries[0], before.entries[0]);
  EXPECT_EQ(cb.entries[2], before.entries[2]);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(cb.entries[1].layers[l].gamma, before.source.layers[l].gamma);
    EXPECT_EQ(cb.entries[1].layers[l].beta, before.source.layers[l].beta);
    for (double v : cb.entries[1].layers[l].var) EXPECT_GE(v, 0.0);
  }
  EXPECT_EQ(cb.update_counts, (std::vector<std::size_t>{0, 20, 0}));
}

TEST(TtaUpdate, MaskLimitsLayers) {
  auto cb = Codebook::init(two_layer_source(), 1);
  tta_update(cb, 0, batch_of(3.0, 0.5), 1.0, LayerMask{false, true});
  EXPECT_EQ(cb.entries[0].layers[0], cb.source.layers[0]);
  EXPECT_EQ(cb.entries[0].layers[1].mean, (std::vector<double>{3.0}));
}

TEST(TtaUpdate, Errors) {
  auto cb = Codebook::init(two_layer_source(), 2);
  EXPECT_THROW(tta_update(cb, 0, batch_of(1, 1), 0.0), ParameterError);
  EXPECT_THROW(tta_update(cb, 0, batch_of(1, 1), 1.5), ParameterError);
  EXPECT_THROW(tta_update(cb, 5, batch_of(1, 1), 0.1), ParameterError);
  EXPECT_THROW(tta_update(cb, 0, {{{1.0}, {1.0}}}, 0.1), ConfigError);
  EXPECT_THROW(tta_update(cb, 0, batch_of(1, 1), 0.1, LayerMask{true}), ConfigError);
  std::vector<BatchStats> narrow{{{1.0}, {1.0}}, {{1.0}, {1.0}}};
  EXPECT_THROW(tta_update(cb, 0, narrow, 0.1), ConfigError);
}

TEST(LayerMask, Parsing) {
  EXPECT_EQ(parse_layer_mask("all", 3), (LayerMask{true, true, true}));
  EXPECT_EQ(parse_layer_mask("none", 2), (LayerMask{false, false}));
  EXPECT_EQ(parse_layer_mask("1", 3), (LayerMask{false, true, false}));
  EXPECT_EQ(parse_layer_mask("0..1", 3), (LayerMask{true, true, false}));
  EXPECT_EQ(mask_prefix(3, 1), (LayerMask{true, false, false}));
  EXPECT_EQ(mask_suffix(3, 2), (LayerMask{false, true, true}));
  for (const char* bad : {"", "x", "0..", "2..1", "3", "0..3", "-1"}) {
    EXPECT_THROW(parse_layer_mask(bad, 3), ConfigError) << bad;
  }
  EXPECT_THROW(mask_prefix(3, 4), ParameterError);
}

// Small images: corruption id t shifts brightness and noise level.
std::vector<CorruptedSample> toy_stream(std::size_t n, std::size_t types, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<CorruptedSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t t = rng.below(types);
    Tensor im({3, 8, 8});
    for (double& v : im.data()) {
      v = std::clamp(0.2 + 0.2 * static_cast<double>(t) + rng.normal(0.0, 0.05 * static_cast<double>(t + 1)), 0.0, 1.0);
    }
    out.push_back({{std::move(im), rng.below(4)}, t, Severity(3)});
  }
  return out;
}

Model toy_model() { return Model(conv_trunk("toy", 4, {3, 8, 8}), Rng(12)); }

// Independent EMA oracle: same partition and grouping, explicit update loop.
std::vector<BNStatsSet> oracle_reference(const Model& m, const std::vector<CorruptedSample>& stream, std::size_t types,
                                         std::size_t batch, double momentum) {
  std::vector<BNStatsSet> entries(types, m.bn_stats());
  for (std::size_t start = 0; start < stream.size(); start += batch) {
    const std::size_t end = std::min(stream.size(), start + batch);
    for (std::size_t t = 0; t < types; ++t) {
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < end; ++i) {
        if (stream[i].corruption == t) idx.push_back(i);
      }
      if (idx.empty()) continue;
      std::vector<BatchStats> got;
      ForwardOptions o;
      o.stats = &entries[t];
      o.batch_layers.assign(m.num_bn_layers(), true);
      o.captured = &got;
      m.forward(stack_images(stream, idx), o);
      for (std::size_t l = 0; l < got.size(); ++l) {
        auto& e = entries[t].layers[l];
        for (std::size_t c = 0; c < e.channels(); ++c) {
          e.mean[c] = e.mean[c] + momentum * (got[l].mean[c] - e.mean[c]);
          e.var[c] = e.var[c] + momentum * (got[l].var[c] - e.var[c]);
        }
      }
    }
  }
  return entries;
}

double max_abs_diff(const BNStatsSet& a, const BNStatsSet& b) {
  double worst = 0.0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    for (std::size_t c = 0; c < a.layers[l].channels(); ++c) {
      worst = std::max(worst, std::abs(a.layers[l].mean[c] - b.layers[l].mean[c]));
      worst = std::max(worst, std::abs(a.layers[l].var[c] - b.layers[l].var[c]));
    }
  }
  return worst;
}

TEST(AdaptStream, OracleRoutingReproducesReferenceStats) {
  const Model m = toy_model();
  const auto stream = toy_stream(200, 3, 1);
  const AdaptConfig cfg{32, 0.1, {}};
  Codebook cb = Codebook::init(m.bn_stats(), 3);
  adapt_stream(m, oracle_router(stream), cb, stream, cfg);
  const auto ref = compute_reference_stats(m, m.bn_stats(), 3, stream, cfg);
  const auto oracle = oracle_reference(m, stream, 3, 32, 0.1);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_LE(max_abs_diff(cb.entries[t], ref.per_type[t]), 1e-12);
    EXPECT_LE(max_abs_diff(ref.per_type[t], oracle[t]), 1e-12);
    EXPECT_GT(max_abs_diff(cb.entries[t], cb.source), 1e-6);
  }
  EXPECT_GT(max_abs_diff(cb.entries[0], cb.entries[2]), 1e-3);
}

TEST(AdaptStream, SingleTypeOnlyTouchesItsEntry) {
  const Model m = toy_model();
  auto stream = toy_stream(40, 1, 2);
  for (auto& s : stream) s.corruption = 2;
  Codebook cb = Codebook::init(m.bn_stats(), 3);
  adapt_stream(m, oracle_router(stream), cb, stream, {16, 0.1, {}});
  EXPECT_EQ(cb.update_counts, (std::vector<std::size_t>{0, 0, 3}));
  EXPECT_EQ(cb.entries[0], cb.source);
  EXPECT_EQ(cb.entries[1], cb.source);
}

TEST(AdaptStream, MomentumOneSingleBatchEqualsBatchStats) {
  const Model m = toy_model();
  auto stream = toy_stream(12, 1, 3);
  const auto ref = compute_reference_stats(m, m.bn_stats(), 1, stream, {64, 1.0, {}});
  std::vector<std::size_t> idx(stream.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::vector<BatchStats> got;
  const BNStatsSet src = m.bn_stats();
  ForwardOptions o = ForwardOptions::with(src, BnMode::kUseBatch, m.num_bn_layers());
  o.captured = &got;
  m.forward(stack_images(stream, idx), o);
  for (std::size_t l = 0; l < got.size(); ++l) {
    EXPECT_EQ(ref.per_type[0].layers[l].mean, got[l].mean);
    EXPECT_EQ(ref.per_type[0].layers[l].var, got[l].var);
  }
}

TEST(AdaptStream, RejectedSamplesUseSourceAndEmptyMaskIsNoOp) {
  const Model m = toy_model();
  const auto stream = toy_stream(30, 2, 4);
  Codebook cb = Codebook::init(m.bn_stats(), 2);
  const auto before = cb;
  const auto r = adapt_stream(m, fixed_router(std::vector<std::size_t>(30, kRouteToSource)), cb, stream, {8, 0.1, {}});
  EXPECT_EQ(cb, before);
  for (std::size_t v : r.routes) EXPECT_EQ(v, kRouteToSource);

  Codebook none = Codebook::init(m.bn_stats(), 2);
  adapt_stream(m, oracle_router(stream), none, stream, {8, 0.1, LayerMask(m.num_bn_layers(), false)});
  EXPECT_EQ(none.entries, before.entries);
}

TEST(AdaptStream, DeterministicAndValidated) {
  const Model m = toy_model();
  const auto stream = toy_stream(50, 3, 5);
  Codebook a = Codebook::init(m.bn_stats(), 3), b = a;
  const auto ra = adapt_stream(m, oracle_router(stream), a, stream, {16, 0.1, {}});
  const auto rb = adapt_stream(m, oracle_router(stream), b, stream, {16, 0.1, {}});
  EXPECT_EQ(a, b);
  EXPECT_EQ(ra.predictions, rb.predictions);
  EXPECT_THROW(adapt_stream(m, oracle_router(stream), a, stream, {16, 0.0, {}}), ParameterError);
  EXPECT_THROW(adapt_stream(m, oracle_router(stream), a, stream, {16, 0.1, LayerMask{true}}), ConfigError);
  auto bad = stream;
  bad[3].corruption = 7;
  EXPECT_THROW(compute_reference_stats(m, m.bn_stats(), 3, bad, {16, 0.1, {}}), ContractViolation);
}

TEST(CodebookCheckpoint, RoundTrips) {
  const Model m = toy_model();
  const auto stream = toy_stream(40, 2, 6);
  Codebook cb = Codebook::init(m.bn_stats(), 2);
  adapt_stream(m, oracle_router(stream), cb, stream, {16, 0.2, {}});
  const auto bytes = encode_checkpoint(codebook_checkpoint(cb));
  const Codebook back = codebook_from_checkpoint(decode_checkpoint(bytes));
  EXPECT_EQ(back, cb);
  EXPECT_EQ(encode_checkpoint(codebook_checkpoint(back)), bytes);
  EXPECT_THROW(codebook_from_checkpoint(model_checkpoint(m)), FormatError);
}

}  // namespace
}  // namespace pan
