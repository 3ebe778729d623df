#include <gtest/gtest.h>

#include "realcustom/mask_guidance.hpp"
#include "realcustom/oracle_suites.hpp"

using namespace realcustom;

TEST(KeepCount, FloorsWithDecimalIntent) {
  EXPECT_EQ(keep_count(0.2, 256), 51u);
  EXPECT_EQ(keep_count(0.3, 10), 3u);
  EXPECT_EQ(keep_count(0.15, 256), 38u);
  EXPECT_EQ(keep_count(1.0, 256), 256u);
  EXPECT_EQ(keep_count(0.0, 256), 0u);
  EXPECT_THROW(keep_count(1.5, 4), SemanticError);
  EXPECT_THROW(keep_count(-0.1, 4), SemanticError);
}

TEST(TopK, MatchesSortOracleAndKeepsRawValues) {
  EXPECT_TRUE(oracle::topk_suite(100, 31).passed);
  Rng rng(1);
  const auto m = rng.uniform_tensor<float>({4, 4}, 0.0, 1.0);
  const auto sel = topk_select(m, 0.25);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_TRUE(sel[i] == 0.0f || sel[i] == m[i]);
}

TEST(TopK, TiesPreferLowerIndex) {
  const auto m = Tensor::ones({2, 2});
  const auto sel = topk_select(m, 0.5);
  EXPECT_EQ(sel, Tensor::matrix({{1, 1}, {0, 0}}));
}

TEST(MaxNormalize, LawHolds) {
  EXPECT_TRUE(oracle::maxnorm_suite(200, 32).passed);
  const auto m = Tensor::matrix({{0.0f, 0.3f}, {0.6f, 0.0f}});
  const auto n = max_normalize(m);
  EXPECT_EQ(n.at(1, 0), 1.0f);
  EXPECT_FLOAT_EQ(n.at(0, 1), 0.5f);
  EXPECT_EQ(binary_normalize(m), Tensor::matrix({{0, 1}, {1, 0}}));
}

TEST(MultiSubject, MatchesStepThroughOracleAndIsDisjoint) {
  for (const auto& r : oracle::alg1_suite(200, 33)) EXPECT_TRUE(r.passed) << r.name;
}

TEST(MultiSubject, ContestedCellGoesToEarlierSubject) {
  const auto a = Tensor::matrix({{0.9f, 0.1f}, {0.2f, 0.3f}});
  const auto b = Tensor::matrix({{0.8f, 0.7f}, {0.1f, 0.1f}});
  const auto out = multi_subject_select<float>({a, b}, {0.5, 0.25});
  EXPECT_EQ(out[0], Tensor::matrix({{0.9f, 0}, {0, 0.3f}}));
  EXPECT_EQ(out[1], Tensor::matrix({{0, 0.7f}, {0, 0}}));
}

TEST(MultiSubject, CapacityExceededThrows) {
  const Tensor m({4, 4});
  EXPECT_THROW(multi_subject_select<float>({m, m}, {0.6, 0.5}), CapacityError);
  EXPECT_NO_THROW(multi_subject_select<float>({m, m}, {0.5, 0.5}));
}

namespace {

AttentionRecord<float> synthetic_record() {
  AttentionRecord<float> rec;
  Rng rng(7);
  for (std::size_t r : {4u, 2u, 4u}) {
    BlockAttention<float> b;
    b.resolution = r;
    for (int h = 0; h < 2; ++h) {
      b.self_maps.push_back(softmax_rows(rng.normal_tensor<float>({r * r, r * r})));
      b.cross_maps.push_back(softmax_rows(rng.normal_tensor<float>({r * r, 3})));
    }
    rec.blocks.push_back(b);
  }
  return rec;
}

}  // namespace

TEST(Aggregation, CrossMapsUseLowResolutionBlocksByDefault) {
  const auto rec = synthetic_record();
  const auto low = aggregate_cross_maps(rec, {1});
  EXPECT_EQ(low.shape(), (Shape{16, 1}));
  // Only the 2x2 block contributes: its head mean, bilinearly upsampled.
  Tensor local({2, 2});
  for (std::size_t i = 0; i < 4; ++i)
    local[i] = 0.5f * (rec.blocks[1].cross_maps[0].at(i, 1) + rec.blocks[1].cross_maps[1].at(i, 1));
  EXPECT_LE(max_abs_diff(low.reshaped({4, 4}), resize_2d(local, 4, 4, ResizeMode::kBilinear)), 1e-6);
  EXPECT_NE(aggregate_cross_maps(rec, {1}, CrossSource::kAllRes), low);
  EXPECT_THROW(aggregate_cross_maps(rec, {}), SemanticError);
  EXPECT_THROW(aggregate_cross_maps(rec, {3}), SemanticError);
}

TEST(Aggregation, SelfMapsAreRowStochastic) {
  const auto rec = synthetic_record();
  for (auto src : {SelfSource::kHighRes, SelfSource::kAllRes}) {
    const auto m = aggregate_self_maps(rec, src);
    EXPECT_EQ(m.shape(), (Shape{16, 16}));
    for (std::size_t i = 0; i < 16; ++i) {
      double s = 0;
      for (float v : m.row(i)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(Aggregation, FuseIsMatrixProductReshaped) {
  const auto rec = synthetic_record();
  const auto s = aggregate_self_maps(rec);
  const auto c = aggregate_cross_maps(rec, {0, 2});
  const auto fused = fuse_maps(s, c);
  EXPECT_EQ(fused.shape(), (Shape{4, 4}));
  EXPECT_LE(max_abs_diff(fused.reshaped({16, 1}), oracle::naive_matmul_oracle(s, c)), 1e-6);
  EXPECT_THROW(fuse_maps(s, Tensor({15, 1})), ShapeError);
}

TEST(EarlyStop, CachesAtThresholdAndReusesAfterwards) {
  MaskCache cache{3, std::nullopt};
  int calls = 0;
  auto fresh = [&] {
    ++calls;
    return std::vector<Tensor>{scaled(Tensor::ones({2, 2}), calls)};
  };
  std::vector<std::vector<Tensor>> seen;
  for (int step = 1; step <= 8; ++step) seen.push_back(early_stop_mask(step, fresh, cache));
  EXPECT_EQ(calls, 3);
  for (int step = 4; step <= 8; ++step) EXPECT_EQ(seen[step - 1], seen[2]);
  EXPECT_NE(seen[1], seen[2]);
}

TEST(EarlyStop, ThresholdBeyondRunAlwaysComputesFresh) {
  MaskCache cache{25, std::nullopt};
  int calls = 0;
  for (int step = 1; step <= 25; ++step)
    early_stop_mask(step, [&] { ++calls; return std::vector<Tensor>{}; }, cache);
  EXPECT_EQ(calls, 25);
}

TEST(EarlyStop, StepPastThresholdWithoutCacheThrows) {
  MaskCache cache{2, std::nullopt};
  EXPECT_THROW(early_stop_mask(3, [] { return std::vector<Tensor>{}; }, cache), SemanticError);
}

TEST(MaskResize, BlockResolutionWeights) {
  const auto m = Tensor::ones({8, 8});
  EXPECT_EQ(resize_mask_to_block(m, 4), Tensor::ones({16}));
  EXPECT_THROW(resize_mask_to_block(m, 16), ShapeError);
}
