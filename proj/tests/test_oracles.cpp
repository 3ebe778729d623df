#include <gtest/gtest.h>

#include "realcustom/oracle_suites.hpp"

using namespace realcustom;

TEST(Oracles, SortTopKOnHandExample) {
  const auto m = Tensor::matrix({{0.1f, 0.5f}, {0.5f, 0.2f}});
  EXPECT_EQ(oracle::sort_topk_oracle(m, 0.25), Tensor::matrix({{0, 0.5f}, {0, 0}}));
  EXPECT_EQ(oracle::sort_topk_oracle(m, 0.5), Tensor::matrix({{0, 0.5f}, {0.5f, 0}}));
}

TEST(Oracles, StepThroughOnHandExample) {
  const auto a = Tensor::matrix({{0.9f, 0.1f}, {0.2f, 0.3f}});
  const auto b = Tensor::matrix({{0.8f, 0.7f}, {0.1f, 0.1f}});
  const auto out = oracle::alg1_stepthrough_oracle<float>({a, b}, {0.5, 0.25});
  EXPECT_EQ(out[0], Tensor::matrix({{0.9f, 0}, {0, 0.3f}}));
  EXPECT_EQ(out[1], Tensor::matrix({{0, 0.7f}, {0, 0}}));
  EXPECT_THROW(oracle::alg1_stepthrough_oracle<float>({a, b}, {0.75, 0.5}), CapacityError);
}

TEST(Oracles, IouOnHandExample) {
  const auto a = Tensor::matrix({{1, 1}, {0, 0}});
  const auto b = Tensor::matrix({{0, 1}, {1, 0}});
  EXPECT_DOUBLE_EQ(oracle::iou_oracle(a, b), 1.0 / 3.0);
  EXPECT_EQ(oracle::iou_oracle(Tensor({2, 2}), Tensor({2, 2})), 1.0);
}

TEST(Oracles, NaiveAttentionUniformKeysAverageValues) {
  const auto v = Tensor::matrix({{1, 2}, {3, 4}});
  const auto out = oracle::naive_attention_oracle(Tensor({1, 2}), Tensor({2, 2}), v, 1.0L);
  EXPECT_FLOAT_EQ(out[0], 2.0f);
  EXPECT_FLOAT_EQ(out[1], 3.0f);
}

TEST(OracleSuites, EverySuitePasses) {
  for (const auto& name : oracle::suite_names()) {
    if (name == "all") continue;
    for (const auto& r : oracle::run_suite(name)) {
      EXPECT_TRUE(r.passed) << r.name << " abs=" << r.max_abs << " rel=" << r.max_rel;
      EXPECT_GT(r.trials, 0) << r.name;
    }
  }
  EXPECT_THROW(oracle::run_suite("nope"), UsageError);
}
