#include <gtest/gtest.h>

#include "realcustom/diffusion.hpp"
#include "realcustom/oracle_suites.hpp"

using namespace realcustom;

namespace {

BackboneConfig tiny() {
  auto c = oracle::gradient_check_config();
  c.latent_size = 4;
  c.image_size = 8;
  c.block_resolutions = {4};
  return c;
}

TrainConfig tiny_train(long steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 1;
  t.curriculum.base_resolution = 8;
  return t;
}

}  // namespace

TEST(NoiseSchedule, EndpointsAndMonotone) {
  const auto s = NoiseSchedule::linear(50);
  EXPECT_EQ(s.steps(), 50);
  EXPECT_EQ(s(0), 1.0);
  EXPECT_EQ(s(50), 0.02);
  for (int t = 1; t <= 50; ++t) EXPECT_LT(s(t), s(t - 1));
  EXPECT_THROW(s(51), SemanticError);
}

TEST(NoiseLatent, CleanStepReturnsInputAndMomentsMatch) {
  Rng rng(1);
  const auto s = NoiseSchedule::linear(50);
  const auto z0 = rng.normal_tensor<double>({4, 8, 8});
  const auto eps = rng.normal_tensor<double>({4, 8, 8});
  EXPECT_EQ(noise_latent(z0, 0, eps, s), z0);
  const auto zt = noise_latent(z0, 30, eps, s);
  for (std::size_t i = 0; i < zt.size(); ++i)
    EXPECT_NEAR(zt[i], std::sqrt(s(30)) * z0[i] + std::sqrt(1 - s(30)) * eps[i], 1e-12);
}

TEST(NoiseDraw, StepsCoverOneToT) {
  const auto cfg = tiny();
  const auto s = NoiseSchedule::linear(cfg.timesteps);
  Rng rng(2);
  int lo = 1000, hi = -1;
  for (int i = 0; i < 2000; ++i) {
    const auto d = draw_noise<float>(cfg, s, rng);
    lo = std::min(lo, d.t);
    hi = std::max(hi, d.t);
  }
  EXPECT_EQ(lo, 1);
  EXPECT_EQ(hi, cfg.timesteps);
}

TEST(TrainingLoss, GradientsMatchFiniteDifferencesOnMultiBlockModel) {
  auto cfg = tiny();
  cfg.block_resolutions = {4, 2, 4};
  for (const auto& r : oracle::gradient_suite(cfg, 1e-4, 3)) EXPECT_TRUE(r.passed) << r.name << " " << r.max_rel;
}

TEST(TrainingLoss, GradientsMatchForEveryCombineMode) {
  for (auto mode : {CombineMode::kConcatConcat, CombineMode::kAddConcat, CombineMode::kAddAdd})
    for (const auto& r : oracle::gradient_suite(tiny(), 1e-4, 4, mode))
      EXPECT_TRUE(r.passed) << to_string(mode) << " " << r.name << " " << r.max_rel;
}

TEST(Adam, ZeroLearningRateLeavesParametersUnchanged) {
  auto model = Model<float>::init(tiny());
  const auto before = params_checksum(model.trainable);
  auto grad = TrainableParams<float>::zeros_like(model.trainable);
  for (auto* g : grad.tensors()) g->data()[0] = 1.0f;
  auto state = AdamState<float>::init(model.trainable);
  AdamConfig cfg;
  cfg.lr = 0.0;
  adam_update(model.trainable, grad, state, cfg);
  EXPECT_EQ(params_checksum(model.trainable), before);
  cfg.lr = 1e-3;
  adam_update(model.trainable, grad, state, cfg);
  EXPECT_NE(params_checksum(model.trainable), before);
}

TEST(Adam, FirstStepMovesEachParameterByLearningRate) {
  auto model = Model<double>::init(tiny());
  const auto p0 = model.trainable.projector.q_high;
  auto grad = TrainableParams<double>::zeros_like(model.trainable);
  grad.projector.q_high[0] = 3.0;
  grad.projector.q_high[1] = -0.5;
  auto state = AdamState<double>::init(model.trainable);
  adam_update(model.trainable, grad, state, AdamConfig{});
  EXPECT_NEAR(model.trainable.projector.q_high[0], p0[0] - 1e-3, 1e-9);
  EXPECT_NEAR(model.trainable.projector.q_high[1], p0[1] + 1e-3, 1e-9);
  EXPECT_EQ(model.trainable.projector.q_high[2], p0[2]);
}

TEST(Training, FrozenWeightsNeverChange) {
  auto model = Model<float>::init(tiny());
  const auto frozen = frozen_checksum(model);
  const auto trainable = params_checksum(model.trainable);
  run_curriculum_training(model, tiny_train(5));
  EXPECT_EQ(frozen_checksum(model), frozen);
  EXPECT_NE(params_checksum(model.trainable), trainable);
}

TEST(Training, SameSeedGivesIdenticalRunsAndLogs) {
  auto a = Model<float>::init(tiny());
  auto b = Model<float>::init(tiny());
  const auto ra = run_curriculum_training(a, tiny_train(4));
  const auto rb = run_curriculum_training(b, tiny_train(4));
  EXPECT_EQ(params_checksum(a.trainable), params_checksum(b.trainable));
  ASSERT_EQ(ra.rows.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(ra.rows[i].loss, rb.rows[i].loss);
    EXPECT_EQ(ra.rows[i].kind, rb.rows[i].kind);
    EXPECT_GE(ra.rows[i].r_sample, 1.0);
    EXPECT_LE(ra.rows[i].r_sample, ra.rows[i].r_cur);
  }
}

TEST(Training, DryRunLogsScheduleWithoutTouchingModel) {
  auto model = Model<float>::init(tiny());
  const auto before = params_checksum(model.trainable);
  long calls = 0;
  const auto r = run_curriculum_training(model, tiny_train(50), true, [&](const TrainLogRow&) { ++calls; });
  EXPECT_EQ(calls, 50);
  EXPECT_TRUE(std::isnan(r.rows[10].loss));
  EXPECT_EQ(params_checksum(model.trainable), before);
}

TEST(Training, RejectsMismatchedDataResolution) {
  auto model = Model<float>::init(tiny());
  auto t = tiny_train(1);
  t.curriculum.base_resolution = 32;
  EXPECT_THROW(run_curriculum_training(model, t), UsageError);
}
