#include <gtest/gtest.h>

#include "realcustom/curriculum.hpp"
#include "realcustom/pipeline.hpp"

using namespace realcustom;

namespace {

BackboneConfig small_config() {
  BackboneConfig c;
  c.latent_size = 8;
  c.image_size = 16;
  c.latent_channels = 4;
  c.block_resolutions = {8, 4, 8};
  return c;
}

const Model<float>& model() {
  static const auto m = Model<float>::init(small_config());
  return m;
}

Tensor subject_image(int shape, int color) {
  SceneParams p;
  p.shape = shape;
  p.color = color;
  return render_scene(p, 16);
}

SamplerConfig quick() {
  SamplerConfig s;
  s.steps = 10;
  s.t_stop = 4;
  return s;
}

const std::string kPrompt = "a red dog and a blue cat on grass";

}  // namespace

TEST(SamplerTimesteps, DescendingFloorSchedule) {
  EXPECT_EQ(sampler_timesteps(5, 50), (std::vector<int>{50, 40, 30, 20, 10}));
  EXPECT_EQ(sampler_timesteps(3, 10), (std::vector<int>{10, 6, 3}));
  EXPECT_EQ(sampler_timesteps(4, 4), (std::vector<int>{4, 3, 2, 1}));
  EXPECT_THROW(sampler_timesteps(0, 50), UsageError);
  EXPECT_THROW(sampler_timesteps(51, 50), UsageError);
}

TEST(Cfg, Identities) {
  Rng rng(1);
  const auto u = rng.normal_tensor<float>({2, 3});
  const auto c = rng.normal_tensor<float>({2, 3});
  EXPECT_EQ(cfg_combine(u, c, 0.0), u);
  EXPECT_EQ(cfg_combine(u, c, 1.0), c);
  const auto g = cfg_combine(Tensor({2, 2}), Tensor::ones({2, 2}), 7.5);
  for (float v : g.data()) EXPECT_EQ(v, 7.5f);
  EXPECT_THROW(cfg_combine(u, Tensor({3, 2}), 2.0), ShapeError);
}

TEST(Ddim, OneStepInversionAndEndpoint) {
  Rng rng(2);
  const auto s = NoiseSchedule::linear(50);
  const auto z0 = rng.normal_tensor<double>({4, 4, 4});
  const auto eps = rng.normal_tensor<double>({4, 4, 4});
  const auto zt = noise_latent(z0, 37, eps, s);
  EXPECT_LE(max_abs_diff(ddim_update(zt, eps, 37, 0, s), z0), 1e-12);
  EXPECT_LE(max_abs_diff(ddim_update(zt, eps, 37, 20, s), noise_latent(z0, 20, eps, s)), 1e-12);
  EXPECT_THROW(ddim_update(zt, eps, 20, 20, s), SemanticError);
}

TEST(Ddim, FullLoopWithOracleNoiseRecoversLatent) {
  Rng rng(3);
  const auto s = NoiseSchedule::linear(50);
  const auto z0 = rng.normal_tensor<float>({4, 8, 8});
  auto z = noise_latent(z0, 50, rng.normal_tensor<float>({4, 8, 8}), s);
  const auto ts = sampler_timesteps(25, 50);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i], t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    Tensor eps(z.shape());
    const double a = s(t);
    for (std::size_t k = 0; k < z.size(); ++k)
      eps[k] = static_cast<float>((z[k] - std::sqrt(a) * z0[k]) / std::sqrt(1 - a));
    z = ddim_update(z, eps, t, t_prev, s);
  }
  EXPECT_LE(max_abs_diff(z, z0), 1e-5);
}

TEST(Customize, NoSubjectsAndZeroGammaReduceToPlainSampler) {
  const auto cfg = quick();
  const auto plain = sample_text_to_image(model(), kPrompt, cfg);
  EXPECT_EQ(customize(model(), kPrompt, {}, cfg).image, plain);
  auto zero = cfg;
  zero.gamma = 0.0;
  const auto r = customize(model(), kPrompt, {{subject_image(0, 0), "dog"}}, zero);
  EXPECT_EQ(r.image, plain);
  EXPECT_EQ(r.trace.z0, customize(model(), kPrompt, {}, cfg).trace.z0);
}

TEST(Customize, AllOnesMaskEqualsUnmaskedSampling) {
  auto ones = quick();
  ones.policy = MaskPolicy::kOnes;
  auto unmasked = quick();
  unmasked.policy = MaskPolicy::kUnmasked;
  const std::vector<SubjectSpec> subj{{subject_image(1, 2), "cat"}};
  const auto a = customize(model(), kPrompt, subj, ones);
  EXPECT_EQ(a.image, customize(model(), kPrompt, subj, unmasked).image);
  EXPECT_NE(a.trace.z0, customize(model(), kPrompt, subj, quick()).trace.z0);
}

TEST(Customize, TraceObeysEarlyStopAndMaskLaws) {
  const auto cfg = quick();
  const auto r = customize(model(), kPrompt, {{subject_image(0, 0), "dog"}}, cfg);
  const auto& tr = r.trace;
  ASSERT_EQ(tr.masks.size(), 10u);
  EXPECT_EQ(tr.latent_norms.size(), 10u);
  EXPECT_EQ(tr.timesteps, sampler_timesteps(10, 50));
  EXPECT_EQ(tr.forwards.guidance, 4);
  EXPECT_EQ(tr.forwards.total(), 10 + 10 + 4);
  for (std::size_t s = 0; s < 10; ++s) {
    const auto& m = tr.masks[s].at(0);
    EXPECT_EQ(m.shape(), (Shape{8, 8}));
    EXPECT_EQ(std::count_if(m.data().begin(), m.data().end(), [](float v) { return v != 0; }), 12);
    EXPECT_EQ(max_value(m), 1.0);
    if (s >= 4) {
      EXPECT_EQ(m, tr.masks[3][0]);
    }
  }
  EXPECT_EQ(r.image.shape(), (Shape{3, 16, 16}));
}

TEST(Customize, OneImageManyWordsGivesDisjointMasks) {
  const auto img = subject_image(2, 1);
  auto cfg = quick();
  cfg.gamma = 0.3;
  const auto r = customize(model(), kPrompt, {{img, "dog"}, {img, "cat"}}, cfg);
  for (const auto& step : r.trace.masks) {
    ASSERT_EQ(step.size(), 2u);
    for (std::size_t i = 0; i < 64; ++i) EXPECT_FALSE(step[0][i] != 0 && step[1][i] != 0);
  }
}

TEST(Customize, ErrorsForMissingWordAndCapacity) {
  const auto img = subject_image(0, 0);
  EXPECT_THROW(customize(model(), kPrompt, {{img, "horse"}}, quick()), SemanticError);
  auto cfg = quick();
  cfg.gammas = {0.7, 0.4};
  EXPECT_THROW(customize(model(), kPrompt, {{img, "dog"}, {img, "cat"}}, cfg), CapacityError);
  cfg.gammas = {0.5};
  EXPECT_THROW(customize(model(), kPrompt, {{img, "dog"}, {img, "cat"}}, cfg), UsageError);
}

TEST(Customize, Deterministic) {
  const std::vector<SubjectSpec> subj{{subject_image(3, 4), "dog"}};
  EXPECT_EQ(customize(model(), kPrompt, subj, quick()).image, customize(model(), kPrompt, subj, quick()).image);
  auto other = quick();
  other.seed = 1;
  EXPECT_NE(customize(model(), kPrompt, subj, other).trace.z0, customize(model(), kPrompt, subj, quick()).trace.z0);
}

TEST(Branches, GuidanceHasNoVisualMapsAndFusesManually) {
  const auto& bc = model().config;
  const auto text = encode_text(bc, model().frozen.text, kPrompt);
  Rng rng(5);
  const auto z = rng.normal_tensor<float>({4, 8, 8});
  const auto cfg = quick();
  const auto out = guidance_branch_step(model(), z, 30, text, {text.index.at("dog")}, cfg);
  EXPECT_EQ(out.record.visual_map_count(), 0u);
  const auto manual = fuse_maps(aggregate_self_maps(out.record, cfg.self_source),
                                aggregate_cross_maps(out.record, text.index.at("dog"), cfg.cross_source));
  EXPECT_EQ(out.fused.at(0), manual);
}

TEST(Branches, GenerationWithoutSubjectsOrWithZeroMaskEqualsTextOnly) {
  const auto& bc = model().config;
  const auto text = encode_text(bc, model().frozen.text, kPrompt);
  Rng rng(6);
  const auto z = rng.normal_tensor<float>({4, 8, 8});
  const auto f = project_subject(bc, model().frozen.image, model().trainable.projector, subject_image(0, 0)).f_ci;
  const auto text_only = model().denoiser().forward(z, 30, text.features, {});
  EXPECT_EQ(generation_branch_step(model(), z, 30, text.features, {}, {}), text_only);
  EXPECT_EQ(generation_branch_step(model(), z, 30, text.features, {f}, {Tensor({8, 8})}), text_only);
  EXPECT_THROW(generation_branch_step(model(), z, 30, text.features, {f}, {}), SemanticError);
}

TEST(SamplerConfig, Validation) {
  SamplerConfig s;
  s.steps = 0;
  EXPECT_THROW(s.validate(50), UsageError);
  s = {};
  s.omega = -1;
  EXPECT_THROW(s.validate(50), UsageError);
  s = {};
  s.t_stop = 0;
  EXPECT_THROW(s.validate(50), UsageError);
  EXPECT_NO_THROW(SamplerConfig{}.validate(50));
}
