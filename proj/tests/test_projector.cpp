#include <gtest/gtest.h>

#include "realcustom/oracle_suites.hpp"
#include "realcustom/projector.hpp"

using namespace realcustom;

namespace {

struct Fixture {
  BackboneConfig cfg;
  Rng rng{5};
  ImageEncoderWeights<float> enc = ImageEncoderWeights<float>::init(cfg, rng);
  ProjectorWeights<float> w = ProjectorWeights<float>::init(cfg, rng);
  Tensor img = rng.uniform_tensor<float>({3, 32, 32}, 0.0, 1.0);
};

}  // namespace

TEST(Projector, TokenCountIsTwiceImageTokensByDefault) {
  Fixture s;
  const auto f = project_subject(s.cfg, s.enc, s.w, s.img);
  EXPECT_EQ(f.f_ci.shape(), (Shape{32, 32}));
  EXPECT_EQ(f.f_shallow_concat.dim(0), 16u * 3u);
  EXPECT_EQ(f.f_high.dim(0), 64u);
  EXPECT_EQ(slice_rows(f.f_ci, 0, 16), f.f_shallow_prime);
}

TEST(Projector, CombinationModesYieldPredictedShapes) {
  Fixture s;
  const std::pair<CombineMode, std::size_t> cases[] = {{CombineMode::kConcatAdd, 32},
                                                       {CombineMode::kConcatConcat, 48},
                                                       {CombineMode::kAddConcat, 32},
                                                       {CombineMode::kAddAdd, 16}};
  for (const auto& [mode, tokens] : cases) {
    EXPECT_EQ(combined_tokens(mode, 16), tokens);
    EXPECT_EQ(project_subject(s.cfg, s.enc, s.w, s.img, mode).f_ci.shape(), (Shape{tokens, 32}));
    EXPECT_EQ(parse_combine_mode(to_string(mode)), mode);
  }
  EXPECT_THROW(parse_combine_mode("sum"), UsageError);
}

TEST(Projector, ZeroHighResBranchLeavesDeepMlpOnAdditiveBlock) {
  Fixture s;
  const auto deep = s.rng.normal_tensor<float>({16, 32});
  const auto sp = s.rng.normal_tensor<float>({16, 32});
  const auto f = combine_features(s.w, sp, deep, Tensor({16, 32}));
  EXPECT_EQ(slice_rows(f, 16, 16), s.w.mlp_deep.forward(deep));
  EXPECT_EQ(slice_rows(f, 0, 16), sp);
}

TEST(Projector, AttentionBranchesMatchNaiveOracles) {
  for (const auto& r : oracle::attention_suite(5, 21)) EXPECT_TRUE(r.passed) << r.name << " " << r.max_abs;
}

TEST(Projector, RejectsMismatchedInputs) {
  Fixture s;
  const auto deep = s.rng.normal_tensor<float>({16, 32});
  EXPECT_THROW(cross_scale_attend(s.w, deep, Tensor({60, 32})), ShapeError);
  const std::vector<Tensor> shallow{Tensor({15, 32})};
  EXPECT_THROW(cross_layer_attend<float>(s.w, deep, shallow), ShapeError);
  EXPECT_THROW(project_subject(s.cfg, s.enc, s.w, Tensor({3, 24, 24})), ShapeError);
}

TEST(Projector, BackwardMatchesFiniteDifferencesForEveryMode) {
  BackboneConfig cfg = oracle::gradient_check_config();
  Rng rng(6);
  const auto enc = ImageEncoderWeights<double>::init(cfg, rng);
  auto w = ProjectorWeights<double>::init(cfg, rng);
  const auto ref = encode_reference(cfg, enc, rng.uniform_tensor<double>({3, 16, 16}, 0.0, 1.0));
  for (auto mode : {CombineMode::kConcatAdd, CombineMode::kConcatConcat, CombineMode::kAddConcat,
                    CombineMode::kAddAdd}) {
    const auto probe = rng.normal_tensor<double>({combined_tokens(mode, 4), 8});
    auto loss = [&] {
      const auto f = project_encoded(w, ref, mode).f_ci;
      double s = 0;
      for (std::size_t i = 0; i < f.size(); ++i) s += f[i] * probe[i];
      return s;
    };
    ProjectorCache<double> cache;
    project_encoded(w, ref, mode, &cache);
    auto grad = ProjectorWeights<double>::zeros_like(w);
    projector_backward(w, cache, probe, grad);
    for (auto* pair : {&w.k_high, &w.q_shallow, &w.mlp_deep.w1}) {
      auto* g = pair == &w.k_high ? &grad.k_high : pair == &w.q_shallow ? &grad.q_shallow : &grad.mlp_deep.w1;
      const auto orig = *pair;
      const auto fd = finite_diff_grad(
          [&](const BasicTensor<double>& p) {
            *pair = p;
            return loss();
          },
          orig, 1e-5);
      *pair = orig;
      EXPECT_LE(relative_error(*g, fd), 1e-6) << to_string(mode);
    }
  }
}
