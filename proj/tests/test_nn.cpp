#include <gtest/gtest.h>

#include "realcustom/nn.hpp"
#include "realcustom/oracles.hpp"

using namespace realcustom;

namespace {

// Scalar loss <y, w> for a fixed random projection w.
double probe(const BasicTensor<double>& y, const BasicTensor<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
  return s;
}

}  // namespace

TEST(LayerNorm, RowsHaveZeroMeanUnitVariance) {
  Rng rng(1);
  const auto y = nn::layer_norm(rng.normal_tensor<double>({3, 16}, 4.0));
  for (std::size_t i = 0; i < 3; ++i) {
    double m = 0, v = 0;
    for (double x : y.row(i)) m += x;
    m /= 16;
    for (double x : y.row(i)) v += (x - m) * (x - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 16, 1.0, 1e-3);
  }
}

TEST(LayerNorm, BackwardMatchesFiniteDifferences) {
  Rng rng(2);
  const auto x = rng.normal_tensor<double>({3, 6});
  const auto w = rng.normal_tensor<double>({3, 6});
  const auto fd = finite_diff_grad([&](const auto& p) { return probe(nn::layer_norm(p), w); }, x, 1e-6);
  EXPECT_LE(relative_error(nn::layer_norm_backward(x, w), fd), 1e-6);
}

TEST(Gelu, BackwardMatchesFiniteDifferences) {
  Rng rng(3);
  const auto x = rng.normal_tensor<double>({4, 5}, 2.0);
  const auto w = rng.normal_tensor<double>({4, 5});
  const auto fd = finite_diff_grad([&](const auto& p) { return probe(nn::gelu(p), w); }, x, 1e-6);
  EXPECT_LE(relative_error(nn::gelu_backward(x, w), fd), 1e-7);
}

TEST(Mlp, BackwardMatchesFiniteDifferences) {
  Rng rng(4);
  auto m = nn::Mlp<double>::init(rng, 5, 7, 3);
  const auto x = rng.normal_tensor<double>({4, 5});
  const auto w = rng.normal_tensor<double>({4, 3});
  typename nn::Mlp<double>::Cache cache;
  m.forward(x, &cache);
  auto grad = nn::Mlp<double>::zeros_like(m);
  const auto dx = m.backward(cache, w, &grad);
  EXPECT_LE(relative_error(dx, finite_diff_grad([&](const auto& p) { return probe(m.forward(p), w); }, x, 1e-6)),
            1e-6);
  const auto w1 = m.w1;
  const auto fd_w1 = finite_diff_grad(
      [&](const auto& p) {
        m.w1 = p;
        return probe(m.forward(x), w);
      },
      w1, 1e-6);
  m.w1 = w1;
  EXPECT_LE(relative_error(grad.w1, fd_w1), 1e-6);
}

TEST(Attention, MatchesNaiveOracleForSeveralHeadCounts) {
  Rng rng(5);
  for (std::size_t heads : {1u, 2u, 4u}) {
    const auto q = rng.normal_tensor<float>({6, 8});
    const auto k = rng.normal_tensor<float>({9, 8});
    const auto v = rng.normal_tensor<float>({9, 8});
    EXPECT_LE(max_abs_diff(nn::multihead_attention(q, k, v, heads),
                           oracle::naive_multihead_oracle(q, k, v, heads)),
              1e-5);
  }
}

TEST(Attention, ProbabilitiesAreRowStochastic) {
  Rng rng(6);
  std::vector<Tensor> probs;
  nn::multihead_attention(rng.normal_tensor<float>({4, 4}), rng.normal_tensor<float>({5, 4}),
                          rng.normal_tensor<float>({5, 4}), 2, &probs);
  ASSERT_EQ(probs.size(), 2u);
  for (const auto& p : probs) {
    EXPECT_EQ(p.shape(), (Shape{4, 5}));
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0;
      for (float v : p.row(i)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Attention, BackwardMatchesFiniteDifferences) {
  Rng rng(7);
  const auto q = rng.normal_tensor<double>({3, 4});
  const auto k = rng.normal_tensor<double>({5, 4});
  const auto v = rng.normal_tensor<double>({5, 4});
  const auto w = rng.normal_tensor<double>({3, 4});
  std::vector<BasicTensor<double>> probs;
  nn::multihead_attention(q, k, v, 2, &probs);
  const auto g = nn::multihead_attention_backward(q, k, v, probs, w);
  auto loss = [&](const auto& qq, const auto& kk, const auto& vv) {
    return probe(nn::multihead_attention(qq, kk, vv, 2), w);
  };
  EXPECT_LE(relative_error(g.dq, finite_diff_grad([&](const auto& p) { return loss(p, k, v); }, q, 1e-6)), 1e-6);
  EXPECT_LE(relative_error(g.dk, finite_diff_grad([&](const auto& p) { return loss(q, p, v); }, k, 1e-6)), 1e-6);
  EXPECT_LE(relative_error(g.dv, finite_diff_grad([&](const auto& p) { return loss(q, k, p); }, v, 1e-6)), 1e-6);
}

TEST(Attention, RejectsIndivisibleHeads) {
  EXPECT_THROW(nn::multihead_attention(Tensor({2, 6}), Tensor({2, 6}), Tensor({2, 6}), 4), ShapeError);
}

TEST(TokenResampling, PoolThenUpsampleKeepsConstantsAndAdjointsHold) {
  Rng rng(8);
  const auto c = Tensor::ones({16, 3});
  EXPECT_EQ(nn::upsample_tokens(nn::avg_pool_tokens(c, 4, 2), 2, 2), c);

  const auto x = rng.normal_tensor<double>({16, 3});
  const auto y = rng.normal_tensor<double>({4, 3});
  // <pool(x), y> = <x, pool*(y)> and likewise for upsampling.
  EXPECT_NEAR(probe(nn::avg_pool_tokens(x, 4, 2), y), probe(x, nn::avg_pool_tokens_backward(y, 4, 2)), 1e-12);
  EXPECT_NEAR(probe(nn::upsample_tokens(y, 2, 2), x), probe(y, nn::upsample_tokens_backward(x, 2, 2)), 1e-12);
}
