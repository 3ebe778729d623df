#pragma once

// Oracle comparison suites shared by the oracle-check command and the tests.
// Each suite returns one report per check.

#include <chrono>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "realcustom/diffusion.hpp"
#include "realcustom/mask_guidance.hpp"
#include "realcustom/oracles.hpp"
#include "realcustom/projector.hpp"

namespace realcustom::oracle {

inline const std::vector<double>& gamma_sweep() {
  static const std::vector<double> g{0.0, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 1.0};
  return g;
}

inline std::size_t nonzero_count(const Tensor& m) {
  return static_cast<std::size_t>(std::count_if(m.data().begin(), m.data().end(),
                                                [](float v) { return v != 0.0f; }));
}

/// Random map whose entries are uniform, or (every fourth trial) coarsely
/// quantised so that ties occur.
inline Tensor random_map(Rng& rng, std::size_t g, long trial) {
  auto m = rng.uniform_tensor<float>({g, g}, 0.0, 1.0);
  if (trial % 4 == 3)
    for (auto& v : m.data()) v = std::floor(v * 8.0f) / 8.0f;
  return m;
}

inline OracleReport topk_suite(long trials = 1000, std::uint64_t seed = 1) {
  OracleReport rep{"topk_vs_sort_oracle"};
  Rng rng(seed);
  for (long t = 0; t < trials; ++t) {
    const auto m = rng.uniform_tensor<float>({16, 16}, 0.0, 1.0);
    for (double g : gamma_sweep()) {
      const auto got = topk_select(m, g);
      const auto want = sort_topk_oracle(m, g);
      const bool same = got == want;
      const bool count_ok = nonzero_count(got) == static_cast<std::size_t>(std::floor(g * 256.0));
      rep.passed = rep.passed && same && count_ok;
      rep.observe(max_abs_diff(got, want), same ? 0.0 : 1.0);
      ++rep.trials;
    }
  }
  return rep;
}

inline OracleReport maxnorm_suite(long trials = 1000, std::uint64_t seed = 2) {
  OracleReport rep{"max_normalize_law"};
  Rng rng(seed);
  for (long t = 0; t < trials; ++t) {
    const auto m = random_map(rng, 16, t);
    const double g = gamma_sweep()[static_cast<std::size_t>(t) % gamma_sweep().size()];
    const auto sel = topk_select(m, g);
    const auto hat = max_normalize(sel);
    bool ok = true;
    if (nonzero_count(sel) == 0) {
      ok = nonzero_count(hat) == 0;
    } else {
      ok = max_value(hat) == 1.0;
      for (std::size_t i = 0; i < sel.size(); ++i) {
        ok = ok && ((sel[i] != 0.0f) == (hat[i] != 0.0f)) && hat[i] <= 1.0f && hat[i] >= 0.0f;
        if (sel[i] != 0.0f) {
          const double want = static_cast<double>(sel[i]) / max_value(sel);
          rep.observe(std::abs(hat[i] - want), std::abs(hat[i] - want) / want);
        }
      }
    }
    rep.passed = rep.passed && ok;
    ++rep.trials;
  }
  const Tensor zero({16, 16});
  rep.passed = rep.passed && max_normalize(zero) == zero;
  return rep;
}

inline std::vector<OracleReport> alg1_suite(long trials = 500, std::uint64_t seed = 3) {
  OracleReport eq{"alg1_vs_stepthrough_oracle"}, disjoint{"alg1_disjoint_supports"},
      reduce{"alg1_single_subject_is_topk"};
  Rng rng(seed);
  for (long t = 0; t < trials; ++t) {
    const std::size_t g = 2 + rng.below(7);  // 2..8
    const std::size_t n = 1 + rng.below(4);  // 1..4
    const std::size_t cells = g * g;
    std::vector<Tensor> maps;
    std::vector<double> gammas;
    // Ratios that fit the grid: split a random budget among subjects.
    for (std::size_t j = 0; j < n; ++j) {
      maps.push_back(random_map(rng, g, t));
      gammas.push_back(rng.uniform(0.0, 1.0 / static_cast<double>(n)));
    }
    if (t % 10 == 0) gammas[0] = 0.0;
    const auto got = multi_subject_select(maps, gammas);
    const auto want = alg1_stepthrough_oracle(maps, gammas);
    bool same = true;
    for (std::size_t j = 0; j < n; ++j) same = same && got[j] == want[j];
    eq.passed = eq.passed && same;
    ++eq.trials;

    std::vector<int> owners(cells, 0);
    bool counts_ok = true;
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t c = 0;
      for (std::size_t i = 0; i < cells; ++i)
        if (got[j][i] != 0.0f) {
          ++owners[i];
          ++c;
        }
      counts_ok = counts_ok && c <= gamma_count(gammas[j], cells);
    }
    disjoint.passed = disjoint.passed && counts_ok &&
                      std::all_of(owners.begin(), owners.end(), [](int o) { return o <= 1; });
    ++disjoint.trials;

    const auto single = multi_subject_select(std::vector<Tensor>{maps[0]}, {gammas[0]});
    reduce.passed = reduce.passed && single[0] == topk_select(maps[0], gammas[0]) &&
                    single[0] == sort_topk_oracle(maps[0], gammas[0]);
    ++reduce.trials;
  }
  return {eq, disjoint, reduce};
}

namespace detail {

inline Tensor naive_mlp(const nn::Mlp<float>& m, const Tensor& x) {
  auto h = naive_matmul_oracle(x, m.w1);
  for (std::size_t i = 0; i < h.dim(0); ++i)
    for (std::size_t j = 0; j < h.dim(1); ++j) {
      const long double u = static_cast<long double>(h.at(i, j)) + m.b1[j];
      const long double c = 0.7978845608028654L * (u + 0.044715L * u * u * u);
      h.at(i, j) = static_cast<float>(0.5L * u * (1.0L + std::tanh(c)));
    }
  auto y = naive_matmul_oracle(h, m.w2);
  for (std::size_t i = 0; i < y.dim(0); ++i)
    for (std::size_t j = 0; j < y.dim(1); ++j) y.at(i, j) += m.b2[j];
  return y;
}

inline void compare(OracleReport& rep, const Tensor& got, const Tensor& want, double tol) {
  const double abs_err = max_abs_diff(got, want);
  const double rel_err = relative_error(got, want);
  rep.observe(abs_err, rel_err);
  rep.passed = rep.passed && got.shape() == want.shape() && abs_err <= tol;
  ++rep.trials;
}

}  // namespace detail

inline std::vector<OracleReport> attention_suite(long trials = 20, std::uint64_t seed = 4) {
  OracleReport core{"multihead_attention_vs_naive"}, layer{"cross_layer_attend_vs_naive"},
      scale{"cross_scale_attend_vs_naive"};
  Rng rng(seed);
  BackboneConfig cfg;
  auto w = ProjectorWeights<float>::init(cfg, rng);
  const std::size_t n = static_cast<std::size_t>(cfg.image_tokens);
  const std::size_t c0 = static_cast<std::size_t>(cfg.encoder_dim);
  for (long t = 0; t < trials; ++t) {
    const std::size_t heads = 1 + static_cast<std::size_t>(t % 2);
    const auto q = rng.normal_tensor<float>({7, 8});
    const auto k = rng.normal_tensor<float>({11, 8});
    const auto v = rng.normal_tensor<float>({11, 8});
    detail::compare(core, nn::multihead_attention(q, k, v, heads),
                    naive_multihead_oracle(q, k, v, heads), 1e-5);

    const auto deep = rng.normal_tensor<float>({n, c0});
    std::vector<Tensor> shallow;
    for (int l = 0; l < cfg.shallow_layers; ++l) shallow.push_back(rng.normal_tensor<float>({n, c0}));
    Tensor kv({n * shallow.size(), c0});
    for (std::size_t l = 0; l < shallow.size(); ++l)
      for (std::size_t i = 0; i < n * c0; ++i) kv[l * n * c0 + i] = shallow[l][i];
    const long double s = 1.0L / std::sqrt(static_cast<long double>(c0));
    auto naive_branch = [&](const Tensor& src, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                            const nn::Mlp<float>& mlp) {
      return detail::naive_mlp(mlp, naive_attention_oracle(naive_matmul_oracle(deep, wq),
                                                           naive_matmul_oracle(src, wk),
                                                           naive_matmul_oracle(src, wv), s));
    };
    detail::compare(layer, cross_layer_attend<float>(w, deep, shallow),
                    naive_branch(kv, w.q_shallow, w.k_shallow, w.v_shallow, w.mlp_shallow), 1e-5);
    const auto high = rng.normal_tensor<float>({4 * n, c0});
    detail::compare(scale, cross_scale_attend(w, deep, high),
                    naive_branch(high, w.q_high, w.k_high, w.v_high, w.mlp_high), 1e-5);
  }
  return {core, layer, scale};
}

inline OracleReport resize_suite(long trials = 50, std::uint64_t seed = 5) {
  OracleReport rep{"bilinear_resize_vs_sampling"};
  Rng rng(seed);
  for (long t = 0; t < trials; ++t) {
    const std::size_t ih = 1 + rng.below(16), iw = 1 + rng.below(16);
    const std::size_t oh = 1 + rng.below(20), ow = 1 + rng.below(20);
    const auto img = rng.uniform_tensor<float>({ih, iw}, -1.0, 1.0);
    detail::compare(rep, resize_2d(img, oh, ow, ResizeMode::kBilinear),
                    bilinear_sample_oracle(img, oh, ow), 1e-5);
  }
  return rep;
}

inline OracleReport matmul_suite(long trials = 50, std::uint64_t seed = 6) {
  OracleReport rep{"matmul_vs_naive"};
  Rng rng(seed);
  for (long t = 0; t < trials; ++t) {
    const std::size_t m = 1 + rng.below(40), k = 1 + rng.below(40), n = 1 + rng.below(70);
    const auto a = rng.normal_tensor<float>({m, k});
    const auto b = rng.normal_tensor<float>({k, n});
    detail::compare(rep, matmul(a, b), naive_matmul_oracle(a, b), 1e-5);
    detail::compare(rep, matmul_nt(a, transpose(b)), naive_matmul_oracle(a, b), 1e-5);
    detail::compare(rep, matmul_tn(transpose(a), b), naive_matmul_oracle(a, b), 1e-5);
  }
  return rep;
}

/// Down-scaled backbone for gradient checks: 8x8 latent, one block.
inline BackboneConfig gradient_check_config() {
  BackboneConfig g;
  g.latent_size = 8;
  g.latent_channels = 4;
  g.image_size = 16;
  g.image_tokens = 4;
  g.encoder_depth = 3;
  g.shallow_layers = 2;
  g.text_dim = 8;
  g.encoder_dim = 8;
  g.condition_dim = 8;
  g.model_dim = 8;
  g.heads = 2;
  g.block_resolutions = {8};
  return g;
}

/// Backprop vs central differences for every trainable tensor, in double.
inline std::vector<OracleReport> gradient_suite(const BackboneConfig& cfg = gradient_check_config(),
                                                double tol = 1e-4, std::uint64_t seed = 7,
                                                CombineMode mode = CombineMode::kConcatAdd,
                                                double step = 1e-4) {
  auto model = Model<double>::init(cfg);
  CurriculumConfig data;
  data.base_resolution = cfg.image_size;
  Rng rng(seed);
  const auto schedule = NoiseSchedule::linear(cfg.timesteps);
  std::vector<PreparedSample<double>> batch;
  std::vector<NoiseDraw<double>> noise;
  for (int i = 0; i < 2; ++i) {
    const auto kind = i == 0 ? SampleKind::kGeneric : SampleKind::kMultiview;
    batch.push_back(prepare_sample(model, synth_sample(kind, data, 1.5, rng)));
    noise.push_back(draw_noise<double>(cfg, schedule, rng));
  }
  auto grad = TrainableParams<double>::zeros_like(model.trainable);
  training_loss<double>(model, batch, noise, schedule, mode, &grad);

  std::vector<std::string> names;
  model.trainable.for_each([&](const std::string& n, BasicTensor<double>&) { names.push_back(n); });
  auto params = model.trainable.tensors();
  auto grads = grad.tensors();
  std::vector<OracleReport> out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto original = *params[k];
    const auto fd = finite_diff_grad(
        [&](const BasicTensor<double>& probe) {
          *params[k] = probe;
          return training_loss<double>(model, batch, noise, schedule, mode);
        },
        original, step);
    *params[k] = original;
    OracleReport rep{"grad:" + names[k]};
    const double rel = relative_error(*grads[k], fd);
    rep.observe(max_abs_diff(*grads[k], fd), rel);
    rep.passed = rel <= tol;
    rep.trials = static_cast<long>(fd.size());
    out.push_back(rep);
  }
  return out;
}

inline std::vector<std::string> suite_names() {
  return {"topk", "maxnorm", "alg1", "attention", "resize", "matmul", "grad", "all"};
}

inline std::vector<OracleReport> run_suite(const std::string& name) {
  if (name == "topk") return {topk_suite()};
  if (name == "maxnorm") return {maxnorm_suite()};
  if (name == "alg1") return alg1_suite();
  if (name == "attention") return attention_suite();
  if (name == "resize") return {resize_suite()};
  if (name == "matmul") return {matmul_suite()};
  if (name == "grad") return gradient_suite();
  if (name == "all") {
    std::vector<OracleReport> all;
    for (const auto& s : suite_names()) {
      if (s == "all") continue;
      for (auto& r : run_suite(s)) all.push_back(std::move(r));
    }
    return all;
  }
  throw UsageError("unknown oracle suite '" + name + "'");
}

}  // namespace realcustom::oracle
