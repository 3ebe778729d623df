#pragma once

// Forward noising, the ε-prediction objective, Adam over the trainable set,
// and the curriculum training loop.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "realcustom/curriculum.hpp"
#include "realcustom/model.hpp"

namespace realcustom {

/// ᾱ_t for t = 0..T. ᾱ_0 = 1 (clean), then linear from 1 down to `end` at T.
struct NoiseSchedule {
  std::vector<double> alpha_hat;

  static NoiseSchedule linear(int steps, double end = 0.02) {
    if (steps < 1) throw UsageError("noise schedule needs at least one step");
    NoiseSchedule s;
    s.alpha_hat.resize(static_cast<std::size_t>(steps) + 1);
    for (int t = 0; t <= steps; ++t)
      s.alpha_hat[static_cast<std::size_t>(t)] =
          t == steps ? end : 1.0 - (1.0 - end) * static_cast<double>(t) / steps;
    return s;
  }

  int steps() const { return static_cast<int>(alpha_hat.size()) - 1; }

  double operator()(int t) const {
    if (t < 0 || t > steps()) {
      throw SemanticError("step " + std::to_string(t) + " outside schedule [0, " +
                          std::to_string(steps()) + "]");
    }
    return alpha_hat[static_cast<std::size_t>(t)];
  }
};

/// z_t = sqrt(ᾱ_t) z_0 + sqrt(1 - ᾱ_t) ε
template <typename T>
BasicTensor<T> noise_latent(const BasicTensor<T>& z0, int t, const BasicTensor<T>& eps,
                            const NoiseSchedule& schedule) {
  require_same_shape(z0, eps, "noise_latent");
  const double a = schedule(t);
  if (a == 1.0) return z0;
  const double sa = std::sqrt(a), sb = std::sqrt(1.0 - a);
  BasicTensor<T> z(z0.shape());
  for (std::size_t i = 0; i < z.size(); ++i)
    z[i] = static_cast<T>(sa * static_cast<double>(z0[i]) + sb * static_cast<double>(eps[i]));
  return z;
}

/// A training example with its frozen-encoder outputs computed once.
template <typename T>
struct PreparedSample {
  BasicTensor<T> z0;
  BasicTensor<T> text;
  EncodedReference<T> reference;
};

template <typename T>
PreparedSample<T> prepare_sample(const Model<T>& model, const TrainSample& s) {
  const auto& cfg = model.config;
  return {toy_autoencode(s.target.template cast<T>(), static_cast<std::size_t>(cfg.latent_channels)),
          encode_text(cfg, model.frozen.text, join_words(s.caption)).features,
          encode_reference(cfg, model.frozen.image, s.reference.template cast<T>())};
}

template <typename T>
struct NoiseDraw {
  int t = 1;
  BasicTensor<T> eps;
};

/// t uniform on [1, T], ε standard normal with the latent's shape.
template <typename T>
NoiseDraw<T> draw_noise(const BackboneConfig& cfg, const NoiseSchedule& schedule, Rng& rng) {
  const auto c = static_cast<std::size_t>(cfg.latent_channels);
  const auto r = static_cast<std::size_t>(cfg.latent_size);
  NoiseDraw<T> d;
  d.t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(schedule.steps())));
  d.eps = rng.normal_tensor<T>({c, r, r});
  return d;
}

/// Mean over the batch of ||ε - ε_θ(z_t, t, f_ct, f_ci)||². No mask is used
/// in training. When `grad` is given, dL/dθ for the trainable set is added
/// into it.
template <typename T>
double training_loss(const Model<T>& model, std::span<const PreparedSample<T>> batch,
                     std::span<const NoiseDraw<T>> noise, const NoiseSchedule& schedule,
                     CombineMode mode = CombineMode::kConcatAdd,
                     TrainableParams<T>* grad = nullptr) {
  if (batch.empty() || batch.size() != noise.size()) {
    throw SemanticError("training_loss: batch and noise draws must be non-empty and aligned");
  }
  const auto den = model.denoiser();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch[i];
    ProjectorCache<T> pc;
    const auto feats = project_encoded(model.trainable.projector, s.reference, mode,
                                       grad ? &pc : nullptr);
    const auto zt = noise_latent(s.z0, noise[i].t, noise[i].eps, schedule);
    const VisualCondition<T> cond{feats.f_ci, std::nullopt};
    DenoiserCache<T> dc;
    const auto pred = den.forward(zt, noise[i].t, s.text, std::span(&cond, 1), nullptr,
                                  grad ? &dc : nullptr);
    const auto diff = sub(noise[i].eps, pred);
    total += sum_squares(diff);
    if (grad) {
      const auto dg = den.backward(dc, scaled(diff, -2.0 * inv_b));
      for (std::size_t b = 0; b < dg.projection.size(); ++b) {
        add_inplace(grad->visual[b].key, dg.projection[b].key);
        add_inplace(grad->visual[b].value, dg.projection[b].value);
      }
      projector_backward(model.trainable.projector, pc, dg.features[0], grad->projector);
    }
  }
  return total * inv_b;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  TrainableParams<T> m, v;
  long t = 0;

  static AdamState init(const TrainableParams<T>& p) {
    return {TrainableParams<T>::zeros_like(p), TrainableParams<T>::zeros_like(p), 0};
  }
};

template <typename T>
void adam_update(TrainableParams<T>& params, TrainableParams<T>& grad, AdamState<T>& st,
                 const AdamConfig& cfg) {
  ++st.t;
  if (cfg.lr == 0.0) return;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  auto p = params.tensors(), g = grad.tensors(), m = st.m.tensors(), v = st.v.tensors();
  for (std::size_t k = 0; k < p.size(); ++k) {
    for (std::size_t i = 0; i < p[k]->size(); ++i) {
      const double gi = (*g[k])[i];
      const double mi = cfg.beta1 * (*m[k])[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * (*v[k])[i] + (1.0 - cfg.beta2) * gi * gi;
      (*m[k])[i] = static_cast<T>(mi);
      (*v[k])[i] = static_cast<T>(vi);
      const double step = cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
      (*p[k])[i] = static_cast<T>((*p[k])[i] - step);
    }
  }
}

template <typename T>
struct TrainState {
  long step = 0;
  AdamState<T> adam;
  std::vector<double> losses;

  static TrainState init(const Model<T>& m) { return {0, AdamState<T>::init(m.trainable), {}}; }
};

/// One optimizer step on `batch`: fresh (t, ε) per sample from `rng`.
template <typename T>
double train_step(Model<T>& model, TrainState<T>& state, std::span<const PreparedSample<T>> batch,
                  const NoiseSchedule& schedule, Rng& rng, const AdamConfig& adam,
                  CombineMode mode = CombineMode::kConcatAdd) {
  std::vector<NoiseDraw<T>> noise;
  for (std::size_t i = 0; i < batch.size(); ++i)
    noise.push_back(draw_noise<T>(model.config, schedule, rng));
  auto grad = TrainableParams<T>::zeros_like(model.trainable);
  const double loss = training_loss<T>(model, batch, noise, schedule, mode, &grad);
  if (!std::isfinite(loss)) {
    throw NumericError("train_step " + std::to_string(state.step) + ": non-finite loss");
  }
  for (auto* g : grad.tensors()) ensure_finite(*g, "gradient");
  adam_update(model.trainable, grad, state.adam, adam);
  state.losses.push_back(loss);
  ++state.step;
  return loss;
}

struct TrainConfig {
  long steps = 300;
  int batch_size = 4;
  AdamConfig adam;
  std::uint64_t seed = 0;
  CombineMode mode = CombineMode::kConcatAdd;
  CurriculumConfig curriculum;
};

struct TrainLogRow {
  long step = 0;
  SampleKind kind = SampleKind::kGeneric;
  double r_sample = 1.0;
  double r_cur = 1.0;
  double loss = std::numeric_limits<double>::quiet_NaN();  // NaN in dry runs
};

template <typename T>
struct TrainReport {
  std::vector<TrainLogRow> rows;
  TrainState<T> state;
};

/// Runs `cfg.steps` curriculum steps. Every step draws one dataset kind from
/// the mix schedule and one crop ratio below the current bound; the whole
/// batch shares both. A dry run draws the schedule and samples but skips
/// the optimizer.
template <typename T>
TrainReport<T> run_curriculum_training(Model<T>& model, const TrainConfig& cfg, bool dry_run = false,
                                       const std::function<void(const TrainLogRow&)>& on_row = {}) {
  auto cur = cfg.curriculum;
  cur.total_steps = cfg.steps;
  cur.validate();
  if (cur.base_resolution != model.config.image_size) {
    throw UsageError("data.base_resolution must equal backbone.image_size");
  }
  if (cfg.batch_size < 1) throw UsageError("train.batch_size must be >= 1");
  const auto schedule = NoiseSchedule::linear(model.config.timesteps);
  const Rng root(cfg.seed);
  TrainReport<T> report{{}, TrainState<T>::init(model)};
  for (long s = 0; s < cfg.steps; ++s) {
    Rng rng = root.split(static_cast<std::uint64_t>(s) + 1);
    TrainLogRow row;
    row.step = s;
    row.kind = choose_kind(s, cfg.steps, cfg.seed);
    row.r_cur = crop_ratio(s, cur);
    row.r_sample = sample_ratio(row.r_cur, cur, rng);
    std::vector<PreparedSample<T>> batch;
    for (int i = 0; i < cfg.batch_size; ++i) {
      const auto sample = synth_sample(row.kind, cur, row.r_sample, rng);
      if (!dry_run) batch.push_back(prepare_sample(model, sample));
    }
    if (!dry_run) {
      row.loss = train_step<T>(model, report.state, batch, schedule, rng, cfg.adam, cfg.mode);
    }
    report.rows.push_back(row);
    if (on_row) on_row(row);
  }
  return report;
}

}  // namespace realcustom
