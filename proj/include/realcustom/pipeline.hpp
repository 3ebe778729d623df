#pragma once

// Dual-branch sampler. Each DDIM step runs a text-only guidance branch whose
// attention maps produce the subject masks, a generation branch with the
// masked visual condition, and an unconditional pass for classifier-free
// guidance.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "realcustom/diffusion.hpp"
#include "realcustom/mask_guidance.hpp"
#include "realcustom/model.hpp"

namespace realcustom {

/// What the generation branch multiplies the visual term by.
enum class MaskPolicy {
  kAdaptive,  // guidance-branch masks (the normal mode)
  kOnes,      // all-ones masks
  kUnmasked,  // no mask at all
};

struct SamplerConfig {
  int steps = 25;
  double omega = 7.5;
  double gamma = 0.2;           // default γ_scope for every subject
  std::vector<double> gammas;   // per-subject override, empty = use gamma
  int t_stop = 12;
  std::uint64_t seed = 0;
  CrossSource cross_source = CrossSource::kLowRes;
  SelfSource self_source = SelfSource::kHighRes;
  bool binary_mask = false;
  MaskPolicy policy = MaskPolicy::kAdaptive;
  CombineMode combine = CombineMode::kConcatAdd;

  void validate(int schedule_steps) const {
    if (steps < 1) throw UsageError("sampler.steps must be >= 1");
    if (steps > schedule_steps) {
      throw UsageError("sampler.steps exceeds the " + std::to_string(schedule_steps) +
                       "-step noise schedule");
    }
    if (!(omega >= 0.0)) throw UsageError("sampler.omega must be >= 0");
    if (t_stop < 1) throw UsageError("sampler.t_stop must be >= 1");
  }

  double gamma_for(std::size_t j) const { return gammas.empty() ? gamma : gammas.at(j); }
};

/// A reference image and the prompt word it customizes.
struct SubjectSpec {
  Tensor image;
  std::string word;
};

struct ForwardCounts {
  int guidance = 0;
  int generation = 0;
  int unconditional = 0;
  int total() const { return guidance + generation + unconditional; }
};

struct CustomizeTrace {
  std::vector<int> timesteps;                // t used at steps 1..S
  std::vector<std::vector<Tensor>> masks;    // [step][subject] M̂
  std::vector<double> latent_norms;          // ||z|| after each step
  Tensor z0;
  ForwardCounts forwards;
};

struct CustomizeResult {
  Tensor image;
  CustomizeTrace trace;
};

/// Descending schedule indices for S sampler steps: t_s = ⌊(S-s+1)·T/S⌋.
inline std::vector<int> sampler_timesteps(int steps, int schedule_steps) {
  if (steps < 1 || steps > schedule_steps) {
    throw UsageError("sampler steps must lie in [1, " + std::to_string(schedule_steps) + "]");
  }
  std::vector<int> ts;
  for (int s = 1; s <= steps; ++s) ts.push_back((steps - s + 1) * schedule_steps / steps);
  return ts;
}

/// ε_uncond + ω (ε_cond - ε_uncond). ω = 0 and ω = 1 return the inputs
/// exactly.
template <typename T>
BasicTensor<T> cfg_combine(const BasicTensor<T>& uncond, const BasicTensor<T>& cond, double omega) {
  require_same_shape(uncond, cond, "cfg_combine");
  if (omega == 0.0) return uncond;
  if (omega == 1.0) return cond;
  BasicTensor<T> out(cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(static_cast<double>(uncond[i]) +
                            omega * (static_cast<double>(cond[i]) - static_cast<double>(uncond[i])));
  return out;
}

/// Deterministic DDIM (η = 0): invert the forward noising for ẑ_0, then
/// re-noise to t_prev with the same ε.
template <typename T>
BasicTensor<T> ddim_update(const BasicTensor<T>& zt, const BasicTensor<T>& eps, int t, int t_prev,
                           const NoiseSchedule& schedule) {
  require_same_shape(zt, eps, "ddim_update");
  if (!(t > t_prev)) throw SemanticError("ddim_update: need t > t_prev");
  const double a = schedule(t), ap = schedule(t_prev);
  const double sa = std::sqrt(a), sb = std::sqrt(1.0 - a);
  const double spa = std::sqrt(ap), spb = std::sqrt(1.0 - ap);
  BasicTensor<T> out(zt.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double e = eps[i];
    const double z0 = (static_cast<double>(zt[i]) - sb * e) / sa;
    out[i] = static_cast<T>(ap == 1.0 ? z0 : spa * z0 + spb * e);
  }
  return out;
}

struct GuidanceOutput {
  AttentionRecord<float> record;
  std::vector<Tensor> fused;  // one G x G map per target
};

/// Text-only denoiser pass; its ε is discarded and only the maps are kept.
inline GuidanceOutput guidance_branch_step(const Model<float>& model, const Tensor& zt, int t,
                                           const TextEncoding<float>& text,
                                           const std::vector<std::vector<std::size_t>>& targets,
                                           const SamplerConfig& cfg) {
  GuidanceOutput out;
  out.record.tokens = text.index;
  model.denoiser().forward(zt, t, text.features, {}, &out.record);
  const auto m_self = aggregate_self_maps(out.record, cfg.self_source);
  for (const auto& positions : targets)
    out.fused.push_back(fuse_maps(m_self, aggregate_cross_maps(out.record, positions, cfg.cross_source)));
  return out;
}

/// Denoiser pass with every subject's visual term, scaled by its mask when
/// one is given.
inline Tensor generation_branch_step(const Model<float>& model, const Tensor& zt, int t,
                                     const Tensor& text, const std::vector<Tensor>& f_ci,
                                     const std::vector<std::optional<Tensor>>& masks) {
  if (f_ci.size() != masks.size()) {
    throw SemanticError("generation branch: " + std::to_string(f_ci.size()) +
                        " visual conditions but " + std::to_string(masks.size()) + " masks");
  }
  std::vector<VisualCondition<float>> conds;
  for (std::size_t j = 0; j < f_ci.size(); ++j) conds.push_back({f_ci[j], masks[j]});
  return model.denoiser().forward(zt, t, text, conds);
}

/// Turns fused maps into normalized masks: top-K for one subject, the
/// joint round-robin selection for several.
inline std::vector<Tensor> select_masks(const std::vector<Tensor>& fused, const SamplerConfig& cfg) {
  std::vector<Tensor> selected;
  if (fused.size() == 1) {
    selected.push_back(topk_select(fused[0], cfg.gamma_for(0)));
  } else {
    std::vector<double> gammas;
    for (std::size_t j = 0; j < fused.size(); ++j) gammas.push_back(cfg.gamma_for(j));
    selected = multi_subject_select(fused, gammas);
  }
  for (auto& m : selected) m = cfg.binary_mask ? binary_normalize(m) : max_normalize(m);
  return selected;
}

inline Tensor initial_latent(const BackboneConfig& bc, std::uint64_t seed) {
  const auto c = static_cast<std::size_t>(bc.latent_channels);
  const auto r = static_cast<std::size_t>(bc.latent_size);
  Rng rng = Rng(seed).split(0x7a54);
  return rng.normal_tensor<float>({c, r, r});
}

/// Plain text-to-image sampling with classifier-free guidance.
inline Tensor sample_text_to_image(const Model<float>& model, const std::string& prompt,
                                   const SamplerConfig& cfg, Tensor* z_final = nullptr) {
  const auto& bc = model.config;
  cfg.validate(bc.timesteps);
  const auto schedule = NoiseSchedule::linear(bc.timesteps);
  const auto text = encode_text(bc, model.frozen.text, prompt);
  const auto empty = encode_unconditional(bc, model.frozen.text);
  const auto den = model.denoiser();
  const auto ts = sampler_timesteps(cfg.steps, bc.timesteps);
  auto z = initial_latent(bc, cfg.seed);
  for (std::size_t s = 0; s < ts.size(); ++s) {
    const int t = ts[s], t_prev = s + 1 < ts.size() ? ts[s + 1] : 0;
    const auto cond = den.forward(z, t, text.features, {});
    const auto uncond = den.forward(z, t, empty.features, {});
    z = ddim_update(z, cfg_combine(uncond, cond, cfg.omega), t, t_prev, schedule);
  }
  if (z_final) *z_final = z;
  return toy_decode(z);
}

/// Customization loop. Subjects may share an image (several words of one
/// reference) or bring their own.
inline CustomizeResult customize(const Model<float>& model, const std::string& prompt,
                                 const std::vector<SubjectSpec>& subjects, const SamplerConfig& cfg) {
  const auto& bc = model.config;
  cfg.validate(bc.timesteps);
  if (!cfg.gammas.empty() && cfg.gammas.size() != subjects.size()) {
    throw UsageError("sampler.gammas must list one ratio per subject");
  }
  const auto schedule = NoiseSchedule::linear(bc.timesteps);
  const auto text = encode_text(bc, model.frozen.text, prompt);
  const auto empty = encode_unconditional(bc, model.frozen.text);

  std::vector<std::vector<std::size_t>> targets;
  std::vector<Tensor> f_ci;
  for (const auto& s : subjects) {
    const auto it = text.index.find(s.word);
    if (it == text.index.end()) {
      throw SemanticError("target word '" + s.word + "' does not occur in the prompt");
    }
    targets.push_back(it->second);
    f_ci.push_back(project_subject(bc, model.frozen.image, model.trainable.projector, s.image,
                                   cfg.combine).f_ci);
  }
  if (cfg.policy == MaskPolicy::kAdaptive && subjects.size() > 1) {
    std::size_t total = 0;
    const auto g2 = static_cast<std::size_t>(bc.latent_size * bc.latent_size);
    for (std::size_t j = 0; j < subjects.size(); ++j) total += keep_count(cfg.gamma_for(j), g2);
    if (total > g2) {
      throw CapacityError("subject ratios request " + std::to_string(total) +
                          " mask positions but the grid holds " + std::to_string(g2));
    }
  }

  const auto den = model.denoiser();
  const auto ts = sampler_timesteps(cfg.steps, bc.timesteps);
  const auto g = static_cast<std::size_t>(bc.latent_size);
  MaskCache cache{cfg.t_stop, std::nullopt};
  CustomizeResult result;
  auto& trace = result.trace;
  trace.timesteps = ts;
  auto z = initial_latent(bc, cfg.seed);
  for (std::size_t s = 0; s < ts.size(); ++s) {
    const int step = static_cast<int>(s) + 1;
    const int t = ts[s], t_prev = s + 1 < ts.size() ? ts[s + 1] : 0;

    std::vector<Tensor> masks;
    if (!subjects.empty()) {
      switch (cfg.policy) {
        case MaskPolicy::kAdaptive:
          masks = early_stop_mask(step, [&] {
            ++trace.forwards.guidance;
            return select_masks(guidance_branch_step(model, z, t, text, targets, cfg).fused, cfg);
          }, cache);
          break;
        case MaskPolicy::kOnes:
          masks.assign(subjects.size(), Tensor::ones({g, g}));
          break;
        case MaskPolicy::kUnmasked:
          break;
      }
    }
    std::vector<std::optional<Tensor>> mask_opts(subjects.size());
    for (std::size_t j = 0; j < masks.size(); ++j) mask_opts[j] = masks[j];

    ++trace.forwards.generation;
    const auto cond = generation_branch_step(model, z, t, text.features, f_ci, mask_opts);
    ++trace.forwards.unconditional;
    const auto uncond = den.forward(z, t, empty.features, {});
    z = ddim_update(z, cfg_combine(uncond, cond, cfg.omega), t, t_prev, schedule);

    trace.masks.push_back(std::move(masks));
    trace.latent_norms.push_back(std::sqrt(sum_squares(z)));
  }
  trace.z0 = z;
  result.image = toy_decode(z);
  return result;
}

}  // namespace realcustom
