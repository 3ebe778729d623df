#pragma once

// Curriculum recipe: linear data-mix and crop-ratio schedules, the random
// resize-and-crop of reference images, and procedural generic / multiview
// samples rendered from a small parametric scene model.

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "realcustom/backbone.hpp"
#include "realcustom/error.hpp"
#include "realcustom/rng.hpp"
#include "realcustom/tensor.hpp"

namespace realcustom {

struct CurriculumConfig {
  long total_steps = 300;
  double r_min = 1.0;
  double r_max = std::sqrt(10.0);
  int base_resolution = 32;
  bool crop_multiview = true;
  int shape_count = 6;
  int color_count = 8;
  int background_count = 5;

  void validate() const {
    auto fail = [](const std::string& m) { throw UsageError("curriculum config: " + m); };
    if (total_steps < 1) fail("total_steps must be >= 1");
    if (!(r_min >= 1.0 && r_min <= r_max)) fail("need 1 <= r_min <= r_max");
    if (base_resolution < 2) fail("base_resolution must be >= 2");
    if (shape_count < 1 || shape_count > 6) fail("shape_count must be in [1, 6]");
    if (color_count < 1 || color_count > 8) fail("color_count must be in [1, 8]");
    if (background_count < 1 || background_count > 5) fail("background_count must be in [1, 5]");
  }
};

struct MixProbabilities {
  double generic = 1.0;
  double multiview = 0.0;
};

inline void check_step(long s_cur, long s_total, const char* what) {
  if (s_total < 1 || s_cur < 0 || s_cur > s_total) {
    throw SemanticError(std::string(what) + ": step " + std::to_string(s_cur) + " outside [0, " +
                        std::to_string(s_total) + "]");
  }
}

inline MixProbabilities mix_probabilities(long s_cur, long s_total) {
  check_step(s_cur, s_total, "mix_probabilities");
  MixProbabilities p;
  p.multiview = static_cast<double>(s_cur) / static_cast<double>(s_total);
  p.generic = 1.0 - p.multiview;
  return p;
}

inline double crop_ratio(long s_cur, const CurriculumConfig& cfg) {
  check_step(s_cur, cfg.total_steps, "crop_ratio");
  if (s_cur == cfg.total_steps) return cfg.r_max;
  return cfg.r_min + (cfg.r_max - cfg.r_min) * static_cast<double>(s_cur) /
                         static_cast<double>(cfg.total_steps);
}

inline double sample_ratio(double r_cur, const CurriculumConfig& cfg, Rng& rng) {
  if (r_cur < cfg.r_min) throw SemanticError("sample_ratio: r_cur below r_min");
  const double r = rng.uniform(cfg.r_min, r_cur);
  return std::min(r, r_cur);
}

enum class SampleKind { kGeneric, kMultiview };

inline const char* to_string(SampleKind k) {
  return k == SampleKind::kGeneric ? "generic" : "multiview";
}

/// Dataset-kind draw for a step. A seeded golden-ratio sequence stands in
/// for the uniform draw: each u is uniform on [0, 1) but consecutive steps
/// are evenly spread, which keeps per-decile frequencies close to the
/// schedule even over a few hundred steps.
inline SampleKind choose_kind(long s_cur, long s_total, std::uint64_t seed) {
  const double p_mv = mix_probabilities(s_cur, s_total).multiview;
  const double offset = Rng(seed).split(0x6b696e64).uniform();
  const double u = std::fmod(offset + static_cast<double>(s_cur) * (std::numbers::phi - 1.0), 1.0);
  return u < p_mv ? SampleKind::kMultiview : SampleKind::kGeneric;
}

/// Resize to round-half-up(base·r)² (bilinear), then a uniformly placed
/// base² crop. r = 1 is the exact identity.
template <typename T>
BasicTensor<T> curriculum_crop(const BasicTensor<T>& img, double r_sample, Rng& rng) {
  if (img.rank() != 3 || img.dim(1) != img.dim(2)) {
    throw ShapeError("curriculum_crop expects a square [C x S x S] image, got " +
                     shape_string(img.shape()));
  }
  if (!(r_sample >= 1.0)) throw SemanticError("curriculum_crop: r_sample must be >= 1");
  const std::size_t base = img.dim(1);
  const auto big = static_cast<std::size_t>(std::floor(static_cast<double>(base) * r_sample + 0.5));
  if (big == base) return img;
  const auto resized = resize_image(img, big, big, ResizeMode::kBilinear);
  const std::size_t y0 = rng.below(big - base + 1);
  const std::size_t x0 = rng.below(big - base + 1);
  return crop_image(resized, y0, x0, base, base);
}

// ---------------------------------------------------------------------------
// Synthetic scenes

inline constexpr std::array<const char*, 6> kShapeNames{"circle",  "square", "triangle",
                                                        "diamond", "cross",  "ring"};
inline constexpr std::array<const char*, 8> kColorNames{"red",    "green",  "blue",  "yellow",
                                                        "purple", "orange", "white", "black"};
inline constexpr std::array<const char*, 5> kBackgroundNames{"grass", "sand", "snow", "water",
                                                             "bricks"};
inline constexpr std::array<std::array<float, 3>, 8> kColorRgb{{{0.9f, 0.1f, 0.1f},
                                                               {0.1f, 0.8f, 0.2f},
                                                               {0.15f, 0.25f, 0.95f},
                                                               {0.95f, 0.9f, 0.1f},
                                                               {0.6f, 0.2f, 0.75f},
                                                               {1.0f, 0.55f, 0.05f},
                                                               {0.97f, 0.97f, 0.97f},
                                                               {0.05f, 0.05f, 0.05f}}};

/// Parameters of one rendered view. The subject identity (shape, color,
/// background) is shared between the two views of a multiview pair.
struct SceneParams {
  int shape = 0;
  int color = 0;
  int background = 0;
  double angle = 0.0;     // radians
  double cx = 0.5;        // centre, fraction of the image side
  double cy = 0.5;
  double radius = 0.25;   // fraction of the image side
  double texture_phase = 0.0;
};

inline std::vector<std::string> scene_caption(const SceneParams& p) {
  return {"a", kColorNames[p.color], kShapeNames[p.shape], "on", kBackgroundNames[p.background]};
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) s += (s.empty() ? "" : " ") + w;
  return s;
}

namespace detail {

inline bool inside_shape(int shape, double u, double v) {
  // (u, v) in the subject frame, unit radius.
  const double au = std::abs(u), av = std::abs(v);
  switch (shape) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return au <= 0.8 && av <= 0.8;
    case 2: return v >= -0.6 && v <= 0.9 && au <= 0.75 * (0.9 - v);
    case 3: return au + av <= 1.0;
    case 4: return (au <= 0.3 && av <= 0.95) || (av <= 0.3 && au <= 0.95);
    case 5: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.45;
    }
  }
  return false;
}

inline std::array<float, 3> background_rgb(int bg, double x, double y, double phase) {
  const double tau = 2.0 * std::numbers::pi;
  switch (bg) {
    case 0: {  // grass: green with vertical blades
      const double s = 0.5 + 0.5 * std::sin(tau * (6.0 * x + phase) + 2.0 * std::sin(tau * y));
      return {static_cast<float>(0.15 + 0.1 * s), static_cast<float>(0.45 + 0.25 * s), 0.12f};
    }
    case 1: {  // sand: tan with fine ripples
      const double s = 0.5 + 0.5 * std::sin(tau * (9.0 * y + 3.0 * x + phase));
      return {static_cast<float>(0.8 + 0.1 * s), static_cast<float>(0.7 + 0.08 * s), 0.45f};
    }
    case 2: {  // snow: near white, faint shading
      const double s = 0.5 + 0.5 * std::cos(tau * (x + y + phase));
      const auto g = static_cast<float>(0.88 + 0.08 * s);
      return {g, g, 0.97f};
    }
    case 3: {  // water: blue horizontal waves
      const double s = 0.5 + 0.5 * std::sin(tau * (5.0 * y + phase) + 1.5 * std::sin(tau * 2.0 * x));
      return {0.08f, static_cast<float>(0.3 + 0.15 * s), static_cast<float>(0.65 + 0.25 * s)};
    }
    default: {  // bricks: running bond with mortar lines
      const double rows = 6.0, cols = 4.0;
      const double ry = y * rows + phase;
      const double shift = std::fmod(std::floor(ry), 2.0) * 0.5;
      const double fx = std::fmod(x * cols + shift, 1.0), fy = ry - std::floor(ry);
      const bool mortar = fx < 0.08 || fy < 0.12;
      return mortar ? std::array<float, 3>{0.75f, 0.72f, 0.68f}
                    : std::array<float, 3>{0.62f, 0.22f, 0.15f};
    }
  }
}

}  // namespace detail

/// Renders a [3 x size x size] image in [0, 1].
inline Tensor render_scene(const SceneParams& p, std::size_t size) {
  Tensor img({3, size, size});
  const double ca = std::cos(p.angle), sa = std::sin(p.angle);
  const auto rgb = kColorRgb[static_cast<std::size_t>(p.color)];
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(size);
      const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(size);
      const double dx = (fx - p.cx) / p.radius, dy = (fy - p.cy) / p.radius;
      const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
      const auto c = detail::inside_shape(p.shape, u, v)
                         ? rgb
                         : detail::background_rgb(p.background, fx, fy, p.texture_phase);
      for (std::size_t ch = 0; ch < 3; ++ch) img.at(ch, y, x) = c[ch];
    }
  return img;
}

inline SceneParams random_view(SceneParams identity, Rng& rng) {
  identity.angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  identity.radius = rng.uniform(0.18, 0.3);
  identity.cx = rng.uniform(identity.radius, 1.0 - identity.radius);
  identity.cy = rng.uniform(identity.radius, 1.0 - identity.radius);
  return identity;
}

inline SceneParams random_identity(const CurriculumConfig& cfg, Rng& rng) {
  SceneParams p;
  p.shape = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.shape_count)));
  p.color = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.color_count)));
  p.background = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.background_count)));
  p.texture_phase = rng.uniform();
  return p;
}

struct TrainSample {
  SampleKind kind = SampleKind::kGeneric;
  Tensor target;     // denoiser target, [3 x base x base]
  Tensor reference;  // projector input, [3 x base x base]
  std::vector<std::string> caption;
  SceneParams target_view;
  SceneParams reference_view;
  double r_sample = 1.0;
};

/// Generic <text-image> sample: the reference is a curriculum crop of the
/// target itself.
inline TrainSample synth_generic_sample(const CurriculumConfig& cfg, double r_sample, Rng& rng) {
  TrainSample s;
  s.kind = SampleKind::kGeneric;
  s.target_view = random_view(random_identity(cfg, rng), rng);
  s.reference_view = s.target_view;
  const auto base = static_cast<std::size_t>(cfg.base_resolution);
  s.target = render_scene(s.target_view, base);
  s.reference = curriculum_crop(s.target, r_sample, rng);
  s.caption = scene_caption(s.target_view);
  s.r_sample = r_sample;
  return s;
}

/// Multiview sample: two views of one subject; the reference is view A, the
/// target and caption are view B.
inline TrainSample synth_multiview_sample(const CurriculumConfig& cfg, double r_sample, Rng& rng) {
  TrainSample s;
  s.kind = SampleKind::kMultiview;
  const auto identity = random_identity(cfg, rng);
  s.reference_view = random_view(identity, rng);
  s.target_view = random_view(identity, rng);
  const auto base = static_cast<std::size_t>(cfg.base_resolution);
  s.target = render_scene(s.target_view, base);
  const auto ref = render_scene(s.reference_view, base);
  s.reference = cfg.crop_multiview ? curriculum_crop(ref, r_sample, rng) : ref;
  s.caption = scene_caption(s.target_view);
  s.r_sample = cfg.crop_multiview ? r_sample : 1.0;
  return s;
}

inline TrainSample synth_sample(SampleKind kind, const CurriculumConfig& cfg, double r_sample,
                                Rng& rng) {
  return kind == SampleKind::kGeneric ? synth_generic_sample(cfg, r_sample, rng)
                                      : synth_multiview_sample(cfg, r_sample, rng);
}

}  // namespace realcustom
