// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "realcustom/realcustom.hpp"

namespace fs = std::filesystem;
using namespace realcustom;

namespace {

struct Outcome {
  bool passed = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Outcome from_reports(const std::vector<oracle::OracleReport>& reports) {
  Outcome o;
  double worst = 0;
  for (const auto& r : reports) {
    o.check(r.passed, r.name + " max_abs=" + fmt("%.3e", r.max_abs) + " max_rel=" + fmt("%.3e", r.max_rel));
    worst = std::max(worst, r.max_rel);
  }
  o.note(std::to_string(reports.size()) + " checks, worst rel " + fmt("%.2e", worst));
  return o;
}

const std::string kPrompt = "a red dog and a blue cat on grass";

const Model<float>& default_model() {
  static const auto m = Model<float>::init(BackboneConfig{});
  return m;
}

Tensor subject_image(int shape, int color) {
  SceneParams p;
  p.shape = shape;
  p.color = color;
  return render_scene(p, static_cast<std::size_t>(BackboneConfig{}.image_size));
}

// 1-3: mask selection laws.

Outcome topk_law() { return from_reports({oracle::topk_suite(1000, 1)}); }
Outcome maxnorm_law() { return from_reports({oracle::maxnorm_suite(1000, 2)}); }
Outcome alg1_equivalence() { return from_reports(oracle::alg1_suite(500, 3)); }

// 4: degenerate guidance settings collapse to plain sampling.
Outcome degeneracies() {
  Outcome o;
  const auto& m = default_model();
  SamplerConfig cfg;
  cfg.steps = 25;
  const auto plain = encode_ppm(sample_text_to_image(m, kPrompt, cfg));
  const std::vector<SubjectSpec> subj{{subject_image(0, 0), "dog"}};
  o.check(encode_ppm(customize(m, kPrompt, {}, cfg).image) == plain, "(a) no subjects differs from sampler");
  auto zero = cfg;
  zero.gamma = 0.0;
  o.check(encode_ppm(customize(m, kPrompt, subj, zero).image) == plain, "(b) gamma 0 differs from sampler");
  auto ones = cfg;
  ones.policy = MaskPolicy::kOnes;
  auto unmasked = cfg;
  unmasked.policy = MaskPolicy::kUnmasked;
  o.check(encode_ppm(customize(m, kPrompt, subj, ones).image) ==
              encode_ppm(customize(m, kPrompt, subj, unmasked).image),
          "(c) ones mask differs from unmasked sampling");
  o.note("latent " + std::to_string(m.config.latent_size) + "x" + std::to_string(m.config.latent_size) +
         ", 25 steps");
  return o;
}

// 5: early stop freezes the mask and skips the guidance branch.
Outcome early_stop() {
  Outcome o;
  SamplerConfig cfg;
  cfg.steps = 25;
  cfg.t_stop = 12;
  const auto r = customize(default_model(), kPrompt, {{subject_image(1, 0), "dog"}}, cfg);
  const auto& tr = r.trace;
  o.check(tr.masks.size() == 25, "trace has " + std::to_string(tr.masks.size()) + " steps");
  for (std::size_t s = 12; s < tr.masks.size(); ++s)
    o.check(encode_pgm(tr.masks[s][0]) == encode_pgm(tr.masks[11][0]),
            "mask at step " + std::to_string(s + 1) + " differs from step 12");
  o.check(tr.forwards.guidance == 12, "guidance forwards " + std::to_string(tr.forwards.guidance));
  o.check(tr.forwards.total() == 62, "total forwards " + std::to_string(tr.forwards.total()));
  o.note("forwards " + std::to_string(tr.forwards.total()));
  return o;
}

// 6: curriculum schedule over a dry run.
Outcome curriculum() {
  Outcome o;
  auto model = default_model();
  TrainConfig tc;
  tc.steps = 2000;
  tc.curriculum.base_resolution = model.config.image_size;
  const auto rep = run_curriculum_training(model, tc, true);
  o.check(rep.rows.size() == 2000, "row count");
  for (const auto& r : rep.rows) {
    const auto p = mix_probabilities(r.step, tc.steps);
    if (p.generic + p.multiview != 1.0) o.check(false, "P sum at step " + std::to_string(r.step));
    if (!(r.r_sample >= 1.0 && r.r_sample <= r.r_cur))
      o.check(false, "r_sample out of range at step " + std::to_string(r.step));
  }
  double worst = 0;
  for (int d = 0; d < 10; ++d) {
    double got = 0, want = 0;
    for (long s = d * 200; s < (d + 1) * 200; ++s) {
      got += rep.rows[static_cast<std::size_t>(s)].kind == SampleKind::kMultiview ? 1 : 0;
      want += mix_probabilities(s, tc.steps).multiview;
    }
    worst = std::max(worst, std::abs(got - want) / 200.0);
  }
  o.check(worst <= 0.05, "decile deviation " + fmt("%.4f", worst));
  auto cur = tc.curriculum;
  cur.total_steps = tc.steps;
  const double end = crop_ratio(tc.steps, cur);
  o.check(std::abs(end - std::sqrt(10.0)) <= 1e-6, "r_cur endpoint " + fmt("%.9f", end));
  o.note("worst decile deviation " + fmt("%.4f", worst));
  return o;
}

// 7: analytic gradients against central differences on an 8x8, one-block model.
Outcome gradients() {
  const auto cfg = oracle::gradient_check_config();
  auto o = from_reports(oracle::gradient_suite(cfg, 1e-4));
  o.check(cfg.latent_size == 8 && cfg.block_resolutions.size() == 1, "gradient model is not 8x8 one-block");
  return o;
}

// 8: training only touches the trainable set.
Outcome freeze() {
  Outcome o;
  auto model = default_model();
  const auto before = frozen_checksum(model);
  const auto trainable = params_checksum(model.trainable);
  TrainConfig tc;
  tc.steps = 300;
  tc.batch_size = 2;
  tc.curriculum.base_resolution = model.config.image_size;
  run_curriculum_training(model, tc);
  o.check(frozen_checksum(model) == before, "frozen checksum changed");
  o.check(params_checksum(model.trainable) != trainable, "trainable parameters did not move");
  char buf[64];
  std::snprintf(buf, sizeof buf, "frozen crc %08x after 300 steps", before);
  o.note(buf);
  return o;
}

// 9: the loss on a fixed 8-sample set at least halves within 300 steps.
Outcome overfit() {
  Outcome o;
  auto model = default_model();
  CurriculumConfig cur;
  cur.base_resolution = model.config.image_size;
  Rng data(0);
  std::vector<PreparedSample<float>> set;
  for (int i = 0; i < 8; ++i) {
    const auto kind = i % 2 == 0 ? SampleKind::kGeneric : SampleKind::kMultiview;
    set.push_back(prepare_sample(model, synth_sample(kind, cur, 1.0, data)));
  }
  const auto schedule = NoiseSchedule::linear(model.config.timesteps);
  // Fixed evaluation noise: four (t, eps) draws per sample.
  std::vector<std::vector<NoiseDraw<float>>> eval_noise(4);
  Rng eval(1);
  for (auto& round : eval_noise)
    for (std::size_t i = 0; i < set.size(); ++i) round.push_back(draw_noise<float>(model.config, schedule, eval));
  auto eval_loss = [&] {
    double total = 0;
    for (const auto& round : eval_noise) total += training_loss<float>(model, set, round, schedule);
    return total / static_cast<double>(eval_noise.size());
  };
  const double initial = eval_loss();
  auto state = TrainState<float>::init(model);
  const Rng root(0);
  for (int s = 0; s < 300; ++s) {
    Rng rng = root.split(static_cast<std::uint64_t>(s) + 1);
    train_step<float>(model, state, set, schedule, rng, AdamConfig{});
  }
  const double final_loss = eval_loss();
  const double ratio = final_loss / initial;
  o.check(ratio <= 0.5, "ratio " + fmt("%.4f", ratio));
  o.note("loss " + fmt("%.4f", initial) + " -> " + fmt("%.4f", final_loss) + " (ratio " + fmt("%.4f", ratio) + ")");
  return o;
}

// 10: projector laws.
Outcome ccp_laws() {
  auto o = from_reports(oracle::attention_suite(20, 4));
  const BackboneConfig cfg;
  Rng rng(10);
  const auto enc = ImageEncoderWeights<float>::init(cfg, rng);
  const auto w = ProjectorWeights<float>::init(cfg, rng);
  const auto img = rng.uniform_tensor<float>({3, 32, 32}, 0.0, 1.0);
  const auto n = static_cast<std::size_t>(cfg.image_tokens);
  const auto d = static_cast<std::size_t>(cfg.condition_dim);
  const auto f = project_subject(cfg, enc, w, img);
  o.check(f.f_ci.dim(0) == 2 * n, "|f_ci| = " + std::to_string(f.f_ci.dim(0)));

  const auto sp = rng.normal_tensor<float>({n, d});
  const auto deep = rng.normal_tensor<float>({n, d});
  const auto combined = combine_features(w, sp, deep, Tensor({n, d}));
  o.check(slice_rows(combined, n, n) == w.mlp_deep.forward(deep), "zero high-res branch changed the additive block");

  const std::pair<CombineMode, std::size_t> modes[] = {{CombineMode::kConcatAdd, 2 * n},
                                                       {CombineMode::kConcatConcat, 3 * n},
                                                       {CombineMode::kAddConcat, 2 * n},
                                                       {CombineMode::kAddAdd, n}};
  for (const auto& [mode, tokens] : modes) {
    const auto shape = project_subject(cfg, enc, w, img, mode).f_ci.shape();
    o.check(shape == Shape{tokens, d}, std::string(to_string(mode)) + " gave " + shape_string(shape));
  }
  return o;
}

// 11: guidance and DDIM identities.
Outcome sampler_algebra() {
  Outcome o;
  Rng rng(11);
  const auto u = rng.normal_tensor<float>({8, 16, 16});
  const auto c = rng.normal_tensor<float>({8, 16, 16});
  o.check(cfg_combine(u, c, 0.0) == u, "omega 0 is not the unconditional prediction");
  o.check(cfg_combine(u, c, 1.0) == c, "omega 1 is not the conditional prediction");

  const auto s = NoiseSchedule::linear(50);
  double one_step = 0;
  for (int t = 1; t <= 50; ++t) {
    const auto z0 = rng.normal_tensor<double>({4, 8, 8});
    const auto eps = rng.normal_tensor<double>({4, 8, 8});
    one_step = std::max(one_step, max_abs_diff(ddim_update(noise_latent(z0, t, eps, s), eps, t, 0, s), z0));
  }
  o.check(one_step <= 1e-12, "one-step inversion error " + fmt("%.3e", one_step));

  const auto z0 = rng.normal_tensor<float>({8, 16, 16});
  auto z = noise_latent(z0, 50, rng.normal_tensor<float>({8, 16, 16}), s);
  const auto ts = sampler_timesteps(25, 50);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i], t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    Tensor eps(z.shape());
    for (std::size_t k = 0; k < z.size(); ++k)
      eps[k] = static_cast<float>((z[k] - std::sqrt(s(t)) * z0[k]) / std::sqrt(1 - s(t)));
    z = ddim_update(z, eps, t, t_prev, s);
  }
  const double loop = max_abs_diff(z, z0);
  o.check(loop <= 1e-5, "round trip error " + fmt("%.3e", loop));
  o.note("one-step " + fmt("%.1e", one_step) + ", loop " + fmt("%.1e", loop));
  return o;
}

// 12: manifest re-run through the CLI and checkpoint persistence.
int shell(const std::string& args, const fs::path& log) {
  const auto cmd = std::string(REALCUSTOM_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome persistence() {
  Outcome o;
  const auto dir = fs::temp_directory_path() / "rc_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto p = [&](const char* name) { return (dir / name).string(); };
  const auto log = dir / "log.txt";

  const auto model = default_model();
  const auto bytes = encode_model(model);
  o.check(encode_model(decode_model(bytes)) == bytes, "checkpoint round trip not byte-identical");
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + static_cast<std::size_t>(i)]) << (8 * i);
  o.check(stored == crc32_bytes(bytes, bytes.size() - 4), "stored CRC does not match body");

  save_checkpoint(p("model.rcpp"), model);
  o.check(read_file_bytes(p("model.rcpp")) == bytes, "saved file differs from encoding");
  write_ppm(p("dog.ppm"), subject_image(0, 0));
  write_ppm(p("cat.ppm"), subject_image(4, 2));
  const int first = shell(std::string("customize --checkpoint ") + p("model.rcpp") + " --prompt '" + kPrompt +
                              "' --subject " + p("dog.ppm") + ":dog --subject " + p("cat.ppm") +
                              ":cat --steps 25 --seed 3 -o " + p("first.ppm"),
                          log);
  o.check(first == 0, "customize exited " + std::to_string(first));
  const auto manifest = p("first.ppm.trace/manifest.txt");
  o.check(fs::exists(manifest), "manifest missing");
  fs::copy_file(manifest, p("manifest.txt"));
  const int second = shell(std::string("customize -m ") + p("manifest.txt") + " -o " + p("second.ppm") +
                               " --trace-dir " + p("second.trace"),
                           log);
  o.check(second == 0, "manifest re-run exited " + std::to_string(second));
  if (first == 0 && second == 0)
    o.check(read_file_bytes(p("first.ppm")) == read_file_bytes(p("second.ppm")), "re-run image differs");
  fs::remove_all(dir);
  return o;
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "top-k law", 5, topk_law},
      {2, "max-norm law", 2, maxnorm_law},
      {3, "multi-subject selection equivalence", 10, alg1_equivalence},
      {4, "guidance degeneracies", 30, degeneracies},
      {5, "early-stop contract", 30, early_stop},
      {6, "curriculum schedules", 20, curriculum},
      {7, "gradient correctness", 60, gradients},
      {8, "freeze contract", 60, freeze},
      {9, "overfit sanity", 120, overfit},
      {10, "projector laws", 5, ccp_laws},
      {11, "sampler algebra", 5, sampler_algebra},
      {12, "determinism and persistence", 30, persistence},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    o.check(secs < c.budget_s, "over budget " + fmt("%.0f s", c.budget_s));
    failures += o.passed ? 0 : 1;
    std::printf("criterion %2d %-38s %s  %7.2fs  %s\n", c.id, c.name, o.passed ? "PASS" : "FAIL", secs,
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
