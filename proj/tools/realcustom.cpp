// realcustom: init, train, customize, inspect-mask and oracle-check.

#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "realcustom/realcustom.hpp"

namespace rc = realcustom;
namespace fs = std::filesystem;

namespace {

/// Flags that map onto config keys. Values are type-checked by RunConfig.
struct FlagMap {
  std::deque<std::pair<std::string, std::optional<std::string>>> entries;  // stable addresses

  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    entries.emplace_back(key, std::nullopt);
    app->add_option(flag, entries.back().second, help + " (" + key + ")");
  }

  void apply(rc::RunConfig& cfg) const {
    for (const auto& [key, value] : entries)
      if (value) cfg.set(key, *value);
  }
};

rc::RunConfig load_or_empty(const std::string& path) {
  return path.empty() ? rc::RunConfig{} : rc::RunConfig::load(path);
}

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

std::string file_crc(const std::string& path) {
  const auto bytes = rc::read_file_bytes(path);
  return hex32(rc::crc32_bytes(bytes, bytes.size()));
}

/// The CRC stored in the checkpoint trailer. (A CRC over the whole file,
/// trailer included, is the same constant for every valid checkpoint.)
std::string checkpoint_crc(const std::string& path) {
  const auto bytes = rc::read_file_bytes(path);
  if (bytes.size() < 4) throw rc::FormatError("'" + path + "' is too short for a checkpoint");
  return hex32(rc::crc32_bytes(bytes, bytes.size() - 4));
}

void apply_env_seed(rc::RunConfig& cfg, const std::string& key) {
  if (const auto s = rc::seed_from_env()) cfg.set(key, std::to_string(*s));
}

// ---------------------------------------------------------------------------

struct InitArgs {
  std::string config, out;
  FlagMap flags;
};

int run_init(InitArgs& a) {
  auto cfg = load_or_empty(a.config);
  a.flags.apply(cfg);
  apply_env_seed(cfg, "backbone.seed");
  const auto model = rc::Model<float>::init(rc::backbone_config(cfg));
  rc::save_checkpoint(a.out, model);
  std::printf("checkpoint %s crc32 %s\n", a.out.c_str(), checkpoint_crc(a.out).c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  bool dry_run = false;
  FlagMap flags;
};

int run_train(TrainArgs& a) {
  auto cfg = rc::RunConfig::load(a.config);
  a.flags.apply(cfg);
  apply_env_seed(cfg, "train.seed");
  const auto ckpt_path = cfg.require("train.checkpoint");
  const auto csv_path = cfg.require("train.metrics");

  auto model = cfg.has("train.init_checkpoint") ? rc::load_checkpoint(cfg.get("train.init_checkpoint"))
                                                : rc::Model<float>::init(rc::backbone_config(cfg));
  if (!cfg.has("data.base_resolution"))
    cfg.set("data.base_resolution", std::to_string(model.config.image_size));
  const auto tc = rc::train_config(cfg);

  std::ofstream csv(csv_path);
  if (!csv) throw rc::SemanticError("cannot write '" + csv_path + "'");
  csv << rc::csv_header();
  const auto report = rc::run_curriculum_training(model, tc, a.dry_run,
                                                  [&](const rc::TrainLogRow& r) { csv << rc::csv_row(r); });
  csv.close();
  std::printf("metrics %s rows %zu\n", csv_path.c_str(), report.rows.size());
  if (a.dry_run) return 0;
  rc::save_checkpoint(ckpt_path, model);
  std::printf("final loss %.9g\n", report.rows.back().loss);
  std::printf("checkpoint %s crc32 %s\n", ckpt_path.c_str(), checkpoint_crc(ckpt_path).c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct CustomizeArgs {
  std::string manifest;
  std::vector<std::string> subjects;
  FlagMap flags;
};

/// "img.ppm:word" pairs; the word follows the last ':'.
std::vector<std::pair<std::string, std::string>> parse_subjects(const std::string& joined) {
  std::vector<std::pair<std::string, std::string>> out;
  if (joined.empty()) return out;
  for (const auto& item : rc::detail::split(joined, ';')) {
    const auto colon = item.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == item.size()) {
      throw rc::UsageError("subject '" + item + "' must look like image.ppm:word");
    }
    out.emplace_back(item.substr(0, colon), item.substr(colon + 1));
  }
  return out;
}

int run_customize(CustomizeArgs& a) {
  auto cfg = load_or_empty(a.manifest);
  a.flags.apply(cfg);
  if (!a.subjects.empty()) {
    std::string joined;
    for (const auto& s : a.subjects) joined += (joined.empty() ? "" : ";") + s;
    cfg.set("run.subjects", joined);
  }
  apply_env_seed(cfg, "sampler.seed");
  const auto ckpt_path = cfg.require("run.checkpoint");
  const auto prompt = cfg.require("run.prompt");
  if (!cfg.has("run.output")) cfg.set("run.output", "customized.ppm");
  const auto out_path = cfg.get("run.output");
  if (!cfg.has("run.trace_dir")) cfg.set("run.trace_dir", out_path + ".trace");
  const auto trace_dir = cfg.get("run.trace_dir");

  const auto crc = checkpoint_crc(ckpt_path);
  if (cfg.has("run.checkpoint_crc") && cfg.get("run.checkpoint_crc") != crc) {
    throw rc::SemanticError("checkpoint '" + ckpt_path + "' has CRC " + crc + " but the manifest records " +
                            cfg.get("run.checkpoint_crc"));
  }
  cfg.set("run.checkpoint_crc", crc);
  const auto model = rc::load_checkpoint(ckpt_path);
  const auto sc = rc::sampler_config(cfg);

  const auto side = static_cast<std::size_t>(model.config.image_size);
  std::vector<rc::SubjectSpec> subjects;
  for (const auto& [path, word] : parse_subjects(cfg.get("run.subjects"))) {
    auto img = rc::read_ppm(path);
    if (img.dim(1) != side || img.dim(2) != side) img = rc::resize_image(img, side, side, rc::ResizeMode::kBilinear);
    subjects.push_back({std::move(img), word});
  }
  const auto result = rc::customize(model, prompt, subjects, sc);

  rc::write_ppm(out_path, result.image);
  rc::write_mask_trace(trace_dir, result.trace);
  rc::put_sampler_config(cfg, sc);
  const auto manifest = (fs::path(trace_dir) / "manifest.txt").string();
  std::ofstream(manifest) << cfg.serialize();
  std::printf("image %s crc32 %s\n", out_path.c_str(), file_crc(out_path).c_str());
  std::printf("trace %s (%zu steps, %zu subjects)\n", trace_dir.c_str(), result.trace.masks.size(),
              subjects.size());
  std::printf("manifest %s\n", manifest.c_str());
  std::printf("denoiser forwards %d (guidance %d, generation %d, unconditional %d)\n",
              result.trace.forwards.total(), result.trace.forwards.guidance,
              result.trace.forwards.generation, result.trace.forwards.unconditional);
  return 0;
}

// ---------------------------------------------------------------------------

int run_inspect(const std::string& dir) {
  const auto stats = rc::summarize_mask_trace(dir);
  std::printf("%-6s %-8s %-8s %-10s %s\n", "step", "subject", "support", "max", "iou_prev");
  for (const auto& s : stats) {
    const std::string iou = s.iou ? std::to_string(*s.iou) : "-";
    std::printf("%-6d %-8zu %-8zu %-10.6f %s\n", s.step, s.subject, s.support, s.max, iou.c_str());
  }
  return 0;
}

int run_oracle(const std::string& suite) {
  bool ok = true;
  for (const auto& r : rc::oracle::run_suite(suite)) {
    std::printf("check=%s status=%s max_abs=%.3e max_rel=%.3e trials=%ld\n", r.name.c_str(),
                r.passed ? "PASS" : "FAIL", r.max_abs, r.max_rel, r.trials);
    ok = ok && r.passed;
  }
  return ok ? 0 : static_cast<int>(rc::ExitCode::kNumeric);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Subject customization with adaptive mask guidance on a toy latent diffusion backbone"};
  app.require_subcommand(1);

  InitArgs init;
  auto* init_cmd = app.add_subcommand("init", "Write a freshly initialized checkpoint");
  init_cmd->add_option("-c,--config", init.config, "key=value config file");
  init_cmd->add_option("-o,--out", init.out, "checkpoint path")->required();
  init.flags.add(init_cmd, "--seed", "backbone.seed", "weight init seed");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train the projector and visual projections");
  train_cmd->add_option("config", train.config, "key=value config file")->required();
  train_cmd->add_flag("--dry-run", train.dry_run, "draw the curriculum without optimizing");
  train.flags.add(train_cmd, "--steps", "train.steps", "training steps");
  train.flags.add(train_cmd, "--batch-size", "train.batch_size", "samples per step");
  train.flags.add(train_cmd, "--seed", "train.seed", "data and noise seed");
  train.flags.add(train_cmd, "--checkpoint", "train.checkpoint", "output checkpoint");
  train.flags.add(train_cmd, "--metrics", "train.metrics", "output CSV");
  train.flags.add(train_cmd, "--init", "train.init_checkpoint", "start from checkpoint");

  CustomizeArgs cust;
  auto* cust_cmd = app.add_subcommand("customize", "Generate an image customized with subject references");
  cust_cmd->add_option("-m,--manifest,--config", cust.manifest, "manifest or config file to start from");
  cust_cmd->add_option("--subject", cust.subjects, "image.ppm:word, repeatable");
  cust.flags.add(cust_cmd, "--checkpoint", "run.checkpoint", "checkpoint");
  cust.flags.add(cust_cmd, "--prompt", "run.prompt", "prompt");
  cust.flags.add(cust_cmd, "-o,--out", "run.output", "output image");
  cust.flags.add(cust_cmd, "--trace-dir", "run.trace_dir", "mask trace directory");
  cust.flags.add(cust_cmd, "--steps", "sampler.steps", "DDIM steps");
  cust.flags.add(cust_cmd, "--omega", "sampler.omega", "guidance strength");
  cust.flags.add(cust_cmd, "--gamma", "sampler.gamma", "Top-K ratio");
  cust.flags.add(cust_cmd, "--gammas", "sampler.gammas", "per-subject Top-K ratios");
  cust.flags.add(cust_cmd, "--t-stop", "sampler.t_stop", "early-stop step");
  cust.flags.add(cust_cmd, "--seed", "sampler.seed", "initial latent seed");
  cust.flags.add(cust_cmd, "--cross-source", "sampler.cross_source", "low | all");
  cust.flags.add(cust_cmd, "--self-source", "sampler.self_source", "high | all");
  cust.flags.add(cust_cmd, "--binary-mask", "sampler.binary_mask", "true | false");
  cust.flags.add(cust_cmd, "--mask-policy", "sampler.mask_policy", "adaptive | ones | unmasked");
  cust.flags.add(cust_cmd, "--combine", "sampler.combine_mode", "projector combination mode");

  std::string trace_dir;
  auto* inspect_cmd = app.add_subcommand("inspect-mask", "Summarize a mask trace directory");
  inspect_cmd->add_option("trace_dir", trace_dir, "directory written by customize")->required();

  std::string suite;
  auto* oracle_cmd = app.add_subcommand("oracle-check", "Compare main-path kernels with reference oracles");
  oracle_cmd->add_option("suite", suite, "topk | maxnorm | alg1 | attention | resize | matmul | grad | all")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(rc::ExitCode::kUsage);
  }

  try {
    if (*init_cmd) return run_init(init);
    if (*train_cmd) return run_train(train);
    if (*cust_cmd) return run_customize(cust);
    if (*inspect_cmd) return run_inspect(trace_dir);
    if (*oracle_cmd) return run_oracle(suite);
  } catch (const rc::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 1;
  }
  return 0;
}
