#pragma once

// Flat key=value run configuration. Keys are namespaced (backbone., train.,
// data., sampler., run.); unknown keys and malformed values are rejected with
// the offending line number. The same format is used for run manifests.

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "realcustom/diffusion.hpp"
#include "realcustom/pipeline.hpp"

namespace realcustom {

enum class ValueKind { kInt, kUInt64, kDouble, kBool, kString, kIntList, kDoubleList };

struct KeySpec {
  const char* key;
  ValueKind kind;
  const char* help;
};

inline constexpr KeySpec kConfigKeys[] = {
    {"backbone.latent_size", ValueKind::kInt, "latent grid side"},
    {"backbone.latent_channels", ValueKind::kInt, "latent channels"},
    {"backbone.text_dim", ValueKind::kInt, "text feature width"},
    {"backbone.image_tokens", ValueKind::kInt, "image tokens per level (perfect square)"},
    {"backbone.encoder_dim", ValueKind::kInt, "image encoder width"},
    {"backbone.condition_dim", ValueKind::kInt, "visual condition width"},
    {"backbone.shallow_layers", ValueKind::kInt, "number of shallow taps"},
    {"backbone.encoder_depth", ValueKind::kInt, "image encoder layers"},
    {"backbone.block_resolutions", ValueKind::kIntList, "denoiser block resolutions"},
    {"backbone.heads", ValueKind::kInt, "attention heads"},
    {"backbone.model_dim", ValueKind::kInt, "denoiser width"},
    {"backbone.image_size", ValueKind::kInt, "encoder native resolution"},
    {"backbone.timesteps", ValueKind::kInt, "noise schedule length"},
    {"backbone.seed", ValueKind::kUInt64, "weight init seed"},
    {"train.steps", ValueKind::kInt, "training steps"},
    {"train.batch_size", ValueKind::kInt, "samples per step"},
    {"train.lr", ValueKind::kDouble, "Adam learning rate"},
    {"train.beta1", ValueKind::kDouble, "Adam beta1"},
    {"train.beta2", ValueKind::kDouble, "Adam beta2"},
    {"train.seed", ValueKind::kUInt64, "data and noise seed"},
    {"train.combine_mode", ValueKind::kString, "projector combination mode"},
    {"train.checkpoint", ValueKind::kString, "output checkpoint path"},
    {"train.metrics", ValueKind::kString, "output CSV path"},
    {"train.init_checkpoint", ValueKind::kString, "start from this checkpoint"},
    {"data.base_resolution", ValueKind::kInt, "reference resolution in pixels"},
    {"data.r_min", ValueKind::kDouble, "minimum crop ratio"},
    {"data.r_max", ValueKind::kDouble, "maximum crop ratio"},
    {"data.crop_multiview", ValueKind::kBool, "crop multiview references too"},
    {"data.shape_count", ValueKind::kInt, "synthetic shapes in use"},
    {"data.color_count", ValueKind::kInt, "synthetic colors in use"},
    {"data.background_count", ValueKind::kInt, "synthetic backgrounds in use"},
    {"sampler.steps", ValueKind::kInt, "DDIM steps"},
    {"sampler.omega", ValueKind::kDouble, "classifier-free guidance strength"},
    {"sampler.gamma", ValueKind::kDouble, "Top-K ratio per subject"},
    {"sampler.gammas", ValueKind::kDoubleList, "per-subject Top-K ratios"},
    {"sampler.t_stop", ValueKind::kInt, "early-stop step"},
    {"sampler.seed", ValueKind::kUInt64, "initial latent seed"},
    {"sampler.cross_source", ValueKind::kString, "low | all"},
    {"sampler.self_source", ValueKind::kString, "high | all"},
    {"sampler.binary_mask", ValueKind::kBool, "binary instead of max-normalized masks"},
    {"sampler.mask_policy", ValueKind::kString, "adaptive | ones | unmasked"},
    {"sampler.combine_mode", ValueKind::kString, "projector combination mode"},
    {"run.checkpoint", ValueKind::kString, "checkpoint used"},
    {"run.checkpoint_crc", ValueKind::kString, "CRC-32 of the checkpoint file"},
    {"run.prompt", ValueKind::kString, "prompt"},
    {"run.subjects", ValueKind::kString, "image:word pairs separated by ';'"},
    {"run.output", ValueKind::kString, "output image path"},
    {"run.trace_dir", ValueKind::kString, "mask trace directory"},
};

inline const KeySpec* find_key(const std::string& key) {
  for (const auto& k : kConfigKeys)
    if (key == k.key) return &k;
  return nullptr;
}

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
bool parse_number(const std::string& s, N& out) {
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) parts.push_back(trim(cur));
  return parts;
}

}  // namespace detail

class RunConfig {
 public:
  struct Entry {
    std::string value;
    int line = 0;  // 0 = set programmatically or from a flag
  };

  static RunConfig parse(std::istream& in, const std::string& source = "config") {
    RunConfig cfg;
    cfg.source_ = source;
    std::string raw;
    for (int line = 1; std::getline(in, raw); ++line) {
      const auto hash = raw.find('#');
      const auto text = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
      if (text.empty()) continue;
      const auto eq = text.find('=');
      if (eq == std::string::npos) {
        throw UsageError(source + " line " + std::to_string(line) + ": expected key=value");
      }
      const auto key = detail::trim(text.substr(0, eq));
      const auto value = detail::trim(text.substr(eq + 1));
      if (cfg.entries_.count(key)) {
        throw UsageError(source + " line " + std::to_string(line) + ": key '" + key +
                         "' repeated (first on line " + std::to_string(cfg.entries_[key].line) + ")");
      }
      cfg.set(key, value, line);
    }
    return cfg;
  }

  static RunConfig parse_string(const std::string& text, const std::string& source = "config") {
    std::istringstream is(text);
    return parse(is, source);
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config '" + path + "'");
    return parse(in, path);
  }

  /// Sets or overrides a key; the value is type-checked immediately.
  void set(const std::string& key, const std::string& value, int line = 0) {
    const auto* spec = find_key(key);
    if (!spec) throw UsageError(where(line) + "unknown key '" + key + "'");
    check_value(*spec, value, line);
    entries_[key] = {value, line};
  }

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  void erase(const std::string& key) { entries_.erase(key); }

  const std::string& require(const std::string& key) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) throw UsageError(source_ + ": missing required key '" + key + "'");
    return it->second.value;
  }

  std::string get(const std::string& key, const std::string& fallback = {}) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second.value;
  }

  long get_int(const std::string& key, long fallback) const {
    if (!has(key)) return fallback;
    long v = 0;
    detail::parse_number(require(key), v);
    return v;
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    std::uint64_t v = 0;
    detail::parse_number(require(key), v);
    return v;
  }

  double get_double(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    double v = 0.0;
    detail::parse_number(require(key), v);
    return v;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const auto& v = require(key);
    return v == "true" || v == "1";
  }

  std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback) const {
    if (!has(key)) return fallback;
    std::vector<int> out;
    for (const auto& p : detail::split(require(key), ',')) out.push_back(std::stoi(p));
    return out;
  }

  std::vector<double> get_double_list(const std::string& key, std::vector<double> fallback) const {
    if (!has(key)) return fallback;
    std::vector<double> out;
    const auto& v = require(key);
    if (v.empty()) return out;
    for (const auto& p : detail::split(v, ',')) {
      double d = 0.0;
      detail::parse_number(p, d);
      out.push_back(d);
    }
    return out;
  }

  /// Sorted key=value lines; parse(serialize()) reproduces the config.
  std::string serialize() const {
    std::string out;
    for (const auto& [k, e] : entries_) out += k + "=" + e.value + "\n";
    return out;
  }

  const std::string& source() const { return source_; }

 private:
  std::string where(int line) const {
    return line > 0 ? source_ + " line " + std::to_string(line) + ": " : source_ + ": ";
  }

  void check_value(const KeySpec& spec, const std::string& value, int line) const {
    auto bad = [&](const char* expected) {
      throw UsageError(where(line) + "key '" + spec.key + "': expected " + expected + ", got '" +
                       value + "'");
    };
    switch (spec.kind) {
      case ValueKind::kInt: {
        long v;
        if (!detail::parse_number(value, v)) bad("an integer");
        break;
      }
      case ValueKind::kUInt64: {
        std::uint64_t v;
        if (!detail::parse_number(value, v)) bad("an unsigned integer");
        break;
      }
      case ValueKind::kDouble: {
        double v;
        if (!detail::parse_number(value, v)) bad("a number");
        break;
      }
      case ValueKind::kBool:
        if (value != "true" && value != "false" && value != "1" && value != "0") bad("true or false");
        break;
      case ValueKind::kString:
        break;
      case ValueKind::kIntList:
        for (const auto& p : detail::split(value, ',')) {
          long v;
          if (!detail::parse_number(p, v)) bad("a comma-separated integer list");
        }
        break;
      case ValueKind::kDoubleList:
        if (value.empty()) break;
        for (const auto& p : detail::split(value, ',')) {
          double v;
          if (!detail::parse_number(p, v)) bad("a comma-separated number list");
        }
        break;
    }
  }

  std::string source_ = "config";
  std::map<std::string, Entry> entries_;
};

// ---------------------------------------------------------------------------
// Typed views

inline const char* to_string(CrossSource s) { return s == CrossSource::kLowRes ? "low" : "all"; }
inline const char* to_string(SelfSource s) { return s == SelfSource::kHighRes ? "high" : "all"; }
inline const char* to_string(MaskPolicy p) {
  switch (p) {
    case MaskPolicy::kAdaptive: return "adaptive";
    case MaskPolicy::kOnes: return "ones";
    case MaskPolicy::kUnmasked: return "unmasked";
  }
  return "?";
}

namespace detail {

template <typename E>
E parse_enum(const std::string& key, const std::string& value, std::initializer_list<E> options) {
  for (E e : options)
    if (value == to_string(e)) return e;
  std::string allowed;
  for (E e : options) allowed += std::string(allowed.empty() ? "" : ", ") + to_string(e);
  throw UsageError("key '" + key + "': unknown value '" + value + "' (allowed: " + allowed + ")");
}

/// Shortest text that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

}  // namespace detail

inline BackboneConfig backbone_config(const RunConfig& rc, BackboneConfig c = {}) {
  c.latent_size = static_cast<int>(rc.get_int("backbone.latent_size", c.latent_size));
  c.latent_channels = static_cast<int>(rc.get_int("backbone.latent_channels", c.latent_channels));
  c.text_dim = static_cast<int>(rc.get_int("backbone.text_dim", c.text_dim));
  c.image_tokens = static_cast<int>(rc.get_int("backbone.image_tokens", c.image_tokens));
  c.encoder_dim = static_cast<int>(rc.get_int("backbone.encoder_dim", c.encoder_dim));
  c.condition_dim = static_cast<int>(rc.get_int("backbone.condition_dim", c.condition_dim));
  c.shallow_layers = static_cast<int>(rc.get_int("backbone.shallow_layers", c.shallow_layers));
  c.encoder_depth = static_cast<int>(rc.get_int("backbone.encoder_depth", c.encoder_depth));
  c.block_resolutions = rc.get_int_list("backbone.block_resolutions", c.block_resolutions);
  c.heads = static_cast<int>(rc.get_int("backbone.heads", c.heads));
  c.model_dim = static_cast<int>(rc.get_int("backbone.model_dim", c.model_dim));
  c.image_size = static_cast<int>(rc.get_int("backbone.image_size", c.image_size));
  c.timesteps = static_cast<int>(rc.get_int("backbone.timesteps", c.timesteps));
  c.seed = rc.get_u64("backbone.seed", c.seed);
  c.validate();
  return c;
}

inline TrainConfig train_config(const RunConfig& rc, TrainConfig t = {}) {
  t.steps = rc.get_int("train.steps", t.steps);
  t.batch_size = static_cast<int>(rc.get_int("train.batch_size", t.batch_size));
  t.adam.lr = rc.get_double("train.lr", t.adam.lr);
  t.adam.beta1 = rc.get_double("train.beta1", t.adam.beta1);
  t.adam.beta2 = rc.get_double("train.beta2", t.adam.beta2);
  t.seed = rc.get_u64("train.seed", t.seed);
  if (rc.has("train.combine_mode")) t.mode = parse_combine_mode(rc.get("train.combine_mode"));
  auto& d = t.curriculum;
  d.base_resolution = static_cast<int>(rc.get_int("data.base_resolution", d.base_resolution));
  d.r_min = rc.get_double("data.r_min", d.r_min);
  d.r_max = rc.get_double("data.r_max", d.r_max);
  d.crop_multiview = rc.get_bool("data.crop_multiview", d.crop_multiview);
  d.shape_count = static_cast<int>(rc.get_int("data.shape_count", d.shape_count));
  d.color_count = static_cast<int>(rc.get_int("data.color_count", d.color_count));
  d.background_count = static_cast<int>(rc.get_int("data.background_count", d.background_count));
  if (t.steps < 1) throw UsageError("train.steps must be >= 1");
  if (t.batch_size < 1) throw UsageError("train.batch_size must be >= 1");
  d.total_steps = t.steps;
  d.validate();
  return t;
}

inline SamplerConfig sampler_config(const RunConfig& rc, SamplerConfig s = {}) {
  s.steps = static_cast<int>(rc.get_int("sampler.steps", s.steps));
  s.omega = rc.get_double("sampler.omega", s.omega);
  s.gamma = rc.get_double("sampler.gamma", s.gamma);
  s.gammas = rc.get_double_list("sampler.gammas", s.gammas);
  s.t_stop = static_cast<int>(rc.get_int("sampler.t_stop", s.t_stop));
  s.seed = rc.get_u64("sampler.seed", s.seed);
  if (rc.has("sampler.cross_source"))
    s.cross_source = detail::parse_enum("sampler.cross_source", rc.get("sampler.cross_source"),
                                        {CrossSource::kLowRes, CrossSource::kAllRes});
  if (rc.has("sampler.self_source"))
    s.self_source = detail::parse_enum("sampler.self_source", rc.get("sampler.self_source"),
                                       {SelfSource::kHighRes, SelfSource::kAllRes});
  s.binary_mask = rc.get_bool("sampler.binary_mask", s.binary_mask);
  if (rc.has("sampler.mask_policy"))
    s.policy = detail::parse_enum("sampler.mask_policy", rc.get("sampler.mask_policy"),
                                  {MaskPolicy::kAdaptive, MaskPolicy::kOnes, MaskPolicy::kUnmasked});
  if (rc.has("sampler.combine_mode")) s.combine = parse_combine_mode(rc.get("sampler.combine_mode"));
  if (!(s.gamma >= 0.0 && s.gamma <= 1.0)) throw UsageError("sampler.gamma must lie in [0, 1]");
  for (double g : s.gammas)
    if (!(g >= 0.0 && g <= 1.0)) throw UsageError("sampler.gammas entries must lie in [0, 1]");
  return s;
}

/// Writes every resolved sampler field back into `rc`.
inline void put_sampler_config(RunConfig& rc, const SamplerConfig& s) {
  rc.set("sampler.steps", std::to_string(s.steps));
  rc.set("sampler.omega", detail::format_double(s.omega));
  rc.set("sampler.gamma", detail::format_double(s.gamma));
  std::string gl;
  for (double g : s.gammas) gl += (gl.empty() ? "" : ",") + detail::format_double(g);
  rc.set("sampler.gammas", gl);
  rc.set("sampler.t_stop", std::to_string(s.t_stop));
  rc.set("sampler.seed", std::to_string(s.seed));
  rc.set("sampler.cross_source", to_string(s.cross_source));
  rc.set("sampler.self_source", to_string(s.self_source));
  rc.set("sampler.binary_mask", s.binary_mask ? "true" : "false");
  rc.set("sampler.mask_policy", to_string(s.policy));
  rc.set("sampler.combine_mode", to_string(s.combine));
}

/// Seed override from the RCPP_SEED environment variable, if set.
inline std::optional<std::uint64_t> seed_from_env() {
  const char* v = std::getenv("RCPP_SEED");
  if (!v || !*v) return std::nullopt;
  std::uint64_t s = 0;
  if (!detail::parse_number(std::string(v), s)) {
    throw UsageError(std::string("RCPP_SEED: expected an unsigned integer, got '") + v + "'");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Metrics CSV

inline std::string csv_header() { return "step,kind,r_sample,loss\n"; }

inline std::string csv_row(const TrainLogRow& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%ld,%s,%.9g,%.9g\n", r.step, to_string(r.kind), r.r_sample, r.loss);
  return buf;
}

}  // namespace realcustom
