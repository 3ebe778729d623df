#pragma once

// Per-step mask traces on disk: one PGM per (step, subject), named
// mask_step%03d_subject%d.pgm, with 1-based steps and 0-based subjects.

#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "realcustom/image_io.hpp"
#include "realcustom/pipeline.hpp"

namespace realcustom {

inline std::string mask_file_name(int step, std::size_t subject) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "mask_step%03d_subject%zu.pgm", step, subject);
  return buf;
}

/// Writes every trace mask into `dir`, removing mask files left by an
/// earlier run first.
inline void write_mask_trace(const std::string& dir, const CustomizeTrace& trace) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::regex pattern(R"(mask_step\d+_subject\d+\.pgm)");
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && std::regex_match(e.path().filename().string(), pattern)) fs::remove(e.path());
  for (std::size_t s = 0; s < trace.masks.size(); ++s)
    for (std::size_t j = 0; j < trace.masks[s].size(); ++j)
      write_pgm((fs::path(dir) / mask_file_name(static_cast<int>(s) + 1, j)).string(), trace.masks[s][j]);
}

/// |A ∩ B| / |A ∪ B| over nonzero entries; two empty supports give 1.
inline double support_iou(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "support_iou");
  std::size_t both = 0, either = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0.0f, y = b[i] != 0.0f;
    both += (x && y) ? 1 : 0;
    either += (x || y) ? 1 : 0;
  }
  return either == 0 ? 1.0 : static_cast<double>(both) / static_cast<double>(either);
}

struct MaskStat {
  int step = 0;
  std::size_t subject = 0;
  std::size_t support = 0;
  double max = 0.0;            // largest byte / 255
  std::optional<double> iou;   // against the previous step, same subject
};

/// Reads every mask file in `dir` and summarises it, ordered by subject
/// then step.
inline std::vector<MaskStat> summarize_mask_trace(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw SemanticError("trace directory '" + dir + "' does not exist");
  const std::regex pattern(R"(mask_step(\d+)_subject(\d+)\.pgm)");
  std::map<std::pair<std::size_t, int>, fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && std::regex_match(name, m, pattern))
      files[{std::stoul(m[2]), std::stoi(m[1])}] = e.path();
  }
  if (files.empty()) throw SemanticError("no mask files in '" + dir + "'");
  std::vector<MaskStat> out;
  std::optional<Tensor> prev;
  std::optional<std::size_t> prev_subject;
  for (const auto& [key, path] : files) {
    const auto bytes = read_pgm_bytes(path.string());
    MaskStat st;
    st.subject = key.first;
    st.step = key.second;
    for (float v : bytes.data()) {
      st.support += v != 0.0f ? 1 : 0;
      st.max = std::max(st.max, static_cast<double>(v) / 255.0);
    }
    if (prev && prev_subject == st.subject && prev->shape() == bytes.shape())
      st.iou = support_iou(*prev, bytes);
    prev = bytes;
    prev_subject = st.subject;
    out.push_back(st);
  }
  return out;
}

}  // namespace realcustom
