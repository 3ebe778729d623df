#pragma once

// Adaptive mask guidance: aggregate text-branch attention into a fused map
// per target word, keep the top-K positions (jointly across subjects when
// there are several), normalise by the maximum, and reuse the mask after an
// early-stop step.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "realcustom/backbone.hpp"
#include "realcustom/mask_resize.hpp"
#include "realcustom/tensor.hpp"

namespace realcustom {

/// Which blocks feed the cross-attention aggregate.
enum class CrossSource { kLowRes, kAllRes };
/// Which blocks feed the self-attention aggregate.
enum class SelfSource { kHighRes, kAllRes };

namespace detail {

/// Separable bilinear resize of an [r² x r²] self-attention map to
/// [G² x G²]: keys first (rescaled so rows keep unit mass), then queries.
template <typename T>
BasicTensor<T> resize_self_map(const BasicTensor<T>& m, std::size_t r, std::size_t g) {
  if (r == g) return m;
  const double mass = static_cast<double>(r * r) / static_cast<double>(g * g);
  BasicTensor<T> keys({r * r, g * g});
  for (std::size_t i = 0; i < r * r; ++i) {
    const auto row = m.row(i);
    auto up = resize_2d(BasicTensor<T>({r, r}, std::vector<T>(row.begin(), row.end())), g, g,
                        ResizeMode::kBilinear);
    auto dst = keys.row(i);
    for (std::size_t j = 0; j < g * g; ++j) dst[j] = static_cast<T>(up[j] * mass);
  }
  BasicTensor<T> out({g * g, g * g});
  for (std::size_t j = 0; j < g * g; ++j) {
    BasicTensor<T> col({r, r});
    for (std::size_t i = 0; i < r * r; ++i) col[i] = keys.at(i, j);
    const auto up = resize_2d(col, g, g, ResizeMode::kBilinear);
    for (std::size_t i = 0; i < g * g; ++i) out.at(i, j) = up[i];
  }
  return out;
}

}  // namespace detail

/// Mean cross-attention of the target tokens, per source block resized to
/// G x G, averaged over tokens, heads and blocks. Returned as [G² x 1] in
/// row-major grid order.
template <typename T>
BasicTensor<T> aggregate_cross_maps(const AttentionRecord<T>& record,
                                    const std::vector<std::size_t>& target_positions,
                                    CrossSource source = CrossSource::kLowRes) {
  if (target_positions.empty()) throw SemanticError("aggregate_cross_maps: no target tokens");
  std::size_t g = 0;
  for (const auto& b : record.blocks) g = std::max(g, b.resolution);
  std::vector<double> acc(g * g, 0.0);
  std::size_t used = 0;
  for (const auto& b : record.blocks) {
    if (source == CrossSource::kLowRes && b.resolution >= g) continue;
    const std::size_t r = b.resolution;
    BasicTensor<T> local({r, r});
    for (const auto& head : b.cross_maps) {
      for (std::size_t pos : target_positions) {
        if (pos >= head.dim(1)) {
          throw SemanticError("aggregate_cross_maps: token " + std::to_string(pos) +
                              " outside prompt of " + std::to_string(head.dim(1)));
        }
      }
      for (std::size_t i = 0; i < r * r; ++i) {
        double s = 0.0;
        for (std::size_t pos : target_positions) s += head.at(i, pos);
        local[i] = static_cast<T>(local[i] + s);
      }
    }
    const double norm = 1.0 / static_cast<double>(b.cross_maps.size() * target_positions.size());
    for (auto& v : local.data()) v = static_cast<T>(v * norm);
    const auto up = resize_2d(local, g, g, ResizeMode::kBilinear);
    for (std::size_t i = 0; i < g * g; ++i) acc[i] += up[i];
    ++used;
  }
  if (used == 0) throw SemanticError("aggregate_cross_maps: no low-resolution block in record");
  BasicTensor<T> out({g * g, 1});
  for (std::size_t i = 0; i < g * g; ++i) out[i] = static_cast<T>(acc[i] / static_cast<double>(used));
  return out;
}

/// Mean self-attention over heads and over blocks at the full resolution G
/// (or every block, resized, for kAllRes). [G² x G²], rows sum to 1.
template <typename T>
BasicTensor<T> aggregate_self_maps(const AttentionRecord<T>& record,
                                   SelfSource source = SelfSource::kHighRes) {
  std::size_t g = 0;
  for (const auto& b : record.blocks) g = std::max(g, b.resolution);
  if (g == 0) throw SemanticError("aggregate_self_maps: empty record");
  std::vector<double> acc(g * g * g * g, 0.0);
  std::size_t used = 0;
  for (const auto& b : record.blocks) {
    if (source == SelfSource::kHighRes && b.resolution != g) continue;
    for (const auto& head : b.self_maps) {
      const auto m = detail::resize_self_map(head, b.resolution, g);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += m[i];
      ++used;
    }
  }
  BasicTensor<T> out({g * g, g * g});
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i] / static_cast<double>(used));
  return out;
}

/// M = M_self · M_cross, reshaped to G x G.
template <typename T>
BasicTensor<T> fuse_maps(const BasicTensor<T>& m_self, const BasicTensor<T>& m_cross) {
  if (m_self.rank() != 2 || m_self.dim(0) != m_self.dim(1) || m_cross.rank() != 2 ||
      m_cross.dim(0) != m_self.dim(1) || m_cross.dim(1) != 1) {
    throw ShapeError("fuse_maps: need [G² x G²] and [G² x 1], got " +
                     shape_string(m_self.shape()) + " and " + shape_string(m_cross.shape()));
  }
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(m_cross.dim(0)))));
  if (g * g != m_cross.dim(0)) throw ShapeError("fuse_maps: G² is not a square");
  return matmul(m_self, m_cross).reshaped({g, g});
}

/// ⌊γ·n⌋. The tiny slack keeps products such as 0.3·10, which land just
/// below the integer in binary, from flooring one short.
inline std::size_t keep_count(double gamma, std::size_t n) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) {
    throw SemanticError("gamma_scope must lie in [0, 1], got " + std::to_string(gamma));
  }
  const long double prod = static_cast<long double>(gamma) * static_cast<long double>(n);
  auto k = static_cast<std::size_t>(std::floor(prod + 1e-9L));
  return std::min(k, n);
}

/// Indices of the k largest entries; ties go to the lower flattened index.
template <typename T>
std::vector<std::size_t> topk_indices(const BasicTensor<T>& m, std::size_t k) {
  std::vector<std::size_t> idx(m.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (k == 0) return {};
  auto before = [&](std::size_t a, std::size_t b) {
    return m[a] > m[b] || (m[a] == m[b] && a < b);
  };
  if (k < idx.size()) std::nth_element(idx.begin(), idx.begin() + static_cast<long>(k) - 1, idx.end(), before);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Keeps the ⌊γ·G²⌋ highest entries at their raw values, zero elsewhere.
template <typename T>
BasicTensor<T> topk_select(const BasicTensor<T>& m, double gamma) {
  BasicTensor<T> out(m.shape());
  for (std::size_t i : topk_indices(m, keep_count(gamma, m.size()))) out[i] = m[i];
  return out;
}

/// M̂ = M̄ / max(M̄), or zero when the maximum is not positive.
template <typename T>
BasicTensor<T> max_normalize(const BasicTensor<T>& m) {
  BasicTensor<T> out(m.shape());
  if (m.empty()) return out;
  const T mx = *std::max_element(m.data().begin(), m.data().end());
  if (!(mx > T(0))) return out;
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] == mx ? T(1) : m[i] / mx;
  return out;
}

/// Ablation variant without mask normalisation: every kept cell becomes 1.
template <typename T>
BasicTensor<T> binary_normalize(const BasicTensor<T>& m) {
  BasicTensor<T> out(m.shape());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] != T(0) ? T(1) : T(0);
  return out;
}

/// Joint selection for several subjects: round-robin, each unfinished
/// subject takes its best position not yet claimed by anyone. Result
/// supports are disjoint; N = 1 reduces to topk_select.
template <typename T>
std::vector<BasicTensor<T>> multi_subject_select(const std::vector<BasicTensor<T>>& maps,
                                                 const std::vector<double>& gammas) {
  if (maps.empty() || maps.size() != gammas.size()) {
    throw SemanticError("multi_subject_select: need one gamma per subject map");
  }
  const std::size_t n = maps.front().size();
  for (const auto& m : maps) {
    if (m.shape() != maps.front().shape()) throw ShapeError("multi_subject_select: map shapes differ");
  }
  std::vector<std::size_t> quota;
  std::size_t total = 0;
  for (double g : gammas) {
    quota.push_back(keep_count(g, n));
    total += quota.back();
  }
  if (total > n) {
    throw CapacityError("multi_subject_select: " + std::to_string(total) +
                        " positions requested but the grid holds " + std::to_string(n));
  }
  // Each subject walks its own ranking; claimed positions are skipped.
  std::vector<std::vector<std::size_t>> order(maps.size());
  for (std::size_t j = 0; j < maps.size(); ++j) {
    auto& o = order[j];
    o.resize(n);
    std::iota(o.begin(), o.end(), std::size_t{0});
    const auto& m = maps[j];
    std::stable_sort(o.begin(), o.end(), [&](std::size_t a, std::size_t b) { return m[a] > m[b]; });
  }
  std::vector<char> flag(n, 0);
  std::vector<std::size_t> cursor(maps.size(), 0), taken(maps.size(), 0);
  std::vector<BasicTensor<T>> out;
  for (const auto& m : maps) out.emplace_back(m.shape());
  for (bool busy = true; busy;) {
    busy = false;
    for (std::size_t j = 0; j < maps.size(); ++j) {
      if (taken[j] == quota[j]) continue;
      auto& c = cursor[j];
      while (flag[order[j][c]]) ++c;
      const std::size_t pos = order[j][c];
      out[j][pos] = maps[j][pos];
      flag[pos] = 1;
      ++taken[j];
      busy = busy || taken[j] < quota[j];
    }
  }
  return out;
}

/// Holds the masks computed at step T_stop for reuse by later steps.
struct MaskCache {
  int t_stop = 0;
  std::optional<std::vector<Tensor>> stored;
};

/// Steps are 1-based and ascending. Up to T_stop the provider runs and its
/// result is stored at exactly T_stop; later steps return the stored masks.
inline std::vector<Tensor> early_stop_mask(int step, const std::function<std::vector<Tensor>()>& fresh,
                                           MaskCache& cache) {
  if (step < 1) throw SemanticError("early_stop_mask: steps are 1-based");
  if (step <= cache.t_stop) {
    auto masks = fresh();
    if (step == cache.t_stop) cache.stored = masks;
    return masks;
  }
  if (!cache.stored) {
    throw SemanticError("early_stop_mask: step " + std::to_string(step) +
                        " is past T_stop but no mask was cached");
  }
  return *cache.stored;
}

}  // namespace realcustom
