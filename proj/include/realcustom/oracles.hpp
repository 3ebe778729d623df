#pragma once

// Brute-force reference implementations. They only use the tensor container
// and standard library; none of the main-path kernels are called here.

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "realcustom/error.hpp"
#include "realcustom/tensor.hpp"

namespace realcustom::oracle {

struct OracleReport {
  std::string name;
  bool passed = true;
  double max_abs = 0.0;
  double max_rel = 0.0;
  long trials = 0;

  void observe(double abs_err, double rel_err) {
    if (std::isfinite(abs_err)) max_abs = std::max(max_abs, abs_err);
    if (std::isfinite(rel_err)) max_rel = std::max(max_rel, rel_err);
  }
};

/// ⌊γ·n⌋ with the same decimal intent as the main path (tiny upward slack).
inline std::size_t gamma_count(double gamma, std::size_t n) {
  return static_cast<std::size_t>(std::floor(gamma * static_cast<double>(n) + 1e-9));
}

/// Full sort of (value, index) pairs; keep the first ⌊γ·n⌋.
template <typename T>
BasicTensor<T> sort_topk_oracle(const BasicTensor<T>& m, double gamma) {
  std::vector<std::pair<T, std::size_t>> entries;
  for (std::size_t i = 0; i < m.size(); ++i) entries.emplace_back(m[i], i);
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  BasicTensor<T> out(m.shape());
  const std::size_t k = std::min(gamma_count(gamma, m.size()), m.size());
  for (std::size_t r = 0; r < k; ++r) out[entries[r].second] = entries[r].first;
  return out;
}

/// Line-by-line transcription of the multi-subject guidance-mask algorithm:
/// while any subject is short of its quota, visit subjects in order; each
/// short subject sets flagged cells to -inf, copies its top-1 cell into its
/// mask, and flags that cell.
template <typename T>
std::vector<BasicTensor<T>> alg1_stepthrough_oracle(const std::vector<BasicTensor<T>>& maps,
                                                    const std::vector<double>& gammas) {
  const std::size_t n_subjects = maps.size();
  const std::size_t cells = maps.at(0).size();
  std::vector<std::size_t> gamma_num(n_subjects), gamma_cur(n_subjects, 0);
  std::size_t requested = 0;
  for (std::size_t j = 0; j < n_subjects; ++j) {
    gamma_num[j] = gamma_count(gammas.at(j), cells);
    requested += gamma_num[j];
  }
  if (requested > cells) throw CapacityError("oracle: capacity exceeded");

  std::vector<int> flag(cells, 0);
  std::vector<BasicTensor<T>> masks;
  for (const auto& m : maps) masks.emplace_back(m.shape());

  auto unfinished = [&] {
    std::size_t c = 0;
    for (std::size_t j = 0; j < n_subjects; ++j) c += gamma_cur[j] < gamma_num[j] ? 1 : 0;
    return c;
  };
  while (unfinished() > 0) {
    for (std::size_t j = 0; j < n_subjects; ++j) {
      if (!(gamma_cur[j] < gamma_num[j])) continue;
      // Set_NegInf
      std::vector<long double> masked(cells);
      for (std::size_t i = 0; i < cells; ++i)
        masked[i] = flag[i] ? -std::numeric_limits<long double>::infinity()
                            : static_cast<long double>(maps[j][i]);
      // Copy_Top1 (first maximum wins)
      std::size_t best = 0;
      for (std::size_t i = 1; i < cells; ++i)
        if (masked[i] > masked[best]) best = i;
      masks[j][best] = maps[j][best];
      // Set_Flag
      flag[best] = 1;
      gamma_cur[j] += 1;
    }
  }
  return masks;
}

/// Single-head softmax(scale · Q Kᵀ) V with explicit loops in long double.
template <typename T>
BasicTensor<T> naive_attention_oracle(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                      const BasicTensor<T>& v, long double scale) {
  const std::size_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1), dv = v.dim(1);
  BasicTensor<T> out({nq, dv});
  for (std::size_t i = 0; i < nq; ++i) {
    std::vector<long double> logits(nk);
    long double mx = -std::numeric_limits<long double>::infinity();
    for (std::size_t j = 0; j < nk; ++j) {
      long double s = 0;
      for (std::size_t c = 0; c < d; ++c)
        s += static_cast<long double>(q[i * d + c]) * static_cast<long double>(k[j * d + c]);
      logits[j] = s * scale;
      mx = std::max(mx, logits[j]);
    }
    long double z = 0;
    for (auto& l : logits) {
      l = std::exp(l - mx);
      z += l;
    }
    for (std::size_t c = 0; c < dv; ++c) {
      long double acc = 0;
      for (std::size_t j = 0; j < nk; ++j) acc += logits[j] / z * static_cast<long double>(v[j * dv + c]);
      out[i * dv + c] = static_cast<T>(acc);
    }
  }
  return out;
}

/// Multi-head form: head h uses columns [h·dh, (h+1)·dh) and scale 1/sqrt(dh).
template <typename T>
BasicTensor<T> naive_multihead_oracle(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                      const BasicTensor<T>& v, std::size_t heads) {
  const std::size_t dh = q.dim(1) / heads;
  BasicTensor<T> out({q.dim(0), q.dim(1)});
  for (std::size_t h = 0; h < heads; ++h) {
    auto cols = [&](const BasicTensor<T>& x) {
      BasicTensor<T> s({x.dim(0), dh});
      for (std::size_t i = 0; i < x.dim(0); ++i)
        for (std::size_t c = 0; c < dh; ++c) s[i * dh + c] = x[i * x.dim(1) + h * dh + c];
      return s;
    };
    const auto o = naive_attention_oracle(cols(q), cols(k), cols(v),
                                          1.0L / std::sqrt(static_cast<long double>(dh)));
    for (std::size_t i = 0; i < q.dim(0); ++i)
      for (std::size_t c = 0; c < dh; ++c) out[i * q.dim(1) + h * dh + c] = o[i * dh + c];
  }
  return out;
}

/// Triple-loop matrix product in long double.
template <typename T>
BasicTensor<T> naive_matmul_oracle(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  BasicTensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      long double s = 0;
      for (std::size_t p = 0; p < k; ++p)
        s += static_cast<long double>(a[i * k + p]) * static_cast<long double>(b[p * n + j]);
      c[i * n + j] = static_cast<T>(s);
    }
  return c;
}

/// Bilinear sampling with half-pixel centres, evaluated point by point:
/// src coordinate = (dst + 0.5)·in/out - 0.5, clamped to the image.
template <typename T>
BasicTensor<T> bilinear_sample_oracle(const BasicTensor<T>& img, std::size_t oh, std::size_t ow) {
  const std::size_t ih = img.dim(0), iw = img.dim(1);
  BasicTensor<T> out({oh, ow});
  auto px = [&](long y, long x) {
    y = std::clamp<long>(y, 0, static_cast<long>(ih) - 1);
    x = std::clamp<long>(x, 0, static_cast<long>(iw) - 1);
    return static_cast<long double>(img[static_cast<std::size_t>(y) * iw + static_cast<std::size_t>(x)]);
  };
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      long double sy = (y + 0.5L) * ih / oh - 0.5L;
      long double sx = (x + 0.5L) * iw / ow - 0.5L;
      sy = std::clamp<long double>(sy, 0, ih - 1.0L);
      sx = std::clamp<long double>(sx, 0, iw - 1.0L);
      const long y0 = static_cast<long>(std::floor(sy)), x0 = static_cast<long>(std::floor(sx));
      const long double fy = sy - y0, fx = sx - x0;
      const long double v = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                            fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
      out[y * ow + x] = static_cast<T>(v);
    }
  return out;
}

/// Intersection over union of two supports, via explicit index sets.
template <typename T>
double iou_oracle(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  std::set<std::size_t> sa, sb, both, either;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != T(0)) sa.insert(i);
  for (std::size_t i = 0; i < b.size(); ++i)
    if (b[i] != T(0)) sb.insert(i);
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(both, both.end()));
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(either, either.end()));
  return either.empty() ? 1.0 : static_cast<double>(both.size()) / static_cast<double>(either.size());
}

}  // namespace realcustom::oracle
