#pragma once

// Cross-layer cross-scale projector. Deep encoder features query the
// concatenated shallow taps (structure) and the four high-resolution quadrant
// groups (detail); the results are combined into the visual condition f_ci.

#include <span>
#include <string>
#include <vector>

#include "realcustom/backbone.hpp"

namespace realcustom {

/// How the shallow and high-resolution branches join MLP(f_deep).
enum class CombineMode {
  kConcatAdd,     // f_shallow' ∥ (MLP(f_deep) + f_high')          -> 2n
  kConcatConcat,  // f_shallow' ∥ MLP(f_deep) ∥ f_high'            -> 3n
  kAddConcat,     // (MLP(f_deep) + f_shallow') ∥ f_high'          -> 2n
  kAddAdd,        // MLP(f_deep) + f_shallow' + f_high'             -> n
};

inline std::size_t combined_tokens(CombineMode mode, std::size_t n) {
  switch (mode) {
    case CombineMode::kConcatConcat: return 3 * n;
    case CombineMode::kAddAdd: return n;
    default: return 2 * n;
  }
}

inline const char* to_string(CombineMode mode) {
  switch (mode) {
    case CombineMode::kConcatAdd: return "concat-add";
    case CombineMode::kConcatConcat: return "concat-concat";
    case CombineMode::kAddConcat: return "add-concat";
    case CombineMode::kAddAdd: return "add-add";
  }
  return "?";
}

inline CombineMode parse_combine_mode(const std::string& s) {
  for (auto m : {CombineMode::kConcatAdd, CombineMode::kConcatConcat, CombineMode::kAddConcat,
                 CombineMode::kAddAdd})
    if (s == to_string(m)) return m;
  throw UsageError("unknown combine mode '" + s + "'");
}

template <typename T>
struct ProjectorWeights {
  BasicTensor<T> q_shallow, k_shallow, v_shallow;  // [c0 x c0]
  BasicTensor<T> q_high, k_high, v_high;           // [c0 x c0]
  nn::Mlp<T> mlp_shallow, mlp_high, mlp_deep;      // c0 -> c_image

  static ProjectorWeights init(const BackboneConfig& cfg, Rng& rng) {
    const auto c0 = static_cast<std::size_t>(cfg.encoder_dim);
    const auto ci = static_cast<std::size_t>(cfg.condition_dim);
    ProjectorWeights w;
    for (auto* m : {&w.q_shallow, &w.k_shallow, &w.v_shallow, &w.q_high, &w.k_high, &w.v_high})
      *m = nn::init_weight<T>(rng, c0, c0);
    w.mlp_shallow = nn::Mlp<T>::init(rng, c0, 2 * c0, ci);
    w.mlp_high = nn::Mlp<T>::init(rng, c0, 2 * c0, ci);
    w.mlp_deep = nn::Mlp<T>::init(rng, c0, 2 * c0, ci);
    return w;
  }

  static ProjectorWeights zeros_like(const ProjectorWeights& o) {
    return {BasicTensor<T>(o.q_shallow.shape()), BasicTensor<T>(o.k_shallow.shape()),
            BasicTensor<T>(o.v_shallow.shape()), BasicTensor<T>(o.q_high.shape()),
            BasicTensor<T>(o.k_high.shape()),    BasicTensor<T>(o.v_high.shape()),
            nn::Mlp<T>::zeros_like(o.mlp_shallow), nn::Mlp<T>::zeros_like(o.mlp_high),
            nn::Mlp<T>::zeros_like(o.mlp_deep)};
  }

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".q_shallow", q_shallow);
    f(prefix + ".k_shallow", k_shallow);
    f(prefix + ".v_shallow", v_shallow);
    f(prefix + ".q_high", q_high);
    f(prefix + ".k_high", k_high);
    f(prefix + ".v_high", v_high);
    mlp_shallow.for_each(prefix + ".mlp_shallow", f);
    mlp_high.for_each(prefix + ".mlp_high", f);
    mlp_deep.for_each(prefix + ".mlp_deep", f);
  }

  template <typename U>
  ProjectorWeights<U> cast() const {
    return {q_shallow.template cast<U>(), k_shallow.template cast<U>(),
            v_shallow.template cast<U>(), q_high.template cast<U>(),
            k_high.template cast<U>(),    v_high.template cast<U>(),
            mlp_shallow.template cast<U>(), mlp_high.template cast<U>(),
            mlp_deep.template cast<U>()};
  }
};

template <typename T>
struct SubjectFeatures {
  BasicTensor<T> f_deep;            // [n x c0]
  BasicTensor<T> f_shallow_concat;  // [n*L x c0]
  BasicTensor<T> f_high;            // [4n x c0]
  BasicTensor<T> f_shallow_prime;   // [n x c_image]
  BasicTensor<T> f_high_prime;      // [n x c_image]
  BasicTensor<T> f_ci;              // [combined_tokens x c_image]
};

/// Saved activations of one single-head attention + MLP branch.
template <typename T>
struct AttendCache {
  BasicTensor<T> query_src, kv_src, q, k, v;
  std::vector<BasicTensor<T>> probs;
  typename nn::Mlp<T>::Cache mlp;
};

template <typename T>
struct ProjectorCache {
  AttendCache<T> shallow, high;
  typename nn::Mlp<T>::Cache deep;
  CombineMode mode = CombineMode::kConcatAdd;
  std::size_t n = 0;
};

namespace detail {

template <typename T>
BasicTensor<T> attend_branch(const BasicTensor<T>& query_src, const BasicTensor<T>& kv_src,
                             const BasicTensor<T>& wq, const BasicTensor<T>& wk,
                             const BasicTensor<T>& wv, const nn::Mlp<T>& mlp,
                             AttendCache<T>* cache) {
  auto q = matmul(query_src, wq), k = matmul(kv_src, wk), v = matmul(kv_src, wv);
  std::vector<BasicTensor<T>> probs;
  const auto a = nn::multihead_attention(q, k, v, 1, &probs);
  typename nn::Mlp<T>::Cache mc;
  auto out = mlp.forward(a, cache ? &mc : nullptr);
  if (cache) *cache = {query_src, kv_src, std::move(q), std::move(k), std::move(v),
                       std::move(probs), std::move(mc)};
  return out;
}

template <typename T>
void attend_branch_backward(const AttendCache<T>& c, const BasicTensor<T>& dout,
                            const nn::Mlp<T>& mlp, BasicTensor<T>& gq,
                            BasicTensor<T>& gk, BasicTensor<T>& gv, nn::Mlp<T>& gmlp) {
  const auto da = mlp.backward(c.mlp, dout, &gmlp);
  const auto ag = nn::multihead_attention_backward(c.q, c.k, c.v, c.probs, da);
  add_inplace(gq, matmul_tn(c.query_src, ag.dq));
  add_inplace(gk, matmul_tn(c.kv_src, ag.dk));
  add_inplace(gv, matmul_tn(c.kv_src, ag.dv));
}

}  // namespace detail

/// Deep features query the token-wise concatenation of the shallow taps.
template <typename T>
BasicTensor<T> cross_layer_attend(const ProjectorWeights<T>& w, const BasicTensor<T>& f_deep,
                                  std::span<const BasicTensor<T>> f_shallow,
                                  AttendCache<T>* cache = nullptr) {
  require_rank2(f_deep, "cross_layer_attend");
  if (f_shallow.empty()) throw ShapeError("cross_layer_attend: no shallow features");
  for (const auto& s : f_shallow) {
    if (s.rank() != 2 || s.dim(0) != f_deep.dim(0) || s.dim(1) != f_deep.dim(1)) {
      throw ShapeError("cross_layer_attend: shallow level " + shape_string(s.shape()) +
                       " does not match f_deep " + shape_string(f_deep.shape()));
    }
  }
  const auto kv = concat_rows(std::vector<BasicTensor<T>>(f_shallow.begin(), f_shallow.end()));
  return detail::attend_branch(f_deep, kv, w.q_shallow, w.k_shallow, w.v_shallow, w.mlp_shallow,
                               cache);
}

/// Deep features query the 4n high-resolution quadrant tokens.
template <typename T>
BasicTensor<T> cross_scale_attend(const ProjectorWeights<T>& w, const BasicTensor<T>& f_deep,
                                  const BasicTensor<T>& f_high,
                                  AttendCache<T>* cache = nullptr) {
  require_rank2(f_deep, "cross_scale_attend");
  if (f_high.rank() != 2 || f_high.dim(0) != 4 * f_deep.dim(0) ||
      f_high.dim(1) != f_deep.dim(1)) {
    throw ShapeError("cross_scale_attend: f_high " + shape_string(f_high.shape()) +
                     " must have 4x the " + std::to_string(f_deep.dim(0)) + " deep tokens");
  }
  return detail::attend_branch(f_deep, f_high, w.q_high, w.k_high, w.v_high, w.mlp_high, cache);
}

template <typename T>
BasicTensor<T> combine_features(const ProjectorWeights<T>& w,
                                const BasicTensor<T>& f_shallow_prime,
                                const BasicTensor<T>& f_deep,
                                const BasicTensor<T>& f_high_prime,
                                CombineMode mode = CombineMode::kConcatAdd,
                                typename nn::Mlp<T>::Cache* deep_cache = nullptr) {
  if (f_shallow_prime.shape() != f_high_prime.shape() || f_shallow_prime.rank() != 2 ||
      f_shallow_prime.dim(0) != f_deep.dim(0)) {
    throw ShapeError("combine_features: f_shallow' " + shape_string(f_shallow_prime.shape()) +
                     ", f_high' " + shape_string(f_high_prime.shape()) + ", f_deep " +
                     shape_string(f_deep.shape()));
  }
  const auto deep = w.mlp_deep.forward(f_deep, deep_cache);
  switch (mode) {
    case CombineMode::kConcatAdd:
      return concat_rows<T>({f_shallow_prime, add(deep, f_high_prime)});
    case CombineMode::kConcatConcat:
      return concat_rows<T>({f_shallow_prime, deep, f_high_prime});
    case CombineMode::kAddConcat:
      return concat_rows<T>({add(deep, f_shallow_prime), f_high_prime});
    case CombineMode::kAddAdd:
      return add(add(deep, f_shallow_prime), f_high_prime);
  }
  throw UsageError("combine_features: bad mode");
}

/// Frozen encoder outputs for one reference image.
template <typename T>
struct EncodedReference {
  ImageLayers<T> layers;
  BasicTensor<T> f_high;
};

template <typename T>
EncodedReference<T> encode_reference(const BackboneConfig& cfg, const ImageEncoderWeights<T>& enc,
                                     const BasicTensor<T>& img) {
  const auto s2 = static_cast<std::size_t>(2 * cfg.image_size);
  return {encode_image_layers(cfg, enc, img),
          encode_image_highres(cfg, enc, resize_image(img, s2, s2, ResizeMode::kBilinear))};
}

template <typename T>
SubjectFeatures<T> project_encoded(const ProjectorWeights<T>& w, const EncodedReference<T>& ref,
                                   CombineMode mode = CombineMode::kConcatAdd,
                                   ProjectorCache<T>* cache = nullptr) {
  SubjectFeatures<T> f;
  f.f_deep = ref.layers.deep;
  f.f_shallow_concat = concat_rows(ref.layers.shallow);
  f.f_high = ref.f_high;
  f.f_shallow_prime = cross_layer_attend<T>(w, f.f_deep, ref.layers.shallow,
                                            cache ? &cache->shallow : nullptr);
  f.f_high_prime = cross_scale_attend(w, f.f_deep, f.f_high, cache ? &cache->high : nullptr);
  f.f_ci = combine_features(w, f.f_shallow_prime, f.f_deep, f.f_high_prime, mode,
                            cache ? &cache->deep : nullptr);
  if (cache) {
    cache->mode = mode;
    cache->n = f.f_deep.dim(0);
  }
  ensure_finite(f.f_ci, "f_ci");
  return f;
}

/// Full projector path for a native-resolution reference image; the 2x
/// stream is a bilinear upscale of it.
template <typename T>
SubjectFeatures<T> project_subject(const BackboneConfig& cfg, const ImageEncoderWeights<T>& enc,
                                   const ProjectorWeights<T>& w, const BasicTensor<T>& img,
                                   CombineMode mode = CombineMode::kConcatAdd) {
  return project_encoded(w, encode_reference(cfg, enc, img), mode);
}

/// Accumulates projector weight gradients for dL/df_ci.
template <typename T>
void projector_backward(const ProjectorWeights<T>& w, const ProjectorCache<T>& cache,
                        const BasicTensor<T>& dfci, ProjectorWeights<T>& grad) {
  const std::size_t n = cache.n;
  BasicTensor<T> d_shallow, d_deep, d_high;
  switch (cache.mode) {
    case CombineMode::kConcatAdd:
      d_shallow = slice_rows(dfci, 0, n);
      d_deep = slice_rows(dfci, n, n);
      d_high = d_deep;
      break;
    case CombineMode::kConcatConcat:
      d_shallow = slice_rows(dfci, 0, n);
      d_deep = slice_rows(dfci, n, n);
      d_high = slice_rows(dfci, 2 * n, n);
      break;
    case CombineMode::kAddConcat:
      d_deep = slice_rows(dfci, 0, n);
      d_shallow = d_deep;
      d_high = slice_rows(dfci, n, n);
      break;
    case CombineMode::kAddAdd:
      d_deep = dfci;
      d_shallow = dfci;
      d_high = dfci;
      break;
  }
  w.mlp_deep.backward(cache.deep, d_deep, &grad.mlp_deep);
  detail::attend_branch_backward(cache.shallow, d_shallow, w.mlp_shallow, grad.q_shallow,
                                 grad.k_shallow, grad.v_shallow, grad.mlp_shallow);
  detail::attend_branch_backward(cache.high, d_high, w.mlp_high,
                                 grad.q_high, grad.k_high, grad.v_high, grad.mlp_high);
}

}  // namespace realcustom
