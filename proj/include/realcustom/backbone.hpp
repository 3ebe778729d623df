#pragma once

// Miniature stand-ins for the pretrained pieces: a word-level text encoder, a
// patch-attention image encoder with shallow taps, a fixed factor-2
// autoencoder, and a three-level attention UNet denoiser whose attention maps
// can be recorded. The denoiser carries the extra visual cross-attention
// (W_Ki, W_Vi per block) and an optional per-position guidance mask.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "realcustom/config.hpp"
#include "realcustom/mask_resize.hpp"
#include "realcustom/nn.hpp"
#include "realcustom/rng.hpp"
#include "realcustom/tensor.hpp"
#include "realcustom/vocabulary.hpp"

namespace realcustom {

/// word -> token positions (a word may occur more than once)
using TokenIndex = std::map<std::string, std::vector<std::size_t>>;

template <typename T>
struct TextEncoding {
  BasicTensor<T> features;  // f_ct, [n_text x text_dim]
  TokenIndex index;
  std::vector<std::string> words;
};

// ---------------------------------------------------------------------------
// Pre-norm transformer layer used by both encoders.

template <typename T>
struct EncoderLayer {
  BasicTensor<T> wq, wk, wv, wo;
  nn::Mlp<T> mlp;

  static EncoderLayer init(Rng& rng, std::size_t dim) {
    EncoderLayer l;
    l.wq = nn::init_weight<T>(rng, dim, dim);
    l.wk = nn::init_weight<T>(rng, dim, dim);
    l.wv = nn::init_weight<T>(rng, dim, dim);
    l.wo = nn::init_weight<T>(rng, dim, dim, 0.5);
    l.mlp = nn::Mlp<T>::init(rng, dim, 2 * dim, dim);
    return l;
  }

  BasicTensor<T> forward(const BasicTensor<T>& x, std::size_t heads) const {
    const auto h = nn::layer_norm(x);
    auto a = nn::multihead_attention(matmul(h, wq), matmul(h, wk), matmul(h, wv), heads);
    auto x1 = add(x, matmul(a, wo));
    return add(x1, mlp.forward(nn::layer_norm(x1)));
  }

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".wq", wq);
    f(prefix + ".wk", wk);
    f(prefix + ".wv", wv);
    f(prefix + ".wo", wo);
    mlp.for_each(prefix + ".mlp", f);
  }

  template <typename U>
  EncoderLayer<U> cast() const {
    return {wq.template cast<U>(), wk.template cast<U>(), wv.template cast<U>(),
            wo.template cast<U>(), mlp.template cast<U>()};
  }
};

// ---------------------------------------------------------------------------
// Text encoder: embedding lookup + one self-attention layer, no positions.

template <typename T>
struct TextEncoderWeights {
  BasicTensor<T> embedding;  // [vocabulary x text_dim]
  EncoderLayer<T> layer;

  static TextEncoderWeights init(const BackboneConfig& cfg, Rng& rng) {
    const auto d = static_cast<std::size_t>(cfg.text_dim);
    return {rng.normal_tensor<T>({kVocabularySize, d}), EncoderLayer<T>::init(rng, d)};
  }

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".embedding", embedding);
    layer.for_each(prefix + ".layer", f);
  }

  template <typename U>
  TextEncoderWeights<U> cast() const {
    return {embedding.template cast<U>(), layer.template cast<U>()};
  }
};

namespace detail {

template <typename T>
TextEncoding<T> encode_token_ids(const BackboneConfig& cfg, const TextEncoderWeights<T>& w,
                                 const std::vector<std::size_t>& ids,
                                 std::vector<std::string> words) {
  const auto d = static_cast<std::size_t>(cfg.text_dim);
  BasicTensor<T> x({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto src = w.embedding.row(ids[i]);
    std::copy(src.begin(), src.end(), x.row(i).begin());
  }
  TextEncoding<T> out;
  out.features = nn::layer_norm(w.layer.forward(x, static_cast<std::size_t>(cfg.heads)));
  for (std::size_t i = 0; i < words.size(); ++i) out.index[words[i]].push_back(i);
  out.words = std::move(words);
  return out;
}

}  // namespace detail

/// Encodes a whitespace-separated prompt, one token per word. Unknown words
/// map to the reserved `<unk>` embedding but keep their own index entry.
template <typename T>
TextEncoding<T> encode_text(const BackboneConfig& cfg, const TextEncoderWeights<T>& w,
                            std::string_view prompt) {
  auto words = tokenize(prompt);
  if (words.empty()) throw SemanticError("encode_text: empty prompt");
  std::vector<std::size_t> ids;
  for (const auto& word : words) ids.push_back(vocabulary_id(word));
  return detail::encode_token_ids(cfg, w, ids, std::move(words));
}

/// Conditioning for the unconditional (empty prompt) pass: one `<empty>` token.
template <typename T>
TextEncoding<T> encode_unconditional(const BackboneConfig& cfg, const TextEncoderWeights<T>& w) {
  return detail::encode_token_ids(cfg, w, {kEmptyToken}, {});
}

// ---------------------------------------------------------------------------
// Image encoder

template <typename T>
struct ImageEncoderWeights {
  BasicTensor<T> patch_weight;  // [3*p*p x encoder_dim]
  BasicTensor<T> patch_bias;    // [encoder_dim]
  std::vector<EncoderLayer<T>> layers;

  static ImageEncoderWeights init(const BackboneConfig& cfg, Rng& rng) {
    const auto p = static_cast<std::size_t>(cfg.patch_size());
    const auto d = static_cast<std::size_t>(cfg.encoder_dim);
    ImageEncoderWeights w;
    w.patch_weight = nn::init_weight<T>(rng, 3 * p * p, d);
    w.patch_bias = rng.normal_tensor<T>({d}, 0.1);
    for (int l = 0; l < cfg.encoder_depth; ++l) w.layers.push_back(EncoderLayer<T>::init(rng, d));
    return w;
  }

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".patch_weight", patch_weight);
    f(prefix + ".patch_bias", patch_bias);
    for (std::size_t l = 0; l < layers.size(); ++l)
      layers[l].for_each(prefix + ".layer" + std::to_string(l), f);
  }

  template <typename U>
  ImageEncoderWeights<U> cast() const {
    ImageEncoderWeights<U> w{patch_weight.template cast<U>(), patch_bias.template cast<U>(), {}};
    for (const auto& l : layers) w.layers.push_back(l.template cast<U>());
    return w;
  }
};

template <typename T>
struct ImageLayers {
  BasicTensor<T> deep;                  // f_deep, [n_image x c_0]
  std::vector<BasicTensor<T>> shallow;  // f_shallow^l, shallow-to-deep
};

/// Linear patch embedding (no positional term). Patches are taken in
/// row-major grid order; each patch vector is channel-major.
template <typename T>
BasicTensor<T> patch_embed(const BackboneConfig& cfg, const ImageEncoderWeights<T>& w,
                           const BasicTensor<T>& img) {
  const auto p = static_cast<std::size_t>(cfg.patch_size());
  if (img.rank() != 3 || img.dim(0) != 3) {
    throw ShapeError("image encoder expects [3 x H x W], got " + shape_string(img.shape()));
  }
  if (img.dim(1) % p != 0 || img.dim(2) % p != 0) {
    throw ShapeError("image " + shape_string(img.shape()) + " is not divisible by patch size " +
                     std::to_string(p));
  }
  const auto s = static_cast<std::size_t>(cfg.image_size);
  if (img.dim(1) != s || img.dim(2) != s) {
    throw ShapeError("image encoder native resolution is " + std::to_string(s) + ", got " +
                     shape_string(img.shape()));
  }
  const std::size_t g = s / p;
  BasicTensor<T> patches({g * g, 3 * p * p});
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx) {
      auto dst = patches.row(gy * g + gx);
      std::size_t k = 0;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) dst[k++] = img.at(c, gy * p + y, gx * p + x);
    }
  return nn::add_bias(matmul(patches, w.patch_weight), w.patch_bias);
}

template <typename T>
ImageLayers<T> encode_image_layers(const BackboneConfig& cfg, const ImageEncoderWeights<T>& w,
                                   const BasicTensor<T>& img) {
  auto x = patch_embed(cfg, w, img);
  const auto taps = cfg.shallow_taps();
  const auto heads = static_cast<std::size_t>(cfg.heads);
  ImageLayers<T> out;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    x = w.layers[l].forward(x, heads);
    if (std::find(taps.begin(), taps.end(), static_cast<int>(l + 1)) != taps.end())
      out.shallow.push_back(nn::layer_norm(x));
  }
  out.deep = nn::layer_norm(x);
  return out;
}

/// Crops channel planes [y0, y0+h) x [x0, x0+w) of a [C x H x W] image.
template <typename T>
BasicTensor<T> crop_image(const BasicTensor<T>& img, std::size_t y0, std::size_t x0,
                          std::size_t h, std::size_t w) {
  if (y0 + h > img.dim(1) || x0 + w > img.dim(2)) {
    throw ShapeError("crop outside image " + shape_string(img.shape()));
  }
  BasicTensor<T> out({img.dim(0), h, w});
  for (std::size_t c = 0; c < img.dim(0); ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
  return out;
}

/// Per-channel resize of a [C x H x W] image.
template <typename T>
BasicTensor<T> resize_image(const BasicTensor<T>& img, std::size_t h, std::size_t w,
                            ResizeMode mode) {
  BasicTensor<T> out({img.dim(0), h, w});
  const std::size_t plane = img.dim(1) * img.dim(2);
  for (std::size_t c = 0; c < img.dim(0); ++c) {
    std::vector<T> src(img.data().begin() + c * plane, img.data().begin() + (c + 1) * plane);
    const auto r = resize_2d(BasicTensor<T>({img.dim(1), img.dim(2)}, std::move(src)), h, w, mode);
    std::copy(r.data().begin(), r.data().end(), out.data().begin() + c * h * w);
  }
  return out;
}

/// Four native-resolution quadrants (TL, TR, BL, BR), each through the deep
/// path, concatenated token-wise: [4 n_image x c_0].
template <typename T>
BasicTensor<T> encode_image_highres(const BackboneConfig& cfg, const ImageEncoderWeights<T>& w,
                                    const BasicTensor<T>& img) {
  const auto s = static_cast<std::size_t>(cfg.image_size);
  if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != 2 * s || img.dim(2) != 2 * s) {
    throw ShapeError("high-resolution stream expects [3 x " + std::to_string(2 * s) + " x " +
                     std::to_string(2 * s) + "], got " + shape_string(img.shape()));
  }
  std::vector<BasicTensor<T>> groups;
  for (std::size_t qy = 0; qy < 2; ++qy)
    for (std::size_t qx = 0; qx < 2; ++qx)
      groups.push_back(encode_image_layers(cfg, w, crop_image(img, qy * s, qx * s, s, s)).deep);
  return concat_rows(groups);
}

// ---------------------------------------------------------------------------
// Fixed autoencoder (factor 2). Encoder: 2x2 mean pool, then lift channel k
// to ±pooled[k mod 3] (sign flips every three channels). Decoder: nearest
// upsample and read back channels 0..2, an exact left inverse of the lift.

template <typename T>
BasicTensor<T> toy_autoencode(const BasicTensor<T>& img, std::size_t channels) {
  if (img.rank() != 3 || img.dim(0) != 3) {
    throw ShapeError("autoencoder expects [3 x H x W], got " + shape_string(img.shape()));
  }
  if (img.dim(1) % 2 || img.dim(2) % 2) {
    throw ShapeError("autoencoder needs even extents, got " + shape_string(img.shape()));
  }
  const std::size_t h = img.dim(1) / 2, w = img.dim(2) / 2;
  BasicTensor<T> pooled({3, h, w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double s = static_cast<double>(img.at(c, 2 * y, 2 * x)) + img.at(c, 2 * y, 2 * x + 1) +
                         img.at(c, 2 * y + 1, 2 * x) + img.at(c, 2 * y + 1, 2 * x + 1);
        pooled.at(c, y, x) = static_cast<T>(s * 0.25);
      }
  BasicTensor<T> z({channels, h, w});
  for (std::size_t k = 0; k < channels; ++k) {
    const T sign = (k / 3) % 2 == 0 ? T(1) : T(-1);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) z.at(k, y, x) = sign * pooled.at(k % 3, y, x);
  }
  return z;
}

template <typename T>
BasicTensor<T> toy_decode(const BasicTensor<T>& z) {
  if (z.rank() != 3 || z.dim(0) < 3) {
    throw ShapeError("decoder expects [c>=3 x h x w], got " + shape_string(z.shape()));
  }
  const std::size_t h = z.dim(1), w = z.dim(2);
  BasicTensor<T> img({3, 2 * h, 2 * w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t x = 0; x < 2 * w; ++x) img.at(c, y, x) = z.at(c, y / 2, x / 2);
  return img;
}

// ---------------------------------------------------------------------------
// Denoiser

template <typename T>
struct DenoiserBlockWeights {
  BasicTensor<T> self_q, self_k, self_v, self_o;
  BasicTensor<T> cross_q, cross_k, cross_v, cross_o;
  nn::Mlp<T> mlp;

  static DenoiserBlockWeights init(const BackboneConfig& cfg, Rng& rng) {
    const auto d = static_cast<std::size_t>(cfg.model_dim);
    const auto dt = static_cast<std::size_t>(cfg.text_dim);
    DenoiserBlockWeights b;
    b.self_q = nn::init_weight<T>(rng, d, d);
    b.self_k = nn::init_weight<T>(rng, d, d);
    b.self_v = nn::init_weight<T>(rng, d, d);
    b.self_o = nn::init_weight<T>(rng, d, d, 0.5);
    b.cross_q = nn::init_weight<T>(rng, d, d);
    b.cross_k = nn::init_weight<T>(rng, dt, d);
    b.cross_v = nn::init_weight<T>(rng, dt, d);
    b.cross_o = nn::init_weight<T>(rng, d, d, 0.5);
    b.mlp = nn::Mlp<T>::init(rng, d, 2 * d, d);
    return b;
  }

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".self_q", self_q);
    f(prefix + ".self_k", self_k);
    f(prefix + ".self_v", self_v);
    f(prefix + ".self_o", self_o);
    f(prefix + ".cross_q", cross_q);
    f(prefix + ".cross_k", cross_k);
    f(prefix + ".cross_v", cross_v);
    f(prefix + ".cross_o", cross_o);
    mlp.for_each(prefix + ".mlp", f);
  }

  template <typename U>
  DenoiserBlockWeights<U> cast() const {
    return {self_q.template cast<U>(),  self_k.template cast<U>(),  self_v.template cast<U>(),
            self_o.template cast<U>(),  cross_q.template cast<U>(), cross_k.template cast<U>(),
            cross_v.template cast<U>(), cross_o.template cast<U>(), mlp.template cast<U>()};
  }
};

/// Fixed 2-D sinusoidal position table for an r x r grid, [r*r x dim].
template <typename T>
BasicTensor<T> grid_position_table(std::size_t r, std::size_t dim) {
  BasicTensor<T> pe({r * r, dim});
  const std::size_t half = dim / 2;
  for (std::size_t y = 0; y < r; ++y)
    for (std::size_t x = 0; x < r; ++x) {
      auto row = pe.row(y * r + x);
      for (std::size_t k = 0; k < dim; ++k) {
        const bool use_y = k < half;
        const std::size_t kk = use_y ? k : k - half;
        const double freq = std::pow(100.0, -static_cast<double>(kk / 2 * 2) /
                                                static_cast<double>(std::max<std::size_t>(half, 1)));
        const double pos = static_cast<double>(use_y ? y : x);
        row[k] = static_cast<T>(kk % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq));
      }
    }
  return pe;
}

template <typename T>
struct DenoiserWeights {
  BasicTensor<T> in_proj;     // [c x d]
  BasicTensor<T> pos_embed;   // [R*R x d], fixed sinusoid
  BasicTensor<T> time_embed;  // [(T+1) x d]
  BasicTensor<T> out_proj;    // [d x c]
  std::vector<DenoiserBlockWeights<T>> blocks;

  static DenoiserWeights init(const BackboneConfig& cfg, Rng& rng) {
    const auto c = static_cast<std::size_t>(cfg.latent_channels);
    const auto d = static_cast<std::size_t>(cfg.model_dim);
    const auto r = static_cast<std::size_t>(cfg.latent_size);
    DenoiserWeights w;
    w.in_proj = nn::init_weight<T>(rng, c, d);
    w.pos_embed = grid_position_table<T>(r, d);
    w.time_embed = rng.normal_tensor<T>({static_cast<std::size_t>(cfg.timesteps) + 1, d}, 0.5);
    w.out_proj = nn::init_weight<T>(rng, d, c);
    for (std::size_t b = 0; b < cfg.block_resolutions.size(); ++b)
      w.blocks.push_back(DenoiserBlockWeights<T>::init(cfg, rng));
    return w;
  }

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".in_proj", in_proj);
    f(prefix + ".pos_embed", pos_embed);
    f(prefix + ".time_embed", time_embed);
    f(prefix + ".out_proj", out_proj);
    for (std::size_t b = 0; b < blocks.size(); ++b)
      blocks[b].for_each(prefix + ".block" + std::to_string(b), f);
  }

  template <typename U>
  DenoiserWeights<U> cast() const {
    DenoiserWeights<U> w{in_proj.template cast<U>(), pos_embed.template cast<U>(),
                         time_embed.template cast<U>(), out_proj.template cast<U>(), {}};
    for (const auto& b : blocks) w.blocks.push_back(b.template cast<U>());
    return w;
  }
};

/// Trainable visual key/value projections of one block, [c_image x d].
template <typename T>
struct VisualProjection {
  BasicTensor<T> key;    // W_Ki
  BasicTensor<T> value;  // W_Vi

  static VisualProjection init(const BackboneConfig& cfg, Rng& rng) {
    const auto ci = static_cast<std::size_t>(cfg.condition_dim);
    const auto d = static_cast<std::size_t>(cfg.model_dim);
    return {nn::init_weight<T>(rng, ci, d), nn::init_weight<T>(rng, ci, d)};
  }

  template <typename U>
  VisualProjection<U> cast() const {
    return {key.template cast<U>(), value.template cast<U>()};
  }
};

/// One subject's visual condition for a denoiser call. `mask` is the
/// normalized guidance mask on the G x G grid; absent means unmasked.
template <typename T>
struct VisualCondition {
  BasicTensor<T> features;  // f_ci
  std::optional<BasicTensor<T>> mask;
};

template <typename T>
struct BlockAttention {
  std::size_t resolution = 0;
  std::vector<BasicTensor<T>> self_maps;                 // per head, [r² x r²]
  std::vector<BasicTensor<T>> cross_maps;                // per head, [r² x n_text]
  std::vector<std::vector<BasicTensor<T>>> visual_maps;  // per subject, per head
};

/// Every attention map of one denoiser forward, in block order.
template <typename T>
struct AttentionRecord {
  std::vector<BlockAttention<T>> blocks;
  TokenIndex tokens;

  std::size_t visual_map_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks)
      for (const auto& s : b.visual_maps) n += s.size();
    return n;
  }
};

/// Activations saved by a forward pass for the backward pass.
template <typename T>
struct DenoiserCache {
  struct Transition {
    std::size_t from = 0, to = 0;
    int skip = -1;  // block whose output is added after upsampling
  };
  struct Block {
    std::size_t res = 0;
    Transition in;
    BasicTensor<T> x_in, q, k, v, attn, x1, q2, text_k, text_v, x2;
    std::vector<BasicTensor<T>> self_probs, text_probs;
    std::vector<BasicTensor<T>> vis_k, vis_v;
    std::vector<std::vector<BasicTensor<T>>> vis_probs;
    std::vector<BasicTensor<T>> vis_weights;  // per subject, [r²]
    typename nn::Mlp<T>::Cache mlp;
  };
  std::vector<Block> blocks;
  Transition out;
  BasicTensor<T> x_out;  // input of the final layer norm
  std::vector<const BasicTensor<T>*> features;
};

/// Gradients of the trainable visual path produced by a backward pass.
template <typename T>
struct DenoiserGrads {
  std::vector<VisualProjection<T>> projection;  // per block
  std::vector<BasicTensor<T>> features;         // d f_ci per subject
};

template <typename T>
class Denoiser {
 public:
  Denoiser(const BackboneConfig& cfg, const DenoiserWeights<T>& weights,
           const std::vector<VisualProjection<T>>& visual)
      : cfg_(cfg), w_(weights), visual_(visual) {}

  /// ε prediction for z_t [c x R x R] at step t. Each block applies
  /// self-attention, textual cross-attention plus the (masked) visual
  /// cross-attention of every subject, then an MLP.
  BasicTensor<T> forward(const BasicTensor<T>& z, int t, const BasicTensor<T>& text,
                         std::span<const VisualCondition<T>> visual,
                         AttentionRecord<T>* record = nullptr,
                         DenoiserCache<T>* cache = nullptr) const {
    const auto c = static_cast<std::size_t>(cfg_.latent_channels);
    const auto big = static_cast<std::size_t>(cfg_.latent_size);
    if (z.rank() != 3 || z.dim(0) != c || z.dim(1) != big || z.dim(2) != big) {
      throw ShapeError("denoiser expects latent [" + std::to_string(c) + "x" +
                       std::to_string(big) + "x" + std::to_string(big) + "], got " +
                       shape_string(z.shape()));
    }
    if (t < 0 || t > cfg_.timesteps) {
      throw SemanticError("denoiser: step " + std::to_string(t) + " outside schedule");
    }
    if (text.rank() != 2 || text.dim(1) != static_cast<std::size_t>(cfg_.text_dim)) {
      throw ShapeError("text features " + shape_string(text.shape()) + " do not match text_dim");
    }
    if (!visual.empty() && visual_.size() != w_.blocks.size()) {
      throw ShapeError("denoiser: visual projections missing for some blocks");
    }
    for (const auto& v : visual) {
      if (v.features.rank() != 2 || v.features.dim(1) != visual_.front().key.dim(0)) {
        throw ShapeError("visual condition " + shape_string(v.features.shape()) +
                         " does not match W_Ki " + shape_string(visual_.front().key.shape()));
      }
      if (v.mask && (v.mask->rank() != 2 || v.mask->dim(0) != big || v.mask->dim(1) != big)) {
        throw ShapeError("guidance mask must be " + std::to_string(big) + "x" +
                         std::to_string(big) + ", got " + shape_string(v.mask->shape()));
      }
    }

    if (record) record->blocks.clear();
    if (cache) {
      cache->blocks.clear();
      cache->features.clear();
      for (const auto& v : visual) cache->features.push_back(&v.features);
    }

    auto x = matmul(transpose(z.reshaped({c, big * big})), w_.in_proj);
    add_inplace(x, w_.pos_embed);
    const auto trow = w_.time_embed.row(static_cast<std::size_t>(t));
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      auto r = x.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] += trow[j];
    }

    std::vector<BasicTensor<T>> outputs(w_.blocks.size());
    std::map<std::size_t, int> last_at;
    std::size_t cur = big;
    for (std::size_t b = 0; b < w_.blocks.size(); ++b) {
      const auto r = static_cast<std::size_t>(cfg_.block_resolutions[b]);
      typename DenoiserCache<T>::Transition tr;
      x = transition(x, cur, r, outputs, last_at, tr);
      typename DenoiserCache<T>::Block* bc = nullptr;
      if (cache) {
        cache->blocks.emplace_back();
        bc = &cache->blocks.back();
        bc->in = tr;
      }
      x = block_forward(b, x, r, text, visual, record, bc);
      outputs[b] = x;
      last_at[r] = static_cast<int>(b);
      cur = r;
    }
    typename DenoiserCache<T>::Transition tr;
    x = transition(x, cur, big, outputs, last_at, tr);
    if (cache) {
      cache->out = tr;
      cache->x_out = x;
    }

    // A final layer norm keeps ε bounded whatever the scale of z_t.
    auto eps = transpose(matmul(nn::layer_norm(x), w_.out_proj)).reshaped({c, big, big});
    ensure_finite(eps, "denoiser output");
    return eps;
  }

  /// Backpropagates dL/dε through a cached forward. Only the visual
  /// projections and the visual features receive gradients; frozen weights
  /// are read, never written.
  DenoiserGrads<T> backward(const DenoiserCache<T>& cache, const BasicTensor<T>& deps) const {
    const auto c = static_cast<std::size_t>(cfg_.latent_channels);
    const auto big = static_cast<std::size_t>(cfg_.latent_size);
    const std::size_t nb = cache.blocks.size();

    DenoiserGrads<T> g;
    for (const auto& p : visual_)
      g.projection.push_back({BasicTensor<T>(p.key.shape()), BasicTensor<T>(p.value.shape())});
    for (const auto* f : cache.features) g.features.emplace_back(f->shape());

    std::vector<std::optional<BasicTensor<T>>> dout(nb);
    auto accumulate = [&](int b, BasicTensor<T> d) {
      auto& slot = dout[static_cast<std::size_t>(b)];
      if (slot) add_inplace(*slot, d);
      else slot = std::move(d);
    };

    // ε = (LN(x) · out_proj)ᵀ
    const auto deps_tokens = transpose(deps.reshaped({c, big * big}));
    auto dx = nn::layer_norm_backward(cache.x_out, matmul_nt(deps_tokens, w_.out_proj));
    transition_backward(cache.out, dx, static_cast<int>(nb) - 1, accumulate);

    for (std::size_t bi = nb; bi-- > 0;) {
      if (!dout[bi]) continue;
      const bool need_input = bi > 0;
      auto dx_in = block_backward(bi, cache.blocks[bi], *dout[bi], cache, g, need_input);
      if (need_input) transition_backward(cache.blocks[bi].in, dx_in, static_cast<int>(bi) - 1, accumulate);
    }
    return g;
  }

 private:
  BasicTensor<T> transition(const BasicTensor<T>& x, std::size_t from, std::size_t to,
                            const std::vector<BasicTensor<T>>& outputs,
                            const std::map<std::size_t, int>& last_at,
                            typename DenoiserCache<T>::Transition& tr) const {
    tr.from = from;
    tr.to = to;
    tr.skip = -1;
    if (to == from) return x;
    if (to < from) return nn::avg_pool_tokens(x, from, from / to);
    auto up = nn::upsample_tokens(x, from, to / from);
    if (auto it = last_at.find(to); it != last_at.end()) {
      add_inplace(up, outputs[static_cast<std::size_t>(it->second)]);
      tr.skip = it->second;
    }
    return up;
  }

  template <typename Acc>
  void transition_backward(const typename DenoiserCache<T>::Transition& tr,
                           const BasicTensor<T>& d, int prev, Acc&& accumulate) const {
    if (tr.skip >= 0) accumulate(tr.skip, d);
    if (prev < 0) return;
    if (tr.to == tr.from) accumulate(prev, d);
    else if (tr.to < tr.from) accumulate(prev, nn::avg_pool_tokens_backward(d, tr.from, tr.from / tr.to));
    else accumulate(prev, nn::upsample_tokens_backward(d, tr.from, tr.to / tr.from));
  }

  BasicTensor<T> block_forward(std::size_t b, const BasicTensor<T>& x, std::size_t r,
                               const BasicTensor<T>& text,
                               std::span<const VisualCondition<T>> visual,
                               AttentionRecord<T>* record,
                               typename DenoiserCache<T>::Block* bc) const {
    const auto& w = w_.blocks[b];
    const auto heads = static_cast<std::size_t>(cfg_.heads);

    std::vector<BasicTensor<T>> self_probs;
    const auto h1 = nn::layer_norm(x);
    auto q = matmul(h1, w.self_q), k = matmul(h1, w.self_k), v = matmul(h1, w.self_v);
    auto attn = nn::multihead_attention(q, k, v, heads, &self_probs);
    auto x1 = add(x, matmul(attn, w.self_o));

    const auto h2 = nn::layer_norm(x1);
    auto q2 = matmul(h2, w.cross_q);
    auto tk = matmul(text, w.cross_k), tv = matmul(text, w.cross_v);
    std::vector<BasicTensor<T>> text_probs;
    auto mixed = nn::multihead_attention(q2, tk, tv, heads, &text_probs);

    std::vector<BasicTensor<T>> vis_k, vis_v, vis_weights;
    std::vector<std::vector<BasicTensor<T>>> vis_probs;
    for (const auto& cond : visual) {
      auto ki = matmul(cond.features, visual_[b].key);
      auto vi = matmul(cond.features, visual_[b].value);
      std::vector<BasicTensor<T>> probs;
      const auto oi = nn::multihead_attention(q2, ki, vi, heads, &probs);
      auto weights = cond.mask ? resize_mask_to_block(*cond.mask, r)
                               : BasicTensor<T>::ones({r * r});
      // Rows with zero weight are skipped so a zero mask leaves the
      // text-only result bit-identical.
      for (std::size_t i = 0; i < oi.dim(0); ++i) {
        const T wi = weights[i];
        if (wi == T(0)) continue;
        auto dst = mixed.row(i);
        const auto src = oi.row(i);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = dst[j] + wi * src[j];
      }
      if (bc) {
        vis_k.push_back(std::move(ki));
        vis_v.push_back(std::move(vi));
        vis_weights.push_back(std::move(weights));
      }
      vis_probs.push_back(std::move(probs));
    }
    auto x2 = add(x1, matmul(mixed, w.cross_o));

    typename nn::Mlp<T>::Cache mc;
    auto out = add(x2, w.mlp.forward(nn::layer_norm(x2), bc ? &mc : nullptr));

    if (record) {
      BlockAttention<T> ba;
      ba.resolution = r;
      ba.self_maps = self_probs;
      ba.cross_maps = text_probs;
      ba.visual_maps = vis_probs;
      record->blocks.push_back(std::move(ba));
    }
    if (bc) {
      bc->res = r;
      bc->x_in = x;
      bc->q = std::move(q);
      bc->k = std::move(k);
      bc->v = std::move(v);
      bc->attn = std::move(attn);
      bc->x1 = std::move(x1);
      bc->q2 = std::move(q2);
      bc->text_k = std::move(tk);
      bc->text_v = std::move(tv);
      bc->x2 = std::move(x2);
      bc->self_probs = std::move(self_probs);
      bc->text_probs = std::move(text_probs);
      bc->vis_k = std::move(vis_k);
      bc->vis_v = std::move(vis_v);
      bc->vis_probs = std::move(vis_probs);
      bc->vis_weights = std::move(vis_weights);
      bc->mlp = std::move(mc);
    }
    return out;
  }

  BasicTensor<T> block_backward(std::size_t b, const typename DenoiserCache<T>::Block& bc,
                                const BasicTensor<T>& dout, const DenoiserCache<T>& cache,
                                DenoiserGrads<T>& g, bool need_input) const {
    const auto& w = w_.blocks[b];

    // out = x2 + mlp(LN(x2))
    auto dx2 = dout;
    add_inplace(dx2, nn::layer_norm_backward(bc.x2, w.mlp.backward(bc.mlp, dout)));

    // x2 = x1 + mixed · cross_o
    const auto dmixed = matmul_nt(dx2, w.cross_o);
    auto dq2 = nn::multihead_attention_backward(bc.q2, bc.text_k, bc.text_v, bc.text_probs,
                                                dmixed).dq;
    for (std::size_t j = 0; j < bc.vis_k.size(); ++j) {
      auto doi = dmixed;
      const auto& weights = bc.vis_weights[j];
      for (std::size_t i = 0; i < doi.dim(0); ++i) {
        const T wi = weights[i];
        auto row = doi.row(i);
        for (auto& v : row) v = wi == T(0) ? T(0) : v * wi;
      }
      auto ag = nn::multihead_attention_backward(bc.q2, bc.vis_k[j], bc.vis_v[j],
                                                 bc.vis_probs[j], doi);
      add_inplace(dq2, ag.dq);
      const auto& f = *cache.features[j];
      add_inplace(g.projection[b].key, matmul_tn(f, ag.dk));
      add_inplace(g.projection[b].value, matmul_tn(f, ag.dv));
      add_inplace(g.features[j], matmul_nt(ag.dk, visual_[b].key));
      add_inplace(g.features[j], matmul_nt(ag.dv, visual_[b].value));
    }
    auto dx1 = dx2;
    add_inplace(dx1, nn::layer_norm_backward(bc.x1, matmul_nt(dq2, w.cross_q)));
    if (!need_input) return dx1;

    // x1 = x + attn · self_o
    const auto dattn = matmul_nt(dx1, w.self_o);
    const auto sg = nn::multihead_attention_backward(bc.q, bc.k, bc.v, bc.self_probs, dattn);
    auto dh1 = matmul_nt(sg.dq, w.self_q);
    add_inplace(dh1, matmul_nt(sg.dk, w.self_k));
    add_inplace(dh1, matmul_nt(sg.dv, w.self_v));
    auto dx = dx1;
    add_inplace(dx, nn::layer_norm_backward(bc.x_in, dh1));
    return dx;
  }

  const BackboneConfig& cfg_;
  const DenoiserWeights<T>& w_;
  const std::vector<VisualProjection<T>>& visual_;
};

}  // namespace realcustom
