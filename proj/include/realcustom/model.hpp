#pragma once

#include <cstring>
#include <string>
#include <vector>

#include <zlib.h>

#include "realcustom/backbone.hpp"
#include "realcustom/projector.hpp"

namespace realcustom {

/// Backbone weights that training must never touch.
template <typename T>
struct FrozenParams {
  TextEncoderWeights<T> text;
  ImageEncoderWeights<T> image;
  DenoiserWeights<T> denoiser;

  template <typename F>
  void for_each(F&& f) {
    text.for_each("text", f);
    image.for_each("image", f);
    denoiser.for_each("denoiser", f);
  }

  template <typename U>
  FrozenParams<U> cast() const {
    return {text.template cast<U>(), image.template cast<U>(), denoiser.template cast<U>()};
  }
};

/// The trainable set: projector weights plus W_Ki / W_Vi of every block.
/// Gradients and optimizer moments reuse this layout.
template <typename T>
struct TrainableParams {
  ProjectorWeights<T> projector;
  std::vector<VisualProjection<T>> visual;

  static TrainableParams zeros_like(const TrainableParams& o) {
    TrainableParams z{ProjectorWeights<T>::zeros_like(o.projector), {}};
    for (const auto& v : o.visual)
      z.visual.push_back({BasicTensor<T>(v.key.shape()), BasicTensor<T>(v.value.shape())});
    return z;
  }

  template <typename F>
  void for_each(F&& f) {
    projector.for_each("ccp", f);
    for (std::size_t b = 0; b < visual.size(); ++b) {
      f("visual.block" + std::to_string(b) + ".key", visual[b].key);
      f("visual.block" + std::to_string(b) + ".value", visual[b].value);
    }
  }

  /// Flat list of tensor pointers in for_each order.
  std::vector<BasicTensor<T>*> tensors() {
    std::vector<BasicTensor<T>*> out;
    for_each([&](const std::string&, BasicTensor<T>& t) { out.push_back(&t); });
    return out;
  }

  template <typename U>
  TrainableParams<U> cast() const {
    TrainableParams<U> c{projector.template cast<U>(), {}};
    for (const auto& v : visual) c.visual.push_back(v.template cast<U>());
    return c;
  }
};

template <typename T>
struct Model {
  BackboneConfig config;
  FrozenParams<T> frozen;
  TrainableParams<T> trainable;

  /// Deterministic initialisation from config.seed; each part draws from its
  /// own split stream so adding a block does not reshuffle the encoders.
  static Model init(const BackboneConfig& cfg) {
    cfg.validate();
    Rng root(cfg.seed);
    Model m;
    m.config = cfg;
    auto r_text = root.split(1), r_image = root.split(2), r_den = root.split(3);
    auto r_ccp = root.split(4), r_vis = root.split(5);
    m.frozen.text = TextEncoderWeights<T>::init(cfg, r_text);
    m.frozen.image = ImageEncoderWeights<T>::init(cfg, r_image);
    m.frozen.denoiser = DenoiserWeights<T>::init(cfg, r_den);
    m.trainable.projector = ProjectorWeights<T>::init(cfg, r_ccp);
    for (std::size_t b = 0; b < cfg.block_resolutions.size(); ++b)
      m.trainable.visual.push_back(VisualProjection<T>::init(cfg, r_vis));
    return m;
  }

  template <typename U>
  Model<U> cast() const {
    return {config, frozen.template cast<U>(), trainable.template cast<U>()};
  }

  Denoiser<T> denoiser() const { return Denoiser<T>(config, frozen.denoiser, trainable.visual); }
};

/// CRC-32 over the raw bytes of every tensor visited by `visit`.
template <typename Params>
std::uint32_t params_checksum(const Params& params) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // for_each only hands out references; nothing is modified here.
  const_cast<Params&>(params).for_each([&](const std::string& name, auto& t) {
    crc = crc32(crc, reinterpret_cast<const Bytef*>(name.data()), static_cast<uInt>(name.size()));
    const auto bytes = t.data();
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()),
                static_cast<uInt>(bytes.size_bytes()));
  });
  return static_cast<std::uint32_t>(crc);
}

template <typename T>
std::uint32_t frozen_checksum(const Model<T>& m) {
  return params_checksum(m.frozen);
}

}  // namespace realcustom
