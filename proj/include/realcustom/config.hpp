#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "realcustom/error.hpp"

namespace realcustom {

/// Sizes of the toy backbone. Defaults are the desk-scale stand-ins for the
/// SigLIP/SDXL dimensions (n_image 729 -> 16, c_image 2176 -> 32, ...).
struct BackboneConfig {
  int latent_size = 16;       // latent grid is latent_size x latent_size
  int latent_channels = 8;
  int text_dim = 32;
  int image_tokens = 16;      // n_image, a perfect square (patch grid)
  int encoder_dim = 32;       // c_0
  int condition_dim = 32;     // c_image
  int shallow_layers = 3;     // L
  int encoder_depth = 4;      // image encoder layers, > shallow_layers
  std::vector<int> block_resolutions{16, 8, 16};
  int heads = 2;
  int model_dim = 32;         // denoiser width
  int image_size = 32;        // native encoder resolution in pixels
  int timesteps = 50;         // T of the noise schedule
  std::uint64_t seed = 0;     // weight initialisation

  int patch_grid() const { return static_cast<int>(std::lround(std::sqrt(image_tokens))); }
  int patch_size() const { return image_size / patch_grid(); }
  /// Pixel size of generated images (autoencoder factor 2).
  int pixel_size() const { return latent_size * 2; }
  int max_block_resolution() const {
    return *std::max_element(block_resolutions.begin(), block_resolutions.end());
  }

  /// Tap layers (1-based) for the shallow features, evenly spaced below the
  /// final layer, shallow-to-deep.
  std::vector<int> shallow_taps() const {
    std::vector<int> taps;
    for (int l = 0; l < shallow_layers; ++l)
      taps.push_back((l + 1) * encoder_depth / (shallow_layers + 1));
    return taps;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw UsageError("backbone config: " + m); };
    if (latent_size < 1 || latent_channels < 3) fail("latent_size >= 1 and latent_channels >= 3 required");
    if (shallow_layers < 1) fail("shallow_layers must be >= 1");
    if (encoder_depth < shallow_layers + 1) fail("encoder_depth must exceed shallow_layers");
    const int g = patch_grid();
    if (g * g != image_tokens) fail("image_tokens must be a perfect square");
    if (image_size % g != 0) fail("image_size must be divisible by the patch grid");
    if (block_resolutions.empty()) fail("block_resolutions is empty");
    for (int r : block_resolutions)
      if (r < 1 || latent_size % r != 0) fail("block resolution " + std::to_string(r) + " does not divide latent_size");
    if (max_block_resolution() != latent_size) fail("the largest block resolution must equal latent_size");
    if (heads < 1 || model_dim % heads != 0 || text_dim % heads != 0)
      fail("model_dim and text_dim must be divisible by heads");
    if (encoder_dim % heads != 0) fail("encoder_dim must be divisible by heads");
    if (timesteps < 1) fail("timesteps must be >= 1");
    if (pixel_size() != image_size)
      fail("image_size must equal 2 * latent_size so references and outputs share a resolution");
    const auto taps = shallow_taps();
    for (std::size_t i = 0; i < taps.size(); ++i) {
      if (taps[i] < 1 || (i && taps[i] <= taps[i - 1]))
        fail("encoder_depth too small for distinct shallow taps");
    }
  }
};

}  // namespace realcustom
