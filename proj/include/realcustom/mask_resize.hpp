#pragma once

#include "realcustom/tensor.hpp"

namespace realcustom {

/// Bilinear resize of a guidance mask to a block's resolution, flattened to
/// one weight per query position (row-major). Values stay in [0, 1].
template <typename T>
BasicTensor<T> resize_mask_to_block(const BasicTensor<T>& mask, std::size_t block_res) {
  require_rank2(mask, "resize_mask_to_block");
  if (block_res == 0 || block_res > mask.dim(0)) {
    throw ShapeError("resize_mask_to_block: block resolution " +
                     std::to_string(block_res) + " exceeds mask " +
                     shape_string(mask.shape()));
  }
  return resize_2d(mask, block_res, block_res, ResizeMode::kBilinear)
      .reshaped({block_res * block_res});
}

}  // namespace realcustom
