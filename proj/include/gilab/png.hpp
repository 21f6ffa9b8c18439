#pragma once

#include <filesystem>

#include "gilab/tensor.hpp"

namespace gilab {

// Decodes a grayscale or RGB PNG (8 or 16 bit; alpha dropped, palettes
// expanded) into a [C, H, W] tensor in [0, 1].
Tensor read_png(const std::filesystem::path& path);

// Encodes a [C, H, W] tensor with C in {1, 3}, values clamped to [0, 1].
void write_png(const std::filesystem::path& path, const Tensor& image, int bit_depth = 8);

}  // namespace gilab
