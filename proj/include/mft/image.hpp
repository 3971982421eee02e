#pragma once

#include <cstddef>
#include <filesystem>

#include "mft/tensor.hpp"

namespace mft {

// Image helpers on [C x H x W] float tensors with values in [0, 1].

/// Mirrors the last axis. Applying it twice restores the input bit-exactly.
Tensor flip_horizontal(const Tensor& image);

/// Rectangular window [top, top+height) x [left, left+width).
Tensor crop(const Tensor& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width);

/// Bilinear resampling with half-pixel centers; same-size input is copied.
Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width);

/// Largest centered square, resized to size x size.
Tensor center_crop_resize(const Tensor& image, std::size_t size);

/// Reads a binary NetPBM image (P6 color or P5 gray) as [3 x H x W]; gray
/// images are replicated across channels. Throws IoError naming the path.
Tensor read_netpbm(const std::filesystem::path& path);

/// Writes [3 x H x W] (or [1 x H x W]) as 8-bit P6.
void write_ppm(const std::filesystem::path& path, const Tensor& image);

}  // namespace mft
