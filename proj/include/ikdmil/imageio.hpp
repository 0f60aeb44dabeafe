#pragma once

#include <filesystem>

#include "ikdmil/tensor.hpp"

namespace ikdmil {

// Raster IO (PNG/BMP/PPM/... via OpenCV imgcodecs). Images are exchanged as
// {3,H,W} float tensors in [0,1]; masks as {0,1} grids stored as 0/255.

Tensor load_image_rgb(const std::filesystem::path& path);
void save_image_rgb(const std::filesystem::path& path, const Tensor& image);

BinaryMask load_mask(const std::filesystem::path& path);
void save_mask(const std::filesystem::path& path, const BinaryMask& mask);

}  // namespace ikdmil
