#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "icdit/tensor.hpp"

namespace icdit {

/// 8-bit RGB PNG bytes of a [3 x H x W] (or [1 x H x W]) image in [0, 1].
std::string encode_png(const Tensor& image);
void write_png(const std::filesystem::path& path, const Tensor& image);

/// Tiles equally sized images into a cols-wide grid with a 1-pixel border.
Tensor image_grid(const std::vector<Tensor>& images, std::size_t cols);

}  // namespace icdit
