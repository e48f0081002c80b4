#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "icdit/tensor.hpp"

namespace icdit {

inline constexpr std::size_t kSynthImageSize = 32;
inline constexpr std::size_t kNumClasses = 3;

enum class Texture { fine, coarse };

struct Blob {
  double cx = 0.0;  // pixel units; pixel (x, y) covers [x, x+1) x [y, y+1)
  double cy = 0.0;
  int r = 0;
};

struct SynthSample {
  Tensor image;  // [3 x 32 x 32], values in [0, 1]
  Tensor mask;   // [1 x 32 x 32], 0/1
  std::vector<std::size_t> caption_ids;
  std::size_t label = 0;
  Texture texture = Texture::fine;
  std::vector<Blob> blobs;
  std::uint64_t seed = 0;

  std::string caption() const;
};

struct SynthOptions {
  /// Forces the number of disks (1..9) instead of drawing it.
  std::optional<std::size_t> blob_count;
  std::optional<Texture> texture;
};

/// 0 = sparse (<= 3 blobs), 1 = medium (4..6), 2 = dense (>= 7).
std::size_t density_class(std::size_t blob_count);
const char* density_word(std::size_t label);
const char* texture_word(Texture texture);
std::string caption_text(std::size_t label, Texture texture);

/// Pixel (x, y) is inside when (x + 0.5 - cx)^2 + (y + 0.5 - cy)^2 <= r^2.
bool inside_disk(const Blob& blob, std::size_t x, std::size_t y);
Tensor rasterize(const std::vector<Blob>& blobs, std::size_t height, std::size_t width);

SynthSample gen_sample(std::uint64_t seed, const SynthOptions& options = {});
/// Seed of sample `index` of a dataset rooted at `seed`.
std::uint64_t sample_seed(std::uint64_t seed, std::size_t index);
std::vector<SynthSample> gen_dataset(std::size_t n, std::uint64_t seed);

/// Channel mean, [1 x H x W].
Tensor to_gray(const Tensor& image);
/// 3x3 median with replicated borders on a [1 x H x W] map.
Tensor median_filter3(const Tensor& gray);
/// Segmentation surrogate: gray, 3x3 median, then pixels darker than
/// (median of the filtered map - 0.2).
Tensor segment_oracle(const Tensor& image);
/// 8-connected components of a [1 x H x W] binary mask.
std::size_t count_components(const Tensor& mask);

/// Row-major non-overlapping tiles of a [c x H x W] tensor.
std::vector<Tensor> split_patches(const Tensor& image, std::size_t patch_h, std::size_t patch_w);
Tensor join_patches(const std::vector<Tensor>& patches, std::size_t height, std::size_t width);

/// Image assembled from grid_h x grid_w independent samples.
struct Mosaic {
  Tensor image;
  std::vector<SynthSample> tiles;  // row-major
};
Mosaic gen_mosaic(std::uint64_t seed, std::size_t grid_h, std::size_t grid_w);

}  // namespace icdit
