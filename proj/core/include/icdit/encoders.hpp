#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "icdit/tensor.hpp"

namespace icdit {

enum class Modality { image, text, layout, embedding };

const char* modality_name(Modality m);

/// Token matrix of one modality for one sample.
struct TokenStream {
  Modality modality = Modality::image;
  Tensor tokens;  // [n x d_model]
  /// Patch grid for image and layout streams, 0 otherwise.
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;

  std::size_t size() const { return tokens.rows(); }
  std::size_t width() const { return tokens.cols(); }
};

struct SurrogateEncoderParams {
  std::uint64_t seed = 20240611;
  std::size_t vocab_size = 64;
  std::size_t d_model = 32;
  std::size_t latent_channels = 4;
  std::size_t patch_size = 2;
  std::size_t image_channels = 3;
  std::size_t stride = 4;
};

/// The fixed caption vocabulary; index == token id.
std::span<const std::string_view> vocabulary();
/// Maps whitespace-separated words to ids. Throws VocabularyError on
/// unknown words.
std::vector<std::size_t> tokenize(std::string_view text);
std::string detokenize(std::span<const std::size_t> ids);

/// [sin(pos * w_i) ..., cos(pos * w_i) ...] with w_i = 10000^(-i / (dim/2)).
std::vector<double> sinusoid(double position, std::size_t dim);
/// Row-major [gh*gw x dim] grid signal: first half encodes the row, second
/// half the column, each as sin/cos pairs whose frequencies fall from
/// pi/2 per cell to pi/2 over the whole axis.
Tensor grid_positions(std::size_t grid_h, std::size_t grid_w, std::size_t dim);

/// [c x H x W] -> [(H/p)*(W/p) x c*p*p], patches in row-major order, each
/// flattened channel-major.
Tensor patch_vectors(const Tensor& latent, std::size_t patch_size);
/// Inverse of patch_vectors.
Tensor unpatch_vectors(const Tensor& vectors, std::size_t channels, std::size_t height, std::size_t width,
                       std::size_t patch_size);
/// patch_vectors followed by a fixed linear map [c*p*p x d].
TokenStream patchify(const Tensor& latent, std::size_t patch_size, const Tensor& projection,
                     Modality modality = Modality::image);

/// Strided average pooling of a [c x H x W] tensor.
Tensor avg_pool(const Tensor& image, std::size_t stride);

/// Frozen stand-ins for the pretrained text, image, layout and appearance
/// encoders. Every tensor is generated from the seed at construction and
/// never requires a gradient; all methods are pure.
class SurrogateEncoders {
 public:
  explicit SurrogateEncoders(SurrogateEncoderParams params = {});

  const SurrogateEncoderParams& params() const { return params_; }

  /// [3 x H x W] image -> [c_lat x H/stride x W/stride] latent.
  Tensor encode_image(const Tensor& image) const;
  /// Nearest-neighbour upsample and inverse channel map.
  Tensor decode_latent(const Tensor& latent) const;
  /// Latent tokens without position signal.
  TokenStream tokenize_latent(const Tensor& latent) const;

  /// [1 x H x W] binary mask -> latent of the layout encoder.
  Tensor encode_layout_latent(const Tensor& mask) const;
  TokenStream encode_layout(const Tensor& mask) const;

  TokenStream encode_text(std::span<const std::size_t> ids) const;

  /// Global appearance statistics: channel means, channel standard
  /// deviations and a histogram of within-tile intensity steps.
  std::vector<double> visual_features(const Tensor& image) const;
  TokenStream encode_visual(const Tensor& image) const;
  std::size_t visual_feature_dim() const;

  /// Every generated tensor, for freeze checks.
  std::vector<std::pair<std::string, Tensor>> frozen_tensors() const;

  const Tensor& image_patch_projection() const { return image_patch_proj_; }
  const Tensor& text_table() const { return text_table_; }
  const Tensor& image_channel_map() const { return image_map_; }

 private:
  Tensor project_channels(const Tensor& pooled, const Tensor& map, const std::vector<double>& center) const;

  SurrogateEncoderParams params_;
  Tensor image_map_;         // [c_lat x c_img]
  Tensor image_unmap_;       // [c_img x c_lat]
  Tensor layout_map_;        // [c_lat x 1]
  Tensor image_patch_proj_;  // [c_lat*p*p x d]
  Tensor layout_patch_proj_;
  Tensor text_table_;        // [vocab x d]
  Tensor visual_scale_;      // [g x d]
  Tensor visual_offset_;     // [g x d]
  std::vector<double> image_center_;
  std::vector<double> layout_center_;
};

}  // namespace icdit
