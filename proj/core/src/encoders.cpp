#include "icdit/encoders.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

#include "icdit/errors.hpp"
#include "icdit/ops.hpp"
#include "icdit/rng.hpp"

namespace icdit {

namespace {

constexpr std::array<std::string_view, 64> kVocabulary = {
    "patch",     "shows",      "sparse",         "medium",     "dense",        "nuclei",    "within",
    "fine",      "coarse",     "stroma",         "tissue",     "cluster",      "scattered", "few",
    "many",      "several",    "round",          "dark",       "stained",      "epithelial", "cells",
    "region",    "with",       "and",            "of",         "on",           "in",        "the",
    "a",         "pink",       "purple",         "fibrous",    "smooth",       "textured",  "background",
    "nucleus",   "hyperchromatic", "mild",       "moderate",   "severe",       "lymphocytic", "infiltration",
    "tumor",     "normal",     "benign",         "malignant",  "grade",        "low",       "high",
    "necrosis",  "gland",      "vessel",         "fat",        "mitotic",      "figures",   "pleomorphic",
    "large",     "small",      "crowded",        "isolated",   "uniform",      "irregular", "boundary",
    "layout"};

// Stream ids for the frozen tensors, so each is independent of the others.
enum : std::uint64_t {
  kImageMapStream = 1,
  kLayoutMapStream,
  kImagePatchStream,
  kLayoutPatchStream,
  kTextStream,
  kVisualScaleStream,
  kVisualOffsetStream,
};

constexpr double kImageLatentScale = 5.0;
constexpr double kLayoutLatentScale = 2.0;
constexpr std::size_t kTextMaxLength = 64;
constexpr std::size_t kTextureTile = 4;
constexpr std::array<double, 7> kStepEdges = {0.005, 0.01, 0.02, 0.04, 0.08, 0.16, 0.32};

Tensor frozen_gaussian(Shape shape, const Rng& root, std::uint64_t stream, double stddev) {
  Rng rng = root.split(stream);
  return Tensor::randn(std::move(shape), rng, stddev);
}

// scale * (orthonormal columns) of a seeded [rows x cols] Gaussian.
Tensor orthonormal_columns(std::size_t rows, std::size_t cols, const Rng& root, std::uint64_t stream,
                           double scale) {
  Rng rng = root.split(stream);
  std::vector<std::vector<double>> basis;
  while (basis.size() < cols) {
    std::vector<double> v(rows);
    for (auto& x : v) x = rng.normal();
    for (const auto& b : basis) {
      double dot = 0.0;
      for (std::size_t i = 0; i < rows; ++i) dot += v[i] * b[i];
      for (std::size_t i = 0; i < rows; ++i) v[i] -= dot * b[i];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;
    for (auto& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  std::vector<double> data(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) data[r * cols + c] = scale * basis[c][r];
  return Tensor({rows, cols}, std::move(data));
}

void require_chw(const Tensor& t, const char* what) {
  if (t.rank() != 3) throw ShapeError(std::string(what) + ": expected [c x H x W], got " + shape_str(t.shape()));
}

}  // namespace

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::image:
      return "image";
    case Modality::text:
      return "text";
    case Modality::layout:
      return "layout";
    case Modality::embedding:
      return "embedding";
  }
  return "?";
}

std::span<const std::string_view> vocabulary() { return kVocabulary; }

std::vector<std::size_t> tokenize(std::string_view text) {
  std::vector<std::size_t> ids;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) {
    auto it = std::find(kVocabulary.begin(), kVocabulary.end(), word);
    if (it == kVocabulary.end()) throw VocabularyError("word '" + word + "' is not in the caption vocabulary");
    ids.push_back(static_cast<std::size_t>(it - kVocabulary.begin()));
  }
  return ids;
}

std::string detokenize(std::span<const std::size_t> ids) {
  std::string out;
  for (auto id : ids) {
    if (id >= kVocabulary.size()) throw VocabularyError("token id " + std::to_string(id) + " out of range");
    if (!out.empty()) out += ' ';
    out += kVocabulary[id];
  }
  return out;
}

std::vector<double> sinusoid(double position, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> out(dim, 0.0);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(position * freq);
    out[half + i] = std::cos(position * freq);
  }
  return out;
}

namespace {

// Sinusoid over a short axis: frequencies run geometrically from a quarter
// turn per cell down to a quarter turn over the whole axis.
std::vector<double> axis_sinusoid(std::size_t index, std::size_t extent, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> out(dim, 0.0);
  const double fast = std::numbers::pi / 2.0;
  const double slow = fast / static_cast<double>(std::max<std::size_t>(extent, 1));
  for (std::size_t i = 0; i < half; ++i) {
    const double frac = half > 1 ? static_cast<double>(i) / static_cast<double>(half - 1) : 0.0;
    const double freq = fast * std::pow(slow / fast, frac);
    out[i] = std::sin(static_cast<double>(index) * freq);
    out[half + i] = std::cos(static_cast<double>(index) * freq);
  }
  return out;
}

}  // namespace

Tensor grid_positions(std::size_t grid_h, std::size_t grid_w, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> data(grid_h * grid_w * dim, 0.0);
  for (std::size_t r = 0; r < grid_h; ++r)
    for (std::size_t c = 0; c < grid_w; ++c) {
      const auto row = axis_sinusoid(r, grid_h, half);
      const auto col = axis_sinusoid(c, grid_w, dim - half);
      double* dst = data.data() + (r * grid_w + c) * dim;
      std::copy(row.begin(), row.end(), dst);
      std::copy(col.begin(), col.end(), dst + half);
    }
  return Tensor({grid_h * grid_w, dim}, std::move(data));
}

Tensor patch_vectors(const Tensor& latent, std::size_t p) {
  require_chw(latent, "patchify");
  const std::size_t c = latent.dim(0), h = latent.dim(1), w = latent.dim(2);
  if (p == 0 || h % p != 0 || w % p != 0)
    throw ShapeError("patchify: " + shape_str(latent.shape()) + " not divisible by patch size " + std::to_string(p));
  const std::size_t gh = h / p, gw = w / p, width = c * p * p;
  const auto src = latent.data();
  std::vector<double> out(gh * gw * width);
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      double* dst = out.data() + (gy * gw + gx) * width;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            *dst++ = src[(ch * h + gy * p + dy) * w + gx * p + dx];
    }
  return Tensor({gh * gw, width}, std::move(out));
}

Tensor unpatch_vectors(const Tensor& vectors, std::size_t c, std::size_t h, std::size_t w, std::size_t p) {
  if (p == 0 || h % p != 0 || w % p != 0) throw ShapeError("unpatchify: geometry not divisible by patch size");
  const std::size_t gh = h / p, gw = w / p, width = c * p * p;
  if (vectors.rank() != 2 || vectors.rows() != gh * gw || vectors.cols() != width)
    throw ShapeError("unpatchify: " + shape_str(vectors.shape()) + " does not match latent " +
                     shape_str({c, h, w}) + " with patch " + std::to_string(p));
  const auto src = vectors.data();
  std::vector<double> out(c * h * w);
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      const double* s = src.data() + (gy * gw + gx) * width;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx) out[(ch * h + gy * p + dy) * w + gx * p + dx] = *s++;
    }
  return Tensor({c, h, w}, std::move(out));
}

TokenStream patchify(const Tensor& latent, std::size_t p, const Tensor& projection, Modality modality) {
  auto vecs = patch_vectors(latent, p);
  TokenStream s;
  s.modality = modality;
  s.tokens = matmul(vecs, projection);
  s.grid_h = latent.dim(1) / p;
  s.grid_w = latent.dim(2) / p;
  return s;
}

Tensor avg_pool(const Tensor& image, std::size_t stride) {
  require_chw(image, "avg_pool");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (stride == 0 || h % stride != 0 || w % stride != 0)
    throw ShapeError("encoder: spatial dims of " + shape_str(image.shape()) + " not divisible by stride " +
                     std::to_string(stride));
  const std::size_t oh = h / stride, ow = w / stride;
  const double inv = 1.0 / static_cast<double>(stride * stride);
  const auto src = image.data();
  std::vector<double> out(c * oh * ow, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < stride; ++dy)
          for (std::size_t dx = 0; dx < stride; ++dx) acc += src[(ch * h + y * stride + dy) * w + x * stride + dx];
        out[(ch * oh + y) * ow + x] = acc * inv;
      }
  return Tensor({c, oh, ow}, std::move(out));
}

SurrogateEncoders::SurrogateEncoders(SurrogateEncoderParams params) : params_(params) {
  if (params_.d_model == 0 || params_.latent_channels < params_.image_channels || params_.patch_size == 0 ||
      params_.stride == 0 || params_.vocab_size == 0 || params_.vocab_size > kVocabulary.size())
    throw ConfigError("surrogate encoder parameters out of range");
  const Rng root(params_.seed);
  const std::size_t c_lat = params_.latent_channels, c_img = params_.image_channels, d = params_.d_model;
  const std::size_t patch_width = c_lat * params_.patch_size * params_.patch_size;

  image_map_ = orthonormal_columns(c_lat, c_img, root, kImageMapStream, kImageLatentScale);
  // Columns are orthogonal with norm s, so the pseudo-inverse is map^T / s^2.
  std::vector<double> unmap(c_img * c_lat);
  for (std::size_t i = 0; i < c_img; ++i)
    for (std::size_t o = 0; o < c_lat; ++o)
      unmap[i * c_lat + o] = image_map_.at(o, i) / (kImageLatentScale * kImageLatentScale);
  image_unmap_ = Tensor({c_img, c_lat}, std::move(unmap));
  layout_map_ = orthonormal_columns(c_lat, 1, root, kLayoutMapStream, kLayoutLatentScale);

  const double patch_std = 1.0 / std::sqrt(static_cast<double>(patch_width));
  image_patch_proj_ = frozen_gaussian({patch_width, d}, root, kImagePatchStream, patch_std * 1.5);
  layout_patch_proj_ = frozen_gaussian({patch_width, d}, root, kLayoutPatchStream, patch_std * 1.5);
  text_table_ = frozen_gaussian({params_.vocab_size, d}, root, kTextStream, 0.7);
  visual_scale_ = frozen_gaussian({visual_feature_dim(), d}, root, kVisualScaleStream, 1.0);
  visual_offset_ = frozen_gaussian({visual_feature_dim(), d}, root, kVisualOffsetStream, 0.5);
  image_center_.assign(c_img, 0.6);
  layout_center_.assign(1, 0.5);
}

Tensor SurrogateEncoders::project_channels(const Tensor& pooled, const Tensor& map,
                                           const std::vector<double>& center) const {
  const std::size_t c_in = pooled.dim(0), h = pooled.dim(1), w = pooled.dim(2);
  const std::size_t c_out = map.rows();
  const auto src = pooled.data();
  const auto m = map.data();
  std::vector<double> out(c_out * h * w, 0.0);
  for (std::size_t o = 0; o < c_out; ++o)
    for (std::size_t i = 0; i < c_in; ++i) {
      const double wgt = m[o * c_in + i];
      for (std::size_t k = 0; k < h * w; ++k) out[o * h * w + k] += wgt * (src[i * h * w + k] - center[i]);
    }
  return Tensor({c_out, h, w}, std::move(out));
}

Tensor SurrogateEncoders::encode_image(const Tensor& image) const {
  require_chw(image, "encode_image");
  if (image.dim(0) != params_.image_channels)
    throw ShapeError("encode_image: expected " + std::to_string(params_.image_channels) + " channels, got " +
                     shape_str(image.shape()));
  return project_channels(avg_pool(image, params_.stride), image_map_, image_center_);
}

Tensor SurrogateEncoders::decode_latent(const Tensor& latent) const {
  require_chw(latent, "decode_latent");
  const std::size_t c_lat = latent.dim(0), h = latent.dim(1), w = latent.dim(2);
  if (c_lat != params_.latent_channels)
    throw ShapeError("decode_latent: expected " + std::to_string(params_.latent_channels) + " channels, got " +
                     shape_str(latent.shape()));
  const std::size_t s = params_.stride, c_img = params_.image_channels;
  const std::size_t oh = h * s, ow = w * s;
  const auto src = latent.data();
  const auto um = image_unmap_.data();
  std::vector<double> out(c_img * oh * ow);
  for (std::size_t ch = 0; ch < c_img; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double v = image_center_[ch];
        for (std::size_t o = 0; o < c_lat; ++o) v += um[ch * c_lat + o] * src[(o * h + y) * w + x];
        for (std::size_t dy = 0; dy < s; ++dy)
          for (std::size_t dx = 0; dx < s; ++dx) out[(ch * oh + y * s + dy) * ow + x * s + dx] = v;
      }
  return Tensor({c_img, oh, ow}, std::move(out));
}

TokenStream SurrogateEncoders::tokenize_latent(const Tensor& latent) const {
  return patchify(latent, params_.patch_size, image_patch_proj_, Modality::image);
}

Tensor SurrogateEncoders::encode_layout_latent(const Tensor& mask) const {
  require_chw(mask, "encode_layout");
  if (mask.dim(0) != 1) throw ShapeError("encode_layout: mask must have one channel, got " + shape_str(mask.shape()));
  for (double v : mask.data())
    if (v != 0.0 && v != 1.0) throw ContractError("encode_layout: mask entries must be 0 or 1");
  return project_channels(avg_pool(mask, params_.stride), layout_map_, layout_center_);
}

TokenStream SurrogateEncoders::encode_layout(const Tensor& mask) const {
  return patchify(encode_layout_latent(mask), params_.patch_size, layout_patch_proj_, Modality::layout);
}

TokenStream SurrogateEncoders::encode_text(std::span<const std::size_t> ids) const {
  if (ids.empty() || ids.size() > kTextMaxLength)
    throw ContractError("encode_text: caption length " + std::to_string(ids.size()) + " outside [1, 64]");
  const std::size_t d = params_.d_model;
  std::vector<double> out(ids.size() * d);
  const auto table = text_table_.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= params_.vocab_size)
      throw VocabularyError("token id " + std::to_string(ids[i]) + " >= vocabulary size " +
                            std::to_string(params_.vocab_size));
    const auto pos = sinusoid(static_cast<double>(i), d);
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] = table[ids[i] * d + c] + pos[c];
  }
  TokenStream s;
  s.modality = Modality::text;
  s.tokens = Tensor({ids.size(), d}, std::move(out));
  return s;
}

std::size_t SurrogateEncoders::visual_feature_dim() const {
  return 2 * params_.image_channels + kStepEdges.size() + 1;
}

std::vector<double> SurrogateEncoders::visual_features(const Tensor& image) const {
  require_chw(image, "encode_visual");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (c != params_.image_channels)
    throw ShapeError("encode_visual: expected " + std::to_string(params_.image_channels) + " channels");
  const auto src = image.data();
  const std::size_t hw = h * w;
  std::vector<double> feats;
  feats.reserve(visual_feature_dim());

  // Sorted sums make the statistics independent of pixel order, bit for bit.
  auto ordered_sum = [](std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    long double acc = 0.0L;
    for (double x : v) acc += x;
    return static_cast<double>(acc);
  };
  std::vector<double> means(c, 0.0), scratch(hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    scratch.assign(src.begin() + ch * hw, src.begin() + (ch + 1) * hw);
    means[ch] = ordered_sum(scratch) / static_cast<double>(hw);
    feats.push_back(2.0 * (means[ch] - 0.5));
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t k = 0; k < hw; ++k) {
      const double dev = src[ch * hw + k] - means[ch];
      scratch[k] = dev * dev;
    }
    feats.push_back(10.0 * std::sqrt(ordered_sum(scratch) / static_cast<double>(hw)));
  }

  // Steps between neighbours inside the same tile only, so permuting
  // whole tiles or mirroring the image leaves the histogram unchanged.
  std::vector<double> gray(hw, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t k = 0; k < hw; ++k) gray[k] += src[ch * hw + k] / static_cast<double>(c);
  std::vector<double> hist(kStepEdges.size() + 1, 0.0);
  double total = 0.0;
  auto bin = [&](double step) {
    const auto idx = std::upper_bound(kStepEdges.begin(), kStepEdges.end(), step) - kStepEdges.begin();
    hist[static_cast<std::size_t>(idx)] += 1.0;
    total += 1.0;
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (x + 1 < w && (x + 1) % kTextureTile != 0) bin(std::abs(gray[y * w + x + 1] - gray[y * w + x]));
      if (y + 1 < h && (y + 1) % kTextureTile != 0) bin(std::abs(gray[(y + 1) * w + x] - gray[y * w + x]));
    }
  for (double v : hist) feats.push_back(total > 0.0 ? 2.0 * v / total : 0.0);
  return feats;
}

TokenStream SurrogateEncoders::encode_visual(const Tensor& image) const {
  const auto feats = visual_features(image);
  const std::size_t g = feats.size(), d = params_.d_model;
  const auto sc = visual_scale_.data(), off = visual_offset_.data();
  std::vector<double> out(g * d);
  for (std::size_t k = 0; k < g; ++k)
    for (std::size_t c = 0; c < d; ++c) out[k * d + c] = feats[k] * sc[k * d + c] + off[k * d + c];
  TokenStream s;
  s.modality = Modality::embedding;
  s.tokens = Tensor({g, d}, std::move(out));
  return s;
}

std::vector<std::pair<std::string, Tensor>> SurrogateEncoders::frozen_tensors() const {
  return {{"image_map", image_map_},
          {"image_unmap", image_unmap_},
          {"layout_map", layout_map_},
          {"image_patch_proj", image_patch_proj_},
          {"layout_patch_proj", layout_patch_proj_},
          {"text_table", text_table_},
          {"visual_scale", visual_scale_},
          {"visual_offset", visual_offset_}};
}

}  // namespace icdit
