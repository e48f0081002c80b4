#include "icdit/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "icdit/encoders.hpp"
#include "icdit/errors.hpp"
#include "icdit/rng.hpp"

namespace icdit {

namespace {

constexpr std::array<double, 3> kBaseColor = {0.82, 0.66, 0.78};
constexpr double kBlobOffset = -0.4;
constexpr double kPixelNoise = 0.02;
constexpr double kTextureAmplitude = 0.05;
constexpr double kFinePeriod = 5.0;
constexpr double kCoarsePeriod = 16.0;
// Centers are kept this much further apart than r1 + r2 so disks never
// touch, even diagonally.
constexpr double kBlobGap = 1.5;

bool fits(const Blob& b, const std::vector<Blob>& placed) {
  for (const auto& o : placed) {
    const double dx = b.cx - o.cx, dy = b.cy - o.cy;
    const double min_d = b.r + o.r + kBlobGap;
    if (dx * dx + dy * dy < min_d * min_d) return false;
  }
  return true;
}

std::vector<Blob> place_blobs(Rng& rng, std::size_t count, double size) {
  for (;;) {
    std::vector<Blob> blobs;
    for (std::size_t k = 0; k < count; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
        Blob b;
        b.r = static_cast<int>(rng.uniform_int(2, 4));
        b.cx = rng.uniform(b.r, size - b.r);
        b.cy = rng.uniform(b.r, size - b.r);
        if (fits(b, blobs)) {
          blobs.push_back(b);
          placed = true;
        }
      }
      if (!placed) break;
    }
    if (blobs.size() == count) return blobs;
  }
}

std::size_t flat(std::size_t c, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  return (c * h + y) * w + x;
}

}  // namespace

std::size_t density_class(std::size_t blob_count) {
  if (blob_count <= 3) return 0;
  if (blob_count <= 6) return 1;
  return 2;
}

const char* density_word(std::size_t label) {
  static constexpr const char* kWords[] = {"sparse", "medium", "dense"};
  if (label >= kNumClasses) throw ContractError("label " + std::to_string(label) + " out of range");
  return kWords[label];
}

const char* texture_word(Texture texture) { return texture == Texture::fine ? "fine" : "coarse"; }

std::string caption_text(std::size_t label, Texture texture) {
  return std::string("patch shows ") + density_word(label) + " nuclei within " + texture_word(texture) + " stroma";
}

std::string SynthSample::caption() const { return caption_text(label, texture); }

bool inside_disk(const Blob& blob, std::size_t x, std::size_t y) {
  const double dx = static_cast<double>(x) + 0.5 - blob.cx;
  const double dy = static_cast<double>(y) + 0.5 - blob.cy;
  return dx * dx + dy * dy <= static_cast<double>(blob.r * blob.r);
}

Tensor rasterize(const std::vector<Blob>& blobs, std::size_t height, std::size_t width) {
  std::vector<double> m(height * width, 0.0);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (const auto& b : blobs)
        if (inside_disk(b, x, y)) {
          m[y * width + x] = 1.0;
          break;
        }
  return Tensor({1, height, width}, std::move(m));
}

SynthSample gen_sample(std::uint64_t seed, const SynthOptions& options) {
  constexpr std::size_t n = kSynthImageSize;
  Rng root(seed, 0x73796e7468);
  Rng layout_rng = root.split(1), texture_rng = root.split(2), noise_rng = root.split(3);

  SynthSample s;
  s.seed = seed;
  std::size_t count = options.blob_count.value_or(static_cast<std::size_t>(layout_rng.uniform_int(1, 9)));
  if (count < 1 || count > 9) throw ContractError("gen_sample: blob count must be in 1..9");
  s.blobs = place_blobs(layout_rng, count, static_cast<double>(n));
  s.mask = rasterize(s.blobs, n, n);
  s.label = density_class(count);

  const bool coarse = texture_rng.uniform() < 0.5;
  s.texture = options.texture.value_or(coarse ? Texture::coarse : Texture::fine);
  const double period = s.texture == Texture::fine ? kFinePeriod : kCoarsePeriod;
  const double theta = texture_rng.uniform(0.0, std::numbers::pi);
  const double phase = texture_rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double fx = std::cos(theta) * 2.0 * std::numbers::pi / period;
  const double fy = std::sin(theta) * 2.0 * std::numbers::pi / period;

  std::vector<double> img(3 * n * n);
  const auto mask = s.mask.data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double field = kTextureAmplitude * std::sin(fx * static_cast<double>(x) + fy * static_cast<double>(y) + phase);
        double v = kBaseColor[c] + field + kBlobOffset * mask[y * n + x] + kPixelNoise * noise_rng.normal();
        img[flat(c, y, x, n, n)] = std::clamp(v, 0.0, 1.0);
      }
  s.image = Tensor({3, n, n}, std::move(img));
  s.caption_ids = tokenize(s.caption());
  return s;
}

std::uint64_t sample_seed(std::uint64_t seed, std::size_t index) { return Rng(seed, index + 1).next_u64(); }

std::vector<SynthSample> gen_dataset(std::size_t n, std::uint64_t seed) {
  std::vector<SynthSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen_sample(sample_seed(seed, i)));
  return out;
}

Tensor to_gray(const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("to_gray: expected [c x H x W], got " + shape_str(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<double> g(h * w, 0.0);
  const auto src = image.data();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < h * w; ++i) g[i] += src[k * h * w + i];
  for (auto& v : g) v /= static_cast<double>(c);
  return Tensor({1, h, w}, std::move(g));
}

Tensor median_filter3(const Tensor& gray) {
  if (gray.rank() != 3 || gray.dim(0) != 1) throw ShapeError("median_filter3: expected [1 x H x W]");
  const std::size_t h = gray.dim(1), w = gray.dim(2);
  const auto src = gray.data();
  std::vector<double> out(h * w);
  std::array<double, 9> win{};
  auto clampi = [](long v, std::size_t n) { return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(n) - 1)); };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t k = 0;
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx)
          win[k++] = src[clampi(static_cast<long>(y) + dy, h) * w + clampi(static_cast<long>(x) + dx, w)];
      std::nth_element(win.begin(), win.begin() + 4, win.end());
      out[y * w + x] = win[4];
    }
  return Tensor({1, h, w}, std::move(out));
}

Tensor segment_oracle(const Tensor& image) {
  const Tensor filtered = median_filter3(to_gray(image));
  std::vector<double> sorted(filtered.data().begin(), filtered.data().end());
  const std::size_t mid = sorted.size() / 2;
  std::nth_element(sorted.begin(), sorted.begin() + mid, sorted.end());
  double median = sorted[mid];
  if (sorted.size() % 2 == 0) {
    const double lower = *std::max_element(sorted.begin(), sorted.begin() + mid);
    median = 0.5 * (median + lower);
  }
  const double threshold = median - 0.2;
  std::vector<double> m(filtered.numel());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = filtered[i] < threshold ? 1.0 : 0.0;
  return Tensor(filtered.shape(), std::move(m));
}

std::size_t count_components(const Tensor& mask) {
  if (mask.rank() != 3 || mask.dim(0) != 1) throw ShapeError("count_components: expected [1 x H x W]");
  const std::size_t h = mask.dim(1), w = mask.dim(2);
  std::vector<char> seen(h * w, 0);
  std::vector<std::size_t> stack;
  std::size_t count = 0;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (mask[start] == 0.0 || seen[start]) continue;
    ++count;
    seen[start] = 1;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const long py = static_cast<long>(p / w), px = static_cast<long>(p % w);
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          const long y = py + dy, x = px + dx;
          if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) continue;
          const std::size_t q = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
          if (mask[q] != 0.0 && !seen[q]) {
            seen[q] = 1;
            stack.push_back(q);
          }
        }
    }
  }
  return count;
}

std::vector<Tensor> split_patches(const Tensor& image, std::size_t patch_h, std::size_t patch_w) {
  if (image.rank() != 3) throw ShapeError("split_patches: expected [c x H x W], got " + shape_str(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (patch_h == 0 || patch_w == 0 || h % patch_h != 0 || w % patch_w != 0)
    throw ShapeError("split_patches: " + std::to_string(h) + "x" + std::to_string(w) + " image is not divisible into " +
                     std::to_string(patch_h) + "x" + std::to_string(patch_w) + " patches");
  const auto src = image.data();
  std::vector<Tensor> out;
  for (std::size_t py = 0; py < h / patch_h; ++py)
    for (std::size_t px = 0; px < w / patch_w; ++px) {
      std::vector<double> d(c * patch_h * patch_w);
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t y = 0; y < patch_h; ++y)
          for (std::size_t x = 0; x < patch_w; ++x)
            d[flat(k, y, x, patch_h, patch_w)] = src[flat(k, py * patch_h + y, px * patch_w + x, h, w)];
      out.emplace_back(Shape{c, patch_h, patch_w}, std::move(d));
    }
  return out;
}

Tensor join_patches(const std::vector<Tensor>& patches, std::size_t height, std::size_t width) {
  if (patches.empty()) throw ShapeError("join_patches: no patches");
  const std::size_t c = patches[0].dim(0), ph = patches[0].dim(1), pw = patches[0].dim(2);
  if (height % ph != 0 || width % pw != 0 || (height / ph) * (width / pw) != patches.size())
    throw ShapeError("join_patches: patch count does not tile the image");
  std::vector<double> d(c * height * width);
  const std::size_t gw = width / pw;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i].shape() != patches[0].shape()) throw ShapeError("join_patches: patch shapes differ");
    const std::size_t oy = (i / gw) * ph, ox = (i % gw) * pw;
    const auto src = patches[i].data();
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < ph; ++y)
        for (std::size_t x = 0; x < pw; ++x) d[flat(k, oy + y, ox + x, height, width)] = src[flat(k, y, x, ph, pw)];
  }
  return Tensor({c, height, width}, std::move(d));
}

Mosaic gen_mosaic(std::uint64_t seed, std::size_t grid_h, std::size_t grid_w) {
  if (grid_h == 0 || grid_w == 0) throw ContractError("gen_mosaic: empty grid");
  Mosaic m;
  m.tiles = gen_dataset(grid_h * grid_w, seed);
  std::vector<Tensor> imgs;
  for (const auto& t : m.tiles) imgs.push_back(t.image);
  m.image = join_patches(imgs, grid_h * kSynthImageSize, grid_w * kSynthImageSize);
  return m;
}

}  // namespace icdit
