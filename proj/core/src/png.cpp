#include "icdit/png.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>

#include "icdit/container.hpp"
#include "icdit/errors.hpp"

namespace icdit {

namespace {

void put_be32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

void chunk(std::string& out, const char* type, const std::string& payload) {
  put_be32(out, static_cast<std::uint32_t>(payload.size()));
  std::string body(type, 4);
  body += payload;
  out += body;
  put_be32(out, static_cast<std::uint32_t>(
                    crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

}  // namespace

std::string encode_png(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1))
    throw ShapeError("encode_png: expected [3 x H x W] or [1 x H x W], got " + shape_str(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::string raw;
  raw.reserve(h * (1 + 3 * w));
  for (std::size_t y = 0; y < h; ++y) {
    raw.push_back(0);  // filter: none
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < 3; ++k) {
        const double v = image[((c == 1 ? 0 : k) * h + y) * w + x];
        raw.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
      }
  }
  uLongf size = compressBound(static_cast<uLong>(raw.size()));
  std::string packed(size, '\0');
  if (compress2(reinterpret_cast<Bytef*>(packed.data()), &size, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw IoError("encode_png: zlib compression failed");
  packed.resize(size);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(w));
  put_be32(ihdr, static_cast<std::uint32_t>(h));
  ihdr += std::string("\x08\x02\x00\x00\x00", 5);  // 8-bit, truecolour
  chunk(out, "IHDR", ihdr);
  chunk(out, "IDAT", packed);
  chunk(out, "IEND", "");
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor& image) { write_file(path, encode_png(image)); }

Tensor image_grid(const std::vector<Tensor>& images, std::size_t cols) {
  if (images.empty() || cols == 0) throw ContractError("image_grid: nothing to tile");
  const Shape& s = images[0].shape();
  if (s.size() != 3) throw ShapeError("image_grid: expected [c x H x W] images");
  const std::size_t c = s[0], h = s[1], w = s[2];
  const std::size_t rows = (images.size() + cols - 1) / cols;
  const std::size_t gh = rows * (h + 1) + 1, gw = cols * (w + 1) + 1;
  std::vector<double> d(c * gh * gw, 1.0);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != s) throw ShapeError("image_grid: image shapes differ");
    const std::size_t oy = (i / cols) * (h + 1) + 1, ox = (i % cols) * (w + 1) + 1;
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) d[(k * gh + oy + y) * gw + ox + x] = images[i][(k * h + y) * w + x];
  }
  return Tensor({c, gh, gw}, std::move(d));
}

}  // namespace icdit
