#include "mft/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "mft/error.hpp"

namespace mft {

namespace {

void require_image(const Tensor& image, const char* op) {
  if (image.ndim() != 3) throw DimensionError(std::string(op) + ": expected [C x H x W], got " + shape_str(image.shape()));
}

}  // namespace

Tensor flip_horizontal(const Tensor& image) {
  require_image(image, "flip_horizontal");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<float> out(image.numel());
  auto in = image.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = in[(ch * h + y) * w + (w - 1 - x)];
  return Tensor::from(image.shape(), std::move(out));
}

Tensor crop(const Tensor& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  require_image(image, "crop");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (height == 0 || width == 0 || top + height > h || left + width > w)
    throw DimensionError("crop: window " + std::to_string(height) + "x" + std::to_string(width) + " at (" +
                         std::to_string(top) + "," + std::to_string(left) + ") exceeds " + shape_str(image.shape()));
  std::vector<float> out(c * height * width);
  auto in = image.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < height; ++y)
      std::copy_n(in.begin() + (ch * h + top + y) * w + left, width, out.begin() + (ch * height + y) * width);
  return Tensor::from({c, height, width}, std::move(out));
}

Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width) {
  require_image(image, "resize_bilinear");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (height == 0 || width == 0) throw DimensionError("resize_bilinear: zero target size");
  if (h == height && w == width) return image.detach();
  std::vector<float> out(c * height * width);
  auto in = image.data();
  const double sy = double(h) / double(height), sx = double(w) / double(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - double(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - double(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const float* p = in.data() + ch * h * w;
        const double top = p[y0 * w + x0] * (1 - tx) + p[y0 * w + x1] * tx;
        const double bot = p[y1 * w + x0] * (1 - tx) + p[y1 * w + x1] * tx;
        out[(ch * height + y) * width + x] = static_cast<float>(top * (1 - ty) + bot * ty);
      }
    }
  }
  return Tensor::from({c, height, width}, std::move(out));
}

Tensor center_crop_resize(const Tensor& image, std::size_t size) {
  require_image(image, "center_crop_resize");
  const std::size_t h = image.dim(1), w = image.dim(2);
  const std::size_t side = std::min(h, w);
  Tensor square = crop(image, (h - side) / 2, (w - side) / 2, side, side);
  return resize_bilinear(square, size, size);
}

namespace {

/// Next whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& in, const std::filesystem::path& path) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw IoError("truncated NetPBM header in " + path.string());
  return tok;
}

}  // namespace

Tensor read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  const std::string magic = next_token(in, path);
  if (magic != "P6" && magic != "P5") throw IoError("unsupported image format '" + magic + "' in " + path.string());
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(next_token(in, path));
    h = std::stoul(next_token(in, path));
    maxval = std::stoul(next_token(in, path));
  } catch (const std::invalid_argument&) {
    throw IoError("malformed NetPBM header in " + path.string());
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw IoError("invalid NetPBM header in " + path.string());
  const std::size_t channels = magic == "P6" ? 3 : 1;
  const std::size_t bytes_per = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(w * h * channels * bytes_per);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw IoError("truncated pixel data in " + path.string());
  std::vector<float> out(3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src_c = channels == 3 ? c : 0;
        const std::size_t idx = ((y * w + x) * channels + src_c) * bytes_per;
        const double v = bytes_per == 2 ? double((raw[idx] << 8) | raw[idx + 1]) : double(raw[idx]);
        out[(c * h + y) * w + x] = static_cast<float>(v / double(maxval));
      }
  return Tensor::from({3, h, w}, std::move(out));
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  require_image(image, "write_ppm");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (c != 3 && c != 1) throw DimensionError("write_ppm: need 1 or 3 channels, got " + std::to_string(c));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write image " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  auto d = image.data();
  std::vector<unsigned char> raw(h * w * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < 3; ++k) {
        const std::size_t src = c == 3 ? k : 0;
        const float v = std::clamp(d[(src * h + y) * w + x], 0.0f, 1.0f);
        raw[(y * w + x) * 3 + k] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace mft
