#include "yolco/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace yolco {

Image::Image(int w, int h, Rgb fill) : width(w), height(h) {
  if (w < 0 || h < 0) throw std::invalid_argument("Image: negative extent");
  pixels.resize(static_cast<std::size_t>(w) * h * 3);
  for (std::size_t i = 0; i < pixels.size(); i += 3) {
    pixels[i] = fill.r;
    pixels[i + 1] = fill.g;
    pixels[i + 2] = fill.b;
  }
}

Image crop(const Image& src, int x0, int y0, int w, int h, Rgb fill) {
  Image out(w, h, fill);
  const int xa = std::max(0, x0), xb = std::min(src.width, x0 + w);
  if (xa >= xb) return out;
  for (int y = std::max(0, y0); y < std::min(src.height, y0 + h); ++y) {
    const auto* from = &src.pixels[(static_cast<std::size_t>(y) * src.width + xa) * 3];
    auto* to = &out.pixels[(static_cast<std::size_t>(y - y0) * w + (xa - x0)) * 3];
    std::memcpy(to, from, static_cast<std::size_t>(xb - xa) * 3);
  }
  return out;
}

Image resize_bilinear(const Image& src, int w, int h) {
  if (src.width == 0 || src.height == 0) throw std::invalid_argument("resize_bilinear: empty image");
  Image out(w, h);
  const double sx = static_cast<double>(src.width) / w, sy = static_cast<double>(src.height) / h;
  for (int y = 0; y < h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, src.height - 1);
    const double ty = fy - y0;
    for (int x = 0; x < w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, src.width - 1);
      const double tx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        auto px = [&](int xx, int yy) {
          return static_cast<double>(src.pixels[(static_cast<std::size_t>(yy) * src.width + xx) * 3 + c]);
        };
        const double v = (1 - ty) * ((1 - tx) * px(x0, y0) + tx * px(x1, y0)) +
                         ty * ((1 - tx) * px(x0, y1) + tx * px(x1, y1));
        out.pixels[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
            static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

Image downsample_area(const Image& src, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample_area: factor must be >= 1");
  const int w = (src.width + factor - 1) / factor, h = (src.height + factor - 1) / factor;
  Image out(w, h);
  std::vector<std::uint64_t> acc(static_cast<std::size_t>(w) * 3);
  for (int by = 0; by < h; ++by) {
    std::fill(acc.begin(), acc.end(), 0);
    const int ya = by * factor, yb = std::min(src.height, ya + factor);
    for (int y = ya; y < yb; ++y) {
      const auto* row = &src.pixels[static_cast<std::size_t>(y) * src.width * 3];
      for (int x = 0; x < src.width; ++x) {
        auto* a = &acc[static_cast<std::size_t>(x / factor) * 3];
        a[0] += row[3 * x];
        a[1] += row[3 * x + 1];
        a[2] += row[3 * x + 2];
      }
    }
    for (int bx = 0; bx < w; ++bx) {
      const int xa = bx * factor, xb = std::min(src.width, xa + factor);
      const std::uint64_t n = static_cast<std::uint64_t>(xb - xa) * (yb - ya);
      for (int c = 0; c < 3; ++c) {
        out.pixels[(static_cast<std::size_t>(by) * w + bx) * 3 + c] =
            static_cast<std::uint8_t>((acc[bx * 3 + c] + n / 2) / n);
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> to_gray(const Image& src) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(src.width) * src.height);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = 0.299 * src.pixels[3 * i] + 0.587 * src.pixels[3 * i + 1] + 0.114 * src.pixels[3 * i + 2];
    out[i] = static_cast<std::uint8_t>(std::lround(v));
  }
  return out;
}

Tensor to_tensor(const Image& src) {
  const std::size_t plane = static_cast<std::size_t>(src.width) * src.height;
  std::vector<float> data(plane * 3);
  constexpr float inv = 1.0f / 255.0f;
  for (std::size_t i = 0; i < plane; ++i) {
    data[i] = src.pixels[3 * i] * inv;
    data[plane + i] = src.pixels[3 * i + 1] * inv;
    data[2 * plane + i] = src.pixels[3 * i + 2] * inv;
  }
  return Tensor({3, src.height, src.width}, std::move(data));
}

void write_png(const std::filesystem::path& path, const Image& img) {
  png_image info;
  std::memset(&info, 0, sizeof info);
  info.version = PNG_IMAGE_VERSION;
  info.width = static_cast<png_uint_32>(img.width);
  info.height = static_cast<png_uint_32>(img.height);
  info.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&info, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    const std::string msg = info.message;
    png_image_free(&info);
    throw std::runtime_error("cannot write " + path.string() + ": " + msg);
  }
}

Image read_png(const std::filesystem::path& path) {
  png_image info;
  std::memset(&info, 0, sizeof info);
  info.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&info, path.c_str())) {
    throw std::runtime_error("cannot read " + path.string() + ": " + info.message);
  }
  info.format = PNG_FORMAT_RGB;
  Image img(static_cast<int>(info.width), static_cast<int>(info.height));
  if (!png_image_finish_read(&info, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = info.message;
    png_image_free(&info);
    throw std::runtime_error("cannot decode " + path.string() + ": " + msg);
  }
  return img;
}

}  // namespace yolco
