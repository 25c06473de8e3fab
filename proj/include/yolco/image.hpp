#pragma once

// 8-bit interleaved RGB raster plus the conversions the detector needs.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "yolco/tensor.hpp"

namespace yolco {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB

  Image() = default;
  Image(int w, int h, Rgb fill = {});

  Rgb at(int x, int y) const {
    const auto i = (static_cast<std::size_t>(y) * width + x) * 3;
    return {pixels[i], pixels[i + 1], pixels[i + 2]};
  }
  void set(int x, int y, Rgb c) {
    const auto i = (static_cast<std::size_t>(y) * width + x) * 3;
    pixels[i] = c.r;
    pixels[i + 1] = c.g;
    pixels[i + 2] = c.b;
  }
  bool empty() const { return pixels.empty(); }
};

/// Window [x0, x0 + w) x [y0, y0 + h); pixels outside the source take `fill`.
Image crop(const Image& src, int x0, int y0, int w, int h, Rgb fill);

/// Bilinear resampling with pixel-center alignment.
Image resize_bilinear(const Image& src, int w, int h);

/// Mean of each factor x factor block (edge blocks average what exists).
Image downsample_area(const Image& src, int factor);

/// Rec. 601 luma, rounded.
std::vector<std::uint8_t> to_gray(const Image& src);

/// [3, H, W] with values in [0, 1].
Tensor to_tensor(const Image& src);

void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

}  // namespace yolco
