#pragma once

// Slides: synthetic generation, OTSU foreground on a low-resolution
// thumbnail, and center-outward tiling.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "yolco/geometry.hpp"
#include "yolco/image.hpp"

namespace yolco {

struct StainPalette {
  Rgb background{242, 240, 238};
  Rgb cytoplasm{226, 198, 214};
  Rgb benign{184, 140, 192};
  Rgb benign_nucleus{128, 86, 156};
  Rgb lesion{104, 44, 120};
  Rgb lesion_nucleus{52, 18, 70};
};

struct SlideParams {
  int side = 2048;
  double cell_density = 2.0;  // benign cells per 100 x 100 px of foreground
  int lesion_count = 0;
  double lesion_min = 36.0;   // lesion box side range, px
  double lesion_max = 72.0;
  double benign_min = 10.0;   // benign cell diameter range, px
  double benign_max = 24.0;
  double noise = 6.0;         // per-channel uniform pixel noise amplitude
  StainPalette palette;

  nlohmann::json to_json() const;
  static SlideParams from_json(const nlohmann::json& j);
};

struct Tile {
  int x0 = 0;
  int y0 = 0;
  int side = 0;
  bool operator==(const Tile&) const = default;
};

struct SlideManifest {
  std::string id;
  std::string pixel_path;      // relative to the manifest's directory
  std::string thumbnail_path;
  int width = 0;
  int height = 0;
  int thumbnail_level = 8;     // thumbnail scale 1 / 2^level
  int label = 0;               // 1 = positive diagnosis
  std::vector<Annotation> annotations;
  int tile_side = 0;
  std::vector<Tile> tiles;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static SlideManifest from_json(const nlohmann::json& j);
};

struct SyntheticSlide {
  SlideManifest manifest;
  Image pixels;
};

/// Bright background, a stained disc of benign cells and, when
/// params.lesion_count > 0, that many dark lesion ellipses fully inside the
/// disc. Deterministic in `seed`.
SyntheticSlide generate_synthetic_slide(std::uint64_t seed, const SlideParams& params, std::string id);

/// Split maximizing between-class variance; classes are values < t and
/// values >= t. Ties resolve to the lowest t. A single-valued histogram
/// returns that value. Throws on an empty histogram.
int otsu_threshold(std::span<const std::uint64_t> histogram);

struct ForegroundMask {
  int width = 0;   // thumbnail extents
  int height = 0;
  int factor = 1;  // slide pixels per thumbnail pixel
  int threshold = 0;
  std::vector<std::uint8_t> mask;  // 1 = foreground

  bool at(int x, int y) const { return mask[static_cast<std::size_t>(y) * width + x] != 0; }
  /// Foreground status of a full-resolution slide pixel.
  bool covers(int px, int py) const { return at(px / factor, py / factor); }
  std::int64_t count() const;
};

Image make_thumbnail(const Image& slide, int level);

/// OTSU on the thumbnail gray levels; foreground is the darker class.
ForegroundMask foreground_mask(const Image& thumbnail, int level);

/// Tiles of `tile_side` stepping by tile_side - overlap from the foreground
/// bounding box origin until the box is covered; tiles touching no
/// foreground are dropped. Ordered by distance from the tile center to the
/// foreground centroid, ties by (row, column).
std::vector<Tile> tile_slide(const ForegroundMask& fg, int slide_width, int slide_height, int tile_side,
                             int overlap = 0);

/// Tile pixels; anything outside the slide is background.
Image read_tile(const Image& slide, const Tile& tile, Rgb background);

void write_manifest(const std::filesystem::path& path, const SlideManifest& manifest);
SlideManifest read_manifest(const std::filesystem::path& path);

}  // namespace yolco
