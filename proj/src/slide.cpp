#include "yolco/slide.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "yolco/rng.hpp"

namespace yolco {

namespace {

nlohmann::json rgb_json(Rgb c) { return {c.r, c.g, c.b}; }

Rgb rgb_from(const nlohmann::json& j) {
  return {j.at(0).get<std::uint8_t>(), j.at(1).get<std::uint8_t>(), j.at(2).get<std::uint8_t>()};
}

std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

Rgb jitter(Rgb c, Rng& rng, double amount) {
  const double d = uniform(rng, -amount, amount);
  return {clamp_byte(c.r + d), clamp_byte(c.g + d), clamp_byte(c.b + d)};
}

// Axis-aligned ellipse, soft-edged over one pixel.
void fill_ellipse(Image& img, double cx, double cy, double rx, double ry, Rgb color) {
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - rx - 1)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(cx + rx + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - ry - 1)));
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(cy + ry + 1)));
  const double rmin = std::min(rx, ry);
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
      const double dist = (std::sqrt(dx * dx + dy * dy) - 1.0) * rmin;  // approx px outside the rim
      if (dist >= 0.5) continue;
      const double a = dist <= -0.5 ? 1.0 : 0.5 - dist;
      const Rgb old = img.at(x, y);
      img.set(x, y, {clamp_byte(old.r + a * (color.r - old.r)), clamp_byte(old.g + a * (color.g - old.g)),
                     clamp_byte(old.b + a * (color.b - old.b))});
    }
  }
}

}  // namespace

nlohmann::json SlideParams::to_json() const {
  return {{"side", side},
          {"cell_density", cell_density},
          {"lesion_count", lesion_count},
          {"lesion_min", lesion_min},
          {"lesion_max", lesion_max},
          {"benign_min", benign_min},
          {"benign_max", benign_max},
          {"noise", noise},
          {"palette",
           {{"background", rgb_json(palette.background)},
            {"cytoplasm", rgb_json(palette.cytoplasm)},
            {"benign", rgb_json(palette.benign)},
            {"benign_nucleus", rgb_json(palette.benign_nucleus)},
            {"lesion", rgb_json(palette.lesion)},
            {"lesion_nucleus", rgb_json(palette.lesion_nucleus)}}}};
}

SlideParams SlideParams::from_json(const nlohmann::json& j) {
  SlideParams p;
  p.side = j.value("side", p.side);
  p.cell_density = j.value("cell_density", p.cell_density);
  p.lesion_count = j.value("lesion_count", p.lesion_count);
  p.lesion_min = j.value("lesion_min", p.lesion_min);
  p.lesion_max = j.value("lesion_max", p.lesion_max);
  p.benign_min = j.value("benign_min", p.benign_min);
  p.benign_max = j.value("benign_max", p.benign_max);
  p.noise = j.value("noise", p.noise);
  if (j.contains("palette")) {
    const auto& q = j.at("palette");
    auto get = [&](const char* key, Rgb& out) {
      if (q.contains(key)) out = rgb_from(q.at(key));
    };
    get("background", p.palette.background);
    get("cytoplasm", p.palette.cytoplasm);
    get("benign", p.palette.benign);
    get("benign_nucleus", p.palette.benign_nucleus);
    get("lesion", p.palette.lesion);
    get("lesion_nucleus", p.palette.lesion_nucleus);
  }
  return p;
}

nlohmann::json SlideManifest::to_json() const {
  nlohmann::json anns = nlohmann::json::array();
  for (const auto& a : annotations) {
    anns.push_back({{"cx", a.box.cx}, {"cy", a.box.cy}, {"w", a.box.w}, {"h", a.box.h}, {"label", a.label}});
  }
  nlohmann::json tl = nlohmann::json::array();
  for (const auto& t : tiles) tl.push_back({{"x", t.x0}, {"y", t.y0}, {"side", t.side}});
  return {{"id", id},
          {"pixel_path", pixel_path},
          {"thumbnail_path", thumbnail_path},
          {"width", width},
          {"height", height},
          {"thumbnail_level", thumbnail_level},
          {"label", label == 1 ? "positive" : "negative"},
          {"annotations", anns},
          {"tile_side", tile_side},
          {"tiles", tl},
          {"seed", seed}};
}

SlideManifest SlideManifest::from_json(const nlohmann::json& j) {
  SlideManifest m;
  m.id = j.at("id").get<std::string>();
  m.pixel_path = j.value("pixel_path", "");
  m.thumbnail_path = j.value("thumbnail_path", "");
  m.width = j.at("width").get<int>();
  m.height = j.at("height").get<int>();
  m.thumbnail_level = j.value("thumbnail_level", 8);
  m.label = j.at("label").get<std::string>() == "positive" ? 1 : 0;
  for (const auto& a : j.value("annotations", nlohmann::json::array())) {
    m.annotations.push_back({{a.at("cx").get<double>(), a.at("cy").get<double>(), a.at("w").get<double>(),
                              a.at("h").get<double>()},
                             a.value("label", 1)});
  }
  m.tile_side = j.value("tile_side", 0);
  for (const auto& t : j.value("tiles", nlohmann::json::array())) {
    m.tiles.push_back({t.at("x").get<int>(), t.at("y").get<int>(), t.at("side").get<int>()});
  }
  m.seed = j.value("seed", std::uint64_t{0});
  return m;
}

SyntheticSlide generate_synthetic_slide(std::uint64_t seed, const SlideParams& params, std::string id) {
  if (params.side < 64) throw std::invalid_argument("generate_synthetic_slide: side must be >= 64");
  if (params.lesion_count < 0) throw std::invalid_argument("generate_synthetic_slide: negative lesion count");
  if (!(params.lesion_min > 0 && params.lesion_max >= params.lesion_min)) {
    throw std::invalid_argument("generate_synthetic_slide: invalid lesion size range");
  }
  Rng rng = make_rng(seed, "slide.layout");
  const int side = params.side;
  const auto& pal = params.palette;
  SyntheticSlide out;
  Image& img = out.pixels;
  img = Image(side, side, pal.background);

  const double cx = side * uniform(rng, 0.47, 0.53), cy = side * uniform(rng, 0.47, 0.53);
  const double radius = side * uniform(rng, 0.40, 0.45);
  fill_ellipse(img, cx, cy, radius, radius, jitter(pal.cytoplasm, rng, 6));

  auto point_in_disc = [&](double margin) {
    while (true) {
      const double x = uniform(rng, cx - radius, cx + radius), y = uniform(rng, cy - radius, cy + radius);
      if (std::hypot(x - cx, y - cy) <= radius - margin) return std::pair{x, y};
    }
  };

  const double disc_area = M_PI * radius * radius;
  const auto benign = static_cast<int>(params.cell_density * disc_area / 1e4);
  for (int i = 0; i < benign; ++i) {
    const double d = uniform(rng, params.benign_min, params.benign_max);
    const double rx = 0.5 * d * uniform(rng, 0.8, 1.2), ry = 0.5 * d * uniform(rng, 0.8, 1.2);
    const auto [x, y] = point_in_disc(std::max(rx, ry));
    fill_ellipse(img, x, y, rx, ry, jitter(pal.benign, rng, 10));
    fill_ellipse(img, x + uniform(rng, -0.2, 0.2) * rx, y + uniform(rng, -0.2, 0.2) * ry, 0.35 * rx, 0.35 * ry,
                 jitter(pal.benign_nucleus, rng, 10));
  }

  for (int i = 0; i < params.lesion_count; ++i) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const double w = uniform(rng, params.lesion_min, params.lesion_max);
      const double h = uniform(rng, params.lesion_min, params.lesion_max);
      const auto [x, y] = point_in_disc(0.5 * std::hypot(w, h) + 2.0);
      const Box box{x, y, w, h};
      const bool clash = std::any_of(out.manifest.annotations.begin(), out.manifest.annotations.end(),
                                     [&](const Annotation& a) { return box_iou(a.box, box) > 0.0; });
      if (clash) continue;
      fill_ellipse(img, x, y, 0.5 * w, 0.5 * h, jitter(pal.lesion, rng, 8));
      const int nuclei = 1 + static_cast<int>(uniform_index(rng, 3));
      for (int k = 0; k < nuclei; ++k) {
        fill_ellipse(img, x + uniform(rng, -0.2, 0.2) * w, y + uniform(rng, -0.2, 0.2) * h, 0.16 * w, 0.16 * h,
                     jitter(pal.lesion_nucleus, rng, 8));
      }
      out.manifest.annotations.push_back({box, 1});
      break;
    }
  }

  if (params.noise > 0) {
    const std::uint64_t noise_seed = derive_seed(seed, "slide.noise");
    const double amp = params.noise;
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      const std::uint64_t h = splitmix64(noise_seed ^ (i * 0x9e3779b97f4a7c15ULL));
      const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
      img.pixels[i] = clamp_byte(img.pixels[i] + (2 * u - 1) * amp);
    }
  }

  auto& m = out.manifest;
  m.id = std::move(id);
  m.width = side;
  m.height = side;
  m.label = m.annotations.empty() ? 0 : 1;
  m.seed = seed;
  return out;
}

int otsu_threshold(std::span<const std::uint64_t> histogram) {
  if (histogram.size() != 256) throw std::invalid_argument("otsu_threshold: need 256 bins");
  double total = 0, weighted = 0;
  int distinct = 0, only = 0;
  for (int v = 0; v < 256; ++v) {
    total += static_cast<double>(histogram[v]);
    weighted += static_cast<double>(v) * histogram[v];
    if (histogram[v] > 0) ++distinct, only = v;
  }
  if (total == 0) throw std::invalid_argument("otsu_threshold: empty histogram");
  if (distinct == 1) return only;
  int best_t = 0;
  double best = -1.0;
  double w0 = 0, s0 = 0;
  for (int t = 0; t < 256; ++t) {
    // class 0 = values < t
    const double w1 = total - w0;
    double between = 0.0;
    if (w0 > 0 && w1 > 0) {
      const double m0 = s0 / w0, m1 = (weighted - s0) / w1;
      between = w0 * w1 * (m0 - m1) * (m0 - m1);
    }
    if (between > best) {
      best = between;
      best_t = t;
    }
    w0 += static_cast<double>(histogram[t]);
    s0 += static_cast<double>(t) * histogram[t];
  }
  return best_t;
}

std::int64_t ForegroundMask::count() const {
  return std::count(mask.begin(), mask.end(), std::uint8_t{1});
}

Image make_thumbnail(const Image& slide, int level) {
  if (level < 0 || level > 16) throw std::invalid_argument("make_thumbnail: level out of range");
  return downsample_area(slide, 1 << level);
}

ForegroundMask foreground_mask(const Image& thumbnail, int level) {
  ForegroundMask fg;
  fg.width = thumbnail.width;
  fg.height = thumbnail.height;
  fg.factor = 1 << level;
  const auto gray = to_gray(thumbnail);
  std::vector<std::uint64_t> hist(256, 0);
  for (auto v : gray) ++hist[v];
  fg.threshold = otsu_threshold(hist);
  fg.mask.resize(gray.size());
  for (std::size_t i = 0; i < gray.size(); ++i) fg.mask[i] = gray[i] < fg.threshold ? 1 : 0;
  return fg;
}

std::vector<Tile> tile_slide(const ForegroundMask& fg, int slide_width, int slide_height, int tile_side,
                             int overlap) {
  if (tile_side <= 0 || tile_side % 32 != 0) {
    throw std::invalid_argument("tile_slide: tile side must be a positive multiple of 32");
  }
  if (tile_side > slide_width || tile_side > slide_height) {
    throw std::invalid_argument("tile_slide: tile side exceeds the slide");
  }
  if (overlap < 0 || overlap >= tile_side) throw std::invalid_argument("tile_slide: overlap out of range");
  int bx0 = fg.width, by0 = fg.height, bx1 = -1, by1 = -1;
  double sx = 0, sy = 0;
  std::int64_t n = 0;
  for (int y = 0; y < fg.height; ++y)
    for (int x = 0; x < fg.width; ++x)
      if (fg.at(x, y)) {
        bx0 = std::min(bx0, x), bx1 = std::max(bx1, x);
        by0 = std::min(by0, y), by1 = std::max(by1, y);
        sx += (x + 0.5) * fg.factor, sy += (y + 0.5) * fg.factor;
        ++n;
      }
  if (n == 0) return {};
  const double gx = sx / n, gy = sy / n;
  // Foreground extent in slide pixels (thumbnail blocks are clipped to the slide).
  const int x_lo = bx0 * fg.factor, y_lo = by0 * fg.factor;
  const int x_hi = std::min(slide_width, (bx1 + 1) * fg.factor);
  const int y_hi = std::min(slide_height, (by1 + 1) * fg.factor);
  const int step = tile_side - overlap;

  struct Candidate {
    Tile tile;
    int row, col;
    double dist;
  };
  auto count = [&](int extent) { return 1 + std::max(0, (extent - tile_side + step - 1) / step); };
  const int rows = count(y_hi - y_lo), cols = count(x_hi - x_lo);
  std::vector<Candidate> kept;
  for (int row = 0; row < rows; ++row) {
    for (int col = 0; col < cols; ++col) {
      const int x = x_lo + col * step, y = y_lo + row * step;
      // Any foreground block intersecting [x, x + side) x [y, y + side)?
      const int tx0 = x / fg.factor, tx1 = std::min(fg.width - 1, (x + tile_side - 1) / fg.factor);
      const int ty0 = y / fg.factor, ty1 = std::min(fg.height - 1, (y + tile_side - 1) / fg.factor);
      bool any = false;
      for (int ty = ty0; ty <= ty1 && !any; ++ty)
        for (int tx = tx0; tx <= tx1 && !any; ++tx) any = fg.at(tx, ty);
      if (!any) continue;
      const double dx = x + 0.5 * tile_side - gx, dy = y + 0.5 * tile_side - gy;
      kept.push_back({{x, y, tile_side}, row, col, std::hypot(dx, dy)});
    }
  }
  std::stable_sort(kept.begin(), kept.end(), [](const Candidate& a, const Candidate& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
  std::vector<Tile> out;
  for (const auto& c : kept) out.push_back(c.tile);
  return out;
}

Image read_tile(const Image& slide, const Tile& tile, Rgb background) {
  return crop(slide, tile.x0, tile.y0, tile.side, tile.side, background);
}

void write_manifest(const std::filesystem::path& path, const SlideManifest& manifest) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << manifest.to_json().dump(2) << '\n';
}

SlideManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return SlideManifest::from_json(nlohmann::json::parse(is));
}

}  // namespace yolco
