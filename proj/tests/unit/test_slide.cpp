#include <algorithm>
#include <filesystem>

#include "doctest.h"
#include "yolco/rng.hpp"
#include "yolco/slide.hpp"

using namespace yolco;

namespace {

int otsu_oracle(const std::vector<std::uint64_t>& h) {
  int best_t = 0;
  double best = -1;
  for (int t = 0; t < 256; ++t) {
    double w0 = 0, w1 = 0, s0 = 0, s1 = 0;
    for (int v = 0; v < t; ++v) w0 += h[v], s0 += double(v) * h[v];
    for (int v = t; v < 256; ++v) w1 += h[v], s1 += double(v) * h[v];
    double between = 0;
    if (w0 > 0 && w1 > 0) between = w0 * w1 * (s0 / w0 - s1 / w1) * (s0 / w0 - s1 / w1);
    if (between > best) best = between, best_t = t;
  }
  if (best == 0) return static_cast<int>(std::find_if(h.begin(), h.end(), [](auto c) { return c > 0; }) - h.begin());
  return best_t;
}

// Checks exact partition of the foreground pixels by the tiles.
void check_partition(const ForegroundMask& fg, int side, const std::vector<Tile>& tiles) {
  std::vector<std::uint8_t> hits(static_cast<std::size_t>(side) * side, 0);
  for (const auto& t : tiles)
    for (int y = std::max(0, t.y0); y < std::min(side, t.y0 + t.side); ++y)
      for (int x = std::max(0, t.x0); x < std::min(side, t.x0 + t.side); ++x) ++hits[y * side + x];
  std::int64_t uncovered = 0, doubled = 0;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      doubled += hits[y * side + x] > 1;
      uncovered += fg.covers(x, y) && hits[y * side + x] == 0;
    }
  CHECK(uncovered == 0);
  CHECK(doubled == 0);
}

}  // namespace

TEST_CASE("synthetic slides") {
  SlideParams p;
  p.side = 512;
  p.lesion_count = 0;
  const auto neg = generate_synthetic_slide(3, p, "n");
  CHECK(neg.manifest.label == 0);
  CHECK(neg.manifest.annotations.empty());

  p.lesion_count = 4;
  p.lesion_min = 20;
  p.lesion_max = 40;
  const auto a = generate_synthetic_slide(5, p, "a");
  const auto b = generate_synthetic_slide(5, p, "a");
  CHECK(a.pixels.pixels == b.pixels.pixels);
  CHECK(a.manifest.label == 1);
  REQUIRE(a.manifest.annotations.size() == 4);
  const auto gray = to_gray(a.pixels);
  for (const auto& ann : a.manifest.annotations) {
    // Box corners sit inside the stained disc, well below background brightness.
    for (double dx : {-0.5, 0.5})
      for (double dy : {-0.5, 0.5}) {
        const int x = static_cast<int>(ann.box.cx + dx * ann.box.w), y = static_cast<int>(ann.box.cy + dy * ann.box.h);
        CHECK(gray[y * 512 + x] < 225);
      }
  }
  CHECK(generate_synthetic_slide(6, p, "c").pixels.pixels != a.pixels.pixels);

  const auto json = a.manifest.to_json();
  const auto back = SlideManifest::from_json(json);
  CHECK(back.to_json() == json);
}

TEST_CASE("otsu threshold") {
  std::vector<std::uint64_t> h(256, 0);
  h[50] = 100;
  h[200] = 100;
  const int t = otsu_threshold(h);
  CHECK(t > 50);
  CHECK(t <= 200);

  std::vector<std::uint64_t> uniform_hist(256, 7);
  CHECK(otsu_threshold(uniform_hist) == otsu_oracle(uniform_hist));
  const int u = otsu_threshold(uniform_hist);
  CHECK((u == 127 || u == 128));

  std::vector<std::uint64_t> single(256, 0);
  single[77] = 9;
  CHECK(otsu_threshold(single) == 77);
  CHECK_THROWS(otsu_threshold(std::vector<std::uint64_t>(256, 0)));

  Rng rng(40);
  for (int i = 0; i < 100; ++i) {
    std::vector<std::uint64_t> r(256, 0);
    const int spikes = 1 + static_cast<int>(uniform_index(rng, 12));
    for (int k = 0; k < spikes; ++k) r[uniform_index(rng, 256)] += 1 + uniform_index(rng, 50);
    CHECK(otsu_threshold(r) == otsu_oracle(r));
  }
}

TEST_CASE("tiling") {
  ForegroundMask full;
  full.width = full.height = 16;
  full.factor = 256;
  full.mask.assign(256, 1);
  const auto tiles = tile_slide(full, 4096, 4096, 1024);
  CHECK(tiles.size() == 16);
  CHECK(tiles.front() == Tile{1024, 1024, 1024});
  CHECK_THROWS_AS(tile_slide(full, 4096, 4096, 8192), std::invalid_argument);
  CHECK_THROWS_AS(tile_slide(full, 4096, 4096, 1000), std::invalid_argument);

  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    SlideParams p;
    p.side = 256;
    p.cell_density = 1.0;
    p.lesion_min = 10;
    p.lesion_max = 20;
    p.lesion_count = static_cast<int>(seed % 3);
    const auto s = generate_synthetic_slide(seed, p, "t");
    const int level = 3;
    const auto fg = foreground_mask(make_thumbnail(s.pixels, level), level);
    CHECK(fg.count() > 0);
    const auto t = tile_slide(fg, 256, 256, 64);
    CHECK(!t.empty());
    check_partition(fg, 256, t);
    const auto t96 = tile_slide(fg, 256, 256, 96);
    check_partition(fg, 256, t96);
  }
}

TEST_CASE("image helpers") {
  Image img(5, 4, {10, 20, 30});
  img.set(1, 1, {200, 100, 50});
  const auto c = crop(img, -1, -1, 4, 4, {1, 2, 3});
  CHECK(c.at(0, 0) == Rgb{1, 2, 3});
  CHECK(c.at(2, 2) == Rgb{200, 100, 50});
  CHECK(c.at(1, 1) == Rgb{10, 20, 30});

  const auto small = downsample_area(Image(8, 8, {100, 100, 100}), 4);
  CHECK(small.width == 2);
  CHECK(small.at(1, 1) == Rgb{100, 100, 100});
  const auto same = resize_bilinear(img, 5, 4);
  CHECK(same.pixels == img.pixels);

  const auto t = to_tensor(img);
  CHECK(t.shape() == Shape{3, 4, 5});
  CHECK(t.data()[1 * 5 + 1] == doctest::Approx(200 / 255.0));

  const auto dir = std::filesystem::temp_directory_path() / "yolco_png";
  std::filesystem::create_directories(dir);
  write_png(dir / "x.png", img);
  CHECK(read_png(dir / "x.png").pixels == img.pixels);
  std::filesystem::remove_all(dir);
}
