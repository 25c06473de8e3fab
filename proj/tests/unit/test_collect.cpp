#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <tuple>

#include "doctest.h"
#include "yolco/collect.hpp"
#include "yolco/rng.hpp"

using namespace yolco;

namespace {

std::vector<Candidate> random_candidates(Rng& rng, int m, double extent) {
  std::vector<Candidate> c(m);
  for (auto& x : c) {
    // Coarse probabilities force ties.
    x.prob = static_cast<float>(std::round(uniform01(rng) * 10) / 10);
    x.box = {uniform(rng, 0, extent), uniform(rng, 0, extent), uniform(rng, 4, 30), uniform(rng, 4, 30)};
  }
  return c;
}

bool before(const std::vector<Candidate>& c, std::size_t a, std::size_t b) {
  return c[a].prob > c[b].prob || (c[a].prob == c[b].prob && a < b);
}

std::vector<std::size_t> topn_oracle(const std::vector<Candidate>& c, int n, double d) {
  std::vector<std::size_t> kept;
  std::vector<bool> gone(c.size(), false);
  while (static_cast<int>(kept.size()) < n) {
    std::ptrdiff_t best = -1;
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (gone[i]) continue;
      bool far = true;
      for (auto k : kept) far = far && std::hypot(c[i].box.cx - c[k].box.cx, c[i].box.cy - c[k].box.cy) >= d;
      if (!far) {
        gone[i] = true;
        continue;
      }
      if (best < 0 || before(c, i, static_cast<std::size_t>(best))) best = static_cast<std::ptrdiff_t>(i);
    }
    if (best < 0) break;
    kept.push_back(static_cast<std::size_t>(best));
    gone[static_cast<std::size_t>(best)] = true;
  }
  return kept;
}

std::vector<std::size_t> bbox_oracle(const std::vector<Candidate>& c, int n, int per_box) {
  std::vector<std::size_t> all(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) all[i] = i;
  std::sort(all.begin(), all.end(), [&](auto a, auto b) { return before(c, a, b); });
  std::vector<std::size_t> out;
  for (int s = 0; s < std::min<int>(n, static_cast<int>(c.size())); ++s) {
    const auto& seed = c[all[s]].box;
    std::vector<std::size_t> inside;
    for (std::size_t i = 0; i < c.size(); ++i)
      if (c[i].box.cx >= seed.x0() && c[i].box.cx <= seed.x1() && c[i].box.cy >= seed.y0() && c[i].box.cy <= seed.y1())
        inside.push_back(i);
    std::sort(inside.begin(), inside.end(), [&](auto a, auto b) { return before(c, a, b); });
    for (int k = 0; k < std::min<int>(per_box, static_cast<int>(inside.size())); ++k) out.push_back(inside[k]);
  }
  return out;
}

YolcoConfig small_config() {
  YolcoConfig cfg;
  cfg.input_side = 64;
  cfg.anchors = AnchorSet{{{12, 12}, {20, 20}, {28, 28}}};
  return cfg;
}

}  // namespace

TEST_CASE("encode tiles") {
  SlideParams p;
  p.side = 256;
  p.lesion_count = 2;
  p.lesion_min = 16;
  p.lesion_max = 24;
  const auto slide = generate_synthetic_slide(9, p, "e");
  const YolcoModel model(small_config(), 3);
  const std::vector<Tile> tiles{{0, 0, 128}, {128, 0, 128}, {64, 128, 64}};
  const auto enc = encode_tiles(model, slide.pixels, tiles, p.palette.background);
  // n_a (h5 w5 + h4 w4) per tile.
  CHECK(enc.candidates.size() == 3 * (16 + 64) * 2 + 3 * (4 + 16));

  // Gather by pixel position of the anchor's grid point.
  for (std::size_t i = 0; i < enc.candidates.size(); i += 7) {
    const auto& c = enc.candidates[i];
    const auto& tf = enc.tiles[c.tile];
    const int stride = c.scale == 5 ? 32 : 16;
    const auto w = (c.scale == 5 ? tf.scale5 : tf.scale4).dim(2);
    const double px = (static_cast<double>(c.cell % w) + 0.5) * stride;
    const double py = (static_cast<double>(c.cell / w) + 0.5) * stride;
    const auto v = gather_feature(enc, c);
    REQUIRE(v.size() == kFeatureDim);
    const auto x5 = static_cast<std::int64_t>(px / 32), y5 = static_cast<std::int64_t>(py / 32);
    const auto x4 = static_cast<std::int64_t>(px / 16), y4 = static_cast<std::int64_t>(py / 16);
    const auto h5 = tf.scale5.dim(1), w5 = tf.scale5.dim(2), h4 = tf.scale4.dim(1), w4 = tf.scale4.dim(2);
    for (int k = 0; k < 512; k += 37) CHECK(v[k] == tf.scale5.data()[(k * h5 + y5) * w5 + x5]);
    for (int k = 0; k < 256; k += 29) CHECK(v[512 + k] == tf.scale4.data()[(k * h4 + y4) * w4 + x4]);
  }

  // Scale-4 cell (r, c) reads scale-5 cell (r / 2, c / 2).
  Candidate c4{0.5f, {}, 0, 4, 3 * 8 + 5, 0};
  const auto v = gather_feature(enc, c4);
  CHECK(v[10] == enc.tiles[0].scale5.data()[(10 * 4 + 1) * 4 + 2]);

  // Per-tile computation does not depend on traversal order.
  const std::vector<Tile> reversed(tiles.rbegin(), tiles.rend());
  const auto rev = encode_tiles(model, slide.pixels, reversed, p.palette.background);
  std::map<std::tuple<int, int, int, std::int64_t, int>, std::vector<float>> a, b;
  for (const auto& c : enc.candidates)
    a[{tiles[c.tile].x0, tiles[c.tile].y0, c.scale, c.cell, c.anchor}] = gather_feature(enc, c);
  for (const auto& c : rev.candidates)
    b[{reversed[c.tile].x0, reversed[c.tile].y0, c.scale, c.cell, c.anchor}] = gather_feature(rev, c);
  CHECK(a == b);
}

TEST_CASE("full tile candidate count") {
  const YolcoModel model(YolcoConfig{}, 1);
  const Image slide(1024, 1024, {200, 180, 190});
  const std::vector<Tile> tiles{{0, 0, 1024}};
  CHECK(encode_tiles(model, slide, tiles, {242, 240, 238}).candidates.size() == 15360);
}

TEST_CASE("top-n collection") {
  std::vector<Candidate> two(2);
  two[0].prob = 0.9f;
  two[0].box = {100, 100, 10, 10};
  two[1].prob = 0.8f;
  two[1].box = {103, 104, 10, 10};
  CHECK(select_topn(two, 2, 10.0) == std::vector<std::size_t>{0});
  CHECK(select_topn(two, 2, 0.0) == std::vector<std::size_t>{0, 1});
  CHECK_THROWS_AS(select_topn(std::vector<Candidate>{}, 2, 0.0), std::invalid_argument);

  Rng rng(21);
  for (int trial = 0; trial < 300; ++trial) {
    const auto c = random_candidates(rng, 5 + static_cast<int>(uniform_index(rng, 60)), 200);
    const int n = 1 + static_cast<int>(uniform_index(rng, 20));
    const double d = uniform01(rng) < 0.2 ? 0.0 : uniform(rng, 1, 60);
    const auto got = select_topn(c, n, d);
    CHECK(got == topn_oracle(c, n, d));
    for (std::size_t i = 1; i < got.size(); ++i) CHECK(c[got[i]].prob <= c[got[i - 1]].prob);
  }
}

TEST_CASE("bbox collection") {
  std::vector<Candidate> lone(2);
  lone[0].prob = 0.9f;
  lone[0].box = {50, 50, 10, 10};
  lone[1].prob = 0.1f;
  lone[1].box = {150, 150, 10, 10};
  CHECK(select_bbox(lone, 1, 10) == std::vector<std::size_t>{0});

  std::vector<Candidate> crowd(15);
  for (int i = 0; i < 15; ++i) {
    crowd[i].prob = 1.0f - 0.01f * i;
    crowd[i].box = {100.0 + i, 100.0, i == 0 ? 60.0 : 5.0, i == 0 ? 60.0 : 5.0};
  }
  CHECK(select_bbox(crowd, 1, 10).size() == 10);

  Rng rng(8);
  for (int trial = 0; trial < 300; ++trial) {
    const auto c = random_candidates(rng, 5 + static_cast<int>(uniform_index(rng, 60)), 120);
    const int n = 1 + static_cast<int>(uniform_index(rng, 8));
    const int per = 1 + static_cast<int>(uniform_index(rng, 10));
    CHECK(select_bbox(c, n, per) == bbox_oracle(c, n, per));
  }
}

TEST_CASE("feature sequences") {
  SlideParams p;
  p.side = 128;
  p.lesion_count = 1;
  p.lesion_min = 16;
  p.lesion_max = 20;
  const auto slide = generate_synthetic_slide(4, p, "f");
  const YolcoModel model(small_config(), 3);
  const std::vector<Tile> tiles{{0, 0, 64}, {64, 0, 64}, {0, 64, 64}, {64, 64, 64}};
  const auto enc = encode_tiles(model, slide.pixels, tiles, p.palette.background);
  CollectionConfig cfg;
  cfg.n = 12;
  const auto seq = collect(enc, cfg, "f", 1);
  CHECK(seq.rows.size() == 12);
  for (std::size_t i = 1; i < seq.rows.size(); ++i) CHECK(seq.rows[i].prob <= seq.rows[i - 1].prob);
  cfg.mode = CollectMode::bbox;
  cfg.n = 3;
  CHECK(collect(enc, cfg, "f", 1).rows.size() <= 30);

  const auto dets = wsi_detections(seq, 0.5);
  std::vector<Detection> raw;
  for (const auto& r : seq.rows) raw.push_back({r.box, r.prob, -1, -1});
  const auto keep = nms(raw, 0.5);
  REQUIRE(dets.size() == keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i) CHECK(dets[i].box == raw[keep[i]].box);
  FeatureSequence one{"x", 0, 1, {seq.rows[0]}};
  CHECK(wsi_detections(one).size() == 1);

  const auto dir = std::filesystem::temp_directory_path() / "yolco_seq";
  std::filesystem::create_directories(dir);
  write_feature_sequence(dir / "f.seq", seq);
  const auto back = read_feature_sequence(dir / "f.seq");
  CHECK(back.slide_id == "f");
  CHECK(back.label == 1);
  REQUIRE(back.rows.size() == seq.rows.size());
  CHECK(back.rows[3].feature == seq.rows[3].feature);
  CHECK(back.rows[3].prob == seq.rows[3].prob);
  write_feature_sequence_csv(dir / "f.csv", std::vector<FeatureSequence>{seq});
  CHECK(std::filesystem::file_size(dir / "f.csv") > 0);
  std::filesystem::remove_all(dir);
}
