#include <cmath>

#include "doctest.h"
#include "yolco/detector_train.hpp"

using namespace yolco;

namespace {

PatchSample square_sample(int side, std::vector<Box> boxes) {
  PatchSample s{Image(side, side, {240, 240, 240}), {}};
  for (const auto& b : boxes) {
    for (int y = static_cast<int>(b.y0()); y < static_cast<int>(b.y1()); ++y)
      for (int x = static_cast<int>(b.x0()); x < static_cast<int>(b.x1()); ++x) s.image.set(x, y, {60, 20, 80});
    s.annotations.push_back({b, 1});
  }
  return s;
}

YolcoConfig small_config() {
  YolcoConfig cfg;
  cfg.input_side = 64;
  cfg.anchors = AnchorSet{{{12, 12}, {20, 20}, {28, 28}}};
  return cfg;
}

std::vector<PatchSample> five_samples() {
  return {square_sample(64, {{20, 20, 16, 16}}), square_sample(64, {{40, 30, 20, 12}}),
          square_sample(64, {{16, 44, 12, 12}, {46, 46, 14, 14}}), square_sample(64, {}),
          square_sample(64, {{32, 32, 24, 24}})};
}

}  // namespace

TEST_CASE("clip annotations") {
  const std::vector<Annotation> anns{{{10, 10, 8, 8}, 1}, {{2, 5, 8, 4}, 1}, {{70, 5, 4, 4}, 1}};
  const auto c = clip_annotations(anns, 0, 0, 64, 64);
  REQUIRE(c.size() == 2);
  CHECK(c[1].box == Box{3, 5, 6, 4});
  const auto shifted = clip_annotations(anns, 8, 8, 16, 16);
  REQUIRE(shifted.size() == 1);
  CHECK(shifted[0].box == Box{3, 3, 6, 6});
}

TEST_CASE("augmentation keeps pixels and boxes aligned") {
  DetectorTrainConfig cfg;
  cfg.aug_prob = 0.0;
  Rng rng(3);
  const auto base = square_sample(96, {{30, 40, 20, 20}, {70, 60, 12, 16}});
  auto same = augment_patch(base, cfg, rng);
  CHECK(same.image.pixels == base.image.pixels);

  cfg.aug_prob = 1.0;
  cfg.shift = 0.2;
  for (int i = 0; i < 200; ++i) {
    const auto a = augment_patch(base, cfg, rng);
    CHECK(a.image.width == 96);
    CHECK(a.image.height == 96);
    for (const auto& ann : a.annotations) {
      const auto px = a.image.at(static_cast<int>(ann.box.cx), static_cast<int>(ann.box.cy));
      CHECK(px.r < 120);
      CHECK(ann.box.x0() >= 0);
      CHECK(ann.box.x1() <= 96);
    }
  }
}

TEST_CASE("patch extraction") {
  SlideParams p;
  p.side = 512;
  p.lesion_count = 3;
  p.lesion_min = 20;
  p.lesion_max = 30;
  const auto slide = generate_synthetic_slide(2, p, "s");
  const auto fg = foreground_mask(make_thumbnail(slide.pixels, 3), 3);
  Rng rng(1);
  const auto patches = extract_patches(slide.pixels, slide.manifest.annotations, fg, 128, 4, {242, 240, 238}, rng);
  CHECK(patches.size() == 7);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(patches[i].image.width == 128);
    CHECK(!patches[i].annotations.empty());
  }
}

TEST_CASE("detector smoke run") {
  const auto samples = five_samples();
  DetectorTrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 5;
  cfg.aug_prob = 0.0;
  cfg.lr0 = 1e-4;
  cfg.lr_min = 1e-4;
  cfg.seed = 4;

  YolcoModel model(small_config(), 7);
  const auto result = train_detector(model, samples, {}, cfg);
  REQUIRE(result.log.size() == 10);
  // Full-batch steps: each logged loss is measured before that epoch's update.
  // Three-step moving average, since Adam's first steps may overshoot.
  std::vector<double> smooth;
  for (std::size_t i = 2; i < result.log.size(); ++i)
    smooth.push_back((result.log[i].loss_total + result.log[i - 1].loss_total + result.log[i - 2].loss_total) / 3);
  for (std::size_t i = 1; i < smooth.size(); ++i) CHECK(smooth[i] < smooth[i - 1]);
  CHECK(result.log.back().loss_total < 0.5 * result.log.front().loss_total);
  CHECK(result.best_epoch == 10);

  YolcoModel again(small_config(), 7);
  const auto repeat = train_detector(again, samples, {}, cfg);
  for (std::size_t i = 0; i < result.log.size(); ++i) CHECK(repeat.log[i].loss_total == result.log[i].loss_total);

  // Best copy must not alias the live model.
  CHECK(result.best.named_parameters()[0].second.impl() != model.named_parameters()[0].second.impl());

  cfg.epochs = 3;
  cfg.weights.mode = LossMode::cls_only;
  YolcoModel yoco(small_config(), 7);
  const YolcoModel before = yoco.clone();
  const auto cls = train_detector(yoco, samples, samples, cfg);
  CHECK(cls.log.front().loss_box == 0.0);
  bool box_unchanged = true, cls_changed = false;
  for (std::size_t i = 0; i < before.named_parameters().size(); ++i) {
    const auto& [name, t0] = before.named_parameters()[i];
    const auto d0 = t0.data(), d1 = yoco.named_parameters()[i].second.data();
    const bool same = std::equal(d0.begin(), d0.end(), d1.begin());
    if (name.find(".box") != std::string::npos) box_unchanged = box_unchanged && same;
    if (name.find(".cls") != std::string::npos) cls_changed = cls_changed || !same;
  }
  CHECK(box_unchanged);
  CHECK(cls_changed);
  CHECK_THROWS_AS(train_detector(yoco, {}, {}, cfg), std::invalid_argument);
}
