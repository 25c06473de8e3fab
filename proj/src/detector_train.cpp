#include "yolco/detector_train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "yolco/optim.hpp"

namespace yolco {

std::vector<Annotation> clip_annotations(std::span<const Annotation> annotations, double x0, double y0, int w,
                                         int h) {
  std::vector<Annotation> out;
  for (const auto& a : annotations) {
    const double cx = a.box.cx - x0, cy = a.box.cy - y0;
    if (cx < 0 || cy < 0 || cx >= w || cy >= h) continue;
    const double l = std::max(0.0, cx - 0.5 * a.box.w), r = std::min<double>(w, cx + 0.5 * a.box.w);
    const double t = std::max(0.0, cy - 0.5 * a.box.h), b = std::min<double>(h, cy + 0.5 * a.box.h);
    if (r - l < 1.0 || b - t < 1.0) continue;
    out.push_back({{0.5 * (l + r), 0.5 * (t + b), r - l, b - t}, a.label});
  }
  return out;
}

std::vector<PatchSample> extract_patches(const Image& slide, std::span<const Annotation> annotations,
                                         const ForegroundMask& fg, int side, int negatives, Rgb fill, Rng& rng) {
  std::vector<PatchSample> out;
  auto take = [&](int x0, int y0) {
    out.push_back({crop(slide, x0, y0, side, side, fill), clip_annotations(annotations, x0, y0, side, side)});
  };
  for (const auto& a : annotations) {
    const double slack_x = std::max(0.0, 0.5 * (side - a.box.w) - 1.0);
    const double slack_y = std::max(0.0, 0.5 * (side - a.box.h) - 1.0);
    const double cx = a.box.cx + uniform(rng, -slack_x, slack_x);
    const double cy = a.box.cy + uniform(rng, -slack_y, slack_y);
    take(static_cast<int>(std::lround(cx - 0.5 * side)), static_cast<int>(std::lround(cy - 0.5 * side)));
  }
  const std::int64_t fg_count = fg.count();
  for (int i = 0; i < negatives && fg_count > 0; ++i) {
    // k-th foreground thumbnail pixel, then a uniform point inside it.
    auto k = static_cast<std::int64_t>(uniform_index(rng, static_cast<std::uint64_t>(fg_count)));
    std::size_t idx = 0;
    for (; idx < fg.mask.size(); ++idx)
      if (fg.mask[idx] && k-- == 0) break;
    const int bx = static_cast<int>(idx % static_cast<std::size_t>(fg.width));
    const int by = static_cast<int>(idx / static_cast<std::size_t>(fg.width));
    const double cx = (bx + uniform01(rng)) * fg.factor, cy = (by + uniform01(rng)) * fg.factor;
    take(static_cast<int>(std::lround(cx - 0.5 * side)), static_cast<int>(std::lround(cy - 0.5 * side)));
  }
  return out;
}

void DetectorTrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("detector training: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("detector training: batch_size must be >= 1");
  if (!(lr0 > 0)) throw std::invalid_argument("detector training: lr0 must be positive");
  if (aug_prob < 0 || aug_prob > 1) throw std::invalid_argument("detector training: aug_prob outside [0, 1]");
  if (!(scale_lo > 0 && scale_lo <= scale_hi)) throw std::invalid_argument("detector training: bad scale range");
}

nlohmann::json DetectorTrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"lr0", lr0},
          {"lr_min", lr_min},
          {"aug_prob", aug_prob},
          {"shift", shift},
          {"scale_lo", scale_lo},
          {"scale_hi", scale_hi},
          {"alpha", weights.alpha},
          {"beta", weights.beta},
          {"focal_theta", weights.focal.theta},
          {"focal_gamma", weights.focal.gamma},
          {"loss_mode", to_string(weights.mode)},
          {"val_tau", val_tau},
          {"nms_iou", nms_iou},
          {"fill", {fill.r, fill.g, fill.b}},
          {"seed", seed}};
}

DetectorTrainConfig DetectorTrainConfig::from_json(const nlohmann::json& j) {
  DetectorTrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr0 = j.value("lr0", c.lr0);
  c.lr_min = j.value("lr_min", c.lr_min);
  c.aug_prob = j.value("aug_prob", c.aug_prob);
  c.shift = j.value("shift", c.shift);
  c.scale_lo = j.value("scale_lo", c.scale_lo);
  c.scale_hi = j.value("scale_hi", c.scale_hi);
  c.weights.alpha = j.value("alpha", c.weights.alpha);
  c.weights.beta = j.value("beta", c.weights.beta);
  c.weights.focal.theta = j.value("focal_theta", c.weights.focal.theta);
  c.weights.focal.gamma = j.value("focal_gamma", c.weights.focal.gamma);
  if (j.contains("loss_mode")) c.weights.mode = loss_mode_from_string(j.at("loss_mode").get<std::string>());
  c.val_tau = j.value("val_tau", c.val_tau);
  c.nms_iou = j.value("nms_iou", c.nms_iou);
  if (j.contains("fill")) {
    const auto& f = j.at("fill");
    c.fill = {f.at(0).get<std::uint8_t>(), f.at(1).get<std::uint8_t>(), f.at(2).get<std::uint8_t>()};
  }
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

PatchSample augment_patch(const PatchSample& sample, const DetectorTrainConfig& cfg, Rng& rng) {
  // Draws happen unconditionally so the stream position does not depend on
  // which augmentations fire.
  const double u_shift = uniform01(rng), dx = uniform(rng, -cfg.shift, cfg.shift),
               dy = uniform(rng, -cfg.shift, cfg.shift);
  const double u_scale = uniform01(rng), s = uniform(rng, cfg.scale_lo, cfg.scale_hi);
  PatchSample out = sample;
  const int w = sample.image.width, h = sample.image.height;

  if (u_scale < cfg.aug_prob) {
    const int sw = std::max(1, static_cast<int>(std::lround(w * s)));
    const int sh = std::max(1, static_cast<int>(std::lround(h * s)));
    const double fx = static_cast<double>(sw) / w, fy = static_cast<double>(sh) / h;
    const Image scaled = resize_bilinear(out.image, sw, sh);
    const int ox = (sw - w) / 2, oy = (sh - h) / 2;
    std::vector<Annotation> anns;
    for (auto a : out.annotations) {
      a.box = {a.box.cx * fx, a.box.cy * fy, a.box.w * fx, a.box.h * fy};
      anns.push_back(a);
    }
    out.image = crop(scaled, ox, oy, w, h, cfg.fill);
    out.annotations = clip_annotations(anns, ox, oy, w, h);
  }
  if (u_shift < cfg.aug_prob) {
    const int sx = static_cast<int>(std::lround(dx * w)), sy = static_cast<int>(std::lround(dy * h));
    out.image = crop(out.image, sx, sy, w, h, cfg.fill);
    out.annotations = clip_annotations(out.annotations, sx, sy, w, h);
  }
  return out;
}

std::vector<Detection> detect(const YolcoModel& model, const Image& image, double tau, double nms_iou) {
  NoGradGuard guard;
  const auto out = model.forward(to_tensor(image));
  const auto& anchors = model.config().anchors;
  auto dets = decode_predictions(out.scale5.box, out.scale5.cls, out.scale5.grid, anchors, tau);
  auto more = decode_predictions(out.scale4.box, out.scale4.cls, out.scale4.grid, anchors, tau);
  dets.insert(dets.end(), more.begin(), more.end());
  std::vector<Detection> kept;
  for (auto i : nms(dets, nms_iou)) kept.push_back(dets[i]);
  return kept;
}

double patch_map50(const YolcoModel& model, std::span<const PatchSample> samples, double tau, double nms_iou) {
  std::vector<ScoredBox> dets;
  std::vector<GroundTruthBox> gts;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (const auto& a : samples[i].annotations) gts.push_back({a.box, i});
    for (const auto& d : detect(model, samples[i].image, tau, nms_iou)) dets.push_back({d.box, d.prob, i});
  }
  if (gts.empty()) return 0.0;
  return average_precision(dets, gts, 0.5);
}

LossTerms<float> sample_loss(const YolcoModel& model, const PatchSample& sample, const LossWeights& weights) {
  const auto out = model.forward(to_tensor(sample.image));
  const auto& anchors = model.config().anchors;
  const auto a5 = encode_targets(sample.annotations, out.scale5.grid, anchors);
  const auto a4 = encode_targets(sample.annotations, out.scale4.grid, anchors);
  return total_loss(out, a5, a4, weights);
}

DetectorTrainResult train_detector(YolcoModel& model, std::span<const PatchSample> train,
                                   std::span<const PatchSample> val, const DetectorTrainConfig& cfg,
                                   const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("detector training: empty training set");
  auto params = model.parameters();
  AdamState<float> adam;
  adam.base_lr = cfg.lr0;
  auto order_rng = make_rng(cfg.seed, "detector.order");
  auto aug_rng = make_rng(cfg.seed, "detector.augment");

  DetectorTrainResult result{model.clone(), -1, -1.0, {}};
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch + 1;
    log.lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min);
    shuffle(order, order_rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const float inv = 1.0f / static_cast<float>(end - start);
      zero_grads(params);
      for (std::size_t k = start; k < end; ++k) {
        const auto sample = augment_patch(train[order[k]], cfg, aug_rng);
        const auto terms = sample_loss(model, sample, cfg.weights);
        scale(terms.total, inv).backward();
        log.loss_total += terms.total.item();
        log.loss_box += terms.box;
        log.loss_obj += terms.obj;
        log.loss_noobj += terms.noobj;
      }
      adam_step(adam, params, log.lr);
    }
    const double n = static_cast<double>(train.size());
    log.loss_total /= n;
    log.loss_box /= n;
    log.loss_obj /= n;
    log.loss_noobj /= n;
    log.val_map50 = val.empty() ? 0.0 : patch_map50(model, val, cfg.val_tau, cfg.nms_iou);
    if (val.empty() || log.val_map50 > result.best_map50) {
      result.best = model.clone();
      result.best_epoch = log.epoch;
      result.best_map50 = log.val_map50;
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

void write_training_log_csv(const std::filesystem::path& path, std::span<const EpochLog> log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,lr,loss_total,loss_box,loss_obj,loss_noobj,val_map50\n";
  for (const auto& e : log) {
    out << e.epoch << ',' << format_real(e.lr) << ',' << format_real(e.loss_total) << ',' << format_real(e.loss_box) << ','
        << format_real(e.loss_obj) << ',' << format_real(e.loss_noobj) << ',' << format_real(e.val_map50) << '\n';
  }
}

}  // namespace yolco
