#pragma once

// Patch-level detector training: crop extraction, shift/scale augmentation,
// Adam with a cosine schedule and best-mAP checkpoint selection.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "json.hpp"
#include "yolco/image.hpp"
#include "yolco/loss.hpp"
#include "yolco/metrics.hpp"
#include "yolco/model.hpp"
#include "yolco/rng.hpp"
#include "yolco/slide.hpp"

namespace yolco {

struct PatchSample {
  Image image;
  std::vector<Annotation> annotations;  // patch coordinates
};

/// Keeps annotations whose center lies inside [0, w) x [0, h), clipped to
/// the window.
std::vector<Annotation> clip_annotations(std::span<const Annotation> annotations, double x0, double y0, int w,
                                         int h);

/// One crop per annotation, jittered so that annotation stays whole, plus
/// `negatives` crops centered on random foreground pixels. Every annotation
/// whose center falls in a crop is carried into it.
std::vector<PatchSample> extract_patches(const Image& slide, std::span<const Annotation> annotations,
                                         const ForegroundMask& fg, int side, int negatives, Rgb fill, Rng& rng);

struct DetectorTrainConfig {
  int epochs = 20;
  int batch_size = 8;
  double lr0 = 1e-3;
  double lr_min = 0.0;
  double aug_prob = 0.5;
  double shift = 0.1;      // fraction of the side
  double scale_lo = 0.75;
  double scale_hi = 1.25;
  LossWeights weights;
  double val_tau = 0.05;
  double nms_iou = 0.5;
  Rgb fill{242, 240, 238};  // padding revealed by augmentation
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static DetectorTrainConfig from_json(const nlohmann::json& j);
};

/// Shift and scale, each applied with probability cfg.aug_prob. Output keeps
/// the input extents.
PatchSample augment_patch(const PatchSample& sample, const DetectorTrainConfig& cfg, Rng& rng);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_box = 0.0;
  double loss_obj = 0.0;
  double loss_noobj = 0.0;
  double val_map50 = 0.0;
};

struct DetectorTrainResult {
  YolcoModel best;
  int best_epoch = -1;
  double best_map50 = -1.0;
  std::vector<EpochLog> log;
};

/// Decoded detections of both scales after NMS.
std::vector<Detection> detect(const YolcoModel& model, const Image& image, double tau, double nms_iou);

/// mAP@.5 over a patch set; 0 when it holds no annotation.
double patch_map50(const YolcoModel& model, std::span<const PatchSample> samples, double tau, double nms_iou);

/// Loss terms of one un-augmented sample; gradients flow into the model.
LossTerms<float> sample_loss(const YolcoModel& model, const PatchSample& sample, const LossWeights& weights);

/// Trains `model` in place. The returned best model is the deep copy with
/// the highest validation mAP@.5 (the final epoch when `val` is empty).
DetectorTrainResult train_detector(YolcoModel& model, std::span<const PatchSample> train,
                                   std::span<const PatchSample> val, const DetectorTrainConfig& cfg,
                                   const std::function<void(const EpochLog&)>& on_epoch = {});

void write_training_log_csv(const std::filesystem::path& path, std::span<const EpochLog> log);

}  // namespace yolco
