#pragma once

// Slide-level rates, detection AP, ROC/AUC and percentile bootstrap.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "yolco/geometry.hpp"

namespace yolco {

struct Confusion {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::int64_t total() const { return tp + fp + tn + fn; }
};

/// Labels are 0/1; anything else throws.
Confusion confusion(std::span<const int> predicted, std::span<const int> truth);

enum class AccuracyFormula {
  balanced,      // (sens + spec) / 2
  paper_compat,  // TP / (2 (TP + FP)) + TN / (2 (TN + FN)), as printed
};

struct SlideRates {
  double accuracy = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
};

/// Throws std::domain_error when a denominator is zero.
SlideRates slide_rates(const Confusion& c, AccuracyFormula formula = AccuracyFormula::balanced);

struct PrecisionRecall {
  std::optional<double> precision;  // empty when TP + FP = 0
  double recall = 0.0;
};

/// Throws std::domain_error when TP + FN = 0.
PrecisionRecall precision_recall(const Confusion& c);

struct ScoredBox {
  Box box;
  double score = 0.0;
  std::size_t image = 0;
};

struct GroundTruthBox {
  Box box;
  std::size_t image = 0;
};

/// Detections sorted by descending score (stable) each claim the unmatched
/// ground truth of the same image with the highest IoU >= iou_thr. AP is the
/// 101-point interpolated area under the precision-recall curve. Throws
/// std::domain_error when there is no ground truth.
double average_precision(std::span<const ScoredBox> detections, std::span<const GroundTruthBox> truth,
                         double iou_thr);

struct MapReport {
  double map50 = 0.0;
  double map50_95 = 0.0;  // mean over thresholds 0.50, 0.55, ..., 0.95
};

MapReport map_range(std::span<const ScoredBox> detections, std::span<const GroundTruthBox> truth);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // score at or above which a slide is called positive
};

/// Sweep over distinct scores from high to low; tied scores move together.
/// Starts at (0, 0) and ends at (1, 1). Throws std::domain_error unless both
/// classes are present.
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);

/// Trapezoidal area under roc_curve.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

using ScoreMetric = std::function<double(std::span<const double>, std::span<const int>)>;

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile bootstrap over resampled (score, label) pairs. Replicates that
/// draw a single class are redrawn so AUC-like metrics stay defined.
Interval bootstrap_ci(const ScoreMetric& metric, std::span<const double> scores, std::span<const int> labels,
                      int samples = 1000, double level = 0.95, std::uint64_t seed = 0);

struct MetricsRow {
  std::string run;
  double accuracy = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double auc = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
};

/// Threshold-0.5 rates, AUC and its bootstrap interval for one run.
MetricsRow evaluate_scores(std::string run, std::span<const double> scores, std::span<const int> labels,
                           std::uint64_t seed, AccuracyFormula formula = AccuracyFormula::balanced,
                           int bootstrap_samples = 1000);

/// Fixed six-decimal formatting so reruns compare byte for byte.
std::string format_real(double value);

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows);
void write_roc_csv(const std::filesystem::path& path, std::span<const RocPoint> points);

}  // namespace yolco
