#pragma once

// End-to-end driver shared by the command-line tool and the acceptance run:
// dataset planning, detector stage, slide encoding, classifier stage and
// slide-level evaluation.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "yolco/classifier.hpp"
#include "yolco/collect.hpp"
#include "yolco/detector_train.hpp"
#include "yolco/metrics.hpp"
#include "yolco/model.hpp"
#include "yolco/slide.hpp"

namespace yolco {

/// A stage input that does not exist yet. Carries the stage to run first.
class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(const std::filesystem::path& path, const std::string& stage)
      : std::runtime_error("missing " + path.string() + " (run '" + stage + "' first)") {}
};

struct DataConfig {
  int count = 42;
  double pos_fraction = 0.5;
  std::array<int, 3> split{12, 1, 1};  // train : val : test weights
  int lesions_min = 1;                 // lesion count range of positive slides
  int lesions_max = 4;
  int thumbnail_level = 5;
  int tile_side = 1024;
  SlideParams slide;

  void validate() const;
  nlohmann::json to_json() const;
  static DataConfig from_json(const nlohmann::json& j);
};

/// Slides per split by largest remainder over the split weights.
std::array<int, 3> split_counts(int count, const std::array<int, 3>& weights);

struct PatchConfig {
  int side = 256;
  int negatives = 2;  // background crops per training slide

  nlohmann::json to_json() const;
  static PatchConfig from_json(const nlohmann::json& j);
};

struct EvalConfig {
  int bootstrap = 1000;
  AccuracyFormula formula = AccuracyFormula::balanced;

  nlohmann::json to_json() const;
  static EvalConfig from_json(const nlohmann::json& j);
};

struct AblationConfig {
  std::vector<ConnectionMode> connections{ConnectionMode::inc};
  std::vector<LossMode> losses{LossMode::dual, LossMode::cls_only};
  std::vector<int> n{10, 100};
  std::vector<double> d{0.0};

  nlohmann::json to_json() const;
  static AblationConfig from_json(const nlohmann::json& j);
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int repeats = 1;
  DataConfig data;
  YolcoConfig model;
  bool fit_anchors = true;  // k-means anchors from the training annotations
  PatchConfig patches;
  DetectorTrainConfig detector;
  CollectionConfig collect;
  ClassifierConfig classifier;
  EvalConfig eval;
  AblationConfig ablate;

  /// Settings at their published values.
  static ExperimentConfig paper();
  /// Reduced settings that run the whole pipeline on a desktop CPU.
  static ExperimentConfig desk();

  void validate() const;
  nlohmann::json to_json() const;
  /// Fields absent from `j` keep the values of `base`.
  static ExperimentConfig from_json(const nlohmann::json& j, const ExperimentConfig& base = paper());
};

/// Seed of repeat r: the master seed for r = 0, a derived one otherwise.
std::uint64_t repeat_seed(std::uint64_t master, int repeat);

struct DatasetSlide {
  SlideManifest manifest;
  std::string split;  // train, val or test
  int lesions = 0;    // requested lesion count
};

/// Slide list plus a pixel source: PNG files under `root`, or regeneration
/// from the manifest seed when `root` is empty.
struct Dataset {
  DataConfig config;
  std::uint64_t seed = 0;
  std::vector<DatasetSlide> slides;
  std::filesystem::path root;

  std::vector<const DatasetSlide*> split(const std::string& name) const;
  Image pixels(const DatasetSlide& slide) const;
};

/// Generates every slide once to fix its label, annotations and tiles.
Dataset plan_dataset(const DataConfig& cfg, std::uint64_t seed);

/// Writes slides/, thumbnails/, manifests/, annotations/ and dataset.json.
/// Refuses a non-empty directory unless `force`.
void write_dataset(const std::filesystem::path& dir, const DataConfig& cfg, std::uint64_t seed, bool force);
Dataset read_dataset(const std::filesystem::path& dir);

using ProgressFn = std::function<void(const std::string&)>;

/// Patches of every slide in the split; negatives only come from training.
std::vector<PatchSample> dataset_patches(const Dataset& data, const std::string& split, const PatchConfig& cfg,
                                         Rng& rng);

/// Builds and trains the detector on the train split, selecting by val mAP.
DetectorTrainResult run_detector_stage(const ExperimentConfig& cfg, const Dataset& data,
                                       const ProgressFn& progress = {});

/// Encodes each slide once and collects one sequence per configuration:
/// result[k][i] is slide i under collects[k].
std::vector<std::vector<FeatureSequence>> run_encode_stage(const YolcoModel& model, const Dataset& data,
                                                           std::span<const DatasetSlide* const> slides,
                                                           std::span<const CollectionConfig> collects,
                                                           const ProgressFn& progress = {});

struct WsiEvaluation {
  MetricsRow metrics;
  std::vector<RocPoint> roc;
  std::vector<SlidePrediction> predictions;
};

WsiEvaluation evaluate_wsi(const SlideClassifier& classifier, std::span<const FeatureSequence> test,
                           const std::string& run, std::uint64_t seed, const EvalConfig& eval);

struct WsiRun {
  CollectionConfig collect;
  std::vector<ClassifierEpoch> classifier_log;
  WsiEvaluation evaluation;
};

struct PipelineResult {
  DetectorTrainResult detector;
  MapReport test_patch_map;
  std::vector<WsiRun> runs;  // one per collection configuration
};

/// Detector, encoding, then one classifier per collection configuration,
/// evaluated on the test split. Writes artifacts under `out` when non-empty.
PipelineResult run_pipeline(const ExperimentConfig& cfg, const Dataset& data,
                            std::span<const CollectionConfig> collects, const std::filesystem::path& out = {},
                            const ProgressFn& progress = {});

/// Patch-level mAP over a split.
MapReport patch_map(const YolcoModel& model, std::span<const PatchSample> samples, double tau, double nms_iou);

/// Writes the resolved configuration as config.json in `dir`.
void write_config_snapshot(const std::filesystem::path& dir, const nlohmann::json& config);

}  // namespace yolco
