#pragma once

// Slide encoding and feature collection. Every (cell, anchor) of every tile
// becomes a candidate before NMS; collection picks the sequence that the
// slide classifier sees.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "yolco/geometry.hpp"
#include "yolco/image.hpp"
#include "yolco/model.hpp"
#include "yolco/slide.hpp"

namespace yolco {

inline constexpr int kFeatureDim = 768;

enum class CollectMode { topn, bbox };

std::string to_string(CollectMode mode);
CollectMode collect_mode_from_string(const std::string& text);

struct CollectionConfig {
  int n = 100;
  double d = 0.0;  // minimum center distance between kept candidates, global pixels
  CollectMode mode = CollectMode::topn;
  int per_box = 10;  // bbox mode: vectors gathered inside each seed box

  void validate() const;
  nlohmann::json to_json() const;
  static CollectionConfig from_json(const nlohmann::json& j);
};

/// One decoded (cell, anchor) in slide coordinates. The candidate's location
/// is its box center.
struct Candidate {
  float prob = 0.0f;
  Box box;
  int tile = 0;
  int scale = 5;  // 5 (stride 32) or 4 (stride 16)
  std::int64_t cell = 0;
  int anchor = 0;
};

struct TileFeatures {
  Tile tile;
  Tensor scale5;  // [512, h5, w5]
  Tensor scale4;  // [256, h4, w4]
};

struct EncodedSlide {
  std::vector<Candidate> candidates;  // tile order, scale 5 then 4, cell-major, anchor
  std::vector<TileFeatures> tiles;
};

/// Forward pass per tile and tau = 0 decode of both scales.
EncodedSlide encode_tiles(const YolcoModel& model, const Image& slide, std::span<const Tile> tiles, Rgb fill);

/// Scale-5 feature at the scale-5 cell holding the anchor's grid point,
/// followed by the scale-4 feature at the scale-4 cell holding it. A
/// scale-4 cell (r, c) maps to scale-5 (r/2, c/2); a scale-5 cell (r, c)
/// maps to scale-4 (2r+1, 2c+1).
std::vector<float> gather_feature(const EncodedSlide& slide, const Candidate& c);

/// Candidate indices by descending probability, ties by index.
std::vector<std::size_t> rank_candidates(std::span<const Candidate> candidates);

/// Greedy over the ranking: accept when at least d from every accepted
/// center, stop at n. Throws on an empty candidate list.
std::vector<std::size_t> select_topn(std::span<const Candidate> candidates, int n, double d);

/// Top-n seeds; for each, the first per_box ranked candidates whose center
/// lies inside the seed box (the seed included), concatenated.
std::vector<std::size_t> select_bbox(std::span<const Candidate> candidates, int n, int per_box);

struct SequenceRow {
  float prob = 0.0f;
  Box box;
  std::vector<float> feature;
};

struct FeatureSequence {
  std::string slide_id;
  int label = 0;
  int n = 0;  // requested N
  std::vector<SequenceRow> rows;
};

FeatureSequence collect(const EncodedSlide& slide, const CollectionConfig& cfg, std::string slide_id, int label);

/// NMS over the collected boxes.
std::vector<Detection> wsi_detections(const FeatureSequence& sequence, double iou_thresh = 0.5);

// Binary layout: u64 header length, UTF-8 JSON header {slide_id, n, dim,
// label, rows}, then per row prob, x, y, w, h and the feature, all f32 LE.
void write_feature_sequence(const std::filesystem::path& path, const FeatureSequence& seq);
FeatureSequence read_feature_sequence(const std::filesystem::path& path);

/// slide_id, rank, prob, x, y, w, h, f0..f767.
void write_feature_sequence_csv(const std::filesystem::path& path, std::span<const FeatureSequence> seqs);

}  // namespace yolco
