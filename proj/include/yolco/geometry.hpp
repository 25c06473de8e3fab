#pragma once

// Anchor geometry: shape/box IoU, k-means anchor fitting, target encoding
// onto a detection grid, decoding of raw head outputs, and greedy NMS.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "yolco/tensor.hpp"

namespace yolco {

struct Size2 {
  double w = 0.0;
  double h = 0.0;
  bool operator==(const Size2&) const = default;
};

/// Axis-aligned box by center and size, in pixels.
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x0() const { return cx - 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double x1() const { return cx + 0.5 * w; }
  double y1() const { return cy + 0.5 * h; }
  double area() const { return w * h; }
  Size2 size() const { return {w, h}; }
  bool contains(double x, double y) const {
    return x >= x0() && x <= x1() && y >= y0() && y <= y1();
  }
  bool operator==(const Box&) const = default;
};

struct Annotation {
  Box box;
  int label = 1;
};

struct AnchorSet {
  std::vector<Size2> sizes;
  std::size_t size() const { return sizes.size(); }
};

struct GridSpec {
  int width = 0;   // cells along x
  int height = 0;  // cells along y
  int stride = 32;

  std::int64_t cells() const { return static_cast<std::int64_t>(width) * height; }
  /// Pixel coordinate of a cell's grid point (the cell center).
  double point_x(std::int64_t cell) const { return (static_cast<double>(cell % width) + 0.5) * stride; }
  double point_y(std::int64_t cell) const { return (static_cast<double>(cell / width) + 0.5) * stride; }

  static GridSpec for_input(int input_width, int input_height, int stride) {
    return {input_width / stride, input_height / stride, stride};
  }
};

/// One responsible (cell, anchor) pair and its regression target.
struct AssignedTarget {
  std::int64_t cell = 0;
  int anchor = 0;
  double qx = 0.0, qy = 0.0;  // center offset in grid cells
  double vx = 0.0, vy = 0.0;  // log size ratio to the anchor
  std::size_t annotation = 0;  // index into the encoded annotation list
};

struct Assignment {
  std::vector<AssignedTarget> targets;
  std::size_t size() const { return targets.size(); }
};

struct Detection {
  Box box;
  double prob = 0.0;
  std::int64_t cell = -1;
  int anchor = -1;
};

/// IoU of two sizes placed at a common center. Throws on non-positive sizes.
double shape_iou(Size2 a, Size2 b);

double box_iou(const Box& a, const Box& b);

/// Lloyd iterations under d(s, a) = 1 - shape_iou(s, a), k-means++ seeded
/// from a canonical ordering of `sizes` so the result does not depend on
/// input order. Empty clusters are re-seeded from the point farthest from
/// its centroid. Anchors are returned sorted by area.
AnchorSet kmeans_anchors(std::span<const Size2> sizes, int k = 3, int max_iters = 100,
                         std::uint64_t seed = 0);

/// Nearest grid point for the center and best-shape anchor for the size of
/// each annotation. When two annotations claim the same (cell, anchor) the
/// larger box is kept.
Assignment encode_targets(std::span<const Annotation> annotations, const GridSpec& grid,
                          const AnchorSet& anchors);

/// Inverts encode_targets on raw head outputs. box: [4 * n_a, h, w] laid out
/// as (qx, qy, vx, vy) per anchor; cls: [n_a, h, w] pre-sigmoid. Keeps every
/// (cell, anchor) with sigmoid probability >= tau, in cell-major order.
std::vector<Detection> decode_predictions(const Tensor& box, const Tensor& cls,
                                          const GridSpec& grid, const AnchorSet& anchors,
                                          double tau);

/// Greedy suppression by descending probability (ties by input index).
/// Returns indices of kept detections in keep order.
std::vector<std::size_t> nms(std::span<const Detection> detections, double iou_thresh = 0.5);

// Annotation files are JSON lines: {"cx":..,"cy":..,"w":..,"h":..,"label":1}.
void write_annotations_jsonl(const std::filesystem::path& path,
                             std::span<const Annotation> annotations);
std::vector<Annotation> read_annotations_jsonl(const std::filesystem::path& path);

// Anchor files are a JSON array of [w, h] pairs.
void write_anchors_json(const std::filesystem::path& path, const AnchorSet& anchors);
AnchorSet read_anchors_json(const std::filesystem::path& path);

}  // namespace yolco
