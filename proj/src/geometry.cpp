#include "yolco/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "yolco/rng.hpp"

namespace yolco {

double shape_iou(Size2 a, Size2 b) {
  if (!(a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0)) {
    throw std::invalid_argument("shape_iou: sizes must be positive");
  }
  const double inter = std::min(a.w, b.w) * std::min(a.h, b.h);
  return inter / (a.w * a.h + b.w * b.h - inter);
}

double box_iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

AnchorSet kmeans_anchors(std::span<const Size2> sizes, int k, int max_iters,
                         std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("kmeans_anchors: k must be positive");
  if (sizes.size() < static_cast<std::size_t>(k)) {
    throw std::invalid_argument("kmeans_anchors: need at least k sizes");
  }
  std::vector<Size2> pts(sizes.begin(), sizes.end());
  for (const auto& s : pts) {
    if (!(s.w > 0 && s.h > 0)) throw std::invalid_argument("kmeans_anchors: sizes must be positive");
  }
  std::sort(pts.begin(), pts.end(),
            [](const Size2& a, const Size2& b) { return a.w != b.w ? a.w < b.w : a.h < b.h; });
  const std::size_t n = pts.size();
  auto dist = [](Size2 a, Size2 b) { return 1.0 - shape_iou(a, b); };

  Rng rng(seed);
  std::vector<Size2> centroids;
  centroids.push_back(pts[uniform_index(rng, n)]);
  std::vector<double> nearest(n);
  while (centroids.size() < static_cast<std::size_t>(k)) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double d = std::numeric_limits<double>::infinity();
      for (const auto& c : centroids) d = std::min(d, dist(pts[i], c));
      nearest[i] = d * d;
      total += nearest[i];
    }
    std::size_t pick = 0;
    if (total > 0) {
      double r = uniform01(rng) * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        r -= nearest[pick];
        if (r < 0) break;
      }
    }
    centroids.push_back(pts[pick]);
  }

  std::vector<int> assign(n, -1);
  for (int iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = dist(pts[i], centroids[0]);
      for (int c = 1; c < k; ++c) {
        const double d = dist(pts[i], centroids[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    if (!changed && iter > 0) break;

    std::vector<Size2> sums(k);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums[assign[i]].w += pts[i].w;
      sums[assign[i]].h += pts[i].h;
      ++counts[assign[i]];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        centroids[c] = {sums[c].w / counts[c], sums[c].h / counts[c]};
        continue;
      }
      std::size_t far = 0;
      double far_d = -1;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = dist(pts[i], centroids[assign[i]]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      centroids[c] = pts[far];
      assign[far] = c;
      changed = true;
    }
  }
  std::stable_sort(centroids.begin(), centroids.end(), [](const Size2& a, const Size2& b) {
    return a.w * a.h != b.w * b.h ? a.w * a.h < b.w * b.h : a.w < b.w;
  });
  return AnchorSet{std::move(centroids)};
}

namespace {

// Index of the nearest cell center along one axis; ties go to the lower index.
int nearest_cell(double coord, int stride, int count) {
  const double u = coord / stride - 0.5;
  const int idx = static_cast<int>(std::ceil(u - 0.5));
  return std::clamp(idx, 0, count - 1);
}

}  // namespace

Assignment encode_targets(std::span<const Annotation> annotations, const GridSpec& grid,
                          const AnchorSet& anchors) {
  if (anchors.size() == 0) throw std::invalid_argument("encode_targets: empty anchor set");
  if (grid.width <= 0 || grid.height <= 0 || grid.stride <= 0) {
    throw std::invalid_argument("encode_targets: invalid grid");
  }
  const double span_x = static_cast<double>(grid.width) * grid.stride;
  const double span_y = static_cast<double>(grid.height) * grid.stride;
  Assignment out;
  std::map<std::pair<std::int64_t, int>, std::size_t> owner;
  for (std::size_t m = 0; m < annotations.size(); ++m) {
    const Box& b = annotations[m].box;
    if (b.cx < 0 || b.cy < 0 || b.cx > span_x || b.cy > span_y) {
      throw std::out_of_range("encode_targets: annotation center outside the grid");
    }
    const int col = nearest_cell(b.cx, grid.stride, grid.width);
    const int row = nearest_cell(b.cy, grid.stride, grid.height);
    AssignedTarget t;
    t.cell = static_cast<std::int64_t>(row) * grid.width + col;
    t.qx = (b.cx - grid.point_x(t.cell)) / grid.stride;
    t.qy = (b.cy - grid.point_y(t.cell)) / grid.stride;
    double best = -1;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      const double iou = shape_iou(b.size(), anchors.sizes[i]);
      if (iou > best) {
        best = iou;
        t.anchor = static_cast<int>(i);
      }
    }
    t.vx = std::log(b.w / anchors.sizes[t.anchor].w);
    t.vy = std::log(b.h / anchors.sizes[t.anchor].h);
    t.annotation = m;

    const auto key = std::make_pair(t.cell, t.anchor);
    if (auto it = owner.find(key); it != owner.end()) {
      auto& existing = out.targets[it->second];
      if (b.area() > annotations[existing.annotation].box.area()) existing = t;
      continue;
    }
    owner.emplace(key, out.targets.size());
    out.targets.push_back(t);
  }
  return out;
}

std::vector<Detection> decode_predictions(const Tensor& box, const Tensor& cls,
                                          const GridSpec& grid, const AnchorSet& anchors,
                                          double tau) {
  const auto na = static_cast<std::int64_t>(anchors.size());
  const Shape want_box{4 * na, grid.height, grid.width};
  const Shape want_cls{na, grid.height, grid.width};
  if (box.shape() != want_box || cls.shape() != want_cls) {
    throw ShapeError("decode_predictions: expected box " + shape_str(want_box) + " and cls " +
                     shape_str(want_cls) + ", got " + shape_str(box.shape()) + " and " +
                     shape_str(cls.shape()));
  }
  const auto cells = grid.cells();
  const auto bd = box.data();
  const auto cd = cls.data();
  std::vector<Detection> out;
  for (std::int64_t c = 0; c < cells; ++c) {
    for (std::int64_t a = 0; a < na; ++a) {
      const double logit = cd[a * cells + c];
      const double prob = logit >= 0 ? 1.0 / (1.0 + std::exp(-logit))
                                      : std::exp(logit) / (1.0 + std::exp(logit));
      if (prob < tau) continue;
      const double qx = bd[(4 * a + 0) * cells + c];
      const double qy = bd[(4 * a + 1) * cells + c];
      const double vx = bd[(4 * a + 2) * cells + c];
      const double vy = bd[(4 * a + 3) * cells + c];
      Detection d;
      d.box = {grid.point_x(c) + qx * grid.stride, grid.point_y(c) + qy * grid.stride,
               std::exp(vx) * anchors.sizes[a].w, std::exp(vy) * anchors.sizes[a].h};
      d.prob = prob;
      d.cell = c;
      d.anchor = static_cast<int>(a);
      out.push_back(d);
    }
  }
  return out;
}

std::vector<std::size_t> nms(std::span<const Detection> detections, double iou_thresh) {
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].prob > detections[b].prob;
  });
  std::vector<std::size_t> kept;
  std::vector<bool> removed(detections.size(), false);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto idx = order[i];
    if (removed[idx]) continue;
    kept.push_back(idx);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const auto other = order[j];
      if (!removed[other] && box_iou(detections[idx].box, detections[other].box) > iou_thresh) {
        removed[other] = true;
      }
    }
  }
  return kept;
}

void write_annotations_jsonl(const std::filesystem::path& path,
                             std::span<const Annotation> annotations) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& a : annotations) {
    nlohmann::json j = {{"cx", a.box.cx}, {"cy", a.box.cy}, {"w", a.box.w},
                        {"h", a.box.h},   {"label", a.label}};
    os << j.dump() << '\n';
  }
}

std::vector<Annotation> read_annotations_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<Annotation> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line);
    Annotation a;
    a.box = {j.at("cx").get<double>(), j.at("cy").get<double>(), j.at("w").get<double>(),
             j.at("h").get<double>()};
    a.label = j.value("label", 1);
    out.push_back(a);
  }
  return out;
}

void write_anchors_json(const std::filesystem::path& path, const AnchorSet& anchors) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : anchors.sizes) j.push_back({s.w, s.h});
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump() << '\n';
}

AnchorSet read_anchors_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  const auto j = nlohmann::json::parse(is);
  AnchorSet out;
  for (const auto& pair : j) out.sizes.push_back({pair.at(0).get<double>(), pair.at(1).get<double>()});
  return out;
}

}  // namespace yolco
