#include "yolco/collect.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "yolco/metrics.hpp"

namespace yolco {

static_assert(std::endian::native == std::endian::little, "feature files assume a little-endian host");

std::string to_string(CollectMode mode) { return mode == CollectMode::topn ? "topn" : "bbox"; }

CollectMode collect_mode_from_string(const std::string& text) {
  if (text == "topn") return CollectMode::topn;
  if (text == "bbox") return CollectMode::bbox;
  throw std::invalid_argument("unknown collect mode '" + text + "' (expected topn or bbox)");
}

void CollectionConfig::validate() const {
  if (n < 1) throw std::invalid_argument("collection: N must be >= 1");
  if (!(d >= 0.0)) throw std::invalid_argument("collection: D must be >= 0");
  if (per_box < 1) throw std::invalid_argument("collection: per_box must be >= 1");
}

nlohmann::json CollectionConfig::to_json() const {
  return {{"n", n}, {"d", d}, {"mode", to_string(mode)}, {"per_box", per_box}};
}

CollectionConfig CollectionConfig::from_json(const nlohmann::json& j) {
  CollectionConfig c;
  c.n = j.value("n", c.n);
  c.d = j.value("d", c.d);
  if (j.contains("mode")) c.mode = collect_mode_from_string(j.at("mode").get<std::string>());
  c.per_box = j.value("per_box", c.per_box);
  c.validate();
  return c;
}

EncodedSlide encode_tiles(const YolcoModel& model, const Image& slide, std::span<const Tile> tiles, Rgb fill) {
  NoGradGuard guard;
  EncodedSlide enc;
  const auto& anchors = model.config().anchors;
  for (std::size_t t = 0; t < tiles.size(); ++t) {
    const auto& tile = tiles[t];
    const auto out = model.forward(to_tensor(read_tile(slide, tile, fill)));
    auto add = [&](const ScaleOutput& s, int scale) {
      for (const auto& d : decode_predictions(s.box, s.cls, s.grid, anchors, 0.0)) {
        Box b = d.box;
        b.cx += tile.x0;
        b.cy += tile.y0;
        enc.candidates.push_back({static_cast<float>(d.prob), b, static_cast<int>(t), scale, d.cell, d.anchor});
      }
    };
    add(out.scale5, 5);
    add(out.scale4, 4);
    enc.tiles.push_back({tile, out.scale5.features, out.scale4.features});
  }
  return enc;
}

std::vector<float> gather_feature(const EncodedSlide& slide, const Candidate& c) {
  const auto& tf = slide.tiles.at(static_cast<std::size_t>(c.tile));
  const auto w5 = tf.scale5.dim(2), h5 = tf.scale5.dim(1), w4 = tf.scale4.dim(2), h4 = tf.scale4.dim(1);
  std::int64_t r5, c5, r4, c4;
  if (c.scale == 5) {
    r5 = c.cell / w5;
    c5 = c.cell % w5;
    r4 = std::min(2 * r5 + 1, h4 - 1);
    c4 = std::min(2 * c5 + 1, w4 - 1);
  } else {
    r4 = c.cell / w4;
    c4 = c.cell % w4;
    r5 = std::min(r4 / 2, h5 - 1);
    c5 = std::min(c4 / 2, w5 - 1);
  }
  const auto ch5 = tf.scale5.dim(0), ch4 = tf.scale4.dim(0);
  std::vector<float> v(static_cast<std::size_t>(ch5 + ch4));
  const auto d5 = tf.scale5.data(), d4 = tf.scale4.data();
  for (std::int64_t k = 0; k < ch5; ++k) v[k] = d5[(k * h5 + r5) * w5 + c5];
  for (std::int64_t k = 0; k < ch4; ++k) v[ch5 + k] = d4[(k * h4 + r4) * w4 + c4];
  return v;
}

std::vector<std::size_t> rank_candidates(std::span<const Candidate> candidates) {
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return candidates[a].prob > candidates[b].prob; });
  return order;
}

std::vector<std::size_t> select_topn(std::span<const Candidate> candidates, int n, double d) {
  if (candidates.empty()) throw std::invalid_argument("collection: slide has no candidates (not encoded?)");
  const auto order = rank_candidates(candidates);
  if (d <= 0.0) return {order.begin(), order.begin() + std::min<std::size_t>(order.size(), n)};
  std::vector<std::size_t> kept;
  const double d2 = d * d;
  for (auto i : order) {
    if (static_cast<int>(kept.size()) >= n) break;
    const auto& b = candidates[i].box;
    bool ok = true;
    for (auto k : kept) {
      const double dx = b.cx - candidates[k].box.cx, dy = b.cy - candidates[k].box.cy;
      if (dx * dx + dy * dy < d2) {
        ok = false;
        break;
      }
    }
    if (ok) kept.push_back(i);
  }
  return kept;
}

std::vector<std::size_t> select_bbox(std::span<const Candidate> candidates, int n, int per_box) {
  if (candidates.empty()) throw std::invalid_argument("collection: slide has no candidates (not encoded?)");
  const auto order = rank_candidates(candidates);
  std::vector<std::size_t> out;
  const auto seeds = std::min<std::size_t>(order.size(), n);
  for (std::size_t s = 0; s < seeds; ++s) {
    const auto& seed = candidates[order[s]].box;
    int taken = 0;
    for (auto i : order) {
      if (taken >= per_box) break;
      if (seed.contains(candidates[i].box.cx, candidates[i].box.cy)) {
        out.push_back(i);
        ++taken;
      }
    }
  }
  return out;
}

FeatureSequence collect(const EncodedSlide& slide, const CollectionConfig& cfg, std::string slide_id, int label) {
  cfg.validate();
  const auto picks = cfg.mode == CollectMode::topn ? select_topn(slide.candidates, cfg.n, cfg.d)
                                                   : select_bbox(slide.candidates, cfg.n, cfg.per_box);
  FeatureSequence seq{std::move(slide_id), label, cfg.n, {}};
  seq.rows.reserve(picks.size());
  for (auto i : picks) {
    const auto& c = slide.candidates[i];
    seq.rows.push_back({c.prob, c.box, gather_feature(slide, c)});
  }
  return seq;
}

std::vector<Detection> wsi_detections(const FeatureSequence& sequence, double iou_thresh) {
  std::vector<Detection> dets;
  for (const auto& r : sequence.rows) dets.push_back({r.box, r.prob, -1, -1});
  std::vector<Detection> kept;
  for (auto i : nms(dets, iou_thresh)) kept.push_back(dets[i]);
  return kept;
}

void write_feature_sequence(const std::filesystem::path& path, const FeatureSequence& seq) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::string header =
      nlohmann::json{{"slide_id", seq.slide_id}, {"n", seq.n}, {"dim", kFeatureDim}, {"label", seq.label},
                     {"rows", seq.rows.size()}}
          .dump();
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::vector<float> buf(5 + kFeatureDim);
  for (const auto& r : seq.rows) {
    if (r.feature.size() != kFeatureDim) throw std::invalid_argument("feature sequence row is not 768-dimensional");
    buf[0] = r.prob;
    buf[1] = static_cast<float>(r.box.cx);
    buf[2] = static_cast<float>(r.box.cy);
    buf[3] = static_cast<float>(r.box.w);
    buf[4] = static_cast<float>(r.box.h);
    std::copy(r.feature.begin(), r.feature.end(), buf.begin() + 5);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
}

FeatureSequence read_feature_sequence(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1u << 20)) throw std::runtime_error(path.string() + ": bad feature sequence header");
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  const auto j = nlohmann::json::parse(header);
  if (j.at("dim").get<int>() != kFeatureDim) throw std::runtime_error(path.string() + ": unexpected feature dim");
  FeatureSequence seq{j.at("slide_id").get<std::string>(), j.at("label").get<int>(), j.at("n").get<int>(), {}};
  const auto rows = j.at("rows").get<std::size_t>();
  std::vector<float> buf(5 + kFeatureDim);
  for (std::size_t i = 0; i < rows; ++i) {
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw std::runtime_error(path.string() + ": truncated feature sequence");
    seq.rows.push_back({buf[0], {buf[1], buf[2], buf[3], buf[4]}, {buf.begin() + 5, buf.end()}});
  }
  return seq;
}

void write_feature_sequence_csv(const std::filesystem::path& path, std::span<const FeatureSequence> seqs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "slide_id,rank,prob,x,y,w,h";
  for (int k = 0; k < kFeatureDim; ++k) out << ",f" << k;
  out << '\n';
  for (const auto& s : seqs) {
    for (std::size_t r = 0; r < s.rows.size(); ++r) {
      const auto& row = s.rows[r];
      out << s.slide_id << ',' << r << ',' << format_real(row.prob) << ',' << format_real(row.box.cx) << ','
          << format_real(row.box.cy) << ',' << format_real(row.box.w) << ',' << format_real(row.box.h);
      for (float f : row.feature) out << ',' << format_real(f);
      out << '\n';
    }
  }
}

}  // namespace yolco
