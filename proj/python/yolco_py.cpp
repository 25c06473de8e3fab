// Python bindings. Structured values cross as JSON text; the package wrapper
// turns them into dicts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "yolco/collect.hpp"
#include "yolco/geometry.hpp"
#include "yolco/metrics.hpp"
#include "yolco/model.hpp"
#include "yolco/pipeline.hpp"
#include "yolco/slide.hpp"

namespace py = pybind11;
using namespace yolco;

namespace {

py::array_t<std::uint8_t> to_array(const Image& img) {
  py::array_t<std::uint8_t> out({img.height, img.width, 3});
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

Box to_box(const std::array<double, 4>& b) { return {b[0], b[1], b[2], b[3]}; }

}  // namespace

PYBIND11_MODULE(_yolco, m) {
  m.doc() = "YOLCO detector and slide-classification core";

  m.def(
      "model_budget",
      [](bool tiny, int input_side) {
        const YolcoModel model(tiny ? YolcoConfig::tiny() : YolcoConfig{}, 0);
        return std::make_pair(model.count_params(), model.count_macs(input_side));
      },
      py::arg("tiny") = false, py::arg("input_side") = 1024, "(parameters, multiply-accumulates) of a model");

  m.def(
      "generate_slide",
      [](std::uint64_t seed, const std::string& params_json, const std::string& id) {
        const auto params = SlideParams::from_json(nlohmann::json::parse(params_json));
        const auto slide = generate_synthetic_slide(seed, params, id);
        return py::make_tuple(to_array(slide.pixels), slide.manifest.to_json().dump());
      },
      py::arg("seed"), py::arg("params_json") = "{}", py::arg("id") = "slide");

  m.def(
      "tile_slide",
      [](py::array_t<std::uint8_t, py::array::c_style> pixels, int level, int tile_side) {
        if (pixels.ndim() != 3 || pixels.shape(2) != 3) throw std::invalid_argument("expected an HxWx3 uint8 array");
        Image img(static_cast<int>(pixels.shape(1)), static_cast<int>(pixels.shape(0)));
        std::copy(pixels.data(), pixels.data() + pixels.size(), img.pixels.begin());
        const auto fg = foreground_mask(make_thumbnail(img, level), level);
        std::vector<std::array<int, 3>> out;
        for (const auto& t : tile_slide(fg, img.width, img.height, tile_side)) out.push_back({t.x0, t.y0, t.side});
        return py::make_tuple(fg.threshold, out);
      },
      py::arg("pixels"), py::arg("level"), py::arg("tile_side"), "(OTSU threshold, [(x0, y0, side)])");

  m.def("otsu_threshold", [](const std::vector<std::uint64_t>& h) { return otsu_threshold(h); });

  m.def("box_iou", [](const std::array<double, 4>& a, const std::array<double, 4>& b) {
    return box_iou(to_box(a), to_box(b));
  });

  m.def(
      "nms",
      [](const std::vector<std::array<double, 4>>& boxes, const std::vector<double>& probs, double iou) {
        if (boxes.size() != probs.size()) throw std::invalid_argument("boxes and probs differ in length");
        std::vector<Detection> dets(boxes.size());
        for (std::size_t i = 0; i < dets.size(); ++i) dets[i].box = to_box(boxes[i]), dets[i].prob = probs[i];
        return nms(dets, iou);
      },
      py::arg("boxes"), py::arg("probs"), py::arg("iou") = 0.5, "indices kept, highest probability first");

  m.def(
      "select_topn",
      [](const std::vector<std::array<double, 4>>& boxes, const std::vector<float>& probs, int n, double d) {
        if (boxes.size() != probs.size()) throw std::invalid_argument("boxes and probs differ in length");
        std::vector<Candidate> c(boxes.size());
        for (std::size_t i = 0; i < c.size(); ++i) c[i].box = to_box(boxes[i]), c[i].prob = probs[i];
        return select_topn(c, n, d);
      },
      py::arg("boxes"), py::arg("probs"), py::arg("n"), py::arg("d") = 0.0);

  m.def("roc_auc", [](const std::vector<double>& s, const std::vector<int>& l) { return roc_auc(s, l); });

  m.def(
      "run_pipeline",
      [](const std::string& config_json, const std::string& profile, const std::filesystem::path& out) {
        const auto base = profile == "desk" ? ExperimentConfig::desk() : ExperimentConfig::paper();
        const auto cfg = ExperimentConfig::from_json(nlohmann::json::parse(config_json), base);
        cfg.validate();
        nlohmann::json result = nlohmann::json::array();
        {
          py::gil_scoped_release release;
          const auto data = plan_dataset(cfg.data, cfg.seed);
          const std::vector<CollectionConfig> collects{cfg.collect};
          const auto r = run_pipeline(cfg, data, collects, out);
          for (const auto& run : r.runs) {
            const auto& mr = run.evaluation.metrics;
            result.push_back({{"run", mr.run},
                              {"accuracy", mr.accuracy},
                              {"sensitivity", mr.sensitivity},
                              {"specificity", mr.specificity},
                              {"auc", mr.auc},
                              {"ci", {mr.ci_lo, mr.ci_hi}},
                              {"patch_map50", r.test_patch_map.map50}});
          }
        }
        return result.dump();
      },
      py::arg("config_json"), py::arg("profile") = "desk", py::arg("out") = std::filesystem::path{});
}
