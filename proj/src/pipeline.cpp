#include "yolco/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "yolco/geometry.hpp"
#include "yolco/rng.hpp"

namespace yolco {

namespace fs = std::filesystem;

namespace {

const char* const kSplits[3] = {"train", "val", "test"};

std::string formula_name(AccuracyFormula f) { return f == AccuracyFormula::balanced ? "balanced" : "paper_compat"; }

AccuracyFormula formula_from_string(const std::string& text) {
  if (text == "balanced") return AccuracyFormula::balanced;
  if (text == "paper_compat") return AccuracyFormula::paper_compat;
  throw std::invalid_argument("unknown accuracy formula '" + text + "' (expected balanced or paper_compat)");
}

nlohmann::json read_json(const fs::path& path, const std::string& stage) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact(path, stage);
  return nlohmann::json::parse(in);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void say(const ProgressFn& progress, const std::string& text) {
  if (progress) progress(text);
}

}  // namespace

void DataConfig::validate() const {
  if (count < 1) throw std::invalid_argument("data: count must be >= 1");
  if (pos_fraction < 0 || pos_fraction > 1) throw std::invalid_argument("data: pos_fraction outside [0, 1]");
  if (split[0] < 0 || split[1] < 0 || split[2] < 0 || split[0] + split[1] + split[2] == 0)
    throw std::invalid_argument("data: split weights must be non-negative and not all zero");
  if (lesions_min < 1 || lesions_max < lesions_min) throw std::invalid_argument("data: bad lesion count range");
  if (thumbnail_level < 0 || thumbnail_level > 10) throw std::invalid_argument("data: thumbnail_level outside [0, 10]");
  if (tile_side < 32 || tile_side % 32 != 0) throw std::invalid_argument("data: tile_side must be a multiple of 32");
  if (tile_side > slide.side) throw std::invalid_argument("data: tile_side exceeds the slide side");
  if (slide.side % tile_side != 0) throw std::invalid_argument("data: slide side must be divisible by tile_side");
}

nlohmann::json DataConfig::to_json() const {
  return {{"count", count},
          {"pos_fraction", pos_fraction},
          {"split", split},
          {"lesions_min", lesions_min},
          {"lesions_max", lesions_max},
          {"thumbnail_level", thumbnail_level},
          {"tile_side", tile_side},
          {"slide", slide.to_json()}};
}

DataConfig DataConfig::from_json(const nlohmann::json& j) {
  DataConfig c;
  c.count = j.value("count", c.count);
  c.pos_fraction = j.value("pos_fraction", c.pos_fraction);
  if (j.contains("split")) c.split = j.at("split").get<std::array<int, 3>>();
  c.lesions_min = j.value("lesions_min", c.lesions_min);
  c.lesions_max = j.value("lesions_max", c.lesions_max);
  c.thumbnail_level = j.value("thumbnail_level", c.thumbnail_level);
  c.tile_side = j.value("tile_side", c.tile_side);
  if (j.contains("slide")) c.slide = SlideParams::from_json(j.at("slide"));
  return c;
}

std::array<int, 3> split_counts(int count, const std::array<int, 3>& weights) {
  const int total = weights[0] + weights[1] + weights[2];
  std::array<int, 3> out{};
  std::array<double, 3> rest{};
  int used = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = static_cast<double>(count) * weights[k] / total;
    out[k] = static_cast<int>(std::floor(exact));
    rest[k] = exact - out[k];
    used += out[k];
  }
  // Leftovers go to the largest remainders, earlier splits first on ties.
  while (used < count) {
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (rest[k] > rest[best]) best = k;
    ++out[best];
    rest[best] = -1.0;
    ++used;
  }
  return out;
}

nlohmann::json PatchConfig::to_json() const { return {{"side", side}, {"negatives", negatives}}; }

PatchConfig PatchConfig::from_json(const nlohmann::json& j) {
  PatchConfig c;
  c.side = j.value("side", c.side);
  c.negatives = j.value("negatives", c.negatives);
  if (c.side < 32 || c.side % 32 != 0) throw std::invalid_argument("patches: side must be a multiple of 32");
  if (c.negatives < 0) throw std::invalid_argument("patches: negatives must be >= 0");
  return c;
}

nlohmann::json EvalConfig::to_json() const { return {{"bootstrap", bootstrap}, {"accuracy", formula_name(formula)}}; }

EvalConfig EvalConfig::from_json(const nlohmann::json& j) {
  EvalConfig c;
  c.bootstrap = j.value("bootstrap", c.bootstrap);
  if (j.contains("accuracy")) c.formula = formula_from_string(j.at("accuracy").get<std::string>());
  if (c.bootstrap < 1) throw std::invalid_argument("eval: bootstrap must be >= 1");
  return c;
}

nlohmann::json AblationConfig::to_json() const {
  nlohmann::json conn = nlohmann::json::array(), loss = nlohmann::json::array();
  for (auto c : connections) conn.push_back(to_string(c));
  for (auto l : losses) loss.push_back(to_string(l));
  return {{"connections", conn}, {"losses", loss}, {"n", n}, {"d", d}};
}

AblationConfig AblationConfig::from_json(const nlohmann::json& j) {
  AblationConfig c;
  if (j.contains("connections")) {
    c.connections.clear();
    for (const auto& s : j.at("connections")) c.connections.push_back(connection_mode_from_string(s.get<std::string>()));
  }
  if (j.contains("losses")) {
    c.losses.clear();
    for (const auto& s : j.at("losses")) c.losses.push_back(loss_mode_from_string(s.get<std::string>()));
  }
  if (j.contains("n")) c.n = j.at("n").get<std::vector<int>>();
  if (j.contains("d")) c.d = j.at("d").get<std::vector<double>>();
  if (c.connections.empty() || c.losses.empty() || c.n.empty() || c.d.empty())
    throw std::invalid_argument("ablate: every sweep axis needs at least one value");
  return c;
}

ExperimentConfig ExperimentConfig::paper() { return {}; }

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.data.count = 60;
  c.data.split = {4, 1, 1};
  c.data.slide.side = 2048;
  c.data.tile_side = 1024;
  c.detector.epochs = 10;
  c.detector.batch_size = 8;
  c.classifier.width = 64;
  c.classifier.heads = 4;
  c.classifier.depth = 2;
  c.classifier.ff = 256;
  c.classifier.hidden = 128;
  c.classifier.dropout = 0.1;
  c.classifier.epochs = 60;
  c.classifier.lr0 = 1e-3;
  return c;
}

void ExperimentConfig::validate() const {
  if (repeats < 1) throw std::invalid_argument("repeats must be >= 1");
  data.validate();
  model.validate();
  detector.validate();
  collect.validate();
  classifier.validate();
  if (patches.side < 32 || patches.side % 32 != 0) throw std::invalid_argument("patches: side must be a multiple of 32");
  if (classifier.input_dim != kFeatureDim) throw std::invalid_argument("classifier: input_dim must be 768");
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"seed", seed},
          {"repeats", repeats},
          {"data", data.to_json()},
          {"model", model.to_json()},
          {"fit_anchors", fit_anchors},
          {"patches", patches.to_json()},
          {"detector", detector.to_json()},
          {"collect", collect.to_json()},
          {"classifier", classifier.to_json()},
          {"eval", eval.to_json()},
          {"ablate", ablate.to_json()}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j, const ExperimentConfig& base) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  auto merged = base.to_json();
  merged.merge_patch(j);
  ExperimentConfig c;
  c.seed = merged.at("seed").get<std::uint64_t>();
  c.repeats = merged.at("repeats").get<int>();
  c.data = DataConfig::from_json(merged.at("data"));
  c.model = YolcoConfig::from_json(merged.at("model"));
  c.fit_anchors = merged.at("fit_anchors").get<bool>();
  c.patches = PatchConfig::from_json(merged.at("patches"));
  c.detector = DetectorTrainConfig::from_json(merged.at("detector"));
  c.collect = CollectionConfig::from_json(merged.at("collect"));
  c.classifier = ClassifierConfig::from_json(merged.at("classifier"));
  c.eval = EvalConfig::from_json(merged.at("eval"));
  c.ablate = AblationConfig::from_json(merged.at("ablate"));
  // The model's loss mode drives training.
  c.detector.weights.mode = c.model.loss_mode;
  c.validate();
  return c;
}

std::uint64_t repeat_seed(std::uint64_t master, int repeat) {
  return repeat == 0 ? master : derive_seed(master, "repeat" + std::to_string(repeat));
}

std::vector<const DatasetSlide*> Dataset::split(const std::string& name) const {
  std::vector<const DatasetSlide*> out;
  for (const auto& s : slides)
    if (s.split == name) out.push_back(&s);
  return out;
}

Image Dataset::pixels(const DatasetSlide& slide) const {
  if (root.empty()) {
    auto params = config.slide;
    params.lesion_count = slide.lesions;
    return generate_synthetic_slide(slide.manifest.seed, params, slide.manifest.id).pixels;
  }
  const auto path = (root / "manifests" / slide.manifest.pixel_path).lexically_normal();
  if (!fs::exists(path)) throw MissingArtifact(path, "gen-data");
  return read_png(path);
}

Dataset plan_dataset(const DataConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Dataset data{cfg, seed, {}, {}};
  const std::uint64_t data_seed = derive_seed(seed, "data");
  Rng rng = make_rng(data_seed, "labels");
  const auto counts = split_counts(cfg.count, cfg.split);
  int index = 0;
  for (int k = 0; k < 3; ++k) {
    const int n = counts[k];
    const int positives = static_cast<int>(std::lround(cfg.pos_fraction * n));
    std::vector<int> labels(static_cast<std::size_t>(n), 0);
    std::fill(labels.begin(), labels.begin() + positives, 1);
    shuffle(labels, rng);
    for (int i = 0; i < n; ++i, ++index) {
      char id[32];
      std::snprintf(id, sizeof id, "slide_%03d", index);
      const int lesions =
          labels[i] ? cfg.lesions_min + static_cast<int>(uniform_index(rng, cfg.lesions_max - cfg.lesions_min + 1)) : 0;
      auto params = cfg.slide;
      params.lesion_count = lesions;
      auto slide = generate_synthetic_slide(derive_seed(data_seed, id), params, id);
      auto& m = slide.manifest;
      const auto thumb = make_thumbnail(slide.pixels, cfg.thumbnail_level);
      const auto fg = foreground_mask(thumb, cfg.thumbnail_level);
      m.thumbnail_level = cfg.thumbnail_level;
      m.tile_side = cfg.tile_side;
      m.tiles = tile_slide(fg, m.width, m.height, cfg.tile_side);
      m.pixel_path = std::string("../slides/") + id + ".png";
      m.thumbnail_path = std::string("../thumbnails/") + id + ".png";
      data.slides.push_back({std::move(m), kSplits[k], lesions});
    }
  }
  return data;
}

void write_dataset(const fs::path& dir, const DataConfig& cfg, std::uint64_t seed, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw std::invalid_argument(dir.string() + " is not empty (use --force to overwrite)");
    fs::remove_all(dir);
  }
  for (const char* sub : {"slides", "thumbnails", "manifests", "annotations"}) fs::create_directories(dir / sub);
  auto data = plan_dataset(cfg, seed);
  nlohmann::json index = nlohmann::json::array();
  for (const auto& s : data.slides) {
    const auto& m = s.manifest;
    const auto pixels = data.pixels(s);
    write_png(dir / "slides" / (m.id + ".png"), pixels);
    write_png(dir / "thumbnails" / (m.id + ".png"), make_thumbnail(pixels, m.thumbnail_level));
    write_manifest(dir / "manifests" / (m.id + ".json"), m);
    write_annotations_jsonl(dir / "annotations" / (m.id + ".jsonl"), m.annotations);
    index.push_back({{"id", m.id}, {"split", s.split}, {"label", m.label}, {"lesions", s.lesions}});
  }
  write_json(dir / "dataset.json", {{"seed", seed}, {"data", cfg.to_json()}, {"slides", index}});
}

Dataset read_dataset(const fs::path& dir) {
  const auto j = read_json(dir / "dataset.json", "gen-data");
  Dataset data{DataConfig::from_json(j.at("data")), j.at("seed").get<std::uint64_t>(), {}, dir};
  for (const auto& e : j.at("slides")) {
    const auto id = e.at("id").get<std::string>();
    const auto path = dir / "manifests" / (id + ".json");
    if (!fs::exists(path)) throw MissingArtifact(path, "gen-data");
    data.slides.push_back({read_manifest(path), e.at("split").get<std::string>(), e.at("lesions").get<int>()});
  }
  return data;
}

std::vector<PatchSample> dataset_patches(const Dataset& data, const std::string& split, const PatchConfig& cfg,
                                         Rng& rng) {
  std::vector<PatchSample> out;
  const Rgb fill = data.config.slide.palette.background;
  for (const auto* s : data.split(split)) {
    const auto pixels = data.pixels(*s);
    const auto fg = foreground_mask(make_thumbnail(pixels, s->manifest.thumbnail_level), s->manifest.thumbnail_level);
    auto patches = extract_patches(pixels, s->manifest.annotations, fg, cfg.side, cfg.negatives, fill, rng);
    std::move(patches.begin(), patches.end(), std::back_inserter(out));
  }
  return out;
}

MapReport patch_map(const YolcoModel& model, std::span<const PatchSample> samples, double tau, double nms_iou) {
  std::vector<ScoredBox> dets;
  std::vector<GroundTruthBox> gts;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (const auto& a : samples[i].annotations) gts.push_back({a.box, i});
    for (const auto& d : detect(model, samples[i].image, tau, nms_iou)) dets.push_back({d.box, d.prob, i});
  }
  if (gts.empty()) return {};
  return map_range(dets, gts);
}

DetectorTrainResult run_detector_stage(const ExperimentConfig& cfg, const Dataset& data, const ProgressFn& progress) {
  auto model_cfg = cfg.model;
  if (cfg.fit_anchors) {
    std::vector<Size2> sizes;
    for (const auto* s : data.split("train"))
      for (const auto& a : s->manifest.annotations) sizes.push_back(a.box.size());
    if (sizes.size() >= static_cast<std::size_t>(model_cfg.num_anchors))
      model_cfg.anchors = kmeans_anchors(sizes, model_cfg.num_anchors, 100, derive_seed(cfg.seed, "anchors"));
  }
  YolcoModel model(model_cfg, derive_seed(cfg.seed, "init"));
  Rng rng = make_rng(cfg.seed, "patches");
  const auto train = dataset_patches(data, "train", cfg.patches, rng);
  const auto val = dataset_patches(data, "val", cfg.patches, rng);
  if (train.empty()) throw std::invalid_argument("detector: the train split produced no patches");
  say(progress, "detector: " + std::to_string(train.size()) + " train / " + std::to_string(val.size()) +
                    " val patches");
  auto dcfg = cfg.detector;
  dcfg.weights.mode = model_cfg.loss_mode;
  dcfg.seed = derive_seed(cfg.seed, "detector");
  dcfg.fill = data.config.slide.palette.background;
  return train_detector(model, train, val, dcfg, [&](const EpochLog& e) {
    say(progress, "detector epoch " + std::to_string(e.epoch) + " loss " + format_real(e.loss_total) +
                      " val mAP50 " + format_real(e.val_map50));
  });
}

std::vector<std::vector<FeatureSequence>> run_encode_stage(const YolcoModel& model, const Dataset& data,
                                                           std::span<const DatasetSlide* const> slides,
                                                           std::span<const CollectionConfig> collects,
                                                           const ProgressFn& progress) {
  std::vector<std::vector<FeatureSequence>> out(collects.size());
  const Rgb fill = data.config.slide.palette.background;
  for (std::size_t i = 0; i < slides.size(); ++i) {
    const auto& m = slides[i]->manifest;
    const auto encoded = encode_tiles(model, data.pixels(*slides[i]), m.tiles, fill);
    for (std::size_t k = 0; k < collects.size(); ++k) out[k].push_back(collect(encoded, collects[k], m.id, m.label));
    say(progress, "encoded " + m.id + " (" + std::to_string(i + 1) + "/" + std::to_string(slides.size()) + ")");
  }
  return out;
}

WsiEvaluation evaluate_wsi(const SlideClassifier& classifier, std::span<const FeatureSequence> test,
                           const std::string& run, std::uint64_t seed, const EvalConfig& eval) {
  WsiEvaluation ev;
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& s : test) {
    ev.predictions.push_back(classifier.predict(s));
    scores.push_back(ev.predictions.back().prob);
    labels.push_back(s.label);
  }
  ev.metrics = evaluate_scores(run, scores, labels, derive_seed(seed, "bootstrap"), eval.formula, eval.bootstrap);
  ev.roc = roc_curve(scores, labels);
  return ev;
}

PipelineResult run_pipeline(const ExperimentConfig& cfg, const Dataset& data,
                            std::span<const CollectionConfig> collects, const fs::path& out,
                            const ProgressFn& progress) {
  cfg.validate();
  if (collects.empty()) throw std::invalid_argument("pipeline: no collection configuration");
  if (!out.empty()) {
    fs::create_directories(out);
    write_config_snapshot(out, cfg.to_json());
  }
  PipelineResult result{run_detector_stage(cfg, data, progress), {}, {}};
  const auto& model = result.detector.best;
  {
    Rng rng = make_rng(cfg.seed, "patches.test");
    const auto test_patches = dataset_patches(data, "test", cfg.patches, rng);
    result.test_patch_map = patch_map(model, test_patches, cfg.detector.val_tau, cfg.detector.nms_iou);
  }
  if (!out.empty()) {
    model.save(out / "detector.ckpt");
    write_training_log_csv(out / "detector_log.csv", result.detector.log);
  }

  const auto train = data.split("train"), test = data.split("test");
  const auto train_seqs = run_encode_stage(model, data, train, collects, progress);
  const auto test_seqs = run_encode_stage(model, data, test, collects, progress);

  for (std::size_t k = 0; k < collects.size(); ++k) {
    const auto& col = collects[k];
    auto ccfg = cfg.classifier;
    ccfg.seq_len = col.mode == CollectMode::topn ? col.n : col.n * col.per_box;
    ccfg.seed = derive_seed(cfg.seed, "classifier");
    auto trained = train_classifier(train_seqs[k], ccfg);
    char d[32];
    std::snprintf(d, sizeof d, "%g", col.d);
    const std::string run = to_string(ccfg.kind) + "_" + to_string(cfg.model.loss_mode) + "_" + to_string(col.mode) +
                            "_n" + std::to_string(col.n) + "_d" + d;
    auto ev = evaluate_wsi(trained.model, test_seqs[k], run, cfg.seed, cfg.eval);
    say(progress, run + ": auc " + format_real(ev.metrics.auc));
    if (!out.empty()) {
      const auto dir = out / run;
      fs::create_directories(dir);
      write_config_snapshot(dir, {{"experiment", cfg.to_json()}, {"collect", col.to_json()},
                                  {"classifier", ccfg.to_json()}});
      trained.model.save(dir / "classifier.ckpt");
      write_classifier_log_csv(dir / "classifier_log.csv", trained.log);
      write_metrics_csv(dir / "metrics.csv", std::span(&ev.metrics, 1));
      write_roc_csv(dir / "roc.csv", ev.roc);
      write_per_vector_csv(dir / "per_vector.csv", ev.predictions);
      write_hidden_csv(dir / "hidden.csv", ev.predictions);
    }
    result.runs.push_back({col, std::move(trained.log), std::move(ev)});
  }
  return result;
}

void write_config_snapshot(const fs::path& dir, const nlohmann::json& config) {
  fs::create_directories(dir);
  write_json(dir / "config.json", config);
}

}  // namespace yolco
