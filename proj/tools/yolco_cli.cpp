// yolco: data generation, detector and classifier training, evaluation,
// ablations and plot data. Exit codes: 0 ok, 2 config error, 3 missing
// artifact, 1 anything else.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "yolco/pipeline.hpp"

namespace fs = std::filesystem;
using namespace yolco;

namespace {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Options {
  std::string config;
  std::string profile = "paper";
  std::optional<std::uint64_t> seed;
  std::optional<int> repeats;
  bool force = false;
  std::optional<int> tile_side;
  std::optional<int> collect_n;
  std::optional<double> collect_d;
  std::optional<std::string> collect_mode;
  std::optional<std::string> classifier;
  std::optional<std::string> connection_mode;
  std::optional<std::string> loss_mode;
  bool quiet = false;
};

void add_common(CLI::App* app, Options& o) {
  app->add_option("--config", o.config, "JSON config file (fields override the profile)");
  app->add_option("--profile", o.profile, "base settings: paper or desk")->check(CLI::IsMember({"paper", "desk"}));
  app->add_option("--seed", o.seed, "master seed");
  app->add_option("--repeats", o.repeats, "repeated train-val-test loops");
  app->add_flag("--force", o.force, "overwrite a non-empty output directory");
  app->add_option("--tile-side", o.tile_side, "slide tile side in pixels");
  app->add_option("--collect-n", o.collect_n, "feature vectors collected per slide");
  app->add_option("--collect-d", o.collect_d, "minimum distance between collected vectors (pixels)");
  app->add_option("--collect-mode", o.collect_mode, "topn or bbox");
  app->add_option("--classifier", o.classifier, "svm, rnn, lstm or transformer");
  app->add_option("--connection-mode", o.connection_mode, "none, skip, half_inc or inc");
  app->add_option("--loss-mode", o.loss_mode, "dual or cls_only");
  app->add_flag("-q,--quiet", o.quiet, "no progress output");
}

ExperimentConfig resolve(const Options& o) {
  try {
    auto cfg = o.profile == "desk" ? ExperimentConfig::desk() : ExperimentConfig::paper();
    if (!o.config.empty()) {
      std::ifstream in(o.config);
      if (!in) throw ConfigError("cannot read config " + o.config);
      cfg = ExperimentConfig::from_json(nlohmann::json::parse(in), cfg);
    }
    if (o.seed) cfg.seed = *o.seed;
    if (o.repeats) cfg.repeats = *o.repeats;
    if (o.tile_side) cfg.data.tile_side = *o.tile_side;
    if (o.collect_n) cfg.collect.n = *o.collect_n;
    if (o.collect_d) cfg.collect.d = *o.collect_d;
    if (o.collect_mode) cfg.collect.mode = collect_mode_from_string(*o.collect_mode);
    if (o.classifier) cfg.classifier.kind = classifier_kind_from_string(*o.classifier);
    if (o.connection_mode) cfg.model.connection = connection_mode_from_string(*o.connection_mode);
    if (o.loss_mode) cfg.model.loss_mode = loss_mode_from_string(*o.loss_mode);
    cfg.detector.weights.mode = cfg.model.loss_mode;
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

ProgressFn progress(const Options& o) {
  if (o.quiet) return {};
  return [](const std::string& s) { std::cerr << s << '\n'; };
}

nlohmann::json read_json(const fs::path& path, const std::string& stage) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact(path, stage);
  return nlohmann::json::parse(in);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  out << j.dump(2) << '\n';
}

void require(const fs::path& path, const std::string& stage) {
  if (!fs::exists(path)) throw MissingArtifact(path, stage);
}

YolcoModel load_detector(const fs::path& dir) {
  require(dir / "detector.ckpt", "train-detector");
  return YolcoModel::load(dir / "detector.ckpt");
}

// Sequences written by encode-wsi, filtered by split.
struct SequenceSet {
  CollectionConfig collect;
  std::vector<FeatureSequence> seqs;
};

SequenceSet load_sequences(const fs::path& dir, const std::string& split) {
  const auto index = read_json(dir / "index.json", "encode-wsi");
  SequenceSet set{CollectionConfig::from_json(index.at("collect")), {}};
  for (const auto& e : index.at("slides")) {
    if (e.at("split").get<std::string>() != split) continue;
    const auto path = dir / e.at("file").get<std::string>();
    require(path, "encode-wsi");
    set.seqs.push_back(read_feature_sequence(path));
  }
  if (set.seqs.empty()) throw std::invalid_argument("no '" + split + "' sequences in " + dir.string());
  return set;
}

int classifier_seq_len(const CollectionConfig& c) { return c.mode == CollectMode::topn ? c.n : c.n * c.per_box; }

void cmd_gen_data(const Options& o, const fs::path& out, std::optional<int> count, std::optional<double> pos) {
  auto cfg = resolve(o);
  if (count) cfg.data.count = *count;
  if (pos) cfg.data.pos_fraction = *pos;
  try {
    cfg.data.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (fs::exists(out) && !fs::is_empty(out) && !o.force)
    throw ConfigError(out.string() + " is not empty (use --force to overwrite)");
  write_dataset(out, cfg.data, cfg.seed, o.force);
  write_config_snapshot(out, cfg.to_json());
  if (!o.quiet) std::cerr << "wrote " << cfg.data.count << " slides to " << out.string() << '\n';
}

void cmd_train_detector(const Options& o, const fs::path& data_dir, const fs::path& out) {
  const auto cfg = resolve(o);
  const auto data = read_dataset(data_dir);
  fs::create_directories(out);
  write_config_snapshot(out, cfg.to_json());
  auto result = run_detector_stage(cfg, data, progress(o));
  result.best.save(out / "detector.ckpt");
  write_anchors_json(out / "anchors.json", result.best.config().anchors);
  write_training_log_csv(out / "detector_log.csv", result.log);
}

void cmd_eval_patch(const Options& o, const fs::path& data_dir, const fs::path& det_dir, const std::string& split,
                    const fs::path& out) {
  const auto cfg = resolve(o);
  const auto data = read_dataset(data_dir);
  const auto model = load_detector(det_dir);
  Rng rng = make_rng(cfg.seed, "patches." + split);
  const auto patches = dataset_patches(data, split, cfg.patches, rng);
  const auto report = patch_map(model, patches, cfg.detector.val_tau, cfg.detector.nms_iou);
  fs::create_directories(out);
  write_config_snapshot(out, {{"experiment", cfg.to_json()}, {"detector", det_dir.string()}, {"split", split}});
  std::ofstream csv(out / "patch_map.csv", std::ios::binary);
  csv << "split,patches,map50,map50_95\n"
      << split << ',' << patches.size() << ',' << format_real(report.map50) << ',' << format_real(report.map50_95)
      << '\n';
  std::cout << split << " mAP@.5 " << format_real(report.map50) << " mAP@.5:.95 " << format_real(report.map50_95)
            << '\n';
}

void cmd_encode_wsi(const Options& o, const fs::path& data_dir, const fs::path& det_dir, const fs::path& out,
                    bool csv) {
  const auto cfg = resolve(o);
  const auto data = read_dataset(data_dir);
  const auto model = load_detector(det_dir);
  fs::create_directories(out / "sequences");
  write_config_snapshot(out, {{"experiment", cfg.to_json()}, {"detector", det_dir.string()}});
  std::vector<const DatasetSlide*> slides;
  for (const auto& s : data.slides) slides.push_back(&s);
  const auto seqs = run_encode_stage(model, data, slides, std::span(&cfg.collect, 1), progress(o))[0];
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto file = "sequences/" + seqs[i].slide_id + ".seq";
    write_feature_sequence(out / file, seqs[i]);
    entries.push_back({{"id", seqs[i].slide_id}, {"split", slides[i]->split}, {"label", seqs[i].label}, {"file", file}});
  }
  write_json(out / "index.json", {{"collect", cfg.collect.to_json()}, {"slides", entries}});
  if (csv) write_feature_sequence_csv(out / "features.csv", seqs);
}

void cmd_train_classifier(const Options& o, const fs::path& seq_dir, const fs::path& out) {
  const auto cfg = resolve(o);
  const auto train = load_sequences(seq_dir, "train");
  auto ccfg = cfg.classifier;
  ccfg.seq_len = classifier_seq_len(train.collect);
  ccfg.seed = derive_seed(cfg.seed, "classifier");
  fs::create_directories(out);
  write_config_snapshot(out, {{"experiment", cfg.to_json()}, {"sequences", seq_dir.string()},
                              {"classifier", ccfg.to_json()}});
  const auto p = progress(o);
  auto result = train_classifier(train.seqs, ccfg, [&](const ClassifierEpoch& e) {
    if (p) p("classifier epoch " + std::to_string(e.epoch) + " loss " + format_real(e.loss));
  });
  result.model.save(out / "classifier.ckpt");
  write_classifier_log_csv(out / "classifier_log.csv", result.log);
}

nlohmann::json predictions_json(const WsiEvaluation& ev) {
  nlohmann::json slides = nlohmann::json::array();
  for (const auto& p : ev.predictions)
    slides.push_back({{"id", p.slide_id}, {"label", p.label}, {"prob", p.prob}, {"per_vector", p.per_vector}});
  return slides;
}

void write_eval(const fs::path& out, const WsiEvaluation& ev) {
  write_metrics_csv(out / "metrics.csv", std::span(&ev.metrics, 1));
  write_roc_csv(out / "roc.csv", ev.roc);
  write_per_vector_csv(out / "per_vector.csv", ev.predictions);
  write_hidden_csv(out / "hidden.csv", ev.predictions);
}

void cmd_eval_wsi(const Options& o, const fs::path& seq_dir, const fs::path& cls_dir, const std::string& split,
                  const fs::path& out) {
  const auto cfg = resolve(o);
  require(cls_dir / "classifier.ckpt", "train-classifier");
  const auto classifier = SlideClassifier::load(cls_dir / "classifier.ckpt");
  const auto test = load_sequences(seq_dir, split);
  const auto ev = evaluate_wsi(classifier, test.seqs, to_string(classifier.config().kind), cfg.seed, cfg.eval);
  fs::create_directories(out);
  write_config_snapshot(out, {{"experiment", cfg.to_json()},
                              {"sequences", seq_dir.string()},
                              {"classifier", cls_dir.string()},
                              {"split", split}});
  write_eval(out, ev);
  write_json(out / "predictions.json", {{"classifier", fs::absolute(cls_dir).string()},
                                        {"n", test.collect.n},
                                        {"slides", predictions_json(ev)}});
  std::cout << "auc " << format_real(ev.metrics.auc) << " [" << format_real(ev.metrics.ci_lo) << ", "
            << format_real(ev.metrics.ci_hi) << "] acc " << format_real(ev.metrics.accuracy) << '\n';
}

std::vector<CollectionConfig> collect_grid(const ExperimentConfig& cfg) {
  std::vector<CollectionConfig> out;
  for (int n : cfg.ablate.n)
    for (double d : cfg.ablate.d) {
      auto c = cfg.collect;
      c.n = n;
      c.d = d;
      out.push_back(c);
    }
  return out;
}

void cmd_ablate(const Options& o, const fs::path& data_dir, const fs::path& out) {
  const auto base = resolve(o);
  const auto data = read_dataset(data_dir);
  fs::create_directories(out);
  write_config_snapshot(out, base.to_json());
  const auto grid = collect_grid(base);
  std::ofstream csv(out / "ablation.csv", std::ios::binary);
  csv << "repeat,seed,connection,loss,n,d,mode,map50,acc,sens,spec,auc,ci_lo,ci_hi\n";
  for (int r = 0; r < base.repeats; ++r) {
    for (auto conn : base.ablate.connections) {
      for (auto loss : base.ablate.losses) {
        auto cfg = base;
        cfg.seed = repeat_seed(base.seed, r);
        cfg.model.connection = conn;
        cfg.model.loss_mode = loss;
        cfg.detector.weights.mode = loss;
        const auto dir = out / ("repeat" + std::to_string(r) + "_" + to_string(conn) + "_" + to_string(loss));
        const auto result = run_pipeline(cfg, data, grid, dir, progress(o));
        for (const auto& run : result.runs) {
          const auto& m = run.evaluation.metrics;
          csv << r << ',' << cfg.seed << ',' << to_string(conn) << ',' << to_string(loss) << ',' << run.collect.n << ','
              << format_real(run.collect.d) << ',' << to_string(run.collect.mode) << ','
              << format_real(result.test_patch_map.map50) << ',' << format_real(m.accuracy) << ','
              << format_real(m.sensitivity) << ',' << format_real(m.specificity) << ',' << format_real(m.auc) << ','
              << format_real(m.ci_lo) << ',' << format_real(m.ci_hi) << '\n';
          csv.flush();
        }
      }
    }
  }
}

void cmd_plot_data(const fs::path& run) {
  const auto pred = read_json(run / "predictions.json", "eval-wsi");
  const fs::path cls_dir = pred.at("classifier").get<std::string>();
  require(cls_dir / "classifier_log.csv", "train-classifier");
  std::vector<double> scores;
  std::vector<int> labels;
  const auto out = run / "plots";
  fs::create_directories(out);
  std::ofstream fl(out / "fluctuation.csv", std::ios::binary);
  fl << "slide_id,label,rank,prob\n";
  for (const auto& s : pred.at("slides")) {
    scores.push_back(s.at("prob").get<double>());
    labels.push_back(s.at("label").get<int>());
    const auto per = s.at("per_vector").get<std::vector<double>>();
    for (std::size_t r = 0; r < per.size(); ++r)
      fl << s.at("id").get<std::string>() << ',' << labels.back() << ',' << r << ',' << format_real(per[r]) << '\n';
  }
  write_roc_csv(out / "roc.csv", roc_curve(scores, labels));
  fs::copy_file(cls_dir / "classifier_log.csv", out / "loss.csv", fs::copy_options::overwrite_existing);
  std::ofstream dist(out / "probabilities.csv", std::ios::binary);
  dist << "slide_id,label,prob\n";
  for (const auto& s : pred.at("slides"))
    dist << s.at("id").get<std::string>() << ',' << s.at("label").get<int>() << ','
         << format_real(s.at("prob").get<double>()) << '\n';
}

void cmd_run(const Options& o, const fs::path& out) {
  const auto cfg = resolve(o);
  if (fs::exists(out) && !fs::is_empty(out) && !o.force)
    throw ConfigError(out.string() + " is not empty (use --force to overwrite)");
  write_dataset(out / "data", cfg.data, cfg.seed, true);
  const auto data = read_dataset(out / "data");
  write_config_snapshot(out, cfg.to_json());
  std::vector<MetricsRow> rows;
  for (int r = 0; r < cfg.repeats; ++r) {
    auto rc = cfg;
    rc.seed = repeat_seed(cfg.seed, r);
    const auto result = run_pipeline(rc, data, std::span(&rc.collect, 1), out / ("repeat" + std::to_string(r)),
                                     progress(o));
    auto row = result.runs[0].evaluation.metrics;
    row.run = "repeat" + std::to_string(r);
    rows.push_back(row);
  }
  write_metrics_csv(out / "metrics.csv", rows);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"YOLCO slide screening pipeline"};
  app.require_subcommand(1);
  Options o;
  fs::path out, data, det, seqs, cls, run;
  std::string split = "test";
  std::optional<int> count;
  std::optional<double> pos;
  bool csv = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic slide dataset");
  gen->add_option("--out", out, "dataset directory")->required();
  gen->add_option("--count", count, "number of slides");
  gen->add_option("--pos-fraction", pos, "fraction of positive slides per split");
  auto* tdet = app.add_subcommand("train-detector", "train the patch-level detector");
  tdet->add_option("--data", data, "dataset directory")->required();
  tdet->add_option("--out", out, "output directory")->required();
  auto* epatch = app.add_subcommand("eval-patch", "patch-level mAP of a detector");
  epatch->add_option("--data", data, "dataset directory")->required();
  epatch->add_option("--detector", det, "train-detector output")->required();
  epatch->add_option("--split", split, "train, val or test");
  epatch->add_option("--out", out, "output directory")->required();
  auto* enc = app.add_subcommand("encode-wsi", "encode slides and collect feature sequences");
  enc->add_option("--data", data, "dataset directory")->required();
  enc->add_option("--detector", det, "train-detector output")->required();
  enc->add_option("--out", out, "output directory")->required();
  enc->add_flag("--csv", csv, "also write features.csv");
  auto* tcls = app.add_subcommand("train-classifier", "train the slide classifier");
  tcls->add_option("--sequences", seqs, "encode-wsi output")->required();
  tcls->add_option("--out", out, "output directory")->required();
  auto* ewsi = app.add_subcommand("eval-wsi", "slide-level metrics of a classifier");
  ewsi->add_option("--sequences", seqs, "encode-wsi output")->required();
  ewsi->add_option("--classifier-dir", cls, "train-classifier output")->required();
  ewsi->add_option("--split", split, "train, val or test");
  ewsi->add_option("--out", out, "output directory")->required();
  auto* abl = app.add_subcommand("ablate", "connection x loss x collection sweep");
  abl->add_option("--data", data, "dataset directory")->required();
  abl->add_option("--out", out, "output directory")->required();
  auto* plot = app.add_subcommand("plot-data", "plot-ready CSVs of an eval-wsi run");
  plot->add_option("--run", run, "eval-wsi output")->required();
  auto* all = app.add_subcommand("run", "every stage end to end");
  all->add_option("--out", out, "output directory")->required();
  for (auto* sub : {gen, tdet, epatch, enc, tcls, ewsi, abl, plot, all}) add_common(sub, o);
  for (auto* sub : {epatch, ewsi}) sub->get_option("--split")->check(CLI::IsMember({"train", "val", "test"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) cmd_gen_data(o, out, count, pos);
    else if (tdet->parsed()) cmd_train_detector(o, data, out);
    else if (epatch->parsed()) cmd_eval_patch(o, data, det, split, out);
    else if (enc->parsed()) cmd_encode_wsi(o, data, det, out, csv);
    else if (tcls->parsed()) cmd_train_classifier(o, seqs, out);
    else if (ewsi->parsed()) cmd_eval_wsi(o, seqs, cls, split, out);
    else if (abl->parsed()) cmd_ablate(o, data, out);
    else if (plot->parsed()) cmd_plot_data(run);
    else if (all->parsed()) cmd_run(o, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const MissingArtifact& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
