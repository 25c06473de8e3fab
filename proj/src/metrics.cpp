#include "yolco/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "yolco/rng.hpp"

namespace yolco {

Confusion confusion(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("confusion: length mismatch");
  Confusion c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int p = predicted[i], t = truth[i];
    if ((p != 0 && p != 1) || (t != 0 && t != 1)) throw std::invalid_argument("confusion: labels must be 0 or 1");
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

SlideRates slide_rates(const Confusion& c, AccuracyFormula formula) {
  if (c.tp + c.fn == 0) throw std::domain_error("sensitivity undefined: no positive slides");
  if (c.tn + c.fp == 0) throw std::domain_error("specificity undefined: no negative slides");
  SlideRates r;
  r.sensitivity = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  r.specificity = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  if (formula == AccuracyFormula::balanced) {
    r.accuracy = 0.5 * (r.sensitivity + r.specificity);
  } else {
    if (c.tp + c.fp == 0 || c.tn + c.fn == 0) throw std::domain_error("compat accuracy undefined: empty prediction class");
    r.accuracy = static_cast<double>(c.tp) / (2.0 * static_cast<double>(c.tp + c.fp)) +
                 static_cast<double>(c.tn) / (2.0 * static_cast<double>(c.tn + c.fn));
  }
  return r;
}

PrecisionRecall precision_recall(const Confusion& c) {
  if (c.tp + c.fn == 0) throw std::domain_error("recall undefined: no positives");
  PrecisionRecall pr;
  pr.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (c.tp + c.fp > 0) pr.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  return pr;
}

double average_precision(std::span<const ScoredBox> detections, std::span<const GroundTruthBox> truth,
                         double iou_thr) {
  if (truth.empty()) throw std::domain_error("average_precision: no ground truth boxes");
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });

  std::vector<char> matched(truth.size(), 0);
  std::vector<double> precision, recall;
  precision.reserve(order.size());
  recall.reserve(order.size());
  std::int64_t tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto& d = detections[order[k]];
    double best = iou_thr;
    std::ptrdiff_t hit = -1;
    for (std::size_t g = 0; g < truth.size(); ++g) {
      if (matched[g] || truth[g].image != d.image) continue;
      const double iou = box_iou(d.box, truth[g].box);
      if (iou >= best && (hit < 0 || iou > best)) {
        best = iou;
        hit = static_cast<std::ptrdiff_t>(g);
      }
    }
    if (hit >= 0) {
      matched[static_cast<std::size_t>(hit)] = 1;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(truth.size()));
  }
  // Running max from the right gives the interpolated envelope.
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);

  double area = 0.0;
  std::size_t k = 0;
  for (int i = 0; i <= 100; ++i) {
    const double r = i / 100.0;
    while (k < recall.size() && recall[k] < r - 1e-12) ++k;
    if (k < recall.size()) area += precision[k];
  }
  return area / 101.0;
}

MapReport map_range(std::span<const ScoredBox> detections, std::span<const GroundTruthBox> truth) {
  MapReport m;
  m.map50 = average_precision(detections, truth, 0.5);
  double acc = 0.0;
  for (int i = 0; i < 10; ++i) acc += average_precision(detections, truth, 0.5 + 0.05 * i);
  m.map50_95 = acc / 10.0;
  return m;
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("roc_curve: length mismatch");
  std::int64_t pos = 0, neg = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument("roc_curve: labels must be 0 or 1");
    (l ? pos : neg)++;
  }
  if (pos == 0 || neg == 0) throw std::domain_error("roc_curve: both classes required");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::vector<RocPoint> pts{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  std::int64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      (labels[order[i]] ? tp : fp)++;
      ++i;
    }
    pts.push_back({static_cast<double>(fp) / neg, static_cast<double>(tp) / pos, s});
  }
  return pts;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  const auto pts = roc_curve(scores, labels);
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    area += (pts[i].fpr - pts[i - 1].fpr) * 0.5 * (pts[i].tpr + pts[i - 1].tpr);
  return area;
}

namespace {

double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

Interval bootstrap_ci(const ScoreMetric& metric, std::span<const double> scores, std::span<const int> labels,
                      int samples, double level, std::uint64_t seed) {
  if (scores.size() != labels.size() || scores.empty()) throw std::invalid_argument("bootstrap_ci: bad input");
  if (samples < 1 || !(level > 0.0 && level < 1.0)) throw std::invalid_argument("bootstrap_ci: bad settings");
  const bool both = std::count(labels.begin(), labels.end(), 1) > 0 && std::count(labels.begin(), labels.end(), 0) > 0;
  if (!both) throw std::domain_error("bootstrap_ci: both classes required");

  auto rng = make_rng(seed, "bootstrap");
  const std::size_t n = scores.size();
  std::vector<double> s(n), values;
  std::vector<int> l(n);
  values.reserve(static_cast<std::size_t>(samples));
  for (int b = 0; b < samples; ++b) {
    bool has0 = false, has1 = false;
    while (!(has0 && has1)) {
      has0 = has1 = false;
      for (std::size_t i = 0; i < n; ++i) {
        const auto j = static_cast<std::size_t>(uniform_index(rng, n));
        s[i] = scores[j];
        l[i] = labels[j];
        (l[i] ? has1 : has0) = true;
      }
    }
    values.push_back(metric(s, l));
  }
  std::sort(values.begin(), values.end());
  return {quantile_sorted(values, 0.5 * (1.0 - level)), quantile_sorted(values, 0.5 * (1.0 + level))};
}

MetricsRow evaluate_scores(std::string run, std::span<const double> scores, std::span<const int> labels,
                           std::uint64_t seed, AccuracyFormula formula, int bootstrap_samples) {
  std::vector<int> predicted(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) predicted[i] = scores[i] >= 0.5 ? 1 : 0;
  const auto rates = slide_rates(confusion(predicted, labels), formula);
  const auto ci = bootstrap_ci(
      [](std::span<const double> s, std::span<const int> l) { return roc_auc(s, l); }, scores, labels,
      bootstrap_samples, 0.95, seed);
  return {std::move(run), rates.accuracy, rates.sensitivity, rates.specificity, roc_auc(scores, labels), ci.lo, ci.hi};
}

std::string format_real(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", value == 0.0 ? 0.0 : value);
  return buf;
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "run,acc,sens,spec,auc,ci_lo,ci_hi\n";
  for (const auto& r : rows) {
    out << r.run << ',' << format_real(r.accuracy) << ',' << format_real(r.sensitivity) << ','
        << format_real(r.specificity) << ',' << format_real(r.auc) << ',' << format_real(r.ci_lo) << ','
        << format_real(r.ci_hi) << '\n';
  }
}

void write_roc_csv(const std::filesystem::path& path, std::span<const RocPoint> points) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "fpr,tpr\n";
  for (const auto& p : points) out << format_real(p.fpr) << ',' << format_real(p.tpr) << '\n';
}

}  // namespace yolco
