#include "yolco/loss.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace yolco {

namespace {

template <typename T>
BasicTensor<T> constant_zero() {
  return BasicTensor<T>::scalar(T(0));
}

// Loss and d loss / d logit for one element, in double precision.
std::pair<double, double> focal_term(double z, double p, const FocalParams& fp) {
  const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  const double r = z >= 0 ? std::exp(-z) / (1.0 + std::exp(-z)) : 1.0 / (1.0 + std::exp(z));  // 1 - s
  const double g = fp.gamma;
  const double log_pos = std::log(s + fp.eps);
  const double log_neg = std::log(r + fp.eps);
  const double r_g = std::pow(r, g);
  const double s_g = std::pow(s, g);
  const double loss = -fp.theta * r_g * p * log_pos - (1.0 - fp.theta) * s_g * (1.0 - p) * log_neg;
  // ds/dz = s r; the (1-s)^(gamma-1) factors are folded into s r to stay finite.
  const double d_pos = -fp.theta * (-g * s * r_g * log_pos + r_g * s * r / (s + fp.eps));
  const double d_neg = -(1.0 - fp.theta) * (g * s_g * r * log_neg - s_g * s * r / (r + fp.eps));
  return {loss, p * d_pos + (1.0 - p) * d_neg};
}

}  // namespace

template <typename T>
BasicTensor<T> focal_cls_loss(const BasicTensor<T>& logits, std::span<const std::int64_t> indices,
                              std::span<const T> targets, const FocalParams& params) {
  if (indices.size() != targets.size()) {
    throw std::invalid_argument("focal_cls_loss: indices and targets differ in length");
  }
  if (indices.empty()) return constant_zero<T>();
  const auto z = logits.data();
  const auto n = static_cast<double>(indices.size());
  double total = 0;
  std::vector<double> grad(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto i = indices[k];
    if (i < 0 || i >= logits.numel()) throw std::out_of_range("focal_cls_loss: index out of range");
    const auto [l, d] = focal_term(static_cast<double>(z[i]), static_cast<double>(targets[k]), params);
    total += l;
    grad[k] = d / n;
  }
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  return make_op<T>({}, {static_cast<T>(total / n)}, {logits},
                    [logits = logits, idx = std::move(idx), grad = std::move(grad)](const std::vector<T>& g) mutable {
                      auto gx = logits.mutable_grad();
                      for (std::size_t k = 0; k < idx.size(); ++k) gx[idx[k]] += static_cast<T>(g[0] * grad[k]);
                    });
}

template <typename T>
BasicTensor<T> focal_cls_loss(const BasicTensor<T>& logits, std::span<const T> targets,
                              const FocalParams& params) {
  if (static_cast<std::int64_t>(targets.size()) != logits.numel()) {
    throw std::invalid_argument("focal_cls_loss: one target per logit expected");
  }
  std::vector<std::int64_t> idx(targets.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
  return focal_cls_loss<T>(logits, std::span<const std::int64_t>(idx), targets, params);
}

template <typename T>
BasicTensor<T> box_loss(const BasicTensor<T>& y_box, const Assignment& assignment) {
  if (y_box.rank() != 3 || y_box.dim(0) % 4 != 0) throw ShapeError("box_loss: expected [4 n_a, h, w]");
  if (assignment.size() == 0) return constant_zero<T>();
  const auto cells = y_box.dim(1) * y_box.dim(2);
  const auto na = y_box.dim(0) / 4;
  const auto yb = y_box.data();
  const double k = static_cast<double>(assignment.size());
  std::vector<std::int64_t> idx;
  std::vector<double> diff;
  double total = 0;
  for (const auto& t : assignment.targets) {
    if (t.anchor < 0 || t.anchor >= na || t.cell < 0 || t.cell >= cells) {
      throw std::out_of_range("box_loss: assignment outside the output grid");
    }
    const double target[4] = {t.qx, t.qy, t.vx, t.vy};
    for (int j = 0; j < 4; ++j) {
      const auto i = (4 * t.anchor + j) * cells + t.cell;
      const double d = static_cast<double>(yb[i]) - target[j];
      total += d * d;
      idx.push_back(i);
      diff.push_back(d);
    }
  }
  return make_op<T>({}, {static_cast<T>(total / k)}, {y_box},
                    [y_box = y_box, idx = std::move(idx), diff = std::move(diff), k](const std::vector<T>& g) mutable {
                      auto gx = y_box.mutable_grad();
                      for (std::size_t m = 0; m < idx.size(); ++m)
                        gx[idx[m]] += static_cast<T>(g[0] * 2.0 * diff[m] / k);
                    });
}

template <typename T>
LossTerms<T> total_loss(std::span<const ScalePrediction<T>> scales, const LossWeights& weights) {
  LossTerms<T> out;
  BasicTensor<T> total = constant_zero<T>();
  for (const auto& s : scales) {
    if (s.assignment == nullptr) throw std::invalid_argument("total_loss: missing assignment");
    if (s.cls.rank() != 3) throw ShapeError("total_loss: cls must be [n_a, h, w]");
    const auto cells = s.cls.dim(1) * s.cls.dim(2);
    const auto na = s.cls.dim(0);
    std::set<std::int64_t> responsible;
    for (const auto& t : s.assignment->targets) {
      if (t.anchor < 0 || t.anchor >= na || t.cell < 0 || t.cell >= cells) {
        throw std::out_of_range("total_loss: assignment outside the output grid");
      }
      responsible.insert(static_cast<std::int64_t>(t.anchor) * cells + t.cell);
    }
    std::vector<std::int64_t> obj(responsible.begin(), responsible.end());
    std::vector<std::int64_t> noobj;
    noobj.reserve(static_cast<std::size_t>(s.cls.numel()) - obj.size());
    for (std::int64_t i = 0; i < s.cls.numel(); ++i) {
      if (!responsible.contains(i)) noobj.push_back(i);
    }
    const std::vector<T> ones(obj.size(), T(1));
    const std::vector<T> zeros(noobj.size(), T(0));
    auto l_obj = focal_cls_loss<T>(s.cls, std::span<const std::int64_t>(obj), std::span<const T>(ones),
                                   weights.focal);
    auto l_noobj = focal_cls_loss<T>(s.cls, std::span<const std::int64_t>(noobj),
                                     std::span<const T>(zeros), weights.focal);
    out.obj += static_cast<double>(l_obj.item());
    out.noobj += static_cast<double>(l_noobj.item());
    total = add(total, add(scale(l_obj, static_cast<T>(weights.alpha)),
                           scale(l_noobj, static_cast<T>(weights.beta))));
    if (weights.mode == LossMode::dual) {
      auto l_box = box_loss<T>(s.box, *s.assignment);
      out.box += static_cast<double>(l_box.item());
      total = add(total, l_box);
    }
  }
  out.total = total;
  return out;
}

LossTerms<float> total_loss(const NetworkOutput& output, const Assignment& scale5,
                            const Assignment& scale4, const LossWeights& weights) {
  const ScalePrediction<float> scales[2] = {{output.scale5.box, output.scale5.cls, &scale5},
                                            {output.scale4.box, output.scale4.cls, &scale4}};
  return total_loss<float>(std::span<const ScalePrediction<float>>(scales), weights);
}

#define YOLCO_INSTANTIATE_LOSS(T)                                                              \
  template BasicTensor<T> focal_cls_loss<T>(const BasicTensor<T>&, std::span<const std::int64_t>, \
                                            std::span<const T>, const FocalParams&);            \
  template BasicTensor<T> focal_cls_loss<T>(const BasicTensor<T>&, std::span<const T>,         \
                                            const FocalParams&);                               \
  template BasicTensor<T> box_loss<T>(const BasicTensor<T>&, const Assignment&);               \
  template LossTerms<T> total_loss<T>(std::span<const ScalePrediction<T>>, const LossWeights&);

YOLCO_INSTANTIATE_LOSS(float)
YOLCO_INSTANTIATE_LOSS(double)

}  // namespace yolco
