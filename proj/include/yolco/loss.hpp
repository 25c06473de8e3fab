#pragma once

// Detector objectives: focal classification loss, box regression MSE over
// the responsible (cell, anchor) pairs, and their weighted two-scale sum.

#include <cstdint>
#include <span>
#include <vector>

#include "yolco/geometry.hpp"
#include "yolco/model.hpp"
#include "yolco/tensor.hpp"

namespace yolco {

struct FocalParams {
  double theta = 0.95;
  double gamma = 1.0;
  double eps = 1e-9;
};

/// Mean over the selected logits of
///   -theta (1-s)^gamma p log(s+eps) - (1-theta) s^gamma (1-p) log(1-s+eps)
/// with s = sigmoid(logit). Empty selection gives a constant 0.
template <typename T>
BasicTensor<T> focal_cls_loss(const BasicTensor<T>& logits, std::span<const std::int64_t> indices,
                              std::span<const T> targets, const FocalParams& params = {});

/// Every element of `logits`, one target each.
template <typename T>
BasicTensor<T> focal_cls_loss(const BasicTensor<T>& logits, std::span<const T> targets,
                              const FocalParams& params = {});

/// (1/K) sum over the K assigned pairs of |q - q_hat|^2 + |v - v_hat|^2.
/// y_box is [4 n_a, h, w]; an empty assignment gives a constant 0.
template <typename T>
BasicTensor<T> box_loss(const BasicTensor<T>& y_box, const Assignment& assignment);

struct LossWeights {
  double alpha = 1.0;
  double beta = 100.0;
  FocalParams focal;
  LossMode mode = LossMode::dual;
};

template <typename T>
struct ScalePrediction {
  BasicTensor<T> box;  // [4 n_a, h, w]
  BasicTensor<T> cls;  // [n_a, h, w]
  const Assignment* assignment = nullptr;
};

template <typename T>
struct LossTerms {
  BasicTensor<T> total;
  double box = 0.0;
  double obj = 0.0;
  double noobj = 0.0;
};

/// Sum over scales of L_box + alpha L_cls(obj, 1) + beta L_cls(noobj, 0);
/// cls_only drops L_box.
template <typename T>
LossTerms<T> total_loss(std::span<const ScalePrediction<T>> scales, const LossWeights& weights);

LossTerms<float> total_loss(const NetworkOutput& output, const Assignment& scale5,
                            const Assignment& scale4, const LossWeights& weights);

}  // namespace yolco
