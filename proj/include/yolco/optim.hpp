#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "yolco/tensor.hpp"

namespace yolco {

template <typename T>
using NamedParameters = std::vector<std::pair<std::string, BasicTensor<T>>>;

/// Adam moments and hyperparameters for one parameter list.
template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double base_lr = 1e-3;
  std::int64_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

/// Bias-corrected Adam update of every parameter that holds a gradient.
/// Moments are allocated on the first call and must keep their shapes.
template <typename T>
void adam_step(AdamState<T>& state, std::vector<BasicTensor<T>>& params, double lr);

/// lr_min + (lr0 - lr_min) * (1 + cos(pi * epoch / total_epochs)) / 2.
double cosine_lr(int epoch, int total_epochs, double lr0, double lr_min = 0.0);

template <typename T>
void zero_grads(std::vector<BasicTensor<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace yolco
