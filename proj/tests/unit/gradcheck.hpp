#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "yolco/tensor.hpp"

namespace yolco::testing {

// Largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-3) over every
// element of every input, central differences with step h.
inline double gradcheck(const std::function<Tensor64(const std::vector<Tensor64>&)>& f,
                        std::vector<Tensor64> inputs, double h = 1e-5) {
  for (auto& x : inputs) {
    x = x.detach().clone();
    x.set_requires_grad(true);
  }
  f(inputs).backward();
  std::vector<std::vector<double>> analytic;
  for (auto& x : inputs) {
    std::vector<double> g(static_cast<std::size_t>(x.numel()), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), g.begin());
    analytic.push_back(std::move(g));
  }

  NoGradGuard guard;
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = f(inputs).item();
      data[i] = saved - h;
      const double down = f(inputs).item();
      data[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

// Contracts an arbitrary-shaped output to a scalar with fixed random weights,
// so every output element contributes a distinct gradient.
inline Tensor64 contract(const Tensor64& y, const Tensor64& weights) {
  return sum(mul(y, weights));
}

}  // namespace yolco::testing
