#include "yolco/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace yolco {

template <typename T>
void adam_step(AdamState<T>& state, std::vector<BasicTensor<T>>& params, double lr) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
      state.second_moment.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw std::invalid_argument("adam_step: parameter list changed between steps");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.has_grad()) continue;
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != static_cast<std::size_t>(p.numel())) {
      throw std::invalid_argument("adam_step: moment shape does not match parameter");
    }
    const auto g = p.grad();
    auto w = p.mutable_data();
    for (std::size_t j = 0; j < m.size(); ++j) {
      m[j] = static_cast<T>(state.beta1 * m[j] + (1.0 - state.beta1) * g[j]);
      v[j] = static_cast<T>(state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j]);
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      w[j] = static_cast<T>(w[j] - lr * m_hat / (std::sqrt(v_hat) + state.eps));
    }
  }
}

double cosine_lr(int epoch, int total_epochs, double lr0, double lr_min) {
  if (total_epochs <= 0 || epoch < 0 || epoch > total_epochs) {
    throw std::invalid_argument("cosine_lr: epoch must lie in [0, total_epochs]");
  }
  const double phase = std::numbers::pi * epoch / total_epochs;
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(phase));
}

template void adam_step<float>(AdamState<float>&, std::vector<BasicTensor<float>>&, double);
template void adam_step<double>(AdamState<double>&, std::vector<BasicTensor<double>>&, double);

}  // namespace yolco
