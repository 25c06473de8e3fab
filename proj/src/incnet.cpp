#include "yolco/incnet.hpp"

#include <cmath>
#include <stdexcept>

namespace yolco {

std::string to_string(ConnectionMode mode) {
  switch (mode) {
    case ConnectionMode::none: return "none";
    case ConnectionMode::skip: return "skip";
    case ConnectionMode::half_inc: return "half_inc";
    case ConnectionMode::inc: return "inc";
  }
  return "inc";
}

ConnectionMode connection_mode_from_string(const std::string& text) {
  if (text == "none") return ConnectionMode::none;
  if (text == "skip") return ConnectionMode::skip;
  if (text == "half_inc" || text == "half") return ConnectionMode::half_inc;
  if (text == "inc") return ConnectionMode::inc;
  throw std::invalid_argument("unknown connection mode '" + text + "'");
}

void InCNetConfig::validate() const {
  if (in_channels <= 0 || out_channels <= 0) {
    throw std::invalid_argument("InCNet: channel counts must be positive");
  }
  if (groups < 1) throw std::invalid_argument("InCNet: group count must be >= 1");
  if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("InCNet: kernel must be odd");
  if (in_channels % groups != 0) {
    throw std::invalid_argument("InCNet: " + std::to_string(in_channels) +
                                " input channels not divisible into " +
                                std::to_string(groups) + " groups");
  }
  if (mode == ConnectionMode::half_inc && groups % 2 != 0) {
    throw std::invalid_argument("InCNet: half_inc requires an even group count");
  }
  if (mode == ConnectionMode::skip && in_channels != out_channels) {
    throw std::invalid_argument("InCNet: skip requires equal input and output channels");
  }
}

template <typename T>
BasicTensor<T> inline_group_sum(const BasicTensor<T>& x, int groups, ConnectionMode mode) {
  if (x.rank() != 3) throw ShapeError("inline_group_sum: expected [C, H, W]");
  const auto C = x.dim(0);
  if (groups < 1 || C % groups != 0) throw ShapeError("inline_group_sum: channels not divisible");
  const std::int64_t plane = x.dim(1) * x.dim(2);
  const std::int64_t group_len = (C / groups) * plane;
  const int connected = mode == ConnectionMode::inc        ? groups
                        : mode == ConnectionMode::half_inc ? groups / 2
                                                           : 0;
  const auto xs = x.data();
  std::vector<T> total(static_cast<std::size_t>(group_len), T(0));
  for (int j = 0; j < groups; ++j)
    for (std::int64_t r = 0; r < group_len; ++r) total[r] += xs[j * group_len + r];

  std::vector<T> out(static_cast<std::size_t>(x.numel()), T(0));
  for (int i = 0; i < connected; ++i)
    for (std::int64_t r = 0; r < group_len; ++r)
      out[i * group_len + r] = total[r] - xs[i * group_len + r];

  return make_op<T>(x.shape(), std::move(out), {x},
                    [x = x, groups, connected, group_len](const std::vector<T>& g) mutable {
                      std::vector<T> gsum(static_cast<std::size_t>(group_len), T(0));
                      for (int i = 0; i < connected; ++i)
                        for (std::int64_t r = 0; r < group_len; ++r) gsum[r] += g[i * group_len + r];
                      auto gx = x.mutable_grad();
                      for (int j = 0; j < groups; ++j) {
                        const bool self = j < connected;
                        for (std::int64_t r = 0; r < group_len; ++r)
                          gx[j * group_len + r] += gsum[r] - (self ? g[j * group_len + r] : T(0));
                      }
                    });
}

template <typename T>
BasicTensor<T> incnet_forward(const BasicTensor<T>& x, const InCNetParams<T>& params,
                              const InCNetConfig& cfg, T slope) {
  cfg.validate();
  if (x.rank() != 3 || x.dim(0) != cfg.in_channels) {
    throw ShapeError("incnet_forward: expected " + std::to_string(cfg.in_channels) +
                     " input channels, got " + shape_str(x.shape()));
  }
  auto mixed = depthwise_conv2d(x, params.dw, 1, cfg.kernel / 2);
  if ((cfg.mode == ConnectionMode::inc || cfg.mode == ConnectionMode::half_inc) && cfg.groups > 1) {
    mixed = add(mixed, inline_group_sum(x, cfg.groups, cfg.mode));
  }
  auto y = leaky_relu(pointwise_conv2d(mixed, params.pw, params.pw_bias), slope);
  if (cfg.mode == ConnectionMode::skip) y = add(y, x);
  return y;
}

std::int64_t incnet_param_count(const InCNetConfig& cfg) {
  cfg.validate();
  const std::int64_t c = cfg.in_channels, o = cfg.out_channels, k = cfg.kernel;
  return c * k * k + c * o + o;
}

template <typename T>
InCNetParams<T> init_incnet(const InCNetConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto k = cfg.kernel;
  const T dw_bound = static_cast<T>(std::sqrt(6.0 / (k * k)));
  const T pw_bound = static_cast<T>(std::sqrt(6.0 / cfg.in_channels));
  InCNetParams<T> p;
  p.dw = BasicTensor<T>::uniform({cfg.in_channels, 1, k, k}, -dw_bound, dw_bound, rng, true);
  p.pw = BasicTensor<T>::uniform({cfg.out_channels, cfg.in_channels, 1, 1}, -pw_bound, pw_bound,
                                 rng, true);
  p.pw_bias = BasicTensor<T>::zeros({cfg.out_channels}, true);
  return p;
}

template BasicTensor<float> inline_group_sum<float>(const BasicTensor<float>&, int, ConnectionMode);
template BasicTensor<double> inline_group_sum<double>(const BasicTensor<double>&, int, ConnectionMode);
template BasicTensor<float> incnet_forward<float>(const BasicTensor<float>&, const InCNetParams<float>&,
                                                  const InCNetConfig&, float);
template BasicTensor<double> incnet_forward<double>(const BasicTensor<double>&,
                                                    const InCNetParams<double>&,
                                                    const InCNetConfig&, double);
template InCNetParams<float> init_incnet<float>(const InCNetConfig&, Rng&);
template InCNetParams<double> init_incnet<double>(const InCNetConfig&, Rng&);

}  // namespace yolco
