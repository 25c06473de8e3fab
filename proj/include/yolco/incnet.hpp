#pragma once

// Inline connection block: the input is split into n_g equal channel groups;
// every group is filtered by its own depthwise k x k convolution and receives
// the raw sum of all other groups' inputs, then a pointwise convolution mixes
// channels and LeakyReLU activates:
//
//   y = LeakyReLU(P(concat_i [ D(x[i]) + sum_{j != i} x[j] ]))
//
// The cross-group sums carry no parameters. Ablation modes drop them (none),
// keep them for the first half of the groups only (half_inc), or replace them
// with a residual around the whole block (skip).

#include <cstdint>
#include <string>

#include "yolco/rng.hpp"
#include "yolco/tensor.hpp"

namespace yolco {

enum class ConnectionMode { none, skip, half_inc, inc };

std::string to_string(ConnectionMode mode);
ConnectionMode connection_mode_from_string(const std::string& text);

struct InCNetConfig {
  int in_channels = 0;
  int out_channels = 0;
  int groups = 8;
  int kernel = 3;
  ConnectionMode mode = ConnectionMode::inc;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

template <typename T>
struct InCNetParams {
  BasicTensor<T> dw;       // [C_in, 1, k, k]
  BasicTensor<T> pw;       // [C_out, C_in, 1, 1]
  BasicTensor<T> pw_bias;  // [C_out]
};

/// Channel c of group i receives sum_{j != i} x[j] at the same in-group
/// position; groups outside the connected set receive zeros.
template <typename T>
BasicTensor<T> inline_group_sum(const BasicTensor<T>& x, int groups, ConnectionMode mode);

template <typename T>
BasicTensor<T> incnet_forward(const BasicTensor<T>& x, const InCNetParams<T>& params,
                              const InCNetConfig& cfg, T slope = T(0.1));

/// Depthwise C_in * k^2 plus pointwise C_in * C_out + C_out.
std::int64_t incnet_param_count(const InCNetConfig& cfg);

/// He-uniform weights, zero bias.
template <typename T>
InCNetParams<T> init_incnet(const InCNetConfig& cfg, Rng& rng);

}  // namespace yolco
