#pragma once

// Two-scale YOLCO detector and its Tiny counterpart (same layer table with
// full 3x3 convolutions in place of InCNet blocks).
//
//   stem     conv3x3 3 -> c0, pool
//   block1   c0 -> c1, pool
//   block2   c1 -> c2, pool
//   block3   c2 -> c3, pool
//   block4   c3 -> c4            (route to the stride-16 branch), pool
//   block5   c4 -> c5
//   block6   c5 -> wide
//   reduce7  1x1 wide -> c5
//   block8   c5 -> c5            -> scale-5 fused features -> head5
//   lateral9 1x1 c5 -> c5, upsample x2, concat route  (c5 + c4 channels)
//   reduce10 1x1 (c5 + c4) -> c4
//   block11  c4 -> c4            -> scale-4 fused features -> head4
//
// Every layer except the heads ends in LeakyReLU(0.1). Heads are plain
// pointwise convolutions split into a box part [4 n_a] and a logit part [n_a].

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "yolco/geometry.hpp"
#include "yolco/incnet.hpp"
#include "yolco/optim.hpp"
#include "yolco/tensor.hpp"

namespace yolco {

enum class BlockKind { incnet, conv };
enum class LossMode { dual, cls_only };

std::string to_string(BlockKind kind);
std::string to_string(LossMode mode);
BlockKind block_kind_from_string(const std::string& text);
LossMode loss_mode_from_string(const std::string& text);

struct YolcoConfig {
  std::vector<int> channels{16, 32, 64, 128, 256, 512};
  int wide_channels = 768;
  int num_anchors = 3;
  BlockKind block = BlockKind::incnet;
  ConnectionMode connection = ConnectionMode::inc;
  int groups = 8;
  LossMode loss_mode = LossMode::dual;
  int input_side = 1024;
  AnchorSet anchors{{{24, 24}, {40, 40}, {64, 64}}};
  double leaky_slope = 0.1;
  double cls_bias_init = -4.0;

  /// The Tiny baseline: identical table, full convolutions, no connections.
  static YolcoConfig tiny();

  /// Throws std::invalid_argument on the first violated constraint.
  void validate() const;

  nlohmann::json to_json() const;
  static YolcoConfig from_json(const nlohmann::json& j);
};

struct ScaleOutput {
  Tensor box;       // [4 n_a, h, w]
  Tensor cls;       // [n_a, h, w], pre-sigmoid
  Tensor features;  // input of the head
  GridSpec grid;
};

struct NetworkOutput {
  ScaleOutput scale5;  // stride 32
  ScaleOutput scale4;  // stride 16
};

/// One convolution of the layer table, for analytic cost accounting.
struct LayerCost {
  std::string name;
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

std::vector<LayerCost> layer_costs(const YolcoConfig& cfg, int input_side);

class YolcoModel {
 public:
  /// He-uniform weights, deterministic in `seed`.
  YolcoModel(YolcoConfig cfg, std::uint64_t seed);

  const YolcoConfig& config() const { return cfg_; }
  void set_anchors(AnchorSet anchors) { cfg_.anchors = std::move(anchors); }

  /// Copies share parameter storage; clone() does not.
  YolcoModel clone() const;

  /// image: [3, S, S'] with both sides divisible by 32.
  NetworkOutput forward(const Tensor& image) const;

  NamedParameters<float>& named_parameters() { return params_; }
  const NamedParameters<float>& named_parameters() const { return params_; }
  std::vector<Tensor> parameters() const;

  std::int64_t count_params() const;
  std::int64_t count_macs(int input_side) const;

  void save(const std::filesystem::path& path) const;
  static YolcoModel load(const std::filesystem::path& path);

 private:
  const Tensor& param(const std::string& name) const;
  Tensor block(int index, const Tensor& x, int in, int out) const;
  Tensor pointwise_layer(const std::string& name, const Tensor& x) const;
  ScaleOutput head(const std::string& name, const Tensor& features, int stride) const;
  void calibrate(std::uint64_t seed);
  void record(const std::string& name, const Tensor& y) const;

  YolcoConfig cfg_;
  NamedParameters<float> params_;
  std::map<std::string, std::size_t> lookup_;
  mutable std::map<std::string, double>* trace_ = nullptr;  // per-layer output RMS, calibration only
};

YolcoModel build_yolco(const YolcoConfig& cfg, std::uint64_t seed);

std::int64_t count_params(const YolcoModel& model);
std::int64_t count_macs(const YolcoModel& model, int input_side);

}  // namespace yolco
