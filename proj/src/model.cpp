#include "yolco/model.hpp"

#include <cmath>
#include <stdexcept>

#include "yolco/checkpoint.hpp"
#include "yolco/rng.hpp"

namespace yolco {

std::string to_string(BlockKind kind) { return kind == BlockKind::incnet ? "incnet" : "conv"; }

std::string to_string(LossMode mode) { return mode == LossMode::dual ? "dual" : "cls_only"; }

BlockKind block_kind_from_string(const std::string& text) {
  if (text == "incnet") return BlockKind::incnet;
  if (text == "conv") return BlockKind::conv;
  throw std::invalid_argument("unknown block kind '" + text + "'");
}

LossMode loss_mode_from_string(const std::string& text) {
  if (text == "dual") return LossMode::dual;
  if (text == "cls_only") return LossMode::cls_only;
  throw std::invalid_argument("unknown loss mode '" + text + "'");
}

YolcoConfig YolcoConfig::tiny() {
  YolcoConfig cfg;
  cfg.block = BlockKind::conv;
  cfg.connection = ConnectionMode::none;
  return cfg;
}

void YolcoConfig::validate() const {
  if (channels.size() != 6) throw std::invalid_argument("YolcoConfig: channel schedule needs 6 entries");
  for (int c : channels) {
    if (c <= 0) throw std::invalid_argument("YolcoConfig: channel counts must be positive");
  }
  if (wide_channels <= 0) throw std::invalid_argument("YolcoConfig: wide_channels must be positive");
  if (num_anchors < 1) throw std::invalid_argument("YolcoConfig: need at least one anchor");
  if (anchors.size() != static_cast<std::size_t>(num_anchors)) {
    throw std::invalid_argument("YolcoConfig: anchor count does not match num_anchors");
  }
  if (input_side <= 0 || input_side % 32 != 0) {
    throw std::invalid_argument("YolcoConfig: input_side must be a positive multiple of 32");
  }
  if (block == BlockKind::conv &&
      (connection == ConnectionMode::inc || connection == ConnectionMode::half_inc)) {
    throw std::invalid_argument("YolcoConfig: inline connections need InCNet blocks");
  }
  if (block == BlockKind::incnet) {
    const int merged = channels[5] + channels[4];
    for (int c : {channels[0], channels[1], channels[2], channels[3], channels[4], channels[5],
                  wide_channels, merged}) {
      if (c % groups != 0) {
        throw std::invalid_argument("YolcoConfig: " + std::to_string(c) +
                                    " channels not divisible into " + std::to_string(groups) +
                                    " groups");
      }
    }
    if (connection == ConnectionMode::half_inc && groups % 2 != 0) {
      throw std::invalid_argument("YolcoConfig: half_inc requires an even group count");
    }
  }
}

nlohmann::json YolcoConfig::to_json() const {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& s : anchors.sizes) a.push_back({s.w, s.h});
  return {{"channels", channels},
          {"wide_channels", wide_channels},
          {"num_anchors", num_anchors},
          {"block", to_string(block)},
          {"connection_mode", yolco::to_string(connection)},
          {"groups", groups},
          {"loss_mode", to_string(loss_mode)},
          {"input_side", input_side},
          {"anchors", a},
          {"leaky_slope", leaky_slope},
          {"cls_bias_init", cls_bias_init}};
}

YolcoConfig YolcoConfig::from_json(const nlohmann::json& j) {
  YolcoConfig cfg;
  if (j.contains("channels")) cfg.channels = j.at("channels").get<std::vector<int>>();
  cfg.wide_channels = j.value("wide_channels", cfg.wide_channels);
  cfg.num_anchors = j.value("num_anchors", cfg.num_anchors);
  if (j.contains("block")) cfg.block = block_kind_from_string(j.at("block").get<std::string>());
  if (j.contains("connection_mode")) {
    cfg.connection = connection_mode_from_string(j.at("connection_mode").get<std::string>());
  }
  cfg.groups = j.value("groups", cfg.groups);
  if (j.contains("loss_mode")) cfg.loss_mode = loss_mode_from_string(j.at("loss_mode").get<std::string>());
  cfg.input_side = j.value("input_side", cfg.input_side);
  if (j.contains("anchors")) {
    cfg.anchors.sizes.clear();
    for (const auto& p : j.at("anchors")) cfg.anchors.sizes.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  }
  cfg.leaky_slope = j.value("leaky_slope", cfg.leaky_slope);
  cfg.cls_bias_init = j.value("cls_bias_init", cfg.cls_bias_init);
  return cfg;
}

namespace {

enum class LayerKind { stem, block, pointwise, head };

struct LayerDef {
  std::string name;
  LayerKind kind;
  int in;
  int out;
  int downsample;  // input side / layer side
};

std::vector<LayerDef> layer_table(const YolcoConfig& cfg) {
  const auto& c = cfg.channels;
  const int heads = 5 * cfg.num_anchors;
  return {
      {"stem", LayerKind::stem, 3, c[0], 1},
      {"block1", LayerKind::block, c[0], c[1], 2},
      {"block2", LayerKind::block, c[1], c[2], 4},
      {"block3", LayerKind::block, c[2], c[3], 8},
      {"block4", LayerKind::block, c[3], c[4], 16},
      {"block5", LayerKind::block, c[4], c[5], 32},
      {"block6", LayerKind::block, c[5], cfg.wide_channels, 32},
      {"reduce7", LayerKind::pointwise, cfg.wide_channels, c[5], 32},
      {"block8", LayerKind::block, c[5], c[5], 32},
      {"head5", LayerKind::head, c[5], heads, 32},
      {"lateral9", LayerKind::pointwise, c[5], c[5], 32},
      {"reduce10", LayerKind::pointwise, c[5] + c[4], c[4], 16},
      {"block11", LayerKind::block, c[4], c[4], 16},
      {"head4", LayerKind::head, c[4], heads, 16},
  };
}

ConnectionMode block_mode(const YolcoConfig& cfg, int in, int out) {
  if (cfg.connection == ConnectionMode::skip) {
    return in == out ? ConnectionMode::skip : ConnectionMode::none;
  }
  return cfg.connection;
}

}  // namespace

std::vector<LayerCost> layer_costs(const YolcoConfig& cfg, int input_side) {
  cfg.validate();
  if (input_side <= 0 || input_side % 32 != 0) {
    throw std::invalid_argument("layer_costs: input side must be a positive multiple of 32");
  }
  std::vector<LayerCost> out;
  for (const auto& l : layer_table(cfg)) {
    const std::int64_t side = input_side / l.downsample;
    const std::int64_t hw = side * side;
    const std::int64_t in = l.in, o = l.out;
    LayerCost cost{l.name, 0, 0};
    const bool full3x3 = l.kind == LayerKind::stem ||
                         (l.kind == LayerKind::block && cfg.block == BlockKind::conv);
    if (full3x3) {
      cost.params = in * o * 9 + o;
      cost.macs = hw * in * o * 9;
    } else if (l.kind == LayerKind::block) {
      cost.params = in * 9 + in * o + o;
      cost.macs = hw * (in * 9 + in * o);
    } else {
      cost.params = in * o + o;
      cost.macs = hw * in * o;
    }
    out.push_back(cost);
  }
  return out;
}

YolcoModel::YolcoModel(YolcoConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng = make_rng(seed, "yolco.init");
  auto add = [&](const std::string& name, Tensor t) {
    lookup_.emplace(name, params_.size());
    params_.emplace_back(name, std::move(t));
  };
  auto he = [&](Shape shape, std::int64_t fan_in) {
    const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in)));
    return Tensor::uniform(std::move(shape), -bound, bound, rng, true);
  };
  const int na = cfg_.num_anchors;
  for (const auto& l : layer_table(cfg_)) {
    switch (l.kind) {
      case LayerKind::stem:
        add(l.name + ".conv", he({l.out, l.in, 3, 3}, l.in * 9));
        add(l.name + ".conv_bias", Tensor::zeros({l.out}, true));
        break;
      case LayerKind::block:
        if (cfg_.block == BlockKind::conv) {
          add(l.name + ".conv", he({l.out, l.in, 3, 3}, l.in * 9));
          add(l.name + ".conv_bias", Tensor::zeros({l.out}, true));
        } else {
          add(l.name + ".dw", he({l.in, 1, 3, 3}, 9));
          add(l.name + ".pw", he({l.out, l.in, 1, 1}, l.in));
          add(l.name + ".pw_bias", Tensor::zeros({l.out}, true));
        }
        break;
      case LayerKind::pointwise:
        add(l.name + ".pw", he({l.out, l.in, 1, 1}, l.in));
        add(l.name + ".pw_bias", Tensor::zeros({l.out}, true));
        break;
      case LayerKind::head:
        {
          // Small box head so initial offsets start near the anchor.
          auto box = he({4 * na, l.in, 1, 1}, l.in);
          for (auto& v : box.mutable_data()) v *= 0.1f;
          add(l.name + ".box", std::move(box));
        }
        add(l.name + ".box_bias", Tensor::zeros({4 * na}, true));
        add(l.name + ".cls", he({na, l.in, 1, 1}, l.in));
        add(l.name + ".cls_bias",
            Tensor::full({na}, static_cast<float>(cfg_.cls_bias_init), true));
        break;
    }
  }
  calibrate(seed);
}

void YolcoModel::calibrate(std::uint64_t seed) {
  // Without normalization layers the inline group sums compound the
  // activation scale block after block. Rescale each weighted layer, in
  // forward order, to unit output RMS on a noise probe.
  Rng rng = make_rng(seed, "yolco.calibrate");
  const Tensor probe = Tensor::uniform({3, 64, 64}, 0.0f, 1.0f, rng, false);
  NoGradGuard guard;
  std::map<std::string, double> rms;
  for (const auto& l : layer_table(cfg_)) {
    if (l.kind == LayerKind::head) continue;
    const bool full3x3 = l.kind == LayerKind::stem || (l.kind == LayerKind::block && cfg_.block == BlockKind::conv);
    const std::string weight = l.name + (full3x3 ? ".conv" : ".pw");
    trace_ = &rms;
    forward(probe);
    trace_ = nullptr;
    const double r = rms.at(l.name);
    if (!(r > 0.0) || !std::isfinite(r)) continue;
    auto& t = params_.at(lookup_.at(weight)).second;
    for (auto& v : t.mutable_data()) v = static_cast<float>(v / r);
  }
}

void YolcoModel::record(const std::string& name, const Tensor& y) const {
  if (!trace_) return;
  double acc = 0.0;
  for (float v : y.data()) acc += static_cast<double>(v) * v;
  (*trace_)[name] = std::sqrt(acc / static_cast<double>(std::max<std::int64_t>(1, y.numel())));
}

const Tensor& YolcoModel::param(const std::string& name) const {
  return params_.at(lookup_.at(name)).second;
}

std::vector<Tensor> YolcoModel::parameters() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back(t);
  return out;
}

Tensor YolcoModel::block(int index, const Tensor& x, int in, int out) const {
  const std::string name = "block" + std::to_string(index);
  const auto slope = static_cast<float>(cfg_.leaky_slope);
  const auto mode = block_mode(cfg_, in, out);
  if (cfg_.block == BlockKind::conv) {
    auto y = leaky_relu(conv2d(x, param(name + ".conv"), param(name + ".conv_bias"), 1, 1), slope);
    if (mode == ConnectionMode::skip) y = add(y, x);
    record(name, y);
    return y;
  }
  InCNetConfig bc{in, out, cfg_.groups, 3, mode};
  InCNetParams<float> p{param(name + ".dw"), param(name + ".pw"), param(name + ".pw_bias")};
  auto y = incnet_forward(x, p, bc, slope);
  record(name, y);
  return y;
}

Tensor YolcoModel::pointwise_layer(const std::string& name, const Tensor& x) const {
  auto y = leaky_relu(pointwise_conv2d(x, param(name + ".pw"), param(name + ".pw_bias")),
                      static_cast<float>(cfg_.leaky_slope));
  record(name, y);
  return y;
}

ScaleOutput YolcoModel::head(const std::string& name, const Tensor& features, int stride) const {
  ScaleOutput s;
  s.features = features;
  s.box = pointwise_conv2d(features, param(name + ".box"), param(name + ".box_bias"));
  s.cls = pointwise_conv2d(features, param(name + ".cls"), param(name + ".cls_bias"));
  s.grid = GridSpec{static_cast<int>(features.dim(2)), static_cast<int>(features.dim(1)), stride};
  return s;
}

NetworkOutput YolcoModel::forward(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("YolcoModel::forward: expected [3, H, W], got " + shape_str(image.shape()));
  }
  if (image.dim(1) % 32 != 0 || image.dim(2) % 32 != 0 || image.dim(1) == 0 || image.dim(2) == 0) {
    throw std::invalid_argument("YolcoModel::forward: image sides must be positive multiples of 32, got " +
                                shape_str(image.shape()));
  }
  const auto& c = cfg_.channels;
  const auto slope = static_cast<float>(cfg_.leaky_slope);
  auto x = leaky_relu(conv2d(image, param("stem.conv"), param("stem.conv_bias"), 1, 1), slope);
  record("stem", x);
  x = maxpool2d(x);
  x = maxpool2d(block(1, x, c[0], c[1]));
  x = maxpool2d(block(2, x, c[1], c[2]));
  x = maxpool2d(block(3, x, c[2], c[3]));
  const auto route = block(4, x, c[3], c[4]);
  x = maxpool2d(route);
  x = block(5, x, c[4], c[5]);
  x = block(6, x, c[5], cfg_.wide_channels);
  x = pointwise_layer("reduce7", x);
  const auto deep = block(8, x, c[5], c[5]);

  NetworkOutput out;
  out.scale5 = head("head5", deep, 32);
  auto up = upsample_nearest(pointwise_layer("lateral9", deep), 2);
  auto merged = pointwise_layer("reduce10", concat_channels(up, route));
  out.scale4 = head("head4", block(11, merged, c[4], c[4]), 16);
  return out;
}

std::int64_t YolcoModel::count_params() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

std::int64_t YolcoModel::count_macs(int input_side) const {
  std::int64_t n = 0;
  for (const auto& l : layer_costs(cfg_, input_side)) n += l.macs;
  return n;
}

YolcoModel YolcoModel::clone() const {
  YolcoModel copy = *this;
  for (auto& [name, t] : copy.params_) t = t.clone();
  return copy;
}

void YolcoModel::save(const std::filesystem::path& path) const {
  save_checkpoint(path, cfg_.to_json(), params_);
}

YolcoModel YolcoModel::load(const std::filesystem::path& path) {
  const auto ckpt = load_checkpoint(path);
  YolcoModel model(YolcoConfig::from_json(ckpt.model_config), 0);
  assign_parameters(ckpt, model.params_);
  return model;
}

YolcoModel build_yolco(const YolcoConfig& cfg, std::uint64_t seed) { return YolcoModel(cfg, seed); }

std::int64_t count_params(const YolcoModel& model) { return model.count_params(); }

std::int64_t count_macs(const YolcoModel& model, int input_side) {
  return model.count_macs(input_side);
}

}  // namespace yolco
