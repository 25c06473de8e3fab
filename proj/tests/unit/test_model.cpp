#include <fstream>
#include <iterator>

#include "doctest.h"
#include "yolco/checkpoint.hpp"
#include "yolco/incnet.hpp"
#include "yolco/model.hpp"

using namespace yolco;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("parameter and MAC budgets") {
  const YolcoModel yolco(YolcoConfig{}, 1);
  const YolcoModel tiny(YolcoConfig::tiny(), 1);
  CHECK(std::abs(count_params(yolco) / 1.79e6 - 1.0) < 0.10);
  CHECK(std::abs(count_params(tiny) / 8.67e6 - 1.0) < 0.10);
  CHECK(std::abs(count_macs(yolco, 1024) / 3.55e9 - 1.0) < 0.10);
  CHECK(std::abs(count_macs(tiny, 1024) / 16.60e9 - 1.0) < 0.10);
  CHECK(count_params(yolco) < count_params(tiny));
  CHECK(count_macs(yolco, 2048) == 4 * count_macs(yolco, 1024));
  CHECK(count_macs(tiny, 2048) == 4 * count_macs(tiny, 1024));

  std::int64_t analytic = 0;
  for (const auto& l : layer_costs(yolco.config(), 1024)) analytic += l.params;
  CHECK(analytic == count_params(yolco));
  std::int64_t tiny_analytic = 0;
  for (const auto& l : layer_costs(tiny.config(), 1024)) tiny_analytic += l.params;
  CHECK(tiny_analytic == count_params(tiny));
}

TEST_CASE("block parameter counts sum to the model total") {
  const YolcoConfig cfg;
  const YolcoModel model(cfg, 2);
  const auto& c = cfg.channels;
  const std::pair<int, int> blocks[] = {{c[0], c[1]}, {c[1], c[2]}, {c[2], c[3]}, {c[3], c[4]},
                                        {c[4], c[5]}, {c[5], cfg.wide_channels}, {c[5], c[5]}, {c[4], c[4]}};
  std::int64_t total = 3 * c[0] * 9 + c[0];  // stem
  for (auto [in, out] : blocks) total += incnet_param_count({in, out, cfg.groups, 3, cfg.connection});
  auto pw = [](std::int64_t in, std::int64_t out) { return in * out + out; };
  total += pw(cfg.wide_channels, c[5]) + pw(c[5], c[5]) + pw(c[5] + c[4], c[4]);
  total += pw(c[5], 5 * cfg.num_anchors) + pw(c[4], 5 * cfg.num_anchors);
  CHECK(total == count_params(model));
}

TEST_CASE("forward output geometry") {
  NoGradGuard guard;
  YolcoConfig cfg;
  const YolcoModel model(cfg, 3);
  for (int side : {32, 1024, 2048}) {
    const auto out = model.forward(Tensor::zeros({3, side, side}));
    CHECK(out.scale5.grid.width == side / 32);
    CHECK(out.scale4.grid.width == side / 16);
    CHECK(out.scale5.box.shape() == Shape{12, side / 32, side / 32});
    CHECK(out.scale5.cls.shape() == Shape{3, side / 32, side / 32});
    CHECK(out.scale4.cls.shape() == Shape{3, side / 16, side / 16});
    CHECK(out.scale5.features.dim(0) == 512);
    CHECK(out.scale4.features.dim(0) == 256);
  }
  const auto rect = model.forward(Tensor::zeros({3, 64, 96}));
  CHECK(rect.scale4.grid.height == 4);
  CHECK(rect.scale4.grid.width == 6);
  CHECK_THROWS_AS(model.forward(Tensor::zeros({3, 48, 48})), std::invalid_argument);

  // Initial probabilities start near sigmoid(-4) since the stem sees zeros.
  const auto zero = model.forward(Tensor::zeros({3, 64, 64}));
  for (float z : zero.scale5.cls.data()) CHECK(z == doctest::Approx(-4.0).epsilon(0.5));
}

TEST_CASE("ablation variants build and run") {
  NoGradGuard guard;
  for (auto mode : {ConnectionMode::none, ConnectionMode::skip, ConnectionMode::half_inc}) {
    YolcoConfig cfg;
    cfg.connection = mode;
    const YolcoModel m(cfg, 4);
    CHECK(count_params(m) == count_params(YolcoModel(YolcoConfig{}, 4)));
    CHECK(m.forward(Tensor::zeros({3, 64, 64})).scale4.cls.shape() == Shape{3, 4, 4});
  }
  auto tiny = YolcoConfig::tiny();
  tiny.connection = ConnectionMode::skip;
  CHECK_NOTHROW(YolcoModel(tiny, 4).forward(Tensor::zeros({3, 32, 32})));
  tiny.connection = ConnectionMode::inc;
  CHECK_THROWS_AS(YolcoModel(tiny, 4), std::invalid_argument);
}

TEST_CASE("seeded builds and checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "yolco_model_ckpt";
  std::filesystem::create_directories(dir);
  YolcoConfig cfg;
  cfg.channels = {8, 8, 16, 16, 32, 32};
  cfg.wide_channels = 48;
  YolcoModel a(cfg, 42), b(cfg, 42), c(cfg, 43);
  a.save(dir / "a.ckpt");
  b.save(dir / "b.ckpt");
  c.save(dir / "c.ckpt");
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
  CHECK(slurp(dir / "a.ckpt") != slurp(dir / "c.ckpt"));

  const auto loaded = YolcoModel::load(dir / "a.ckpt");
  CHECK(loaded.config().to_json() == cfg.to_json());
  NoGradGuard guard;
  Rng rng(5);
  const auto img = Tensor::uniform({3, 64, 64}, 0, 1, rng);
  const auto x = a.forward(img), y = loaded.forward(img);
  CHECK(std::equal(x.scale4.box.data().begin(), x.scale4.box.data().end(), y.scale4.box.data().begin()));

  const auto ckpt = load_checkpoint(dir / "a.ckpt");
  CHECK(ckpt.model_config.at("channels") == cfg.to_json().at("channels"));
  CHECK(ckpt.at("block1.dw").shape() == Shape{8, 1, 3, 3});
  CHECK(ckpt.at("block1.pw_bias").shape() == Shape{8});
  std::filesystem::remove_all(dir);
}
