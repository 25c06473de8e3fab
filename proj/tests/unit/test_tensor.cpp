#include <cmath>
#include <numeric>

#include "doctest.h"
#include "gradcheck.hpp"
#include "yolco/optim.hpp"
#include "yolco/rng.hpp"
#include "yolco/tensor.hpp"

using namespace yolco;
using yolco::testing::contract;
using yolco::testing::gradcheck;

namespace {

constexpr int kCases = 100;
constexpr double kTol = 1e-4;

Tensor64 rnd(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor64::uniform(std::move(shape), lo, hi, rng);
}

int pick(Rng& rng, int lo, int hi) { return lo + static_cast<int>(uniform_index(rng, hi - lo + 1)); }

// Values bounded away from zero so kinks are never straddled by the stencil.
Tensor64 away_from_zero(Shape shape, Rng& rng) {
  auto t = rnd(std::move(shape), rng);
  for (auto& v : t.mutable_data()) v = (v < 0 ? -1.0 : 1.0) * (0.01 + std::abs(v));
  return t;
}

// Distinct values spaced 0.01 apart so argmax never flips under the stencil.
Tensor64 distinct(Shape shape, Rng& rng) {
  Tensor64 t = Tensor64::zeros(shape);
  std::vector<double> v(static_cast<std::size_t>(t.numel()));
  std::iota(v.begin(), v.end(), 0.0);
  shuffle(v, rng);
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < v.size(); ++i) d[i] = 0.01 * v[i];
  return t;
}

template <typename F>
void check_cases(const char* name, F&& make_case) {
  Rng rng(std::hash<std::string>{}(name));
  double worst = 0.0;
  for (int c = 0; c < kCases; ++c) worst = std::max(worst, make_case(rng));
  INFO(name << " worst relative error " << worst);
  CHECK(worst < kTol);
}

}  // namespace

TEST_CASE("conv2d examples") {
  auto x = Tensor::full({1, 3, 3}, 1.0f);
  auto w = Tensor::full({1, 1, 3, 3}, 1.0f);
  auto y = conv2d(x, w, Tensor::zeros({1}), 1, 1);
  CHECK(y.shape() == Shape{1, 3, 3});
  CHECK(y.data()[4] == doctest::Approx(9.0));
  CHECK(y.data()[0] == doctest::Approx(4.0));

  Rng rng(1);
  auto in = Tensor::uniform({1, 5, 4}, -1, 1, rng);
  auto id = conv2d(in, Tensor::full({1, 1, 1, 1}, 1.0f), Tensor::zeros({1}), 1, 0);
  CHECK(std::equal(id.data().begin(), id.data().end(), in.data().begin()));

  auto strided = conv2d(Tensor::zeros({2, 7, 7}), Tensor::zeros({3, 2, 3, 3}), Tensor::zeros({3}), 2, 1);
  CHECK(strided.shape() == Shape{3, 4, 4});

  CHECK_THROWS_AS(conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor::zeros({1}), 1, 1),
                  ShapeError);
}

TEST_CASE("depthwise and pointwise identities") {
  Rng rng(2);
  auto x = Tensor::uniform({3, 5, 6}, -1, 1, rng);
  auto dw = Tensor::zeros({3, 1, 3, 3});
  for (int c = 0; c < 3; ++c) dw.mutable_data()[c * 9 + 4] = 1.0f;
  auto y = depthwise_conv2d(x, dw, 1, 1);
  CHECK(std::equal(y.data().begin(), y.data().end(), x.data().begin()));

  auto pw = Tensor::zeros({3, 3, 1, 1});
  for (int c = 0; c < 3; ++c) pw.mutable_data()[c * 3 + c] = 1.0f;
  auto z = pointwise_conv2d(x, pw, Tensor::zeros({3}));
  CHECK(std::equal(z.data().begin(), z.data().end(), x.data().begin()));
}

TEST_CASE("separable convolution equals the composed full convolution") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int c = pick(rng, 1, 4), o = pick(rng, 1, 4), h = pick(rng, 3, 8), w = pick(rng, 3, 8);
    auto x = rnd({c, h, w}, rng);
    auto d = rnd({c, 1, 3, 3}, rng);
    auto p = rnd({o, c, 1, 1}, rng);
    auto b = rnd({o}, rng);
    auto sep = pointwise_conv2d(depthwise_conv2d(x, d, 1, 1), p, b);
    auto full = Tensor64::zeros({o, c, 3, 3});
    auto fd = full.mutable_data();
    for (int oo = 0; oo < o; ++oo)
      for (int cc = 0; cc < c; ++cc)
        for (int k = 0; k < 9; ++k) fd[(oo * c + cc) * 9 + k] = p.data()[oo * c + cc] * d.data()[cc * 9 + k];
    auto ref = conv2d(x, full, b, 1, 1);
    for (std::int64_t i = 0; i < ref.numel(); ++i) CHECK(sep.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("elementwise and pooling examples") {
  auto lr = leaky_relu(Tensor({2}, {-1.0f, 2.0f}), 0.1f);
  CHECK(lr.data()[0] == doctest::Approx(-0.1));
  CHECK(lr.data()[1] == doctest::Approx(2.0));
  CHECK(leaky_relu(Tensor::zeros({1})).item() == 0.0f);
  CHECK(sigmoid(Tensor::zeros({1})).item() == doctest::Approx(0.5));

  auto sm = softmax(Tensor::full({5}, 3.0f), 0);
  for (float v : sm.data()) CHECK(v == doctest::Approx(0.2));

  auto pooled = maxpool2d(Tensor::full({2, 4, 6}, 1.5f));
  CHECK(pooled.shape() == Shape{2, 2, 3});
  for (float v : pooled.data()) CHECK(v == 1.5f);

  Rng rng(4);
  auto x = Tensor::uniform({3, 4, 5}, -1, 1, rng);
  auto back = maxpool2d(upsample_nearest(x, 2));
  CHECK(std::equal(back.data().begin(), back.data().end(), x.data().begin()));
  CHECK_THROWS(maxpool2d(Tensor::zeros({1, 5, 4})));

  auto cat = concat_channels(Tensor::zeros({2, 3, 3}), Tensor::zeros({4, 3, 3}));
  CHECK(cat.shape() == Shape{6, 3, 3});
}

TEST_CASE("dropout scales retained units and is identity in evaluation") {
  Rng rng(5);
  auto x = Tensor::full({1000}, 1.0f);
  auto eval = dropout(x, 0.5f, false, rng);
  CHECK(std::equal(eval.data().begin(), eval.data().end(), x.data().begin()));
  auto train = dropout(x, 0.5f, true, rng);
  int kept = 0;
  for (float v : train.data()) {
    CHECK((v == 0.0f || v == doctest::Approx(2.0)));
    kept += v != 0.0f;
  }
  CHECK(kept > 400);
  CHECK(kept < 600);
}

TEST_CASE("backward basics") {
  auto x = Tensor::full({2, 3}, 0.5f, true);
  sum(x).backward();
  for (float g : x.grad()) CHECK(g == 1.0f);
  CHECK_THROWS_AS(mul(x, x).backward(), ShapeError);

  // Two independent tapes, identical inputs: identical gradients.
  Rng r1(9), r2(9);
  auto a = Tensor::uniform({4, 4}, -1, 1, r1, true);
  auto b = Tensor::uniform({4, 4}, -1, 1, r2, true);
  sum(tanh(matmul(a, a))).backward();
  sum(tanh(matmul(b, b))).backward();
  CHECK(std::equal(a.grad().begin(), a.grad().end(), b.grad().begin()));
}

TEST_CASE("operations do not mutate inputs") {
  Rng rng(6);
  auto x = Tensor::uniform({2, 4, 4}, -1, 1, rng, true);
  const std::vector<float> before(x.data().begin(), x.data().end());
  auto y = sum(leaky_relu(maxpool2d(conv2d(x, Tensor::full({2, 2, 3, 3}, 0.1f), Tensor::zeros({2}), 1, 1))));
  y.backward();
  CHECK(std::equal(before.begin(), before.end(), x.data().begin()));
}

TEST_CASE("adam first step matches the hand-evaluated update") {
  auto w = Tensor::full({1}, 1.0f, true);
  AdamState<float> state;
  std::vector<Tensor> params{w};
  sum(mul(w, w)).backward();
  adam_step(state, params, 0.1);
  const double g = 2.0;
  const double m = (1 - 0.9) * g / (1 - 0.9);
  const double v = (1 - 0.999) * g * g / (1 - 0.999);
  const double expected = 1.0 - 0.1 * m / (std::sqrt(v) + 1e-8);
  CHECK(w.data()[0] == doctest::Approx(expected).epsilon(1e-6));
  CHECK(state.step == 1);
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 10, 1e-3) == doctest::Approx(1e-3));
  CHECK(cosine_lr(10, 10, 1e-3) == doctest::Approx(0.0));
  CHECK(cosine_lr(5, 10, 1e-3, 1e-4) == doctest::Approx(0.5 * (1e-3 + 1e-4)));
  CHECK_THROWS(cosine_lr(11, 10, 1e-3));
}

TEST_CASE("gradient checks: convolutions") {
  check_cases("conv2d", [](Rng& rng) {
    const int c = pick(rng, 1, 3), o = pick(rng, 1, 3), h = pick(rng, 3, 6), w = pick(rng, 3, 6);
    const int k = uniform_index(rng, 2) ? 3 : 1;
    const int stride = pick(rng, 1, 2), pad = k == 3 ? pick(rng, 0, 1) : 0;
    auto x = rnd({c, h, w}, rng), wt = rnd({o, c, k, k}, rng), b = rnd({o}, rng);
    const auto oh = (h + 2 * pad - k) / stride + 1, ow = (w + 2 * pad - k) / stride + 1;
    auto r = rnd({o, oh, ow}, rng);
    return gradcheck([&](const auto& in) { return contract(conv2d(in[0], in[1], in[2], stride, pad), r); },
                     {x, wt, b});
  });
  check_cases("depthwise_conv2d", [](Rng& rng) {
    const int c = pick(rng, 1, 4), h = pick(rng, 3, 6), w = pick(rng, 3, 6), stride = pick(rng, 1, 2);
    auto x = rnd({c, h, w}, rng), wt = rnd({c, 1, 3, 3}, rng);
    auto r = rnd({c, (h - 1) / stride + 1, (w - 1) / stride + 1}, rng);
    return gradcheck([&](const auto& in) { return contract(depthwise_conv2d(in[0], in[1], stride, 1), r); },
                     {x, wt});
  });
  check_cases("pointwise_conv2d", [](Rng& rng) {
    const int c = pick(rng, 1, 4), o = pick(rng, 1, 4), h = pick(rng, 1, 5), w = pick(rng, 1, 5);
    auto x = rnd({c, h, w}, rng), wt = rnd({o, c, 1, 1}, rng), b = rnd({o}, rng), r = rnd({o, h, w}, rng);
    return gradcheck([&](const auto& in) { return contract(pointwise_conv2d(in[0], in[1], in[2]), r); },
                     {x, wt, b});
  });
}

TEST_CASE("gradient checks: spatial plumbing") {
  check_cases("maxpool2d", [](Rng& rng) {
    const int c = pick(rng, 1, 3), h = 2 * pick(rng, 1, 3), w = 2 * pick(rng, 1, 3);
    auto x = distinct({c, h, w}, rng), r = rnd({c, h / 2, w / 2}, rng);
    return gradcheck([&](const auto& in) { return contract(maxpool2d(in[0]), r); }, {x});
  });
  check_cases("upsample_nearest", [](Rng& rng) {
    const int c = pick(rng, 1, 3), h = pick(rng, 1, 4), w = pick(rng, 1, 4);
    auto x = rnd({c, h, w}, rng), r = rnd({c, 2 * h, 2 * w}, rng);
    return gradcheck([&](const auto& in) { return contract(upsample_nearest(in[0], 2), r); }, {x});
  });
  check_cases("concat_channels", [](Rng& rng) {
    const int c1 = pick(rng, 1, 3), c2 = pick(rng, 1, 3), h = pick(rng, 1, 4), w = pick(rng, 1, 4);
    auto a = rnd({c1, h, w}, rng), b = rnd({c2, h, w}, rng), r = rnd({c1 + c2, h, w}, rng);
    return gradcheck([&](const auto& in) { return contract(concat_channels(in[0], in[1]), r); }, {a, b});
  });
  check_cases("slice0", [](Rng& rng) {
    const int n = pick(rng, 2, 6), d = pick(rng, 1, 4), start = pick(rng, 0, n - 1), count = pick(rng, 1, n - start);
    auto x = rnd({n, d}, rng), r = rnd({count, d}, rng);
    return gradcheck([&](const auto& in) { return contract(slice0(in[0], start, count), r); }, {x});
  });
  check_cases("reshape", [](Rng& rng) {
    const int a = pick(rng, 1, 4), b = pick(rng, 1, 4);
    auto x = rnd({a, b}, rng), r = rnd({b, a}, rng);
    return gradcheck([&](const auto& in) { return contract(reshape(in[0], {b, a}), r); }, {x});
  });
}

TEST_CASE("gradient checks: elementwise") {
  check_cases("add_sub_mul_scale", [](Rng& rng) {
    const int n = pick(rng, 1, 8);
    auto a = rnd({n}, rng), b = rnd({n}, rng), r = rnd({n}, rng);
    return gradcheck(
        [&](const auto& in) { return contract(scale(mul(add(in[0], in[1]), sub(in[0], in[1])), 1.7), r); },
        {a, b});
  });
  check_cases("leaky_relu", [](Rng& rng) {
    const int n = pick(rng, 1, 10);
    auto x = away_from_zero({n}, rng), r = rnd({n}, rng);
    return gradcheck([&](const auto& in) { return contract(leaky_relu(in[0], 0.1), r); }, {x});
  });
  check_cases("sigmoid", [](Rng& rng) {
    auto x = rnd({pick(rng, 1, 10)}, rng, -4, 4), r = rnd(x.shape(), rng);
    return gradcheck([&](const auto& in) { return contract(sigmoid(in[0]), r); }, {x});
  });
  check_cases("tanh", [](Rng& rng) {
    auto x = rnd({pick(rng, 1, 10)}, rng, -3, 3), r = rnd(x.shape(), rng);
    return gradcheck([&](const auto& in) { return contract(yolco::tanh(in[0]), r); }, {x});
  });
  check_cases("gelu", [](Rng& rng) {
    auto x = rnd({pick(rng, 1, 10)}, rng, -3, 3), r = rnd(x.shape(), rng);
    return gradcheck([&](const auto& in) { return contract(gelu(in[0]), r); }, {x});
  });
  check_cases("dropout", [](Rng& rng) {
    auto x = rnd({pick(rng, 1, 12)}, rng), r = rnd(x.shape(), rng);
    const auto seed = rng();
    return gradcheck(
        [&](const auto& in) {
          Rng local(seed);
          return contract(dropout(in[0], 0.3, true, local), r);
        },
        {x});
  });
  check_cases("sum_mean", [](Rng& rng) {
    auto x = rnd({pick(rng, 1, 5), pick(rng, 1, 5)}, rng);
    return gradcheck([&](const auto& in) { return add(scale(sum(in[0]), 0.3), mul(mean(in[0]), mean(in[0]))); },
                     {x});
  });
}

TEST_CASE("gradient checks: matrix ops") {
  check_cases("matmul_transpose", [](Rng& rng) {
    const int n = pick(rng, 1, 4), k = pick(rng, 1, 4), m = pick(rng, 1, 4);
    auto a = rnd({n, k}, rng), b = rnd({m, k}, rng), r = rnd({n, m}, rng);
    return gradcheck([&](const auto& in) { return contract(matmul(in[0], transpose(in[1])), r); }, {a, b});
  });
  check_cases("linear", [](Rng& rng) {
    const int n = pick(rng, 1, 4), i = pick(rng, 1, 4), o = pick(rng, 1, 4);
    auto x = rnd({n, i}, rng), w = rnd({o, i}, rng), b = rnd({o}, rng), r = rnd({n, o}, rng);
    return gradcheck([&](const auto& in) { return contract(linear(in[0], in[1], in[2]), r); }, {x, w, b});
  });
  check_cases("slice_concat_cols", [](Rng& rng) {
    const int n = pick(rng, 1, 4), d = pick(rng, 2, 6), s = pick(rng, 0, d - 1), c = pick(rng, 1, d - s);
    auto x = rnd({n, d}, rng), r = rnd({n, c + d}, rng);
    return gradcheck([&](const auto& in) { return contract(concat_cols<double>({slice_cols(in[0], s, c), in[0]}), r); },
                     {x});
  });
  check_cases("softmax", [](Rng& rng) {
    const int n = pick(rng, 1, 4), d = pick(rng, 1, 5);
    const std::int64_t axis = uniform_index(rng, 2);
    auto x = rnd({n, d}, rng, -2, 2), r = rnd({n, d}, rng);
    return gradcheck([&](const auto& in) { return contract(softmax(in[0], axis), r); }, {x});
  });
  check_cases("masked_softmax_rows", [](Rng& rng) {
    const int n = pick(rng, 1, 4), d = pick(rng, 1, 5);
    std::vector<bool> mask(d);
    for (int j = 0; j < d; ++j) mask[j] = uniform01(rng) < 0.7;
    mask[uniform_index(rng, d)] = true;
    auto x = rnd({n, d}, rng, -2, 2), r = rnd({n, d}, rng);
    return gradcheck([&](const auto& in) { return contract(masked_softmax_rows(in[0], mask), r); }, {x});
  });
  check_cases("layer_norm", [](Rng& rng) {
    const int n = pick(rng, 1, 4), d = pick(rng, 2, 6);
    auto x = rnd({n, d}, rng, -2, 2), g = rnd({d}, rng), b = rnd({d}, rng), r = rnd({n, d}, rng);
    return gradcheck([&](const auto& in) { return contract(layer_norm(in[0], in[1], in[2]), r); }, {x, g, b});
  });
  check_cases("masked_mean_rows", [](Rng& rng) {
    const int n = pick(rng, 1, 5), d = pick(rng, 1, 4);
    std::vector<bool> mask(n);
    for (int j = 0; j < n; ++j) mask[j] = uniform01(rng) < 0.6;
    mask[uniform_index(rng, n)] = true;
    auto x = rnd({n, d}, rng), r = rnd({d}, rng);
    return gradcheck([&](const auto& in) { return contract(masked_mean_rows(in[0], mask), r); }, {x});
  });
}
