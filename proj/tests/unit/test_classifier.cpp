#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "gradcheck.hpp"
#include "yolco/classifier.hpp"
#include "yolco/rng.hpp"

using namespace yolco;

namespace {

ClassifierConfig small_config(ClassifierKind kind, int dim = 6) {
  ClassifierConfig c;
  c.kind = kind;
  c.seq_len = 8;
  c.input_dim = dim;
  c.width = 16;
  c.heads = 4;
  c.depth = 2;
  c.ff = 12;
  c.hidden = 8;
  c.dropout = 0.0;
  c.epochs = 20;
  c.lr0 = 1e-2;
  c.batch_size = 4;
  return c;
}

FeatureSequence random_sequence(Rng& rng, std::size_t rows, int dim, int label, double shift = 0.0) {
  FeatureSequence s{"s", label, static_cast<int>(rows), {}};
  for (std::size_t r = 0; r < rows; ++r) {
    SequenceRow row;
    row.prob = static_cast<float>(uniform01(rng));
    for (int k = 0; k < dim; ++k) row.feature.push_back(static_cast<float>(standard_normal(rng) + shift));
    s.rows.push_back(std::move(row));
  }
  return s;
}

// Replaces the network parameters with the gradcheck inputs so the whole
// forward pass is differentiated with respect to its weights.
double model_gradcheck(ClassifierKind kind) {
  auto cfg = small_config(kind, 5);
  cfg.seq_len = 4;
  cfg.hidden = 3;
  cfg.ff = 6;
  cfg.width = 8;
  cfg.heads = 2;
  BasicSequenceClassifier<double> net(cfg, 3);
  Rng rng = make_rng(1, "t");
  auto seq = random_sequence(rng, 3, cfg.input_dim, 1);
  const auto in = make_input<double>(seq, cfg.seq_len, cfg.input_dim);
  std::vector<Tensor64> inputs;
  for (const auto& [name, t] : net.named_parameters()) inputs.push_back(t.detach().clone());
  return testing::gradcheck(
      [&](const std::vector<Tensor64>& xs) {
        auto& params = net.named_parameters();
        for (std::size_t i = 0; i < xs.size(); ++i) params[i].second = xs[i];
        Rng unused(0);
        return two_sigmoid_ce(net.forward(in, false, unused).slide_probs, 1);
      },
      inputs, 1e-6);
}

}  // namespace

TEST_CASE("classifier: output shapes and attention rows") {
  Rng rng = make_rng(2, "t");
  for (auto kind : {ClassifierKind::transformer, ClassifierKind::rnn, ClassifierKind::lstm}) {
    auto cfg = small_config(kind);
    cfg.seq_len = 100;
    SequenceClassifier net(cfg, 1);
    net.keep_attention = true;
    for (std::size_t n : {1u, 7u, 100u}) {
      const auto in = make_input<float>(random_sequence(rng, n, cfg.input_dim, 0), cfg.seq_len, cfg.input_dim);
      CHECK(in.valid == n);
      const auto out = net.forward(in, false, rng);
      REQUIRE(out.slide_probs.shape() == Shape{2});
      for (float p : out.slide_probs.data()) CHECK((p > 0.0f && p < 1.0f));
      if (kind == ClassifierKind::transformer) {
        CHECK(out.per_position.shape() == Shape{100, 2});
        CHECK(out.hidden.shape() == Shape{100, cfg.ff});
        REQUIRE(net.attention.size() == static_cast<std::size_t>(cfg.depth * cfg.heads));
        for (const auto& a : net.attention) {
          for (std::int64_t r = 0; r < 100; ++r) {
            double s = 0.0;
            for (std::int64_t c = 0; c < 100; ++c) {
              const float v = a.data()[r * 100 + c];
              if (c >= static_cast<std::int64_t>(n)) CHECK(v == 0.0f);
              s += v;
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
          }
        }
      } else {
        CHECK(out.per_position.shape() == Shape{static_cast<std::int64_t>(n), 2});
        CHECK(out.hidden.shape() == Shape{cfg.hidden});
      }
    }
  }
}

TEST_CASE("classifier: sequence longer than seq_len is cut") {
  Rng rng = make_rng(3, "t");
  const auto in = make_input<float>(random_sequence(rng, 12, 4, 1), 8, 4);
  CHECK(in.valid == 8);
  CHECK(std::count(in.mask.begin(), in.mask.end(), true) == 8);
  CHECK_THROWS(make_input<float>(FeatureSequence{"e", 0, 0, {}}, 8, 4));
}

TEST_CASE("classifier: gradients match finite differences") {
  CHECK(model_gradcheck(ClassifierKind::transformer) < 1e-4);
  CHECK(model_gradcheck(ClassifierKind::rnn) < 1e-4);
  CHECK(model_gradcheck(ClassifierKind::lstm) < 1e-4);
}

TEST_CASE("classifier: two-sigmoid CE and pooling gradients") {
  Rng rng = make_rng(4, "t");
  for (int label : {0, 1}) {
    const auto p = Tensor64::uniform({2}, 0.05, 0.95, rng);
    CHECK(testing::gradcheck([&](const std::vector<Tensor64>& x) { return two_sigmoid_ce(x[0], label); }, {p}) < 1e-6);
    const double expected = label ? -std::log(p.data()[1]) - std::log(1 - p.data()[0])
                                  : -std::log(p.data()[0]) - std::log(1 - p.data()[1]);
    CHECK(two_sigmoid_ce(p, label).item() == doctest::Approx(expected));
  }
  const auto x = Tensor64::uniform({5, 3}, -1, 1, rng);
  const auto w = Tensor64::uniform({3}, -1, 1, rng);
  const std::vector<bool> mask = {true, false, true, true, false};
  for (auto pooling : {Pooling::mean, Pooling::max}) {
    CHECK(testing::gradcheck(
              [&](const std::vector<Tensor64>& v) { return testing::contract(pool_rows(v[0], mask, pooling), w); },
              {x}) < 1e-6);
  }
  const auto mx = pool_rows(x, mask, Pooling::max);
  for (int c = 0; c < 3; ++c) {
    double best = -1e9;
    for (int r : {0, 2, 3}) best = std::max(best, x.data()[r * 3 + c]);
    CHECK(mx.data()[c] == best);
  }
}

TEST_CASE("classifier: RNN zero input with zero weights stays at the origin") {
  auto cfg = small_config(ClassifierKind::rnn);
  SequenceClassifier net(cfg, 5);
  for (auto& [name, t] : net.named_parameters())
    if (name.rfind("rnn.", 0) == 0)
      for (auto& v : t.mutable_data()) v = 0.0f;
  Rng rng = make_rng(5, "t");
  const auto in = make_input<float>(random_sequence(rng, 6, cfg.input_dim, 0), cfg.seq_len, cfg.input_dim);
  const auto out = net.forward(in, false, rng);
  for (float h : out.hidden.data()) CHECK(h == 0.0f);
}

TEST_CASE("classifier: LSTM with a closed input gate keeps a zero cell") {
  auto cfg = small_config(ClassifierKind::lstm);
  SequenceClassifier net(cfg, 6);
  for (auto& [name, t] : net.named_parameters()) {
    if (name.rfind("lstm.i.", 0) == 0) {
      for (auto& v : t.mutable_data()) v = 0.0f;
      if (name == "lstm.i.x.b")
        for (auto& v : t.mutable_data()) v = -100.0f;
    }
  }
  Rng rng = make_rng(6, "t");
  const auto in = make_input<float>(random_sequence(rng, 5, cfg.input_dim, 0), cfg.seq_len, cfg.input_dim);
  const auto out = net.forward(in, false, rng);
  for (float h : out.hidden.data()) CHECK(std::abs(h) < 1e-6f);
}

TEST_CASE("classifier: transformer ignores padding content and is permutation equivariant") {
  auto cfg = small_config(ClassifierKind::transformer);
  SequenceClassifier net(cfg, 7);
  Rng rng = make_rng(7, "t");
  const auto seq = random_sequence(rng, 5, cfg.input_dim, 1);
  auto in = make_input<float>(seq, cfg.seq_len, cfg.input_dim);
  const auto base = net.forward(in, false, rng);

  auto noisy = in;
  std::vector<float> data(noisy.x.data().begin(), noisy.x.data().end());
  for (std::size_t i = 5 * cfg.input_dim; i < data.size(); ++i) data[i] = static_cast<float>(standard_normal(rng));
  noisy.x = Tensor(noisy.x.shape(), data);
  const auto padded = net.forward(noisy, false, rng);
  for (int k = 0; k < 2; ++k) CHECK(padded.slide_probs.data()[k] == doctest::Approx(base.slide_probs.data()[k]));

  // With the position table zeroed, swapping two rows swaps their outputs.
  for (auto& [name, t] : net.named_parameters())
    if (name == "pos")
      for (auto& v : t.mutable_data()) v = 0.0f;
  const auto a = net.forward(in, false, rng);
  auto swapped_seq = seq;
  std::swap(swapped_seq.rows[0], swapped_seq.rows[3]);
  const auto b = net.forward(make_input<float>(swapped_seq, cfg.seq_len, cfg.input_dim), false, rng);
  for (int k = 0; k < 2; ++k) {
    CHECK(a.per_position.data()[0 * 2 + k] == doctest::Approx(b.per_position.data()[3 * 2 + k]).epsilon(1e-4));
    CHECK(a.per_position.data()[3 * 2 + k] == doctest::Approx(b.per_position.data()[0 * 2 + k]).epsilon(1e-4));
    CHECK(a.slide_probs.data()[k] == doctest::Approx(b.slide_probs.data()[k]).epsilon(1e-4));
  }
  // Mean pooling equals the mean of the valid per-position outputs.
  for (int k = 0; k < 2; ++k) {
    double s = 0.0;
    for (int r = 0; r < 5; ++r) s += a.per_position.data()[r * 2 + k];
    CHECK(a.slide_probs.data()[k] == doctest::Approx(s / 5).epsilon(1e-5));
  }
}

TEST_CASE("classifier: linear SVM separates a separable toy set") {
  Rng rng = make_rng(8, "t");
  std::vector<std::vector<float>> x;
  std::vector<int> y;
  for (int i = 0; i < 60; ++i) {
    const int label = i % 2;
    std::vector<float> v(4);
    for (auto& f : v) f = static_cast<float>(uniform(rng, -1, 1));
    v[0] = static_cast<float>(label ? uniform(rng, 0.5, 2) : uniform(rng, -2, -0.5));
    x.push_back(v);
    y.push_back(label);
  }
  const auto svm = svm_fit(x, y, 1e-3, 50, 1);
  CHECK(svm_predict(svm, x) == y);
  CHECK(svm.w.size() == 5);
}

TEST_CASE("classifier: training lowers the loss, is deterministic, and round-trips") {
  Rng rng = make_rng(9, "t");
  std::vector<FeatureSequence> train;
  for (int i = 0; i < 10; ++i) {
    const int label = i % 2;
    auto s = random_sequence(rng, 3 + i % 4, 6, label, label ? 0.7 : -0.7);
    s.slide_id = "slide" + std::to_string(i);
    train.push_back(std::move(s));
  }
  const auto tmp = std::filesystem::temp_directory_path() / "yolco_classifier_test";
  std::filesystem::create_directories(tmp);
  for (auto kind : {ClassifierKind::transformer, ClassifierKind::rnn, ClassifierKind::lstm, ClassifierKind::svm}) {
    CAPTURE(to_string(kind));
    auto cfg = small_config(kind);
    cfg.dropout = kind == ClassifierKind::svm ? 0.0 : 0.1;
    const auto r1 = train_classifier(train, cfg);
    const auto r2 = train_classifier(train, cfg);
    REQUIRE(r1.log.size() == 20);
    if (kind != ClassifierKind::svm) CHECK(r1.log.back().loss < r1.log.front().loss);
    for (std::size_t e = 0; e < r1.log.size(); ++e) CHECK(r1.log[e].loss == r2.log[e].loss);
    int correct = 0;
    const auto path = tmp / ("model_" + to_string(kind) + ".bin");
    r1.model.save(path);
    const auto loaded = SlideClassifier::load(path);
    for (const auto& s : train) {
      const auto p = r1.model.predict(s);
      const auto q = loaded.predict(s);
      CHECK(p.prob == q.prob);
      CHECK(p.per_vector.size() == std::min<std::size_t>(s.rows.size(), 8));
      correct += (p.prob >= 0.5) == (s.label == 1);
    }
    CHECK(correct >= 8);
  }
  std::vector<FeatureSequence> one_class(train.begin(), train.begin() + 1);
  CHECK_THROWS_AS(train_classifier(one_class, small_config(ClassifierKind::rnn)), std::invalid_argument);
  std::filesystem::remove_all(tmp);
}

TEST_CASE("classifier: config JSON round trip and validation") {
  auto cfg = small_config(ClassifierKind::lstm);
  cfg.pooling = Pooling::max;
  const auto back = ClassifierConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK_THROWS(classifier_kind_from_string("cnn"));
  auto bad = small_config(ClassifierKind::transformer);
  bad.heads = 5;
  CHECK_THROWS(bad.validate());
}
