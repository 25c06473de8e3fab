#include "yolco/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "yolco/checkpoint.hpp"
#include "yolco/metrics.hpp"

namespace yolco {

std::string to_string(ClassifierKind kind) {
  switch (kind) {
    case ClassifierKind::svm: return "svm";
    case ClassifierKind::rnn: return "rnn";
    case ClassifierKind::lstm: return "lstm";
    case ClassifierKind::transformer: return "transformer";
  }
  return "transformer";
}

ClassifierKind classifier_kind_from_string(const std::string& text) {
  if (text == "svm") return ClassifierKind::svm;
  if (text == "rnn") return ClassifierKind::rnn;
  if (text == "lstm") return ClassifierKind::lstm;
  if (text == "transformer") return ClassifierKind::transformer;
  throw std::invalid_argument("unknown classifier '" + text + "' (expected svm, rnn, lstm or transformer)");
}

void ClassifierConfig::validate() const {
  if (seq_len < 1 || input_dim < 1) throw std::invalid_argument("classifier: seq_len and input_dim must be >= 1");
  if (kind == ClassifierKind::transformer) {
    if (width < 1 || heads < 1 || width % heads != 0)
      throw std::invalid_argument("classifier: width must be a positive multiple of heads");
    if (depth < 0 || ff < 1) throw std::invalid_argument("classifier: bad depth or ff width");
  }
  if ((kind == ClassifierKind::rnn || kind == ClassifierKind::lstm) && hidden < 1)
    throw std::invalid_argument("classifier: hidden must be >= 1");
  if (dropout < 0 || dropout >= 1) throw std::invalid_argument("classifier: dropout outside [0, 1)");
  if (epochs < 1 || batch_size < 1) throw std::invalid_argument("classifier: epochs and batch_size must be >= 1");
  if (!(lr0 > 0)) throw std::invalid_argument("classifier: lr0 must be positive");
  if (!(svm_lambda > 0)) throw std::invalid_argument("classifier: svm_lambda must be positive");
}

nlohmann::json ClassifierConfig::to_json() const {
  return {{"kind", to_string(kind)},
          {"seq_len", seq_len},
          {"input_dim", input_dim},
          {"width", width},
          {"heads", heads},
          {"depth", depth},
          {"ff", ff},
          {"hidden", hidden},
          {"dropout", dropout},
          {"epochs", epochs},
          {"lr0", lr0},
          {"lr_min", lr_min},
          {"batch_size", batch_size},
          {"pooling", pooling == Pooling::mean ? "mean" : "max"},
          {"svm_lambda", svm_lambda},
          {"seed", seed}};
}

ClassifierConfig ClassifierConfig::from_json(const nlohmann::json& j) {
  ClassifierConfig c;
  if (j.contains("kind")) c.kind = classifier_kind_from_string(j.at("kind").get<std::string>());
  c.seq_len = j.value("seq_len", c.seq_len);
  c.input_dim = j.value("input_dim", c.input_dim);
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.depth = j.value("depth", c.depth);
  c.ff = j.value("ff", c.ff);
  c.hidden = j.value("hidden", c.hidden);
  c.dropout = j.value("dropout", c.dropout);
  c.epochs = j.value("epochs", c.epochs);
  c.lr0 = j.value("lr0", c.lr0);
  c.lr_min = j.value("lr_min", c.lr_min);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("pooling")) {
    const auto p = j.at("pooling").get<std::string>();
    if (p != "mean" && p != "max") throw std::invalid_argument("classifier: pooling must be mean or max");
    c.pooling = p == "mean" ? Pooling::mean : Pooling::max;
  }
  c.svm_lambda = j.value("svm_lambda", c.svm_lambda);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

template <typename T>
SequenceInput<T> make_input(const FeatureSequence& seq, int seq_len, int input_dim) {
  if (seq.rows.empty()) throw std::invalid_argument("classifier: empty feature sequence for " + seq.slide_id);
  SequenceInput<T> in;
  in.valid = std::min<std::size_t>(seq.rows.size(), static_cast<std::size_t>(seq_len));
  std::vector<T> data(static_cast<std::size_t>(seq_len) * input_dim, T(0));
  for (std::size_t r = 0; r < in.valid; ++r) {
    const auto& f = seq.rows[r].feature;
    if (static_cast<int>(f.size()) != input_dim) throw std::invalid_argument("classifier: feature width mismatch");
    std::copy(f.begin(), f.end(), data.begin() + static_cast<std::ptrdiff_t>(r * input_dim));
  }
  in.x = BasicTensor<T>({seq_len, input_dim}, std::move(data));
  in.mask.assign(static_cast<std::size_t>(seq_len), false);
  std::fill(in.mask.begin(), in.mask.begin() + static_cast<std::ptrdiff_t>(in.valid), true);
  return in;
}

template <typename T>
BasicTensor<T> two_sigmoid_ce(const BasicTensor<T>& probs, int label) {
  if (probs.numel() != 2) throw ShapeError("two_sigmoid_ce: expected two probabilities");
  constexpr double eps = 1e-7;
  const double t[2] = {label ? 0.0 : 1.0, label ? 1.0 : 0.0};
  double loss = 0.0;
  std::vector<T> grad(2);
  for (int k = 0; k < 2; ++k) {
    const double p = std::clamp(static_cast<double>(probs.data()[k]), eps, 1.0 - eps);
    loss -= t[k] * std::log(p) + (1.0 - t[k]) * std::log(1.0 - p);
    grad[k] = static_cast<T>(-t[k] / p + (1.0 - t[k]) / (1.0 - p));
  }
  return make_op<T>({}, {static_cast<T>(loss)}, {probs}, [probs, grad](const std::vector<T>& g) {
    auto gp = probs.mutable_grad();
    for (int k = 0; k < 2; ++k) gp[k] += g[0] * grad[k];
  });
}

template <typename T>
BasicTensor<T> pool_rows(const BasicTensor<T>& x, const std::vector<bool>& mask, Pooling pooling) {
  if (pooling == Pooling::mean) return masked_mean_rows(x, mask);
  if (x.rank() != 2 || static_cast<std::size_t>(x.dim(0)) != mask.size())
    throw ShapeError("pool_rows: mask does not match rows");
  const auto n = x.dim(0), k = x.dim(1);
  std::vector<T> out(static_cast<std::size_t>(k));
  std::vector<std::int64_t> arg(static_cast<std::size_t>(k), -1);
  for (std::int64_t c = 0; c < k; ++c)
    for (std::int64_t r = 0; r < n; ++r)
      if (mask[r] && (arg[c] < 0 || x.data()[r * k + c] > out[c])) {
        out[c] = x.data()[r * k + c];
        arg[c] = r;
      }
  if (std::count(arg.begin(), arg.end(), -1) > 0) throw std::invalid_argument("pool_rows: no unmasked rows");
  return make_op<T>({k}, std::move(out), {x}, [x, arg, k](const std::vector<T>& g) {
    auto gx = x.mutable_grad();
    for (std::int64_t c = 0; c < k; ++c) gx[arg[c] * k + c] += g[c];
  });
}

template <typename T>
BasicSequenceClassifier<T>::BasicSequenceClassifier(ClassifierConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng = make_rng(seed, "classifier.init");
  auto add = [&](const std::string& name, BasicTensor<T> t) {
    lookup_.emplace(name, params_.size());
    params_.emplace_back(name, std::move(t));
  };
  auto dense = [&](const std::string& name, int out, int in) {
    const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in)));
    add(name + ".w", BasicTensor<T>::uniform({out, in}, -bound, bound, rng, true));
    add(name + ".b", BasicTensor<T>::zeros({out}, true));
  };
  auto norm = [&](const std::string& name, int dim) {
    add(name + ".g", BasicTensor<T>::full({dim}, T(1), true));
    add(name + ".b", BasicTensor<T>::zeros({dim}, true));
  };
  const int in = cfg_.input_dim;
  switch (cfg_.kind) {
    case ClassifierKind::svm:
      break;
    case ClassifierKind::transformer: {
      const int w = cfg_.width;
      dense("in", w, in);
      add("pos", BasicTensor<T>::uniform({cfg_.seq_len, w}, T(-0.02), T(0.02), rng, true));
      for (int l = 0; l < cfg_.depth; ++l) {
        const std::string b = "layer" + std::to_string(l);
        norm(b + ".ln1", w);
        dense(b + ".q", w, w);
        dense(b + ".k", w, w);
        dense(b + ".v", w, w);
        dense(b + ".o", w, w);
        norm(b + ".ln2", w);
        dense(b + ".ff1", cfg_.ff, w);
        dense(b + ".ff2", w, cfg_.ff);
      }
      norm("lnf", w);
      dense("out", cfg_.ff, w);
      dense("mlp", 2, cfg_.ff);
      break;
    }
    case ClassifierKind::rnn:
      dense("rnn.x", cfg_.hidden, in);
      add("rnn.h", BasicTensor<T>::uniform({cfg_.hidden, cfg_.hidden},
                                           static_cast<T>(-1.0 / std::sqrt(cfg_.hidden)),
                                           static_cast<T>(1.0 / std::sqrt(cfg_.hidden)), rng, true));
      dense("mlp", 2, cfg_.hidden);
      break;
    case ClassifierKind::lstm:
      for (const char* gate : {"i", "f", "g", "o"}) {
        const std::string b = std::string("lstm.") + gate;
        dense(b + ".x", cfg_.hidden, in);
        add(b + ".h", BasicTensor<T>::uniform({cfg_.hidden, cfg_.hidden},
                                              static_cast<T>(-1.0 / std::sqrt(cfg_.hidden)),
                                              static_cast<T>(1.0 / std::sqrt(cfg_.hidden)), rng, true));
      }
      // Forget gate starts open.
      for (auto& v : params_[lookup_.at("lstm.f.x.b")].second.mutable_data()) v = T(1);
      dense("mlp", 2, cfg_.hidden);
      break;
  }
}

template <typename T>
std::vector<BasicTensor<T>> BasicSequenceClassifier<T>::parameters() const {
  std::vector<BasicTensor<T>> out;
  for (const auto& [name, t] : params_) out.push_back(t);
  return out;
}

template <typename T>
const BasicTensor<T>& BasicSequenceClassifier<T>::p(const std::string& name) const {
  return params_.at(lookup_.at(name)).second;
}

template <typename T>
BasicTensor<T> BasicSequenceClassifier<T>::transformer(const SequenceInput<T>& in, bool training, Rng& rng) const {
  const T rate = static_cast<T>(cfg_.dropout);
  const int w = cfg_.width, dh = w / cfg_.heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  if (keep_attention) attention.clear();

  auto h = add(linear(in.x, p("in.w"), p("in.b")), p("pos"));
  for (int l = 0; l < cfg_.depth; ++l) {
    const std::string b = "layer" + std::to_string(l);
    const auto a = layer_norm(h, p(b + ".ln1.g"), p(b + ".ln1.b"));
    const auto q = linear(a, p(b + ".q.w"), p(b + ".q.b"));
    const auto k = linear(a, p(b + ".k.w"), p(b + ".k.b"));
    const auto v = linear(a, p(b + ".v.w"), p(b + ".v.b"));
    std::vector<BasicTensor<T>> heads;
    for (int hd = 0; hd < cfg_.heads; ++hd) {
      const auto qh = slice_cols(q, hd * dh, dh), kh = slice_cols(k, hd * dh, dh), vh = slice_cols(v, hd * dh, dh);
      const auto att = masked_softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt), in.mask);
      if (keep_attention) attention.push_back(att.detach());
      heads.push_back(matmul(att, vh));
    }
    const auto merged = heads.size() == 1 ? heads[0] : concat_cols(heads);
    h = add(h, dropout(linear(merged, p(b + ".o.w"), p(b + ".o.b")), rate, training, rng));
    const auto a2 = layer_norm(h, p(b + ".ln2.g"), p(b + ".ln2.b"));
    const auto f = dropout(gelu(linear(a2, p(b + ".ff1.w"), p(b + ".ff1.b"))), rate, training, rng);
    h = add(h, dropout(linear(f, p(b + ".ff2.w"), p(b + ".ff2.b")), rate, training, rng));
  }
  const auto hn = layer_norm(h, p("lnf.g"), p("lnf.b"));
  return gelu(linear(hn, p("out.w"), p("out.b")));
}

template <typename T>
BasicTensor<T> BasicSequenceClassifier<T>::recurrent(const SequenceInput<T>& in, bool training, Rng& rng,
                                                     BasicTensor<T>& last) const {
  (void)training;
  (void)rng;
  const int hs = cfg_.hidden;
  auto h = BasicTensor<T>::zeros({hs, 1});
  std::vector<BasicTensor<T>> states;
  if (cfg_.kind == ClassifierKind::rnn) {
    const auto xw = transpose(linear(in.x, p("rnn.x.w"), p("rnn.x.b")));  // [H, N]
    for (std::size_t t = 0; t < in.valid; ++t) {
      h = tanh(add(slice_cols(xw, static_cast<std::int64_t>(t), 1), matmul(p("rnn.h"), h)));
      states.push_back(h);
    }
  } else {
    BasicTensor<T> xw[4];
    const char* gates[4] = {"i", "f", "g", "o"};
    for (int g = 0; g < 4; ++g) {
      const std::string b = std::string("lstm.") + gates[g];
      xw[g] = transpose(linear(in.x, p(b + ".x.w"), p(b + ".x.b")));
    }
    auto c = BasicTensor<T>::zeros({hs, 1});
    for (std::size_t t = 0; t < in.valid; ++t) {
      BasicTensor<T> pre[4];
      for (int g = 0; g < 4; ++g)
        pre[g] = add(slice_cols(xw[g], static_cast<std::int64_t>(t), 1),
                     matmul(p(std::string("lstm.") + gates[g] + ".h"), h));
      c = add(mul(sigmoid(pre[1]), c), mul(sigmoid(pre[0]), tanh(pre[2])));
      h = mul(sigmoid(pre[3]), tanh(c));
      states.push_back(h);
    }
  }
  last = reshape(h, {hs});
  return transpose(states.size() == 1 ? states[0] : concat_cols(states));  // [valid, H]
}

template <typename T>
ClassifierOutput<T> BasicSequenceClassifier<T>::forward(const SequenceInput<T>& in, bool training, Rng& rng) const {
  if (cfg_.kind == ClassifierKind::svm) throw std::logic_error("classifier: svm has no neural forward pass");
  if (in.valid == 0) throw std::invalid_argument("classifier: sequence has no valid positions");
  const T rate = static_cast<T>(cfg_.dropout);
  ClassifierOutput<T> out;
  std::vector<bool> mask = in.mask;
  BasicTensor<T> features;
  if (cfg_.kind == ClassifierKind::transformer) {
    features = transformer(in, training, rng);
    out.hidden = features;
  } else {
    features = recurrent(in, training, rng, out.hidden);
    mask.assign(in.valid, true);
  }
  out.per_position = sigmoid(linear(dropout(features, rate, training, rng), p("mlp.w"), p("mlp.b")));
  out.slide_probs = pool_rows(out.per_position, mask, cfg_.pooling);
  return out;
}

template class BasicSequenceClassifier<float>;
template class BasicSequenceClassifier<double>;
template SequenceInput<float> make_input<float>(const FeatureSequence&, int, int);
template SequenceInput<double> make_input<double>(const FeatureSequence&, int, int);
template BasicTensor<float> two_sigmoid_ce<float>(const BasicTensor<float>&, int);
template BasicTensor<double> two_sigmoid_ce<double>(const BasicTensor<double>&, int);
template BasicTensor<float> pool_rows<float>(const BasicTensor<float>&, const std::vector<bool>&, Pooling);
template BasicTensor<double> pool_rows<double>(const BasicTensor<double>&, const std::vector<bool>&, Pooling);

double LinearSvm::score(std::span<const float> x) const {
  if (w.size() != x.size() + 1) throw std::invalid_argument("svm: input width mismatch");
  double s = w.back();
  for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * x[i];
  return s;
}

LinearSvm svm_fit(const std::vector<std::vector<float>>& x, std::span<const int> labels, double lambda, int epochs,
                  std::uint64_t seed) {
  if (x.empty() || x.size() != labels.size()) throw std::invalid_argument("svm_fit: bad training set");
  const std::size_t dim = x[0].size();
  LinearSvm svm{std::vector<double>(dim + 1, 0.0)};
  auto rng = make_rng(seed, "svm.order");
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::int64_t step = 0;
  for (int e = 0; e < epochs; ++e) {
    shuffle(order, rng);
    for (auto i : order) {
      ++step;
      const double eta = 1.0 / (lambda * static_cast<double>(step));
      const double y = labels[i] ? 1.0 : -1.0;
      const double margin = y * svm.score(x[i]);
      const double shrink = 1.0 - eta * lambda;
      for (auto& v : svm.w) v *= shrink;
      if (margin < 1.0) {
        for (std::size_t k = 0; k < dim; ++k) svm.w[k] += eta * y * x[i][k];
        svm.w[dim] += eta * y;
      }
    }
  }
  // Checkpoints hold f32; round here so a saved model predicts identically.
  for (auto& v : svm.w) v = static_cast<float>(v);
  return svm;
}

std::vector<int> svm_predict(const LinearSvm& svm, const std::vector<std::vector<float>>& x) {
  std::vector<int> out;
  for (const auto& v : x) out.push_back(svm.score(v) >= 0.0 ? 1 : 0);
  return out;
}

std::vector<float> flatten_sequence(const FeatureSequence& seq, int seq_len, int input_dim) {
  std::vector<float> v(static_cast<std::size_t>(seq_len) * input_dim, 0.0f);
  const auto rows = std::min<std::size_t>(seq.rows.size(), static_cast<std::size_t>(seq_len));
  for (std::size_t r = 0; r < rows; ++r) {
    if (static_cast<int>(seq.rows[r].feature.size()) != input_dim)
      throw std::invalid_argument("classifier: feature width mismatch");
    std::copy(seq.rows[r].feature.begin(), seq.rows[r].feature.end(), v.begin() + static_cast<std::ptrdiff_t>(r * input_dim));
  }
  return v;
}

SlideClassifier::SlideClassifier(ClassifierConfig cfg, std::uint64_t seed) : cfg_(cfg), net_(std::move(cfg), seed) {
  if (cfg_.kind == ClassifierKind::svm)
    svm_.w.assign(static_cast<std::size_t>(cfg_.seq_len) * cfg_.input_dim + 1, 0.0);
}

SlidePrediction SlideClassifier::predict(const FeatureSequence& seq) const {
  SlidePrediction pred{seq.slide_id, seq.label, 0.0, {}, {}};
  if (cfg_.kind == ClassifierKind::svm) {
    const auto flat = flatten_sequence(seq, cfg_.seq_len, cfg_.input_dim);
    pred.prob = 1.0 / (1.0 + std::exp(-svm_.score(flat)));
    const auto rows = std::min<std::size_t>(seq.rows.size(), static_cast<std::size_t>(cfg_.seq_len));
    // Per-vector output: the vector's own share of the margin.
    for (std::size_t r = 0; r < rows; ++r) {
      double s = svm_.w.back() / static_cast<double>(rows);
      for (int k = 0; k < cfg_.input_dim; ++k) s += svm_.w[r * cfg_.input_dim + k] * seq.rows[r].feature[k];
      pred.per_vector.push_back(1.0 / (1.0 + std::exp(-s)));
    }
    pred.hidden.assign(flat.begin(), flat.begin() + std::min<std::ptrdiff_t>(flat.size(), cfg_.input_dim));
    return pred;
  }
  NoGradGuard guard;
  Rng unused(0);
  const auto in = make_input<float>(seq, cfg_.seq_len, cfg_.input_dim);
  const auto out = net_.forward(in, false, unused);
  pred.prob = out.slide_probs.data()[1];
  for (std::size_t r = 0; r < in.valid; ++r) pred.per_vector.push_back(out.per_position.data()[r * 2 + 1]);
  if (cfg_.kind == ClassifierKind::transformer) {
    const auto pooled = masked_mean_rows(out.hidden, in.mask);
    pred.hidden.assign(pooled.data().begin(), pooled.data().end());
  } else {
    pred.hidden.assign(out.hidden.data().begin(), out.hidden.data().end());
  }
  return pred;
}

void SlideClassifier::save(const std::filesystem::path& path) const {
  nlohmann::json header = cfg_.to_json();
  if (cfg_.kind == ClassifierKind::svm) {
    const auto n = static_cast<std::int64_t>(svm_.w.size());
    NamedParameters<float> t{{"svm.w", Tensor({n}, std::vector<float>(svm_.w.begin(), svm_.w.end()))}};
    save_checkpoint(path, header, t);
  } else {
    save_checkpoint(path, header, net_.named_parameters());
  }
}

SlideClassifier SlideClassifier::load(const std::filesystem::path& path) {
  const auto ckpt = load_checkpoint(path);
  SlideClassifier c(ClassifierConfig::from_json(ckpt.model_config), 0);
  if (c.cfg_.kind == ClassifierKind::svm) {
    const auto w = ckpt.at("svm.w").data();
    if (w.size() != c.svm_.w.size()) throw std::runtime_error(path.string() + ": svm weight size mismatch");
    std::copy(w.begin(), w.end(), c.svm_.w.begin());
  } else {
    assign_parameters(ckpt, c.net_.named_parameters());
  }
  return c;
}

ClassifierTrainResult train_classifier(std::span<const FeatureSequence> train, const ClassifierConfig& cfg,
                                       const std::function<void(const ClassifierEpoch&)>& on_epoch) {
  cfg.validate();
  std::vector<int> labels;
  for (const auto& s : train) labels.push_back(s.label);
  const auto positives = std::count(labels.begin(), labels.end(), 1);
  if (positives == 0 || positives == static_cast<std::ptrdiff_t>(labels.size()))
    throw std::invalid_argument("classifier training needs both positive and negative slides");

  ClassifierTrainResult result{SlideClassifier(cfg, cfg.seed), {}};
  if (cfg.kind == ClassifierKind::svm) {
    std::vector<std::vector<float>> x;
    for (const auto& s : train) x.push_back(flatten_sequence(s, cfg.seq_len, cfg.input_dim));
    result.model.svm() = svm_fit(x, labels, cfg.svm_lambda, cfg.epochs, cfg.seed);
    for (int e = 0; e < cfg.epochs; ++e) {
      // Hinge objective of the final model, repeated so the log has one row per epoch.
      double loss = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i)
        loss += std::max(0.0, 1.0 - (labels[i] ? 1.0 : -1.0) * result.model.svm().score(x[i]));
      result.log.push_back({e + 1, 0.0, loss / static_cast<double>(x.size())});
      if (on_epoch) on_epoch(result.log.back());
    }
    return result;
  }

  auto& net = result.model.network();
  auto params = net.parameters();
  AdamState<float> adam;
  adam.base_lr = cfg.lr0;
  auto order_rng = make_rng(cfg.seed, "classifier.order");
  auto drop_rng = make_rng(cfg.seed, "dropout");
  std::vector<SequenceInput<float>> inputs;
  for (const auto& s : train) inputs.push_back(make_input<float>(s, cfg.seq_len, cfg.input_dim));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int e = 0; e < cfg.epochs; ++e) {
    ClassifierEpoch log{e + 1, cosine_lr(e, cfg.epochs, cfg.lr0, cfg.lr_min), 0.0};
    shuffle(order, order_rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const float inv = 1.0f / static_cast<float>(end - start);
      zero_grads(params);
      for (std::size_t k = start; k < end; ++k) {
        const auto out = net.forward(inputs[order[k]], true, drop_rng);
        const auto loss = two_sigmoid_ce(out.slide_probs, labels[order[k]]);
        scale(loss, inv).backward();
        log.loss += loss.item();
      }
      adam_step(adam, params, log.lr);
    }
    log.loss /= static_cast<double>(train.size());
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

void write_classifier_log_csv(const std::filesystem::path& path, std::span<const ClassifierEpoch> log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,lr,loss\n";
  for (const auto& e : log) out << e.epoch << ',' << format_real(e.lr) << ',' << format_real(e.loss) << '\n';
}

void write_per_vector_csv(const std::filesystem::path& path, std::span<const SlidePrediction> preds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "slide_id,rank,prob\n";
  for (const auto& p : preds)
    for (std::size_t r = 0; r < p.per_vector.size(); ++r)
      out << p.slide_id << ',' << r << ',' << format_real(p.per_vector[r]) << '\n';
}

void write_hidden_csv(const std::filesystem::path& path, std::span<const SlidePrediction> preds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::size_t dim = preds.empty() ? 0 : preds[0].hidden.size();
  out << "slide_id,label";
  for (std::size_t k = 0; k < dim; ++k) out << ",h" << k;
  out << '\n';
  for (const auto& p : preds) {
    out << p.slide_id << ',' << p.label;
    for (float v : p.hidden) out << ',' << format_real(v);
    out << '\n';
  }
}

}  // namespace yolco
