#pragma once

// Slide classifiers over a collected feature sequence: a pre-norm
// Transformer, tanh RNN, LSTM and a linear soft-margin baseline.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "yolco/collect.hpp"
#include "yolco/optim.hpp"
#include "yolco/rng.hpp"
#include "yolco/tensor.hpp"

namespace yolco {

enum class ClassifierKind { svm, rnn, lstm, transformer };
enum class Pooling { mean, max };

std::string to_string(ClassifierKind kind);
ClassifierKind classifier_kind_from_string(const std::string& text);

struct ClassifierConfig {
  ClassifierKind kind = ClassifierKind::transformer;
  int seq_len = 100;    // padded sequence length; longer sequences are cut
  int input_dim = kFeatureDim;
  int width = 768;      // transformer model width
  int heads = 8;
  int depth = 10;
  int ff = 2048;        // feed-forward width and per-position output width D_FF
  int hidden = 2048;    // recurrent state size
  double dropout = 0.5;
  int epochs = 300;
  double lr0 = 5e-6;
  double lr_min = 0.0;
  int batch_size = 8;
  Pooling pooling = Pooling::mean;
  double svm_lambda = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static ClassifierConfig from_json(const nlohmann::json& j);
};

/// Zero-padded [seq_len, input_dim] matrix and its row mask.
template <typename T>
struct SequenceInput {
  BasicTensor<T> x;
  std::vector<bool> mask;
  std::size_t valid = 0;
};

template <typename T>
SequenceInput<T> make_input(const FeatureSequence& seq, int seq_len, int input_dim);

template <typename T>
struct ClassifierOutput {
  BasicTensor<T> slide_probs;   // [2]: pooled (negative, positive) sigmoid outputs
  BasicTensor<T> per_position;  // [rows, 2] sigmoid outputs; the first `valid` rows are real
  BasicTensor<T> hidden;        // transformer: [seq_len, ff]; recurrent: final state [hidden]
};

template <typename T>
class BasicSequenceClassifier {
 public:
  BasicSequenceClassifier(ClassifierConfig cfg, std::uint64_t seed);

  const ClassifierConfig& config() const { return cfg_; }
  NamedParameters<T>& named_parameters() { return params_; }
  const NamedParameters<T>& named_parameters() const { return params_; }
  std::vector<BasicTensor<T>> parameters() const;

  /// Neural kinds only. `rng` feeds dropout when training.
  ClassifierOutput<T> forward(const SequenceInput<T>& in, bool training, Rng& rng) const;

  /// Last attention probabilities per layer and head, recorded by the most
  /// recent transformer forward when `keep_attention` is set.
  bool keep_attention = false;
  mutable std::vector<BasicTensor<T>> attention;

 private:
  const BasicTensor<T>& p(const std::string& name) const;
  BasicTensor<T> transformer(const SequenceInput<T>& in, bool training, Rng& rng) const;
  BasicTensor<T> recurrent(const SequenceInput<T>& in, bool training, Rng& rng, BasicTensor<T>& last) const;

  ClassifierConfig cfg_;
  NamedParameters<T> params_;
  std::map<std::string, std::size_t> lookup_;
};

using SequenceClassifier = BasicSequenceClassifier<float>;

/// -sum_k t_k log p_k + (1 - t_k) log(1 - p_k) with t = (1 - label, label).
template <typename T>
BasicTensor<T> two_sigmoid_ce(const BasicTensor<T>& probs, int label);

/// Pooled rows of [N, K] under a row mask: masked mean or masked max.
template <typename T>
BasicTensor<T> pool_rows(const BasicTensor<T>& x, const std::vector<bool>& mask, Pooling pooling);

struct LinearSvm {
  std::vector<double> w;  // flattened seq_len * input_dim weights followed by the bias
  double score(std::span<const float> x) const;
};

/// Pegasos subgradient descent on the regularized hinge loss with a
/// constant-1 bias feature. Labels are 0/1.
LinearSvm svm_fit(const std::vector<std::vector<float>>& x, std::span<const int> labels, double lambda,
                  int epochs, std::uint64_t seed);
std::vector<int> svm_predict(const LinearSvm& svm, const std::vector<std::vector<float>>& x);

/// Flattened, zero-padded sequence.
std::vector<float> flatten_sequence(const FeatureSequence& seq, int seq_len, int input_dim);

struct SlidePrediction {
  std::string slide_id;
  int label = 0;
  double prob = 0.0;
  std::vector<double> per_vector;  // positive-class output per valid position
  std::vector<float> hidden;       // state exported for embedding tools
};

struct ClassifierEpoch {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

/// A trained classifier of any kind.
class SlideClassifier {
 public:
  SlideClassifier(ClassifierConfig cfg, std::uint64_t seed);

  const ClassifierConfig& config() const { return cfg_; }
  SlidePrediction predict(const FeatureSequence& seq) const;

  void save(const std::filesystem::path& path) const;
  static SlideClassifier load(const std::filesystem::path& path);

  SequenceClassifier& network() { return net_; }
  LinearSvm& svm() { return svm_; }

 private:
  ClassifierConfig cfg_;
  SequenceClassifier net_;
  LinearSvm svm_;
};

struct ClassifierTrainResult {
  SlideClassifier model;
  std::vector<ClassifierEpoch> log;
};

/// Throws unless both classes are present.
ClassifierTrainResult train_classifier(std::span<const FeatureSequence> train, const ClassifierConfig& cfg,
                                       const std::function<void(const ClassifierEpoch&)>& on_epoch = {});

void write_classifier_log_csv(const std::filesystem::path& path, std::span<const ClassifierEpoch> log);
/// slide_id, rank, prob for every valid position.
void write_per_vector_csv(const std::filesystem::path& path, std::span<const SlidePrediction> preds);
/// slide_id, label, h0..: exported hidden state per slide.
void write_hidden_csv(const std::filesystem::path& path, std::span<const SlidePrediction> preds);

}  // namespace yolco
