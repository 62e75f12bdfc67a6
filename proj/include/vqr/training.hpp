#pragma once

// Teacher-forced training for both model families, Adam updates with
// global-norm clipping, early stopping on eval loss, and single-file
// checkpoints (JSON manifest line followed by a raw float32 payload).

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vqr/features.hpp"
#include "vqr/model.hpp"
#include "vqr/seq2seq.hpp"
#include "vqr/transformer.hpp"

namespace vqr::training {

struct TrainConfig {
  model::ModelKind kind = model::ModelKind::Transformer;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double clip_norm = 1.0;  // 0 disables clipping
  std::size_t patience = 10;
  double stop_at_accuracy = 0.0;  // stop once train token accuracy reaches this; 0 disables
  std::size_t vocab_cap = text::kDefaultVocabCap;

  // GRU family
  std::size_t embed_dim = 256;
  std::size_t hidden_dim = 768;
  std::size_t attn_dim = 768;
  std::size_t gru_layers = 2;

  // Transformer family
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t tf_layers = 2;
  std::size_t ffn_dim = 256;

  // Side-feature shape; filled from the feature set for +vis kinds.
  std::size_t feature_rows = 0;
  std::size_t feature_cols = 0;
};

// Throws std::invalid_argument naming the offending field.
void validate(const TrainConfig& c);

nlohmann::ordered_json to_json(const TrainConfig& c);
// Unknown keys are rejected; missing keys keep their defaults.
TrainConfig config_from_json(const nlohmann::json& j);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double eval_loss = 0.0;
  double eval_accuracy = 0.0;
};

struct Checkpoint {
  TrainConfig config;
  text::Vocab vocab;
  model::ParamStore params;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::unique_ptr<model::Seq2SeqModel> build_model(const TrainConfig& c, std::size_t vocab_size);
std::unique_ptr<model::Seq2SeqModel> load_model(const Checkpoint& cp);

seq2seq::GruConfig gru_config(const TrainConfig& c, std::size_t vocab_size);
transformer::TransformerConfig transformer_config(const TrainConfig& c, std::size_t vocab_size);

// Encodes triples for a model kind. Examples keep pointers into `features`,
// which must outlive them. A missing feature is rejected naming the example.
std::vector<model::Example> make_examples(const std::vector<text::TripleExample>& triples,
                                          const text::Vocab& vocab, const features::FeatureSet* features,
                                          model::ModelKind kind);

struct BatchStats {
  double loss = 0.0;  // token-weighted mean
  double accuracy = 0.0;
  std::size_t tokens = 0;
};

// Loss and accuracy without updating parameters.
BatchStats evaluate_loss(const model::Seq2SeqModel& m, std::span<const model::Example> examples,
                         std::size_t batch_size);

class Adam {
 public:
  Adam(const model::ParamStore& params, double lr, double beta1, double beta2, double epsilon);
  // grads[i] matches params.at(i); empty vectors count as zero gradients.
  void step(model::ParamStore& params, const std::vector<std::vector<float>>& grads);
  std::size_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, epsilon_;
  std::size_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// Scales every gradient so the global L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_global_norm(std::vector<std::vector<float>>& grads, double max_norm);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Builds the vocabulary from the training bland+attractive texts, trains and
// returns the checkpoint with the best eval-loss parameters (train loss
// when the eval set is empty).
Checkpoint train(const TrainConfig& config, const std::vector<text::TripleExample>& train_set,
                 const features::FeatureSet* features, const std::vector<text::TripleExample>& eval_set,
                 const EpochCallback& on_epoch = {});

// Trains an existing model in place on prepared examples; returns history
// and leaves the best parameters in the model.
struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
};
TrainResult train_model(const TrainConfig& config, model::Seq2SeqModel& m,
                        std::span<const model::Example> train_examples,
                        std::span<const model::Example> eval_examples, const EpochCallback& on_epoch = {});

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& cp, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace vqr::training
