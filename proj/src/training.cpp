#include "vqr/training.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace vqr::training {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void require(bool ok, const char* field, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("train config: ") + field + " " + what);
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument(std::string("train config: bad value for '") + key + "'");
  }
}

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap32(v);
  return v;
}

std::uint64_t payload_checksum(const std::string& bytes) { return fnv1a(bytes); }

}  // namespace

void validate(const TrainConfig& c) {
  require(c.epochs > 0, "epochs", "must be positive");
  require(c.batch_size > 0, "batch_size", "must be positive");
  require(c.learning_rate > 0.0 && std::isfinite(c.learning_rate), "learning_rate", "must be positive");
  require(c.beta1 >= 0.0 && c.beta1 < 1.0, "beta1", "must lie in [0, 1)");
  require(c.beta2 >= 0.0 && c.beta2 < 1.0, "beta2", "must lie in [0, 1)");
  require(c.adam_epsilon > 0.0, "adam_epsilon", "must be positive");
  require(c.clip_norm >= 0.0, "clip_norm", "must be non-negative");
  require(c.patience > 0, "patience", "must be positive");
  require(c.stop_at_accuracy >= 0.0 && c.stop_at_accuracy <= 1.0, "stop_at_accuracy", "must lie in [0, 1]");
  require(c.vocab_cap > text::kNumSpecials, "vocab_cap", "must exceed the special tokens");
  require(c.embed_dim > 0 && c.hidden_dim > 0 && c.attn_dim > 0 && c.gru_layers > 0, "embed/hidden/attn/layers",
          "must be positive");
  require(c.d_model > 0 && c.heads > 0 && c.tf_layers > 0 && c.ffn_dim > 0, "d_model/heads/tf_layers/ffn_dim",
          "must be positive");
  require(c.d_model % c.heads == 0, "d_model", "must be divisible by heads");
}

ordered_json to_json(const TrainConfig& c) {
  ordered_json j;
  j["model"] = model::kind_name(c.kind);
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["seed"] = c.seed;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_epsilon"] = c.adam_epsilon;
  j["clip_norm"] = c.clip_norm;
  j["patience"] = c.patience;
  j["stop_at_accuracy"] = c.stop_at_accuracy;
  j["vocab_cap"] = c.vocab_cap;
  j["embed_dim"] = c.embed_dim;
  j["hidden_dim"] = c.hidden_dim;
  j["attn_dim"] = c.attn_dim;
  j["gru_layers"] = c.gru_layers;
  j["d_model"] = c.d_model;
  j["heads"] = c.heads;
  j["tf_layers"] = c.tf_layers;
  j["ffn_dim"] = c.ffn_dim;
  j["feature_rows"] = c.feature_rows;
  j["feature_cols"] = c.feature_cols;
  return j;
}

TrainConfig config_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("train config: expected a JSON object");
  const ordered_json known = to_json(TrainConfig{});
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("train config: unknown key '" + key + "'");
  }
  TrainConfig c;
  if (j.contains("model")) {
    std::string name;
    read_field(j, "model", name);
    c.kind = model::parse_model_kind(name);
  }
  read_field(j, "epochs", c.epochs);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "learning_rate", c.learning_rate);
  read_field(j, "seed", c.seed);
  read_field(j, "beta1", c.beta1);
  read_field(j, "beta2", c.beta2);
  read_field(j, "adam_epsilon", c.adam_epsilon);
  read_field(j, "clip_norm", c.clip_norm);
  read_field(j, "patience", c.patience);
  read_field(j, "stop_at_accuracy", c.stop_at_accuracy);
  read_field(j, "vocab_cap", c.vocab_cap);
  read_field(j, "embed_dim", c.embed_dim);
  read_field(j, "hidden_dim", c.hidden_dim);
  read_field(j, "attn_dim", c.attn_dim);
  read_field(j, "gru_layers", c.gru_layers);
  read_field(j, "d_model", c.d_model);
  read_field(j, "heads", c.heads);
  read_field(j, "tf_layers", c.tf_layers);
  read_field(j, "ffn_dim", c.ffn_dim);
  read_field(j, "feature_rows", c.feature_rows);
  read_field(j, "feature_cols", c.feature_cols);
  return c;
}

seq2seq::GruConfig gru_config(const TrainConfig& c, std::size_t vocab_size) {
  seq2seq::GruConfig g;
  g.vocab_size = vocab_size;
  g.embed_dim = c.embed_dim;
  g.hidden_dim = c.hidden_dim;
  g.attn_dim = c.attn_dim;
  g.layers = c.gru_layers;
  g.visual = c.kind == model::ModelKind::BaselineVis;
  if (g.visual) {
    g.grid_rows = c.feature_rows;
    g.grid_cols = c.feature_cols;
  }
  return g;
}

transformer::TransformerConfig transformer_config(const TrainConfig& c, std::size_t vocab_size) {
  transformer::TransformerConfig t;
  t.vocab_size = vocab_size;
  t.d_model = c.d_model;
  t.heads = c.heads;
  t.layers = c.tf_layers;
  t.ffn_dim = c.ffn_dim;
  t.conditioned = c.kind == model::ModelKind::TransformerVis;
  if (t.conditioned) t.feature_dim = c.feature_rows * c.feature_cols;
  return t;
}

std::unique_ptr<model::Seq2SeqModel> build_model(const TrainConfig& c, std::size_t vocab_size) {
  validate(c);
  if (model::is_transformer(c.kind)) {
    return std::make_unique<transformer::PrefixTransformer>(transformer_config(c, vocab_size), c.seed);
  }
  return std::make_unique<seq2seq::GruSeq2Seq>(gru_config(c, vocab_size), c.seed);
}

std::unique_ptr<model::Seq2SeqModel> load_model(const Checkpoint& cp) {
  validate(cp.config);
  const std::size_t v = cp.vocab.size();
  if (model::is_transformer(cp.config.kind)) {
    return std::make_unique<transformer::PrefixTransformer>(transformer_config(cp.config, v), cp.params);
  }
  return std::make_unique<seq2seq::GruSeq2Seq>(gru_config(cp.config, v), cp.params);
}

std::vector<model::Example> make_examples(const std::vector<text::TripleExample>& triples,
                                          const text::Vocab& vocab, const features::FeatureSet* features,
                                          model::ModelKind kind) {
  const bool needs = model::uses_features(kind);
  if (needs && !features) {
    throw features::FeatureError(std::string("model kind ") + model::kind_name(kind) + " requires features");
  }
  std::vector<model::Example> out;
  out.reserve(triples.size());
  for (const auto& t : triples) {
    model::Example ex;
    ex.input = text::encode(t.bland, text::Role::Input, vocab);
    ex.output = text::encode(t.attractive, text::Role::Output, vocab);
    if (needs) {
      ex.feature = features->find(t.feature_ref);
      if (!ex.feature) {
        throw features::FeatureError("example '" + t.id + "': no features for '" + t.feature_ref + "'");
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

BatchStats evaluate_loss(const model::Seq2SeqModel& m, std::span<const model::Example> examples,
                         std::size_t batch_size) {
  BatchStats s;
  double weighted = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const auto batch = examples.subspan(start, std::min(batch_size, examples.size() - start));
    ad::Graph g;
    const model::BoundParams p(g, m.params(), false);
    const auto r = m.loss(g, p, batch);
    weighted += static_cast<double>(g.value(r.loss)[0]) * static_cast<double>(r.total);
    correct += r.correct;
    s.tokens += r.total;
  }
  if (s.tokens > 0) {
    s.loss = weighted / static_cast<double>(s.tokens);
    s.accuracy = static_cast<double>(correct) / static_cast<double>(s.tokens);
  }
  return s;
}

Adam::Adam(const model::ParamStore& params, double lr, double beta1, double beta2, double epsilon)
    : lr_(lr), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_.emplace_back(params.at(i).size(), 0.0f);
    v_.emplace_back(params.at(i).size(), 0.0f);
  }
}

void Adam::step(model::ParamStore& params, const std::vector<std::vector<float>>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].empty()) continue;
    auto& w = params.at(i).values;
    auto& m = m_[i];
    auto& v = v_[i];
    const auto& gr = grads[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (1.0f - b1) * gr[k];
      v[k] = b2 * v[k] + (1.0f - b2) * gr[k] * gr[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      w[k] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + epsilon_));
    }
  }
}

double clip_global_norm(std::vector<std::vector<float>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (float x : g) sq += static_cast<double>(x) * x;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float scale = static_cast<float>(max_norm / norm);
    for (auto& g : grads) {
      for (auto& x : g) x *= scale;
    }
  }
  return norm;
}

TrainResult train_model(const TrainConfig& config, model::Seq2SeqModel& m,
                        std::span<const model::Example> train_examples,
                        std::span<const model::Example> eval_examples, const EpochCallback& on_epoch) {
  validate(config);
  if (train_examples.empty()) throw std::invalid_argument("train: empty training set");

  auto& params = m.params();
  Adam adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_epsilon);
  TrainResult result;
  model::ParamStore best = params;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  std::vector<std::size_t> order(train_examples.size());
  std::vector<model::Example> batch;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(config.seed, epoch));
    rng.shuffle(order);

    double weighted = 0.0;
    std::size_t correct = 0, tokens = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(train_examples[order[i]]);

      ad::Graph g;
      const model::BoundParams p(g, params, true);
      std::vector<std::vector<float>> grads(params.size());
      float loss_value = 0.0f;
      model::LossResult r;
      try {
        r = m.loss(g, p, batch);
        loss_value = g.value(r.loss)[0];
        if (!std::isfinite(loss_value)) throw ad::NonFiniteError("loss is not finite");
        const auto gr = g.backward(r.loss);
        for (std::size_t i = 0; i < params.size(); ++i) {
          if (gr.has(p.ids()[i])) grads[i] = gr.at(p.ids()[i]);
        }
      } catch (const ad::NonFiniteError& e) {
        std::ostringstream msg;
        msg << "training diverged (" << model::kind_name(config.kind) << ") at epoch " << epoch << ", step "
            << adam.steps() + 1 << ": " << e.what();
        throw DivergenceError(msg.str());
      }
      const double norm = clip_global_norm(grads, config.clip_norm);
      if (!std::isfinite(norm)) {
        std::ostringstream msg;
        msg << "training diverged (" << model::kind_name(config.kind) << ") at epoch " << epoch << ", step "
            << adam.steps() + 1 << ": gradient norm is not finite";
        throw DivergenceError(msg.str());
      }
      adam.step(params, grads);
      weighted += static_cast<double>(loss_value) * static_cast<double>(r.total);
      correct += r.correct;
      tokens += r.total;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = weighted / static_cast<double>(tokens);
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(tokens);
    if (!eval_examples.empty()) {
      const auto ev = evaluate_loss(m, eval_examples, config.batch_size);
      rec.eval_loss = ev.loss;
      rec.eval_accuracy = ev.accuracy;
    } else {
      rec.eval_loss = rec.train_loss;
      rec.eval_accuracy = rec.train_accuracy;
    }
    if (!std::isfinite(rec.eval_loss)) {
      throw DivergenceError("training diverged (" + std::string(model::kind_name(config.kind)) + ") at epoch " +
                            std::to_string(epoch) + ": eval loss is not finite");
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (rec.eval_loss < best_loss) {
      best_loss = rec.eval_loss;
      best = params;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
    if (config.stop_at_accuracy > 0.0 && rec.train_accuracy >= config.stop_at_accuracy) break;
  }
  params = std::move(best);
  return result;
}

Checkpoint train(const TrainConfig& config, const std::vector<text::TripleExample>& train_set,
                 const features::FeatureSet* features, const std::vector<text::TripleExample>& eval_set,
                 const EpochCallback& on_epoch) {
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  Checkpoint cp;
  cp.config = config;
  if (model::uses_features(config.kind)) {
    if (!features) {
      throw features::FeatureError(std::string("model kind ") + model::kind_name(config.kind) +
                                   " requires features");
    }
    if (config.kind == model::ModelKind::TransformerVis && features->rows != 1) {
      throw features::FeatureError("transformer+vis requires pooled features, got " +
                                   std::to_string(features->rows) + "x" + std::to_string(features->cols));
    }
    cp.config.feature_rows = features->rows;
    cp.config.feature_cols = features->cols;
  } else {
    cp.config.feature_rows = 0;
    cp.config.feature_cols = 0;
  }
  validate(cp.config);

  std::vector<std::string> corpus;
  corpus.reserve(train_set.size() * 2);
  for (const auto& t : train_set) {
    corpus.push_back(t.bland);
    corpus.push_back(t.attractive);
  }
  cp.vocab = text::build_vocab(corpus, config.vocab_cap);

  const auto train_ex = make_examples(train_set, cp.vocab, features, cp.config.kind);
  const auto eval_ex = make_examples(eval_set, cp.vocab, features, cp.config.kind);
  auto m = build_model(cp.config, cp.vocab.size());
  const auto r = train_model(cp.config, *m, train_ex, eval_ex, on_epoch);
  cp.params = m->params();
  cp.history = r.history;
  cp.best_epoch = r.best_epoch;
  return cp;
}

void save_checkpoint(const Checkpoint& cp, const std::string& path) {
  std::string payload;
  payload.reserve(cp.params.total_values() * 4);
  ordered_json tensors = ordered_json::array();
  for (std::size_t i = 0; i < cp.params.size(); ++i) {
    const auto& t = cp.params.at(i);
    tensors.push_back({{"name", cp.params.names()[i]},
                       {"shape", t.shape},
                       {"offset", payload.size()},
                       {"count", t.size()}});
    for (float x : t.values) {
      const std::uint32_t le = to_le(std::bit_cast<std::uint32_t>(x));
      char bytes[4];
      std::memcpy(bytes, &le, 4);
      payload.append(bytes, 4);
    }
  }
  ordered_json history = ordered_json::array();
  for (const auto& h : cp.history) {
    history.push_back({{"epoch", h.epoch},
                       {"train_loss", h.train_loss},
                       {"train_accuracy", h.train_accuracy},
                       {"eval_loss", h.eval_loss},
                       {"eval_accuracy", h.eval_accuracy}});
  }
  ordered_json manifest;
  manifest["format"] = "vqr-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["config"] = to_json(cp.config);
  manifest["vocab"] = cp.vocab.words();
  manifest["history"] = std::move(history);
  manifest["best_epoch"] = cp.best_epoch;
  manifest["tensors"] = std::move(tensors);
  manifest["payload_bytes"] = payload.size();
  manifest["payload_checksum"] = payload_checksum(payload);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot write '" + path + "'");
  out << manifest.dump() << '\n';
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw CheckpointError("checkpoint: write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot read '" + path + "'");
  std::string header;
  if (!std::getline(in, header)) throw CheckpointError("checkpoint '" + path + "' is corrupt: missing manifest");
  json manifest;
  try {
    manifest = json::parse(header);
  } catch (const json::exception&) {
    throw CheckpointError("checkpoint '" + path + "' is corrupt: unreadable manifest");
  }
  if (!manifest.is_object() || manifest.value("format", "") != "vqr-checkpoint") {
    throw CheckpointError("checkpoint '" + path + "' is corrupt: not a checkpoint manifest");
  }
  const int version = manifest.value("version", -1);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint '" + path + "': unsupported version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Checkpoint cp;
  try {
    const auto expected = manifest.at("payload_bytes").get<std::size_t>();
    if (payload.size() != expected) {
      throw CheckpointError("checkpoint '" + path + "' is corrupt: payload has " + std::to_string(payload.size()) +
                            " bytes, manifest says " + std::to_string(expected));
    }
    if (payload_checksum(payload) != manifest.at("payload_checksum").get<std::uint64_t>()) {
      throw CheckpointError("checkpoint '" + path + "' is corrupt: checksum mismatch");
    }
    cp.config = config_from_json(manifest.at("config"));
    cp.vocab = text::Vocab(manifest.at("vocab").get<std::vector<std::string>>());
    for (const auto& h : manifest.at("history")) {
      EpochRecord r;
      r.epoch = h.at("epoch").get<std::size_t>();
      r.train_loss = h.at("train_loss").get<double>();
      r.train_accuracy = h.at("train_accuracy").get<double>();
      r.eval_loss = h.at("eval_loss").get<double>();
      r.eval_accuracy = h.at("eval_accuracy").get<double>();
      cp.history.push_back(r);
    }
    cp.best_epoch = manifest.at("best_epoch").get<std::size_t>();
    for (const auto& t : manifest.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<ad::Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto count = t.at("count").get<std::size_t>();
      if (ad::numel(shape) != count || offset + count * 4 > payload.size() || offset % 4 != 0) {
        throw CheckpointError("checkpoint '" + path + "' is corrupt: tensor '" + name + "' out of range");
      }
      std::vector<float> values(count);
      for (std::size_t k = 0; k < count; ++k) {
        std::uint32_t le;
        std::memcpy(&le, payload.data() + offset + 4 * k, 4);
        values[k] = std::bit_cast<float>(to_le(le));
      }
      cp.params.add(name, ad::Tensor(shape, std::move(values)));
    }
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError("checkpoint '" + path + "' is corrupt: " + e.what());
  }
  return cp;
}

}  // namespace vqr::training
