#include "vqr/model.hpp"

#include <cmath>
#include <stdexcept>

namespace vqr {

namespace decoding {

Mode parse_mode(const std::string& name) {
  if (name == "greedy") return Mode::Greedy;
  if (name == "beam") return Mode::Beam;
  throw std::invalid_argument("unknown decoding mode '" + name + "' (expected greedy|beam)");
}

}  // namespace decoding

namespace model {

const char* kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::Baseline: return "baseline";
    case ModelKind::BaselineVis: return "baseline+vis";
    case ModelKind::Transformer: return "transformer";
    case ModelKind::TransformerVis: return "transformer+vis";
  }
  return "unknown";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "baseline") return ModelKind::Baseline;
  if (name == "baseline+vis") return ModelKind::BaselineVis;
  if (name == "transformer") return ModelKind::Transformer;
  if (name == "transformer+vis") return ModelKind::TransformerVis;
  throw std::invalid_argument("unknown model kind '" + name + "'");
}

bool uses_features(ModelKind kind) {
  return kind == ModelKind::BaselineVis || kind == ModelKind::TransformerVis;
}

bool is_transformer(ModelKind kind) {
  return kind == ModelKind::Transformer || kind == ModelKind::TransformerVis;
}

void ParamStore::add(const std::string& name, ad::Tensor t) {
  if (contains(name)) throw std::invalid_argument("param store: duplicate parameter '" + name + "'");
  index_.emplace(name, names_.size());
  names_.push_back(name);
  tensors_.push_back(std::move(t));
}

std::size_t ParamStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("param store: no parameter '" + name + "'");
  return it->second;
}

const ad::Tensor& ParamStore::get(const std::string& name) const { return tensors_[index_of(name)]; }
ad::Tensor& ParamStore::get(const std::string& name) { return tensors_[index_of(name)]; }

std::size_t ParamStore::total_values() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

BoundParams::BoundParams(ad::Graph& g, const ParamStore& store, bool requires_grad) : store_(&store) {
  ids_.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) ids_.push_back(g.leaf(store.at(i), requires_grad));
}

BoundParams::BoundParams(const ParamStore& store, std::vector<ad::NodeId> ids)
    : store_(&store), ids_(std::move(ids)) {
  if (ids_.size() != store.size()) {
    throw std::invalid_argument("bound params: " + std::to_string(ids_.size()) + " nodes for " +
                                std::to_string(store.size()) + " parameters");
  }
}

ad::Tensor uniform_init(ad::Shape shape, float limit, Rng& rng) {
  const auto n = ad::numel(shape);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-limit, limit));
  return ad::Tensor(std::move(shape), std::move(v));
}

ad::Tensor xavier_init(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const float limit = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  return uniform_init({fan_in, fan_out}, limit, rng);
}

ad::NodeId masked_cross_entropy(ad::Graph& g, ad::NodeId logits, std::span<const std::int32_t> targets,
                                std::span<const std::uint8_t> pad_mask) {
  const auto shape = g.shape(logits);
  if (shape.size() != 2 || shape[0] != targets.size() || targets.size() != pad_mask.size()) {
    throw ad::ShapeError("masked_cross_entropy: logits " + ad::shape_str(shape) + " with " +
                         std::to_string(targets.size()) + " targets and " +
                         std::to_string(pad_mask.size()) + " mask entries");
  }
  std::size_t scored = 0;
  for (auto m : pad_mask) scored += m ? 1 : 0;
  if (scored == 0) throw std::invalid_argument("masked_cross_entropy: every position is padding");

  const auto log_probs = g.log_softmax(logits);
  const auto picked = g.pick(log_probs, std::vector<std::int32_t>(targets.begin(), targets.end()));
  std::vector<float> weights(targets.size());
  const float w = -1.0f / static_cast<float>(scored);
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = pad_mask[i] ? w : 0.0f;
  const auto weight_node = g.leaf(ad::Tensor({targets.size()}, std::move(weights)));
  return g.sum(g.mul(picked, weight_node));
}

std::size_t count_correct(const ad::Graph& g, ad::NodeId logits, std::span<const std::int32_t> targets,
                          std::span<const std::uint8_t> pad_mask) {
  const auto& shape = g.shape(logits);
  const auto& v = g.value(logits);
  const std::size_t cols = shape[1];
  std::size_t correct = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (!pad_mask[r]) continue;
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (v[r * cols + c] > v[r * cols + best]) best = c;
    }
    if (static_cast<std::int32_t>(best) == targets[r]) ++correct;
  }
  return correct;
}

text::TokenSequence to_output_sequence(const std::vector<std::int32_t>& generated) {
  text::TokenSequence seq;
  seq.role = text::Role::Output;
  seq.ids.push_back(text::kBos);
  for (auto t : generated) {
    if (seq.ids.size() >= text::kOutputLength) break;
    seq.ids.push_back(t);
  }
  seq.true_length = seq.ids.size();
  seq.ids.resize(text::kOutputLength, text::kPad);
  return seq;
}

}  // namespace model
}  // namespace vqr
