#pragma once

// Pieces shared by both model families: named parameter storage, the
// training-example record, the common model interface, and the masked
// cross-entropy objective.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "vqr/autodiff.hpp"
#include "vqr/decoding.hpp"
#include "vqr/rng.hpp"
#include "vqr/text.hpp"

namespace vqr::model {

enum class ModelKind { Baseline, BaselineVis, Transformer, TransformerVis };

const char* kind_name(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);
bool uses_features(ModelKind kind);
bool is_transformer(ModelKind kind);

class ParamStore {
 public:
  void add(const std::string& name, ad::Tensor t);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const ad::Tensor& get(const std::string& name) const;
  ad::Tensor& get(const std::string& name);
  std::size_t index_of(const std::string& name) const;

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const ad::Tensor& at(std::size_t i) const { return tensors_[i]; }
  ad::Tensor& at(std::size_t i) { return tensors_[i]; }
  std::size_t total_values() const;

 private:
  std::vector<std::string> names_;
  std::vector<ad::Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Parameters placed into one graph as leaves, in store order.
class BoundParams {
 public:
  BoundParams(ad::Graph& g, const ParamStore& store, bool requires_grad);
  // Uses existing nodes, one per store entry in store order.
  BoundParams(const ParamStore& store, std::vector<ad::NodeId> ids);
  ad::NodeId operator()(const std::string& name) const { return ids_[store_->index_of(name)]; }
  const std::vector<ad::NodeId>& ids() const { return ids_; }

 private:
  const ParamStore* store_;
  std::vector<ad::NodeId> ids_;
};

// Initializers.
ad::Tensor uniform_init(ad::Shape shape, float limit, Rng& rng);
ad::Tensor xavier_init(std::size_t fan_in, std::size_t fan_out, Rng& rng);

struct Example {
  text::TokenSequence input;
  text::TokenSequence output;
  const std::vector<float>* feature = nullptr;  // pooled vector or flat grid
};

struct LossResult {
  ad::NodeId loss = 0;
  std::size_t correct = 0;  // argmax == target over scored positions
  std::size_t total = 0;    // scored (non-PAD) positions
};

class Seq2SeqModel {
 public:
  virtual ~Seq2SeqModel() = default;

  virtual ModelKind kind() const = 0;
  virtual const ParamStore& params() const = 0;
  virtual ParamStore& params() = 0;

  // Teacher-forced loss over a batch.
  virtual LossResult loss(ad::Graph& g, const BoundParams& p, std::span<const Example> batch) const = 0;

  // Output-role sequence: BOS, generated tokens (EOS included when emitted), PAD.
  virtual text::TokenSequence generate(const text::TokenSequence& input,
                                       const std::vector<float>* feature,
                                       const decoding::DecodeOptions& options) const = 0;
};

// Mean over non-PAD positions of -log softmax(logits)[target].
// logits: [N, V]; targets and pad_mask have N entries (mask 1 = scored).
ad::NodeId masked_cross_entropy(ad::Graph& g, ad::NodeId logits, std::span<const std::int32_t> targets,
                                std::span<const std::uint8_t> pad_mask);

// Counts argmax hits over the scored rows of a logits node.
std::size_t count_correct(const ad::Graph& g, ad::NodeId logits, std::span<const std::int32_t> targets,
                          std::span<const std::uint8_t> pad_mask);

text::TokenSequence to_output_sequence(const std::vector<std::int32_t>& generated);

}  // namespace vqr::model
