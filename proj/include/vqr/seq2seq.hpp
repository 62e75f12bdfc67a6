#pragma once

// GRU encoder/decoder with additive attention over encoder states, and the
// +vis variant that additionally attends over a flattened grid feature map.

#include <memory>
#include <optional>

#include "vqr/model.hpp"

namespace vqr::seq2seq {

struct GruConfig {
  std::size_t vocab_size = text::kDefaultVocabCap;
  std::size_t embed_dim = 256;
  std::size_t hidden_dim = 768;
  std::size_t attn_dim = 768;
  std::size_t layers = 2;
  bool visual = false;
  std::size_t grid_rows = features::kGridRows;
  std::size_t grid_cols = features::kGridCols;
};

// Node handles for one GRU cell. Weights act on row vectors: x * W.
struct GruCellParams {
  ad::NodeId w_z, u_z, b_z;
  ad::NodeId w_r, u_r, b_r;
  ad::NodeId w_h, u_h, b_h;
};

// z = sigmoid(x W_z + h U_z + b_z), r = sigmoid(x W_r + h U_r + b_r),
// h~ = tanh(x W_h + (r * h) U_h + b_h), h' = (1 - z) * h + z * h~.
// x: [B, I], h: [B, H].
ad::NodeId gru_cell(ad::Graph& g, ad::NodeId x, ad::NodeId h, const GruCellParams& p);

struct AttentionParams {
  ad::NodeId w_a;  // [(H + Hs), k]
  ad::NodeId v_a;  // [k]
};

struct AttentionOutput {
  ad::NodeId alpha;    // [B, S]
  ad::NodeId context;  // [B, Hs]
};

// Encoder side of the attention, reusable across decoder steps: the states
// and their projection through the lower block of W_a.
struct AttentionMemory {
  ad::NodeId states;     // [B, S, Hs]
  ad::NodeId keys;       // [B*S, k]
  std::size_t batch = 0;
  std::size_t length = 0;
  std::shared_ptr<const std::vector<std::uint8_t>> mask;  // [B, S], 1 = real token
};

AttentionMemory prepare_attention(ad::Graph& g, ad::NodeId states,
                                  std::shared_ptr<const std::vector<std::uint8_t>> mask,
                                  const AttentionParams& p);

// score(h_t, h_s) = v^T tanh(W_a [h_t; h_s]), softmax over unmasked s,
// context = sum_s alpha_s h_s.
AttentionOutput luong_attention(ad::Graph& g, ad::NodeId h_t, const AttentionMemory& memory,
                                const AttentionParams& p);
AttentionOutput luong_attention(ad::Graph& g, ad::NodeId h_t, ad::NodeId states,
                                std::shared_ptr<const std::vector<std::uint8_t>> mask,
                                const AttentionParams& p);

class GruSeq2Seq : public model::Seq2SeqModel {
 public:
  GruSeq2Seq(GruConfig config, std::uint64_t seed);
  GruSeq2Seq(GruConfig config, model::ParamStore params);

  model::ModelKind kind() const override {
    return config_.visual ? model::ModelKind::BaselineVis : model::ModelKind::Baseline;
  }
  const model::ParamStore& params() const override { return params_; }
  model::ParamStore& params() override { return params_; }
  const GruConfig& config() const { return config_; }

  model::LossResult loss(ad::Graph& g, const model::BoundParams& p,
                         std::span<const model::Example> batch) const override;

  text::TokenSequence generate(const text::TokenSequence& input, const std::vector<float>* feature,
                               const decoding::DecodeOptions& options) const override;

  // Decoder state after one step: per-layer hidden states plus the logits.
  struct StepOutput {
    std::vector<ad::NodeId> hidden;
    ad::NodeId logits;
  };

  struct Encoded {
    std::vector<ad::NodeId> final_hidden;  // per layer, [B, H]
    AttentionMemory text_memory;
    std::optional<AttentionMemory> grid_memory;
  };

  Encoded encode(ad::Graph& g, const model::BoundParams& p, std::span<const model::Example> batch) const;

  // One decoder step: attend from the top previous state, feed
  // [embedding(prev); context(s)] through the stacked GRU, project to vocab.
  StepOutput decoder_step(ad::Graph& g, const model::BoundParams& p, const Encoded& enc,
                          const std::vector<ad::NodeId>& hidden,
                          const std::vector<std::int32_t>& prev_tokens) const;

  static std::vector<std::string> parameter_names(const GruConfig& config);

 private:
  GruCellParams cell(const model::BoundParams& p, const std::string& prefix) const;
  void validate() const;

  GruConfig config_;
  model::ParamStore params_;
};

}  // namespace vqr::seq2seq
