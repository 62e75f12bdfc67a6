#pragma once

// Single-stack prefix-LM transformer: the rewrite is generated as a
// completion of the input segment. Input positions attend bidirectionally
// among themselves; output positions attend to the input and to earlier
// outputs. Every normalization site is a conditional layer norm whose scale
// and shift are affine in a projected side-feature vector.

#include <optional>

#include "vqr/model.hpp"

namespace vqr::transformer {

struct TransformerConfig {
  std::size_t vocab_size = text::kDefaultVocabCap;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ffn_dim = 256;
  std::size_t max_input = text::kInputLength;
  std::size_t max_output = text::kOutputLength;
  bool conditioned = false;
  std::size_t feature_dim = features::kDefaultPooledDim;
  float epsilon = 1e-5f;
};

struct SeqMask {
  std::size_t n_in = 0;
  std::size_t n_out = 0;
  std::vector<std::uint8_t> allowed;  // row-major (n_in + n_out)^2, 1 = may attend

  std::size_t size() const { return n_in + n_out; }
  bool at(std::size_t row, std::size_t col) const { return allowed[row * size() + col] != 0; }
};

SeqMask build_seq2seq_mask(std::size_t n_in, std::size_t n_out);

struct CondLayerNormParams {
  ad::NodeId gamma0;                  // [d]
  ad::NodeId beta0;                   // [d]
  std::optional<ad::NodeId> w_gamma;  // [Hc, d]
  std::optional<ad::NodeId> w_beta;   // [Hc, d]
  float epsilon = 1e-5f;
};

// x: [rows, d]. cond: [B, Hc] with row_batch[r] naming the conditioning row
// for x's row r (absent -> plain layer norm with gamma0/beta0).
// out = gamma(c) * (x - mean) / (std + eps) + beta(c),
// gamma(c) = gamma0 + c W_gamma, beta(c) = beta0 + c W_beta.
ad::NodeId cond_layer_norm(ad::Graph& g, ad::NodeId x, std::optional<ad::NodeId> cond,
                           std::span<const std::int32_t> row_batch, const CondLayerNormParams& p);

// A concatenated input+output token row laid out for the model.
struct PrefixSequence {
  std::vector<std::int32_t> input;   // BOS ... EOS (no PAD)
  std::vector<std::int32_t> output;  // SEP y1 y2 ...
};

// Input segment from an input-role sequence; output segment from an
// output-role sequence with its leading BOS replaced by SEP.
PrefixSequence make_prefix_sequence(const text::TokenSequence& input,
                                    const text::TokenSequence* output);

class PrefixTransformer : public model::Seq2SeqModel {
 public:
  PrefixTransformer(TransformerConfig config, std::uint64_t seed);
  PrefixTransformer(TransformerConfig config, model::ParamStore params);

  model::ModelKind kind() const override {
    return config_.conditioned ? model::ModelKind::TransformerVis : model::ModelKind::Transformer;
  }
  const model::ParamStore& params() const override { return params_; }
  model::ParamStore& params() override { return params_; }
  const TransformerConfig& config() const { return config_; }

  // Per-position vocabulary logits, [n_in + n_out, V], for one sequence.
  // `tokens` is the input segment followed by the output segment.
  ad::NodeId forward(ad::Graph& g, const model::BoundParams& p, std::span<const std::int32_t> tokens,
                     const SeqMask& mask, std::optional<ad::NodeId> cond) const;

  // Projected conditioning vectors for a batch of pooled features, [B, d].
  ad::NodeId condition(ad::Graph& g, const model::BoundParams& p,
                       const std::vector<const std::vector<float>*>& feats) const;

  model::LossResult loss(ad::Graph& g, const model::BoundParams& p,
                         std::span<const model::Example> batch) const override;

  text::TokenSequence generate(const text::TokenSequence& input, const std::vector<float>* feature,
                               const decoding::DecodeOptions& options) const override;

  // Generation against an explicit conditioning node (or none). The graph
  // must hold `p`; nodes created by the call are dropped before it returns.
  text::TokenSequence generate_with(ad::Graph& g, const model::BoundParams& p,
                                    const text::TokenSequence& input, std::optional<ad::NodeId> cond,
                                    const decoding::DecodeOptions& options) const;

  static std::vector<std::string> parameter_names(const TransformerConfig& config);

 private:
  struct Layout {
    std::size_t batch = 0;
    std::size_t n_in = 0;   // padded input width
    std::size_t n_out = 0;  // padded output width
    std::vector<std::int32_t> tokens;
    std::vector<std::int32_t> positions;
    std::vector<std::int32_t> row_batch;
    std::shared_ptr<std::vector<std::uint8_t>> mask;  // [B, T, T]
  };

  Layout layout(std::span<const PrefixSequence> seqs) const;
  ad::NodeId hidden_states(ad::Graph& g, const model::BoundParams& p, const Layout& lay,
                           std::optional<ad::NodeId> cond) const;
  ad::NodeId head(ad::Graph& g, const model::BoundParams& p, ad::NodeId rows, std::optional<ad::NodeId> cond,
                  std::span<const std::int32_t> row_batch) const;
  CondLayerNormParams norm_params(const model::BoundParams& p, const std::string& prefix) const;
  void validate() const;

  TransformerConfig config_;
  model::ParamStore params_;
};

}  // namespace vqr::transformer
