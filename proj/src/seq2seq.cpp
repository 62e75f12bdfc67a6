#include "vqr/seq2seq.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace vqr::seq2seq {

namespace {

const char* const kGateNames[] = {"w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"};

std::string layer_prefix(const char* side, std::size_t layer) {
  return std::string(side) + ".l" + std::to_string(layer) + ".";
}

// Gate computation given the input projections x W_* + b_* already formed.
ad::NodeId gru_step(ad::Graph& g, ad::NodeId xz, ad::NodeId xr, ad::NodeId xh, ad::NodeId h,
                    const GruCellParams& p) {
  const auto z = g.sigmoid(g.add(xz, g.matmul(h, p.u_z)));
  const auto r = g.sigmoid(g.add(xr, g.matmul(h, p.u_r)));
  const auto cand = g.tanh(g.add(xh, g.matmul(g.mul(r, h), p.u_h)));
  const auto keep = g.add_scalar(g.mul_scalar(z, -1.0f), 1.0f);
  return g.add(g.mul(keep, h), g.mul(z, cand));
}

std::vector<float> log_softmax_row(const std::vector<float>& logits) {
  const float mx = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (float v : logits) denom += std::exp(static_cast<double>(v - mx));
  const float log_denom = static_cast<float>(std::log(denom));
  std::vector<float> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - mx - log_denom;
  return out;
}

}  // namespace

ad::NodeId gru_cell(ad::Graph& g, ad::NodeId x, ad::NodeId h, const GruCellParams& p) {
  const auto xs = g.shape(x);
  const auto hs = g.shape(h);
  const auto ws = g.shape(p.w_z);
  if (xs.size() != 2 || hs.size() != 2 || xs[0] != hs[0] || ws.size() != 2 || ws[0] != xs[1] ||
      ws[1] != hs[1]) {
    throw ad::ShapeError("gru_cell: input " + ad::shape_str(xs) + ", state " + ad::shape_str(hs) +
                         ", W_z " + ad::shape_str(ws));
  }
  const auto xz = g.add(g.matmul(x, p.w_z), p.b_z);
  const auto xr = g.add(g.matmul(x, p.w_r), p.b_r);
  const auto xh = g.add(g.matmul(x, p.w_h), p.b_h);
  return gru_step(g, xz, xr, xh, h, p);
}

AttentionMemory prepare_attention(ad::Graph& g, ad::NodeId states,
                                  std::shared_ptr<const std::vector<std::uint8_t>> mask,
                                  const AttentionParams& p) {
  const auto ss = g.shape(states);
  const auto ws = g.shape(p.w_a);
  if (ss.size() != 3 || ws.size() != 2 || ws[0] <= ss[2]) {
    throw ad::ShapeError("attention: states " + ad::shape_str(ss) + " vs W_a " + ad::shape_str(ws));
  }
  const std::size_t batch = ss[0], length = ss[1], width = ss[2];
  if (!mask || mask->size() != batch * length) {
    throw ad::ShapeError("attention: mask does not match states " + ad::shape_str(ss));
  }
  for (std::size_t b = 0; b < batch; ++b) {
    bool any = false;
    for (std::size_t s = 0; s < length; ++s) any = any || (*mask)[b * length + s];
    if (!any) throw std::invalid_argument("attention: every source position is masked");
  }
  const std::size_t query_width = ws[0] - width;
  const auto w_states = g.slice(p.w_a, 0, query_width, width);
  AttentionMemory m;
  m.states = states;
  m.keys = g.matmul(g.reshape(states, {batch * length, width}), w_states);
  m.batch = batch;
  m.length = length;
  m.mask = std::move(mask);
  return m;
}

AttentionOutput luong_attention(ad::Graph& g, ad::NodeId h_t, const AttentionMemory& memory,
                                const AttentionParams& p) {
  const auto hs = g.shape(h_t);
  const auto ws = g.shape(p.w_a);
  const std::size_t width = g.shape(memory.states)[2];
  if (hs.size() != 2 || hs[0] != memory.batch || hs[1] + width != ws[0]) {
    throw ad::ShapeError("attention: query " + ad::shape_str(hs) + " vs W_a " + ad::shape_str(ws));
  }
  const std::size_t k = ws[1];
  if (g.shape(p.v_a) != ad::Shape{k}) {
    throw ad::ShapeError("attention: v_a " + ad::shape_str(g.shape(p.v_a)) + " vs W_a " + ad::shape_str(ws));
  }
  const std::size_t batch = memory.batch, length = memory.length;
  // W_a [h_t; h_s] = h_t W_query + h_s W_states.
  const auto w_query = g.slice(p.w_a, 0, 0, hs[1]);
  const auto q = g.matmul(h_t, w_query);
  std::vector<std::int32_t> repeat(batch * length);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < length; ++s) repeat[b * length + s] = static_cast<std::int32_t>(b);
  }
  const auto energy = g.tanh(g.add(g.gather(q, std::move(repeat)), memory.keys));
  const auto scores = g.reshape(g.matmul(energy, g.reshape(p.v_a, {k, 1})), {batch, length});
  const auto alpha = g.masked_softmax(scores, memory.mask);
  const auto context =
      g.reshape(g.matmul(g.reshape(alpha, {batch, 1, length}), memory.states), {batch, width});
  return {alpha, context};
}

AttentionOutput luong_attention(ad::Graph& g, ad::NodeId h_t, ad::NodeId states,
                                std::shared_ptr<const std::vector<std::uint8_t>> mask,
                                const AttentionParams& p) {
  return luong_attention(g, h_t, prepare_attention(g, states, std::move(mask), p), p);
}

// Model ----------------------------------------------------------------------

std::vector<std::string> GruSeq2Seq::parameter_names(const GruConfig& config) {
  std::vector<std::string> names = {"emb"};
  for (const char* side : {"enc", "dec"}) {
    for (std::size_t l = 0; l < config.layers; ++l) {
      for (const char* gate : kGateNames) names.push_back(layer_prefix(side, l) + gate);
    }
  }
  names.insert(names.end(), {"attn.w_a", "attn.v_a"});
  if (config.visual) names.insert(names.end(), {"vis.w_a", "vis.v_a"});
  names.insert(names.end(), {"out.w", "out.b"});
  return names;
}

void GruSeq2Seq::validate() const {
  const auto& c = config_;
  if (c.vocab_size <= text::kNumSpecials || c.embed_dim == 0 || c.hidden_dim == 0 || c.attn_dim == 0 ||
      c.layers == 0 || (c.visual && (c.grid_rows == 0 || c.grid_cols == 0))) {
    throw std::invalid_argument("gru: invalid configuration");
  }
  const auto names = parameter_names(c);
  if (params_.size() != names.size()) {
    throw std::invalid_argument("gru: expected " + std::to_string(names.size()) + " parameters, got " +
                                std::to_string(params_.size()));
  }
  for (const auto& n : names) {
    if (!params_.contains(n)) throw std::invalid_argument("gru: missing parameter '" + n + "'");
  }
}

GruSeq2Seq::GruSeq2Seq(GruConfig config, std::uint64_t seed) : config_(config) {
  const auto& c = config_;
  Rng rng(mix_seed(seed, 0x6772755f696e6974ULL));
  params_.add("emb", model::uniform_init({c.vocab_size, c.embed_dim}, 0.1f, rng));
  const std::size_t context_width = c.hidden_dim + (c.visual ? c.grid_cols : 0);
  for (const char* side : {"enc", "dec"}) {
    const bool dec = std::string(side) == "dec";
    for (std::size_t l = 0; l < c.layers; ++l) {
      std::size_t in = l == 0 ? c.embed_dim : c.hidden_dim;
      if (dec && l == 0) in += context_width;
      const auto prefix = layer_prefix(side, l);
      for (const char* gate : {"z", "r", "h"}) {
        params_.add(prefix + "w_" + gate, model::xavier_init(in, c.hidden_dim, rng));
        params_.add(prefix + "u_" + gate, model::xavier_init(c.hidden_dim, c.hidden_dim, rng));
        params_.add(prefix + "b_" + gate, ad::Tensor::zeros({c.hidden_dim}));
      }
    }
  }
  params_.add("attn.w_a", model::xavier_init(2 * c.hidden_dim, c.attn_dim, rng));
  params_.add("attn.v_a", model::uniform_init({c.attn_dim}, 1.0f / std::sqrt(float(c.attn_dim)), rng));
  if (c.visual) {
    params_.add("vis.w_a", model::xavier_init(c.hidden_dim + c.grid_cols, c.attn_dim, rng));
    params_.add("vis.v_a", model::uniform_init({c.attn_dim}, 1.0f / std::sqrt(float(c.attn_dim)), rng));
  }
  params_.add("out.w", model::xavier_init(c.hidden_dim, c.vocab_size, rng));
  params_.add("out.b", ad::Tensor::zeros({c.vocab_size}));
  validate();
}

GruSeq2Seq::GruSeq2Seq(GruConfig config, model::ParamStore params)
    : config_(config), params_(std::move(params)) {
  validate();
}

GruCellParams GruSeq2Seq::cell(const model::BoundParams& p, const std::string& prefix) const {
  return GruCellParams{p(prefix + "w_z"), p(prefix + "u_z"), p(prefix + "b_z"),
                       p(prefix + "w_r"), p(prefix + "u_r"), p(prefix + "b_r"),
                       p(prefix + "w_h"), p(prefix + "u_h"), p(prefix + "b_h")};
}

GruSeq2Seq::Encoded GruSeq2Seq::encode(ad::Graph& g, const model::BoundParams& p,
                                       std::span<const model::Example> batch) const {
  const std::size_t bsz = batch.size();
  const std::size_t hidden = config_.hidden_dim;
  if (bsz == 0) throw std::invalid_argument("gru: empty batch");
  std::size_t steps = 0;
  for (const auto& ex : batch) steps = std::max(steps, ex.input.true_length);

  // Time-major token layout: row t * B + b.
  std::vector<std::int32_t> tokens(steps * bsz);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t b = 0; b < bsz; ++b) tokens[t * bsz + b] = batch[b].input.ids[t];
  }
  ad::NodeId layer_input = g.gather(p("emb"), std::move(tokens));

  Encoded enc;
  std::vector<ad::NodeId> outputs;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const auto cp = cell(p, layer_prefix("enc", l));
    const auto xz = g.add(g.matmul(layer_input, cp.w_z), cp.b_z);
    const auto xr = g.add(g.matmul(layer_input, cp.w_r), cp.b_r);
    const auto xh = g.add(g.matmul(layer_input, cp.w_h), cp.b_h);
    ad::NodeId h = g.leaf(ad::Tensor::zeros({bsz, hidden}));
    outputs.clear();
    for (std::size_t t = 0; t < steps; ++t) {
      auto next = gru_step(g, g.slice(xz, 0, t * bsz, bsz), g.slice(xr, 0, t * bsz, bsz),
                           g.slice(xh, 0, t * bsz, bsz), h, cp);
      bool padded = false;
      for (const auto& ex : batch) padded = padded || t >= ex.input.true_length;
      if (padded) {
        // Rows past their true length keep their previous state.
        std::vector<float> on(bsz * hidden), off(bsz * hidden);
        for (std::size_t b = 0; b < bsz; ++b) {
          const float live = t < batch[b].input.true_length ? 1.0f : 0.0f;
          std::fill_n(on.begin() + static_cast<std::ptrdiff_t>(b * hidden), hidden, live);
          std::fill_n(off.begin() + static_cast<std::ptrdiff_t>(b * hidden), hidden, 1.0f - live);
        }
        next = g.add(g.mul(next, g.leaf(ad::Tensor({bsz, hidden}, std::move(on)))),
                     g.mul(h, g.leaf(ad::Tensor({bsz, hidden}, std::move(off)))));
      }
      h = next;
      outputs.push_back(h);
    }
    enc.final_hidden.push_back(h);
    layer_input = g.concat(outputs, 0);
  }

  const auto states =
      g.permute(g.reshape(layer_input, {steps, bsz, hidden}), {1, 0, 2});  // [B, S, H]
  auto mask = std::make_shared<std::vector<std::uint8_t>>(bsz * steps, 0);
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t t = 0; t < batch[b].input.true_length; ++t) (*mask)[b * steps + t] = 1;
  }
  enc.text_memory = prepare_attention(g, states, std::move(mask), {p("attn.w_a"), p("attn.v_a")});

  if (config_.visual) {
    const std::size_t rows = config_.grid_rows, cols = config_.grid_cols;
    std::vector<float> grid;
    grid.reserve(bsz * rows * cols);
    for (const auto& ex : batch) {
      if (!ex.feature) throw std::invalid_argument("baseline+vis: example without grid features");
      if (ex.feature->size() != rows * cols) {
        throw ad::ShapeError("baseline+vis: grid feature has " + std::to_string(ex.feature->size()) +
                             " values, expected " + std::to_string(rows) + "x" + std::to_string(cols));
      }
      grid.insert(grid.end(), ex.feature->begin(), ex.feature->end());
    }
    const auto grid_node = g.leaf(ad::Tensor({bsz, rows, cols}, std::move(grid)));
    auto all = std::make_shared<std::vector<std::uint8_t>>(bsz * rows, 1);
    enc.grid_memory = prepare_attention(g, grid_node, std::move(all), {p("vis.w_a"), p("vis.v_a")});
  }
  return enc;
}

GruSeq2Seq::StepOutput GruSeq2Seq::decoder_step(ad::Graph& g, const model::BoundParams& p,
                                                const Encoded& enc,
                                                const std::vector<ad::NodeId>& hidden,
                                                const std::vector<std::int32_t>& prev_tokens) const {
  const auto query = hidden.back();
  std::vector<ad::NodeId> parts = {g.gather(p("emb"), prev_tokens)};
  parts.push_back(luong_attention(g, query, enc.text_memory, {p("attn.w_a"), p("attn.v_a")}).context);
  if (enc.grid_memory) {
    parts.push_back(luong_attention(g, query, *enc.grid_memory, {p("vis.w_a"), p("vis.v_a")}).context);
  }
  ad::NodeId x = g.concat(parts, 1);
  StepOutput out;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    x = gru_cell(g, x, hidden[l], cell(p, layer_prefix("dec", l)));
    out.hidden.push_back(x);
  }
  out.logits = g.add(g.matmul(x, p("out.w")), p("out.b"));
  return out;
}

model::LossResult GruSeq2Seq::loss(ad::Graph& g, const model::BoundParams& p,
                                   std::span<const model::Example> batch) const {
  const auto enc = encode(g, p, batch);
  const std::size_t bsz = batch.size();
  std::size_t out_len = 0;
  for (const auto& ex : batch) out_len = std::max(out_len, ex.output.true_length);
  if (out_len < 2) throw std::invalid_argument("gru: output sequences must hold BOS and EOS");

  std::vector<ad::NodeId> hidden = enc.final_hidden;
  std::vector<ad::NodeId> step_logits;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask;
  for (std::size_t t = 0; t + 1 < out_len; ++t) {
    std::vector<std::int32_t> prev(bsz);
    for (std::size_t b = 0; b < bsz; ++b) {
      prev[b] = batch[b].output.ids[t];
      const bool scored = t + 1 < batch[b].output.true_length;
      targets.push_back(scored ? batch[b].output.ids[t + 1] : text::kPad);
      mask.push_back(scored ? 1 : 0);
    }
    auto step = decoder_step(g, p, enc, hidden, prev);
    hidden = std::move(step.hidden);
    step_logits.push_back(step.logits);
  }
  const auto logits = g.concat(step_logits, 0);
  model::LossResult r;
  r.loss = model::masked_cross_entropy(g, logits, targets, mask);
  r.correct = model::count_correct(g, logits, targets, mask);
  r.total = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
  return r;
}

text::TokenSequence GruSeq2Seq::generate(const text::TokenSequence& input,
                                         const std::vector<float>* feature,
                                         const decoding::DecodeOptions& options) const {
  if (config_.visual && !feature) {
    throw std::invalid_argument("baseline+vis: generation requires grid features");
  }
  ad::Graph g;
  const model::BoundParams p(g, params_, false);
  const model::Example ex{input, text::TokenSequence{}, feature};
  const auto enc = encode(g, p, std::span<const model::Example>(&ex, 1));

  using State = std::vector<ad::NodeId>;
  auto step = [&](const State& hidden, std::int32_t token) {
    auto out = decoder_step(g, p, enc, hidden, {token});
    return std::make_pair(std::move(out.hidden), log_softmax_row(g.value(out.logits)));
  };
  const auto generated = decoding::decode(enc.final_hidden, text::kBos, text::kEos, step, options);
  return model::to_output_sequence(generated);
}

}  // namespace vqr::seq2seq
