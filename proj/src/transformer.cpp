#include "vqr/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "vqr/features.hpp"

namespace vqr::transformer {

namespace {

std::vector<float> log_softmax_row(const float* logits, std::size_t n) {
  const float mx = *std::max_element(logits, logits + n);
  double denom = 0.0;
  for (std::size_t i = 0; i < n; ++i) denom += std::exp(static_cast<double>(logits[i] - mx));
  const float log_denom = static_cast<float>(std::log(denom));
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = logits[i] - mx - log_denom;
  return out;
}

std::string layer_name(std::size_t l, const char* rest) { return "l" + std::to_string(l) + "." + rest; }

void add_norm_names(std::vector<std::string>& names, const std::string& prefix, bool conditioned) {
  names.push_back(prefix + "gamma0");
  names.push_back(prefix + "beta0");
  if (conditioned) {
    names.push_back(prefix + "w_gamma");
    names.push_back(prefix + "w_beta");
  }
}

}  // namespace

SeqMask build_seq2seq_mask(std::size_t n_in, std::size_t n_out) {
  if (n_in == 0) throw std::invalid_argument("build_seq2seq_mask: n_in must be at least 1");
  SeqMask m;
  m.n_in = n_in;
  m.n_out = n_out;
  const std::size_t t = n_in + n_out;
  m.allowed.assign(t * t, 0);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < t; ++j) {
      const bool key_is_input = j < n_in;
      const bool ok = i < n_in ? key_is_input : (key_is_input || j <= i);
      m.allowed[i * t + j] = ok ? 1 : 0;
    }
  }
  return m;
}

ad::NodeId cond_layer_norm(ad::Graph& g, ad::NodeId x, std::optional<ad::NodeId> cond,
                           std::span<const std::int32_t> row_batch, const CondLayerNormParams& p) {
  const auto xs = g.shape(x);
  if (xs.size() == 1) {
    const std::int32_t zero = 0;
    const auto out = cond_layer_norm(g, g.reshape(x, {1, xs[0]}), cond,
                                     cond ? row_batch : std::span<const std::int32_t>(&zero, 1), p);
    return g.reshape(out, xs);
  }
  if (xs.size() != 2) throw ad::ShapeError("cond_layer_norm: input must be [rows, d], got " + ad::shape_str(xs));
  const std::size_t rows = xs[0], d = xs[1];
  if (g.shape(p.gamma0) != ad::Shape{d} || g.shape(p.beta0) != ad::Shape{d}) {
    throw ad::ShapeError("cond_layer_norm: gamma0/beta0 " + ad::shape_str(g.shape(p.gamma0)) + " vs x " +
                         ad::shape_str(xs));
  }
  const auto normalized = g.normalize(x, p.epsilon);
  ad::NodeId gamma_rows, beta_rows;
  if (cond) {
    if (!p.w_gamma || !p.w_beta) throw std::invalid_argument("cond_layer_norm: conditioning without projections");
    if (row_batch.size() != rows) {
      throw ad::ShapeError("cond_layer_norm: " + std::to_string(row_batch.size()) + " row assignments for " +
                           std::to_string(rows) + " rows");
    }
    const auto cs = g.shape(*cond);
    const auto wg = g.shape(*p.w_gamma);
    if (cs.size() != 2 || wg.size() != 2 || cs[1] != wg[0] || wg[1] != d || g.shape(*p.w_beta) != wg) {
      throw ad::ShapeError("cond_layer_norm: conditioning " + ad::shape_str(cs) + " vs W_gamma " +
                           ad::shape_str(wg));
    }
    std::vector<std::int32_t> idx(row_batch.begin(), row_batch.end());
    gamma_rows = g.gather(g.add(g.matmul(*cond, *p.w_gamma), p.gamma0), idx);
    beta_rows = g.gather(g.add(g.matmul(*cond, *p.w_beta), p.beta0), std::move(idx));
  } else {
    const std::vector<std::int32_t> idx(rows, 0);
    gamma_rows = g.gather(g.reshape(p.gamma0, {1, d}), idx);
    beta_rows = g.gather(g.reshape(p.beta0, {1, d}), idx);
  }
  return g.add(g.mul(normalized, gamma_rows), beta_rows);
}

PrefixSequence make_prefix_sequence(const text::TokenSequence& input, const text::TokenSequence* output) {
  PrefixSequence s;
  s.input = input.content();
  if (s.input.empty()) throw std::invalid_argument("transformer: empty input sequence");
  if (output) {
    s.output = output->content();
    if (s.output.empty()) throw std::invalid_argument("transformer: empty output sequence");
    s.output[0] = text::kSep;
  } else {
    s.output = {text::kSep};
  }
  return s;
}

std::vector<std::string> PrefixTransformer::parameter_names(const TransformerConfig& c) {
  std::vector<std::string> names = {"tok_emb", "pos_emb"};
  if (c.conditioned) names.insert(names.end(), {"cond.w", "cond.b"});
  for (std::size_t l = 0; l < c.layers; ++l) {
    for (const char* n : {"attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo"}) {
      names.push_back(layer_name(l, n));
    }
    add_norm_names(names, layer_name(l, "ln1."), c.conditioned);
    for (const char* n : {"ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"}) names.push_back(layer_name(l, n));
    add_norm_names(names, layer_name(l, "ln2."), c.conditioned);
  }
  names.insert(names.end(), {"head.w", "head.b"});
  add_norm_names(names, "head.ln.", c.conditioned);
  names.insert(names.end(), {"out.w", "out.b"});
  return names;
}

void PrefixTransformer::validate() const {
  const auto& c = config_;
  if (c.vocab_size <= text::kNumSpecials || c.d_model == 0 || c.heads == 0 || c.d_model % c.heads != 0 ||
      c.layers == 0 || c.ffn_dim == 0 || c.max_input == 0 || c.max_output < 2 || !(c.epsilon > 0.0f) ||
      (c.conditioned && c.feature_dim == 0)) {
    throw std::invalid_argument("transformer: invalid configuration (d_model must be divisible by heads)");
  }
  const auto names = parameter_names(c);
  if (params_.size() != names.size()) {
    throw std::invalid_argument("transformer: expected " + std::to_string(names.size()) +
                                " parameters, got " + std::to_string(params_.size()));
  }
  for (const auto& n : names) {
    if (!params_.contains(n)) throw std::invalid_argument("transformer: missing parameter '" + n + "'");
  }
}

PrefixTransformer::PrefixTransformer(TransformerConfig config, std::uint64_t seed) : config_(config) {
  const auto& c = config_;
  const std::size_t d = c.d_model;
  Rng rng(mix_seed(seed, 0x7472616e73666d72ULL));
  auto norm = [&](const std::string& prefix) {
    params_.add(prefix + "gamma0", ad::Tensor::full({d}, 1.0f));
    params_.add(prefix + "beta0", ad::Tensor::zeros({d}));
    if (c.conditioned) {
      params_.add(prefix + "w_gamma", ad::Tensor::zeros({d, d}));
      params_.add(prefix + "w_beta", ad::Tensor::zeros({d, d}));
    }
  };
  params_.add("tok_emb", model::uniform_init({c.vocab_size, d}, 0.1f, rng));
  params_.add("pos_emb", model::uniform_init({c.max_input + c.max_output, d}, 0.1f, rng));
  if (c.conditioned) {
    params_.add("cond.w", model::xavier_init(c.feature_dim, d, rng));
    params_.add("cond.b", ad::Tensor::zeros({d}));
  }
  for (std::size_t l = 0; l < c.layers; ++l) {
    for (const char* n : {"q", "k", "v", "o"}) {
      params_.add(layer_name(l, (std::string("attn.w") + n).c_str()), model::xavier_init(d, d, rng));
      params_.add(layer_name(l, (std::string("attn.b") + n).c_str()), ad::Tensor::zeros({d}));
    }
    norm(layer_name(l, "ln1."));
    params_.add(layer_name(l, "ffn.w1"), model::xavier_init(d, c.ffn_dim, rng));
    params_.add(layer_name(l, "ffn.b1"), ad::Tensor::zeros({c.ffn_dim}));
    params_.add(layer_name(l, "ffn.w2"), model::xavier_init(c.ffn_dim, d, rng));
    params_.add(layer_name(l, "ffn.b2"), ad::Tensor::zeros({d}));
    norm(layer_name(l, "ln2."));
  }
  params_.add("head.w", model::xavier_init(d, d, rng));
  params_.add("head.b", ad::Tensor::zeros({d}));
  norm("head.ln.");
  params_.add("out.w", model::xavier_init(d, c.vocab_size, rng));
  params_.add("out.b", ad::Tensor::zeros({c.vocab_size}));
  validate();
}

PrefixTransformer::PrefixTransformer(TransformerConfig config, model::ParamStore params)
    : config_(config), params_(std::move(params)) {
  validate();
}

CondLayerNormParams PrefixTransformer::norm_params(const model::BoundParams& p, const std::string& prefix) const {
  CondLayerNormParams n;
  n.gamma0 = p(prefix + "gamma0");
  n.beta0 = p(prefix + "beta0");
  if (config_.conditioned) {
    n.w_gamma = p(prefix + "w_gamma");
    n.w_beta = p(prefix + "w_beta");
  }
  n.epsilon = config_.epsilon;
  return n;
}

PrefixTransformer::Layout PrefixTransformer::layout(std::span<const PrefixSequence> seqs) const {
  Layout lay;
  lay.batch = seqs.size();
  for (const auto& s : seqs) {
    if (s.input.size() > config_.max_input || s.output.size() > config_.max_output) {
      throw ad::ShapeError("transformer: sequence of " + std::to_string(s.input.size()) + "+" +
                           std::to_string(s.output.size()) + " tokens exceeds " +
                           std::to_string(config_.max_input) + "+" + std::to_string(config_.max_output));
    }
    lay.n_in = std::max(lay.n_in, s.input.size());
    lay.n_out = std::max(lay.n_out, s.output.size());
  }
  const std::size_t t = lay.n_in + lay.n_out;
  lay.tokens.assign(lay.batch * t, text::kPad);
  lay.positions.resize(lay.batch * t);
  lay.row_batch.resize(lay.batch * t);
  lay.mask = std::make_shared<std::vector<std::uint8_t>>(lay.batch * t * t, 0);
  for (std::size_t b = 0; b < lay.batch; ++b) {
    const auto& s = seqs[b];
    const std::size_t in_len = s.input.size(), out_len = s.output.size();
    for (std::size_t i = 0; i < t; ++i) {
      const std::size_t row = b * t + i;
      const bool is_input = i < lay.n_in;
      const std::size_t slot = is_input ? i : i - lay.n_in;
      lay.positions[row] = static_cast<std::int32_t>(is_input ? slot : config_.max_input + slot);
      lay.row_batch[row] = static_cast<std::int32_t>(b);
      const bool valid = is_input ? slot < in_len : slot < out_len;
      if (valid) lay.tokens[row] = is_input ? s.input[slot] : s.output[slot];
      std::uint8_t* mrow = lay.mask->data() + row * t;
      if (!valid) {
        mrow[i] = 1;  // padding rows see only themselves; their outputs are never read
        continue;
      }
      for (std::size_t j = 0; j < in_len; ++j) mrow[j] = 1;
      if (!is_input) {
        for (std::size_t j = 0; j <= slot; ++j) mrow[lay.n_in + j] = 1;
      }
    }
  }
  return lay;
}

ad::NodeId PrefixTransformer::hidden_states(ad::Graph& g, const model::BoundParams& p, const Layout& lay,
                                            std::optional<ad::NodeId> cond) const {
  const std::size_t d = config_.d_model, h = config_.heads, dh = d / h;
  const std::size_t bsz = lay.batch, t = lay.n_in + lay.n_out;
  const std::span<const std::int32_t> row_batch(lay.row_batch);
  ad::NodeId x = g.add(g.gather(p("tok_emb"), lay.tokens), g.gather(p("pos_emb"), lay.positions));
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  auto split_heads = [&](ad::NodeId m) {
    return g.reshape(g.permute(g.reshape(m, {bsz, t, h, dh}), {2, 0, 1, 3}), {h * bsz, t, dh});
  };
  for (std::size_t l = 0; l < config_.layers; ++l) {
    auto P = [&](const char* n) { return p(layer_name(l, n)); };
    const auto q = split_heads(g.add(g.matmul(x, P("attn.wq")), P("attn.bq")));
    const auto k = split_heads(g.add(g.matmul(x, P("attn.wk")), P("attn.bk")));
    const auto v = split_heads(g.add(g.matmul(x, P("attn.wv")), P("attn.bv")));
    const auto scores = g.mul_scalar(g.matmul(q, k, true), scale);
    const auto attn = g.masked_softmax(scores, lay.mask);
    const auto ctx = g.reshape(g.permute(g.reshape(g.matmul(attn, v), {h, bsz, t, dh}), {1, 2, 0, 3}),
                               {bsz * t, d});
    const auto attn_out = g.add(g.matmul(ctx, P("attn.wo")), P("attn.bo"));
    x = cond_layer_norm(g, g.add(x, attn_out), cond, row_batch, norm_params(p, layer_name(l, "ln1.")));
    const auto inner = g.gelu(g.add(g.matmul(x, P("ffn.w1")), P("ffn.b1")));
    const auto ffn_out = g.add(g.matmul(inner, P("ffn.w2")), P("ffn.b2"));
    x = cond_layer_norm(g, g.add(x, ffn_out), cond, row_batch, norm_params(p, layer_name(l, "ln2.")));
  }
  return x;
}

ad::NodeId PrefixTransformer::head(ad::Graph& g, const model::BoundParams& p, ad::NodeId rows,
                                   std::optional<ad::NodeId> cond,
                                   std::span<const std::int32_t> row_batch) const {
  auto t = g.gelu(g.add(g.matmul(rows, p("head.w")), p("head.b")));
  t = cond_layer_norm(g, t, cond, row_batch, norm_params(p, "head.ln."));
  return g.add(g.matmul(t, p("out.w")), p("out.b"));
}

ad::NodeId PrefixTransformer::condition(ad::Graph& g, const model::BoundParams& p,
                                        const std::vector<const std::vector<float>*>& feats) const {
  if (!config_.conditioned) throw std::logic_error("transformer: model is not conditioned");
  const std::size_t dim = config_.feature_dim;
  std::vector<float> flat;
  flat.reserve(feats.size() * dim);
  for (const auto* f : feats) {
    if (!f) throw std::invalid_argument("transformer+vis: example without pooled features");
    if (f->size() != dim) {
      throw ad::ShapeError("transformer+vis: pooled feature has " + std::to_string(f->size()) +
                           " values, expected " + std::to_string(dim));
    }
    flat.insert(flat.end(), f->begin(), f->end());
  }
  const auto v = g.leaf(ad::Tensor({feats.size(), dim}, std::move(flat)));
  return features::project_feature(g, v, p("cond.w"), p("cond.b"));
}

ad::NodeId PrefixTransformer::forward(ad::Graph& g, const model::BoundParams& p,
                                      std::span<const std::int32_t> tokens, const SeqMask& mask,
                                      std::optional<ad::NodeId> cond) const {
  if (tokens.size() != mask.size() || mask.allowed.size() != mask.size() * mask.size()) {
    throw ad::ShapeError("transformer: " + std::to_string(tokens.size()) + " tokens with a " +
                         std::to_string(mask.size()) + "x" + std::to_string(mask.size()) + " mask");
  }
  if (mask.n_in > config_.max_input || mask.n_out > config_.max_output) {
    throw ad::ShapeError("transformer: sequence exceeds positional capacity");
  }
  if (cond && !config_.conditioned) throw std::invalid_argument("transformer: unconditioned model given a condition");
  Layout lay;
  lay.batch = 1;
  lay.n_in = mask.n_in;
  lay.n_out = mask.n_out;
  lay.tokens.assign(tokens.begin(), tokens.end());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    lay.positions.push_back(static_cast<std::int32_t>(i < mask.n_in ? i : config_.max_input + (i - mask.n_in)));
  }
  lay.row_batch.assign(tokens.size(), 0);
  lay.mask = std::make_shared<std::vector<std::uint8_t>>(mask.allowed);
  const auto states = hidden_states(g, p, lay, cond);
  return head(g, p, states, cond, lay.row_batch);
}

model::LossResult PrefixTransformer::loss(ad::Graph& g, const model::BoundParams& p,
                                          std::span<const model::Example> batch) const {
  std::vector<PrefixSequence> seqs;
  std::vector<const std::vector<float>*> feats;
  seqs.reserve(batch.size());
  for (const auto& ex : batch) {
    seqs.push_back(make_prefix_sequence(ex.input, &ex.output));
    feats.push_back(ex.feature);
  }
  const auto lay = layout(seqs);
  std::optional<ad::NodeId> cond;
  if (config_.conditioned) cond = condition(g, p, feats);
  const auto states = hidden_states(g, p, lay, cond);

  // Output slot j predicts output token j + 1.
  const std::size_t t = lay.n_in + lay.n_out;
  std::vector<std::int32_t> rows, row_batch, targets;
  std::vector<std::uint8_t> mask;
  for (std::size_t b = 0; b < lay.batch; ++b) {
    for (std::size_t j = 0; j + 1 < lay.n_out; ++j) {
      rows.push_back(static_cast<std::int32_t>(b * t + lay.n_in + j));
      row_batch.push_back(static_cast<std::int32_t>(b));
      const bool scored = j + 1 < seqs[b].output.size();
      targets.push_back(scored ? seqs[b].output[j + 1] : text::kPad);
      mask.push_back(scored ? 1 : 0);
    }
  }
  if (rows.empty()) throw std::invalid_argument("transformer: output sequences must hold SEP and EOS");
  const auto logits = head(g, p, g.gather(states, rows), cond, row_batch);
  model::LossResult r;
  r.loss = model::masked_cross_entropy(g, logits, targets, mask);
  r.correct = model::count_correct(g, logits, targets, mask);
  r.total = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
  return r;
}

text::TokenSequence PrefixTransformer::generate_with(ad::Graph& g, const model::BoundParams& p,
                                                     const text::TokenSequence& input,
                                                     std::optional<ad::NodeId> cond,
                                                     const decoding::DecodeOptions& options) const {
  const std::size_t mark = g.size();
  auto input_ids = input.content();
  if (input_ids.size() > config_.max_input) input_ids.resize(config_.max_input);
  decoding::DecodeOptions opts = options;
  opts.max_len = std::min(opts.max_len, config_.max_output);

  using State = std::vector<std::int32_t>;
  auto step = [&](const State& prefix, std::int32_t token) {
    State next = prefix;
    next.push_back(token);
    const PrefixSequence seq{input_ids, next};
    const auto lay = layout(std::span<const PrefixSequence>(&seq, 1));
    const auto states = hidden_states(g, p, lay, cond);
    const std::int32_t last = static_cast<std::int32_t>(lay.n_in + lay.n_out - 1);
    const std::int32_t only_batch = 0;
    const auto logits = head(g, p, g.gather(states, {last}), cond, std::span<const std::int32_t>(&only_batch, 1));
    auto lp = log_softmax_row(g.value(logits).data(), g.value(logits).size());
    g.truncate(mark);
    return std::make_pair(std::move(next), std::move(lp));
  };
  const auto generated = decoding::decode(State{}, text::kSep, text::kEos, step, opts);
  return model::to_output_sequence(generated);
}

text::TokenSequence PrefixTransformer::generate(const text::TokenSequence& input, const std::vector<float>* feature,
                                                const decoding::DecodeOptions& options) const {
  ad::Graph g;
  const model::BoundParams p(g, params_, false);
  std::optional<ad::NodeId> cond;
  if (config_.conditioned) cond = condition(g, p, {feature});
  return generate_with(g, p, input, cond, options);
}

}  // namespace vqr::transformer
