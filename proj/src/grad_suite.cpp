#include "vqr/grad_suite.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "vqr/seq2seq.hpp"
#include "vqr/transformer.hpp"

namespace vqr::grad_suite {

using ad::Graph;
using ad::NodeId;
using ad::Shape;
using ad::Tensor;

namespace {

std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

Tensor normal(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<float> v(ad::numel(shape));
  for (auto& x : v) x = static_cast<float>(scale * rng.normal());
  return Tensor(std::move(shape), std::move(v));
}

// Weighted sum of `y` against a fixed random projection, so every output
// entry contributes to the loss with its own weight.
NodeId project(Graph& g, NodeId y, const Tensor& weights) {
  return g.sum(g.mul(y, g.leaf(weights)));
}

// Wraps a single-output builder with a random projection of its output.
Instance projected(std::vector<Tensor> inputs, std::function<NodeId(Graph&, std::span<const NodeId>)> body,
                   Rng& rng) {
  Graph probe;
  std::vector<NodeId> ids;
  for (const auto& t : inputs) ids.push_back(probe.leaf(t));
  const Shape out_shape = probe.shape(body(probe, ids));
  const double scale = 1.0 / std::sqrt(static_cast<double>(ad::numel(out_shape)));
  auto weights = normal(out_shape, rng, scale);
  Instance inst;
  inst.inputs = std::move(inputs);
  inst.loss = [body, weights](Graph& g, std::span<const NodeId> in) { return project(g, body(g, in), weights); };
  return inst;
}

Case unary(std::string name, std::function<NodeId(Graph&, NodeId)> op) {
  return {name, [op](Rng& rng) {
            const Shape s{dim(rng, 1, 4), dim(rng, 2, 5)};
            return projected({normal(s, rng)}, [op](Graph& g, std::span<const NodeId> in) { return op(g, in[0]); },
                             rng);
          }};
}

// Rows whose spread is comfortably away from zero, so normalization stays
// well conditioned for finite differences.
Tensor spread_rows(std::size_t rows, std::size_t cols, Rng& rng) {
  while (true) {
    auto t = normal({rows, cols}, rng);
    bool ok = true;
    for (std::size_t r = 0; r < rows && ok; ++r) {
      double m = 0.0, v = 0.0;
      for (std::size_t c = 0; c < cols; ++c) m += t.values[r * cols + c];
      m /= static_cast<double>(cols);
      for (std::size_t c = 0; c < cols; ++c) v += std::pow(t.values[r * cols + c] - m, 2);
      ok = std::sqrt(v / static_cast<double>(cols)) > 0.5;
    }
    if (ok) return t;
  }
}

std::vector<std::int32_t> random_ids(std::size_t n, std::size_t range, Rng& rng) {
  std::vector<std::int32_t> ids(n);
  for (auto& i : ids) i = static_cast<std::int32_t>(rng.index(range));
  return ids;
}

std::vector<float> random_feature(std::size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

text::TokenSequence random_sequence(text::Role role, std::size_t vocab, std::size_t content, Rng& rng) {
  text::TokenSequence s;
  s.role = role;
  s.ids.push_back(text::kBos);
  for (std::size_t i = 0; i < content; ++i) {
    s.ids.push_back(static_cast<std::int32_t>(text::kNumSpecials + rng.index(vocab - text::kNumSpecials)));
  }
  s.ids.push_back(text::kEos);
  s.true_length = s.ids.size();
  s.ids.resize(text::role_length(role), text::kPad);
  return s;
}

// Full teacher-forced loss of a model, differentiated with respect to every
// parameter. Features live in shared storage so the examples stay valid.
template <typename Model>
Instance model_instance(std::shared_ptr<Model> m, std::shared_ptr<std::vector<std::vector<float>>> feats,
                        std::vector<model::Example> batch) {
  Instance inst;
  for (std::size_t i = 0; i < m->params().size(); ++i) inst.inputs.push_back(m->params().at(i));
  inst.loss = [m, feats, batch](Graph& g, std::span<const NodeId> in) {
    const model::BoundParams p(m->params(), std::vector<NodeId>(in.begin(), in.end()));
    return m->loss(g, p, batch).loss;
  };
  return inst;
}

}  // namespace

std::vector<Case> op_cases() {
  std::vector<Case> cases;
  cases.push_back({"matmul", [](Rng& rng) {
                     const auto m = dim(rng, 1, 4), k = dim(rng, 1, 5), n = dim(rng, 1, 4);
                     return projected({normal({m, k}, rng), normal({k, n}, rng)},
                                      [](Graph& g, std::span<const NodeId> in) { return g.matmul(in[0], in[1]); },
                                      rng);
                   }});
  cases.push_back({"matmul_transposed", [](Rng& rng) {
                     const auto m = dim(rng, 1, 4), k = dim(rng, 1, 5), n = dim(rng, 1, 4);
                     return projected(
                         {normal({m, k}, rng), normal({n, k}, rng)},
                         [](Graph& g, std::span<const NodeId> in) { return g.matmul(in[0], in[1], true); }, rng);
                   }});
  cases.push_back({"matmul_batched", [](Rng& rng) {
                     const auto b = dim(rng, 1, 3), m = dim(rng, 1, 3), k = dim(rng, 1, 4), n = dim(rng, 1, 3);
                     const bool tb = rng.index(2) == 1;
                     return projected({normal({b, m, k}, rng), tb ? normal({b, n, k}, rng) : normal({b, k, n}, rng)},
                                      [tb](Graph& g, std::span<const NodeId> in) { return g.matmul(in[0], in[1], tb); },
                                      rng);
                   }});
  cases.push_back({"add", [](Rng& rng) {
                     const Shape s{dim(rng, 1, 4), dim(rng, 1, 5)};
                     return projected({normal(s, rng), normal(s, rng)},
                                      [](Graph& g, std::span<const NodeId> in) { return g.add(in[0], in[1]); }, rng);
                   }});
  cases.push_back({"add_bias", [](Rng& rng) {
                     const auto r = dim(rng, 1, 4), c = dim(rng, 1, 5);
                     return projected({normal({r, c}, rng), normal({c}, rng)},
                                      [](Graph& g, std::span<const NodeId> in) { return g.add(in[0], in[1]); }, rng);
                   }});
  cases.push_back({"sub", [](Rng& rng) {
                     const Shape s{dim(rng, 1, 4), dim(rng, 1, 5)};
                     return projected({normal(s, rng), normal(s, rng)},
                                      [](Graph& g, std::span<const NodeId> in) { return g.sub(in[0], in[1]); }, rng);
                   }});
  cases.push_back({"mul", [](Rng& rng) {
                     const Shape s{dim(rng, 1, 4), dim(rng, 1, 5)};
                     return projected({normal(s, rng), normal(s, rng)},
                                      [](Graph& g, std::span<const NodeId> in) { return g.mul(in[0], in[1]); }, rng);
                   }});
  cases.push_back({"add_scalar", [](Rng& rng) {
                     const float s = static_cast<float>(rng.normal());
                     return projected({normal({dim(rng, 1, 4), dim(rng, 1, 5)}, rng)},
                                      [s](Graph& g, std::span<const NodeId> in) { return g.add_scalar(in[0], s); },
                                      rng);
                   }});
  cases.push_back({"mul_scalar", [](Rng& rng) {
                     const float s = static_cast<float>(rng.normal());
                     return projected({normal({dim(rng, 1, 4), dim(rng, 1, 5)}, rng)},
                                      [s](Graph& g, std::span<const NodeId> in) { return g.mul_scalar(in[0], s); },
                                      rng);
                   }});
  cases.push_back({"concat", [](Rng& rng) {
                     const int axis = static_cast<int>(rng.index(3));
                     Shape a{dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)};
                     Shape b = a;
                     b[static_cast<std::size_t>(axis)] = dim(rng, 1, 3);
                     return projected({normal(a, rng), normal(b, rng)},
                                      [axis](Graph& g, std::span<const NodeId> in) {
                                        const NodeId parts[] = {in[0], in[1], in[0]};
                                        return g.concat(parts, axis);
                                      },
                                      rng);
                   }});
  cases.push_back({"slice", [](Rng& rng) {
                     const int axis = static_cast<int>(rng.index(2));
                     const Shape s{dim(rng, 2, 5), dim(rng, 2, 5)};
                     const std::size_t extent = s[static_cast<std::size_t>(axis)];
                     const std::size_t start = rng.index(extent);
                     const std::size_t len = 1 + rng.index(extent - start);
                     return projected(
                         {normal(s, rng)},
                         [=](Graph& g, std::span<const NodeId> in) { return g.slice(in[0], axis, start, len); }, rng);
                   }});
  cases.push_back({"reshape", [](Rng& rng) {
                     const auto a = dim(rng, 1, 4), b = dim(rng, 1, 4), c = dim(rng, 1, 3);
                     return projected({normal({a, b, c}, rng)},
                                      [=](Graph& g, std::span<const NodeId> in) { return g.reshape(in[0], {a * b, c}); },
                                      rng);
                   }});
  cases.push_back({"permute", [](Rng& rng) {
                     std::vector<std::size_t> perm{0, 1, 2, 3};
                     rng.shuffle(perm);
                     return projected({normal({dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)}, rng)},
                                      [perm](Graph& g, std::span<const NodeId> in) { return g.permute(in[0], perm); },
                                      rng);
                   }});
  cases.push_back(unary("tanh", [](Graph& g, NodeId x) { return g.tanh(x); }));
  cases.push_back(unary("sigmoid", [](Graph& g, NodeId x) { return g.sigmoid(x); }));
  cases.push_back(unary("gelu", [](Graph& g, NodeId x) { return g.gelu(x); }));
  cases.push_back({"softmax", [](Rng& rng) {
                     const int axis = static_cast<int>(rng.index(3));
                     return projected({normal({dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 2, 4)}, rng)},
                                      [axis](Graph& g, std::span<const NodeId> in) { return g.softmax(in[0], axis); },
                                      rng);
                   }});
  cases.push_back({"masked_softmax", [](Rng& rng) {
                     const auto b = dim(rng, 1, 3), r = dim(rng, 1, 4), c = dim(rng, 2, 5);
                     auto mask = std::make_shared<std::vector<std::uint8_t>>(r * c);
                     for (std::size_t i = 0; i < r; ++i) {
                       for (std::size_t j = 0; j < c; ++j) (*mask)[i * c + j] = rng.index(3) != 0;
                       (*mask)[i * c + rng.index(c)] = 1;
                     }
                     return projected(
                         {normal({b, r, c}, rng)},
                         [mask](Graph& g, std::span<const NodeId> in) { return g.masked_softmax(in[0], mask); }, rng);
                   }});
  cases.push_back(unary("log_softmax", [](Graph& g, NodeId x) { return g.log_softmax(x); }));
  cases.push_back({"mean", [](Rng& rng) {
                     const int axis = static_cast<int>(rng.index(3));
                     return projected({normal({dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)}, rng)},
                                      [axis](Graph& g, std::span<const NodeId> in) { return g.mean(in[0], axis); },
                                      rng);
                   }});
  cases.push_back({"variance", [](Rng& rng) {
                     const int axis = static_cast<int>(rng.index(3));
                     return projected({normal({dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 2, 4)}, rng)},
                                      [axis](Graph& g, std::span<const NodeId> in) { return g.variance(in[0], axis); },
                                      rng);
                   }});
  cases.push_back({"normalize", [](Rng& rng) {
                     return projected({spread_rows(dim(rng, 1, 4), dim(rng, 3, 6), rng)},
                                      [](Graph& g, std::span<const NodeId> in) { return g.normalize(in[0], 1e-5f); },
                                      rng);
                   }});
  cases.push_back({"gather", [](Rng& rng) {
                     const auto rows = dim(rng, 2, 5), cols = dim(rng, 1, 4);
                     auto idx = random_ids(dim(rng, 1, 6), rows, rng);
                     return projected({normal({rows, cols}, rng)},
                                      [idx](Graph& g, std::span<const NodeId> in) { return g.gather(in[0], idx); },
                                      rng);
                   }});
  cases.push_back({"pick", [](Rng& rng) {
                     const auto rows = dim(rng, 1, 5), cols = dim(rng, 2, 5);
                     auto idx = random_ids(rows, cols, rng);
                     return projected({normal({rows, cols}, rng)},
                                      [idx](Graph& g, std::span<const NodeId> in) { return g.pick(in[0], idx); },
                                      rng);
                   }});
  cases.push_back({"sum", [](Rng& rng) {
                     Instance inst;
                     inst.inputs = {normal({dim(rng, 1, 4), dim(rng, 1, 4)}, rng)};
                     inst.loss = [](Graph& g, std::span<const NodeId> in) { return g.sum(g.tanh(in[0])); };
                     return inst;
                   }});
  return cases;
}

std::vector<Case> block_cases() {
  std::vector<Case> cases;
  cases.push_back({"gru_seq2seq+vis", [](Rng& rng) {
                     seq2seq::GruConfig c;
                     c.vocab_size = 9;
                     c.embed_dim = 3;
                     c.hidden_dim = 4;
                     c.attn_dim = 3;
                     c.layers = 2;
                     c.visual = true;
                     c.grid_rows = 3;
                     c.grid_cols = 2;
                     auto m = std::make_shared<seq2seq::GruSeq2Seq>(c, rng.next());
                     auto feats = std::make_shared<std::vector<std::vector<float>>>();
                     const std::size_t bsz = 2;
                     for (std::size_t b = 0; b < bsz; ++b) feats->push_back(random_feature(6, rng));
                     std::vector<model::Example> batch;
                     for (std::size_t b = 0; b < bsz; ++b) {
                       model::Example ex;
                       ex.input = random_sequence(text::Role::Input, c.vocab_size, dim(rng, 1, 3), rng);
                       ex.output = random_sequence(text::Role::Output, c.vocab_size, dim(rng, 1, 3), rng);
                       ex.feature = &(*feats)[b];
                       batch.push_back(std::move(ex));
                     }
                     return model_instance(m, feats, std::move(batch));
                   }});
  cases.push_back({"prefix_transformer+vis", [](Rng& rng) {
                     transformer::TransformerConfig c;
                     c.vocab_size = 9;
                     c.d_model = 6;
                     c.heads = 2;
                     c.layers = 1;
                     c.ffn_dim = 5;
                     c.conditioned = true;
                     c.feature_dim = 3;
                     auto m = std::make_shared<transformer::PrefixTransformer>(c, rng.next());
                     // Non-zero conditioning projections so the modulation path carries
                     // gradient; unit-scale embeddings keep the first norm well conditioned.
                     for (std::size_t i = 0; i < m->params().size(); ++i) {
                       const auto& name = m->params().names()[i];
                       double scale = 0.0;
                       if (name.find("w_gamma") != std::string::npos || name.find("w_beta") != std::string::npos) {
                         scale = 0.3;
                       } else if (name == "tok_emb" || name == "pos_emb") {
                         scale = 1.0;
                       }
                       if (scale == 0.0) continue;
                       for (auto& x : m->params().at(i).values) x = static_cast<float>(scale * rng.normal());
                     }
                     auto feats = std::make_shared<std::vector<std::vector<float>>>();
                     const std::size_t bsz = 2;
                     for (std::size_t b = 0; b < bsz; ++b) feats->push_back(random_feature(3, rng));
                     std::vector<model::Example> batch;
                     for (std::size_t b = 0; b < bsz; ++b) {
                       model::Example ex;
                       ex.input = random_sequence(text::Role::Input, c.vocab_size, dim(rng, 1, 3), rng);
                       ex.output = random_sequence(text::Role::Output, c.vocab_size, dim(rng, 1, 3), rng);
                       ex.feature = &(*feats)[b];
                       batch.push_back(std::move(ex));
                     }
                     return model_instance(m, feats, std::move(batch));
                   }});
  return cases;
}

std::vector<CaseResult> run(const std::vector<Case>& cases, std::size_t instances, std::uint64_t seed,
                            float step) {
  std::vector<CaseResult> out;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    Rng rng(mix_seed(seed, fnv1a(cases[c].name)));
    CaseResult r;
    r.name = cases[c].name;
    for (std::size_t i = 0; i < instances; ++i) {
      const auto inst = cases[c].make(rng);
      r.max_rel_error = std::max(r.max_rel_error, ad::grad_check(inst.loss, inst.inputs, step));
      ++r.instances;
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace vqr::grad_suite
