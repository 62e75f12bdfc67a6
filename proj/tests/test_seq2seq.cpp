#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "vqr/rng.hpp"
#include "vqr/seq2seq.hpp"

using namespace vqr;
using namespace vqr::seq2seq;

namespace {

std::vector<float> randn(std::size_t n, Rng& rng, double scale = 1.0) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(scale * rng.normal());
  return v;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Row vector times [rows, cols] matrix.
std::vector<double> vecmat(const std::vector<double>& x, const std::vector<float>& w, std::size_t cols) {
  std::vector<double> out(cols, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j] += x[i] * w[i * cols + j];
  }
  return out;
}

struct CellData {
  std::vector<std::vector<float>> w, u, b;  // z, r, h
};

CellData random_cell(std::size_t in, std::size_t hid, Rng& rng) {
  CellData c;
  for (int gate = 0; gate < 3; ++gate) {
    c.w.push_back(randn(in * hid, rng, 0.5));
    c.u.push_back(randn(hid * hid, rng, 0.5));
    c.b.push_back(randn(hid, rng, 0.5));
  }
  return c;
}

GruCellParams bind_cell(ad::Graph& g, const CellData& c, std::size_t in, std::size_t hid) {
  auto leaf = [&](const std::vector<float>& v, ad::Shape s) { return g.leaf(ad::Tensor(std::move(s), v)); };
  return GruCellParams{leaf(c.w[0], {in, hid}), leaf(c.u[0], {hid, hid}), leaf(c.b[0], {hid}),
                       leaf(c.w[1], {in, hid}), leaf(c.u[1], {hid, hid}), leaf(c.b[1], {hid}),
                       leaf(c.w[2], {in, hid}), leaf(c.u[2], {hid, hid}), leaf(c.b[2], {hid})};
}

text::Vocab small_vocab() {
  return text::Vocab({"<pad>", "<bos>", "<eos>", "<unk>", "<sep>", "a", "b", "c", "d", "e", "f"});
}

GruConfig small_config(bool visual = false) {
  GruConfig c;
  c.vocab_size = small_vocab().size();
  c.embed_dim = 4;
  c.hidden_dim = 5;
  c.attn_dim = 3;
  c.layers = 2;
  c.visual = visual;
  c.grid_rows = 3;
  c.grid_cols = 2;
  return c;
}

model::Example make_example(const std::string& in, const std::string& out, const text::Vocab& v) {
  return {text::encode(in, text::Role::Input, v), text::encode(out, text::Role::Output, v), nullptr};
}

}  // namespace

TEST(GruCell, MatchesScalarOracle) {
  Rng rng(11);
  const std::size_t batch = 3, in = 4, hid = 5;
  const auto cell = random_cell(in, hid, rng);
  const auto x = randn(batch * in, rng), h = randn(batch * hid, rng);
  ad::Graph g;
  const auto p = bind_cell(g, cell, in, hid);
  const auto out = gru_cell(g, g.leaf(ad::Tensor({batch, in}, x)), g.leaf(ad::Tensor({batch, hid}, h)), p);
  ASSERT_EQ(g.shape(out), (ad::Shape{batch, hid}));
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<double> xb(x.begin() + b * in, x.begin() + (b + 1) * in);
    std::vector<double> hb(h.begin() + b * hid, h.begin() + (b + 1) * hid);
    const auto xz = vecmat(xb, cell.w[0], hid), hz = vecmat(hb, cell.u[0], hid);
    const auto xr = vecmat(xb, cell.w[1], hid), hr = vecmat(hb, cell.u[1], hid);
    std::vector<double> z(hid), r(hid), rh(hid);
    for (std::size_t j = 0; j < hid; ++j) {
      z[j] = sigmoid(xz[j] + hz[j] + cell.b[0][j]);
      r[j] = sigmoid(xr[j] + hr[j] + cell.b[1][j]);
      rh[j] = r[j] * hb[j];
    }
    const auto xh = vecmat(xb, cell.w[2], hid), uh = vecmat(rh, cell.u[2], hid);
    for (std::size_t j = 0; j < hid; ++j) {
      const double cand = std::tanh(xh[j] + uh[j] + cell.b[2][j]);
      const double expect = (1.0 - z[j]) * hb[j] + z[j] * cand;
      EXPECT_NEAR(g.value(out)[b * hid + j], expect, 1e-5);
    }
  }
}

TEST(GruCell, ZeroWeightsHalveState) {
  Rng rng(3);
  const std::size_t in = 3, hid = 4;
  CellData zero;
  for (int gate = 0; gate < 3; ++gate) {
    zero.w.emplace_back(in * hid, 0.0f);
    zero.u.emplace_back(hid * hid, 0.0f);
    zero.b.emplace_back(hid, 0.0f);
  }
  const auto x = randn(2 * in, rng), h = randn(2 * hid, rng);
  ad::Graph g;
  const auto out = gru_cell(g, g.leaf(ad::Tensor({2, in}, x)), g.leaf(ad::Tensor({2, hid}, h)),
                            bind_cell(g, zero, in, hid));
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(g.value(out)[i], 0.5f * h[i], 1e-7);
}

TEST(GruCell, RejectsMismatchedState) {
  Rng rng(5);
  const auto cell = random_cell(3, 4, rng);
  ad::Graph g;
  const auto p = bind_cell(g, cell, 3, 4);
  EXPECT_THROW(gru_cell(g, g.leaf(ad::Tensor::zeros({2, 3})), g.leaf(ad::Tensor::zeros({3, 4})), p),
               ad::ShapeError);
}

TEST(Attention, MatchesHandComputationOnTwoPositions) {
  Rng rng(21);
  const std::size_t hq = 3, hs = 2, k = 4;
  const auto w = randn((hq + hs) * k, rng), v = randn(k, rng), q = randn(hq, rng), s = randn(2 * hs, rng);
  ad::Graph g;
  const AttentionParams p{g.leaf(ad::Tensor({hq + hs, k}, w)), g.leaf(ad::Tensor({k}, v))};
  auto mask = std::make_shared<std::vector<std::uint8_t>>(2, 1);
  const auto out = luong_attention(g, g.leaf(ad::Tensor({1, hq}, q)), g.leaf(ad::Tensor({1, 2, hs}, s)),
                                   mask, p);
  double score[2];
  for (int pos = 0; pos < 2; ++pos) {
    std::vector<double> cat(q.begin(), q.end());
    cat.insert(cat.end(), s.begin() + pos * hs, s.begin() + (pos + 1) * hs);
    const auto pre = vecmat(cat, w, k);
    score[pos] = 0.0;
    for (std::size_t j = 0; j < k; ++j) score[pos] += v[j] * std::tanh(pre[j]);
  }
  const double a0 = 1.0 / (1.0 + std::exp(score[1] - score[0]));
  EXPECT_NEAR(g.value(out.alpha)[0], a0, 1e-6);
  EXPECT_NEAR(g.value(out.alpha)[1], 1.0 - a0, 1e-6);
  for (std::size_t j = 0; j < hs; ++j) {
    EXPECT_NEAR(g.value(out.context)[j], a0 * s[j] + (1.0 - a0) * s[hs + j], 1e-6);
  }
}

TEST(Attention, ZeroScoringVectorGivesUniformWeights) {
  Rng rng(8);
  const std::size_t batch = 2, len = 5, hq = 3, hs = 4, k = 3;
  ad::Graph g;
  const AttentionParams p{g.leaf(ad::Tensor({hq + hs, k}, randn((hq + hs) * k, rng))),
                          g.leaf(ad::Tensor::zeros({k}))};
  const auto states = randn(batch * len * hs, rng);
  auto mask = std::make_shared<std::vector<std::uint8_t>>(batch * len, 1);
  for (std::size_t s = 3; s < len; ++s) (*mask)[len + s] = 0;  // second row has 3 real positions
  const auto out = luong_attention(g, g.leaf(ad::Tensor({batch, hq}, randn(batch * hq, rng))),
                                   g.leaf(ad::Tensor({batch, len, hs}, states)), mask, p);
  const auto& alpha = g.value(out.alpha);
  for (std::size_t s = 0; s < len; ++s) {
    EXPECT_NEAR(alpha[s], 1.0 / len, 1e-6);
    EXPECT_NEAR(alpha[len + s], s < 3 ? 1.0 / 3 : 0.0, 1e-6);
  }
  for (std::size_t j = 0; j < hs; ++j) {
    double mean = 0.0;
    for (std::size_t s = 0; s < 3; ++s) mean += states[(len + s) * hs + j] / 3.0;
    EXPECT_NEAR(g.value(out.context)[hs + j], mean, 1e-5);
  }
}

TEST(Attention, MaskedWeightsSumToOne) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t batch = 1 + rng.index(3), len = 1 + rng.index(6), hq = 2, hs = 3, k = 2;
    ad::Graph g;
    const AttentionParams p{g.leaf(ad::Tensor({hq + hs, k}, randn((hq + hs) * k, rng))),
                            g.leaf(ad::Tensor({k}, randn(k, rng)))};
    auto mask = std::make_shared<std::vector<std::uint8_t>>(batch * len, 0);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t real = 1 + rng.index(len);
      for (std::size_t s = 0; s < real; ++s) (*mask)[b * len + s] = 1;
    }
    const auto out = luong_attention(g, g.leaf(ad::Tensor({batch, hq}, randn(batch * hq, rng))),
                                     g.leaf(ad::Tensor({batch, len, hs}, randn(batch * len * hs, rng))),
                                     mask, p);
    for (std::size_t b = 0; b < batch; ++b) {
      double total = 0.0;
      for (std::size_t s = 0; s < len; ++s) {
        const float a = g.value(out.alpha)[b * len + s];
        if (!(*mask)[b * len + s]) {
          EXPECT_EQ(a, 0.0f);
        }
        total += a;
      }
      EXPECT_NEAR(total, 1.0, 1e-5);
    }
  }
}

TEST(Attention, FullyMaskedRowRejected) {
  ad::Graph g;
  const AttentionParams p{g.leaf(ad::Tensor::zeros({4, 2})), g.leaf(ad::Tensor::zeros({2}))};
  auto mask = std::make_shared<std::vector<std::uint8_t>>(3, 0);
  EXPECT_THROW(luong_attention(g, g.leaf(ad::Tensor::zeros({1, 2})), g.leaf(ad::Tensor::zeros({1, 3, 2})),
                               mask, p),
               std::invalid_argument);
}

TEST(GruSeq2Seq, PaddedBatchMatchesSingleEncoding) {
  const auto vocab = small_vocab();
  const GruSeq2Seq m(small_config(), 4);
  const std::vector<model::Example> pair = {make_example("a b", "a b", vocab),
                                            make_example("c d e f a", "c", vocab)};
  for (std::size_t which = 0; which < 2; ++which) {
    ad::Graph g1, g2;
    const model::BoundParams p1(g1, m.params(), false), p2(g2, m.params(), false);
    const auto alone = m.encode(g1, p1, std::span<const model::Example>(&pair[which], 1));
    const auto both = m.encode(g2, p2, pair);
    const std::size_t hid = m.config().hidden_dim;
    for (std::size_t l = 0; l < m.config().layers; ++l) {
      const auto& a = g1.value(alone.final_hidden[l]);
      const auto& b = g2.value(both.final_hidden[l]);
      for (std::size_t j = 0; j < hid; ++j) EXPECT_NEAR(a[j], b[which * hid + j], 1e-6);
    }
  }
}

TEST(GruSeq2Seq, BatchLossIsTokenWeightedMeanOfSingles) {
  const auto vocab = small_vocab();
  const GruSeq2Seq m(small_config(), 7);
  const std::vector<model::Example> pair = {make_example("a b", "a b c", vocab),
                                            make_example("c d e f a", "d", vocab)};
  double weighted = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : pair) {
    ad::Graph g;
    const model::BoundParams p(g, m.params(), false);
    const auto r = m.loss(g, p, std::span<const model::Example>(&ex, 1));
    weighted += g.value(r.loss)[0] * r.total;
    tokens += r.total;
  }
  ad::Graph g;
  const model::BoundParams p(g, m.params(), false);
  const auto r = m.loss(g, p, pair);
  EXPECT_EQ(r.total, tokens);
  EXPECT_NEAR(g.value(r.loss)[0], weighted / tokens, 1e-5);
}

TEST(GruSeq2Seq, ParameterNamesMatchStore) {
  for (bool vis : {false, true}) {
    const GruSeq2Seq m(small_config(vis), 1);
    EXPECT_EQ(m.params().names(), GruSeq2Seq::parameter_names(m.config()));
  }
}

TEST(GruSeq2Seq, GenerationTerminatesWithinOutputLength) {
  const auto vocab = small_vocab();
  const GruSeq2Seq m(small_config(), 13);
  const auto in = text::encode("a b c", text::Role::Input, vocab);
  for (auto mode : {decoding::Mode::Greedy, decoding::Mode::Beam}) {
    decoding::DecodeOptions opt;
    opt.mode = mode;
    opt.beam_width = 3;
    const auto out = m.generate(in, nullptr, opt);
    EXPECT_LE(out.true_length, text::kOutputLength);
    EXPECT_EQ(out.ids.size(), text::kOutputLength);
    EXPECT_EQ(out.ids[0], text::kBos);
  }
}

TEST(GruSeq2Seq, VisualVariantRequiresFeatures) {
  const auto vocab = small_vocab();
  const GruSeq2Seq m(small_config(true), 2);
  const auto in = text::encode("a b", text::Role::Input, vocab);
  EXPECT_THROW(m.generate(in, nullptr, {}), std::invalid_argument);
  const std::vector<float> wrong(5, 0.1f);
  EXPECT_THROW(m.generate(in, &wrong, {}), ad::ShapeError);
  const std::vector<float> grid(6, 0.1f);
  EXPECT_NO_THROW(m.generate(in, &grid, {}));
}

// Toy step function: log-probabilities depend on the prefix through a hash.
namespace {

struct ToyLm {
  std::size_t vocab = 3;
  std::uint64_t salt = 0;

  std::vector<float> log_probs(const std::vector<std::int32_t>& prefix) const {
    std::uint64_t h = mix_seed(salt, prefix.size());
    for (auto t : prefix) h = mix_seed(h, static_cast<std::uint64_t>(t) + 1);
    Rng rng(h);
    std::vector<double> raw(vocab);
    double z = 0.0;
    for (auto& r : raw) z += (r = std::exp(2.0 * rng.normal()));
    std::vector<float> out(vocab);
    for (std::size_t i = 0; i < vocab; ++i) out[i] = static_cast<float>(std::log(raw[i] / z));
    return out;
  }

  auto step() const {
    return [this](const std::vector<std::int32_t>& prefix, std::int32_t tok) {
      auto next = prefix;
      next.push_back(tok);
      return std::make_pair(next, log_probs(next));
    };
  }
};

}  // namespace

TEST(Decoding, BeamWidthOneEqualsGreedy) {
  for (std::uint64_t salt = 0; salt < 50; ++salt) {
    ToyLm lm{4, salt};
    decoding::DecodeOptions greedy;
    greedy.max_len = 8;
    auto beam = greedy;
    beam.mode = decoding::Mode::Beam;
    beam.beam_width = 1;
    const std::vector<std::int32_t> start;
    EXPECT_EQ(decoding::decode(start, 1, 2, lm.step(), greedy), decoding::decode(start, 1, 2, lm.step(), beam));
  }
}

TEST(Decoding, WideBeamFindsBruteForceOptimum) {
  const std::int32_t eos = 2;
  for (std::uint64_t salt = 0; salt < 30; ++salt) {
    ToyLm lm{3, salt};
    const std::size_t max_new = 4;
    double best = -1e300;
    std::vector<std::int32_t> best_seq;
    std::function<void(std::vector<std::int32_t>, std::vector<std::int32_t>, double)> search =
        [&](std::vector<std::int32_t> prefix, std::vector<std::int32_t> gen, double score) {
          const auto lp = lm.log_probs(prefix);
          for (std::int32_t t = 0; t < 3; ++t) {
            auto p2 = prefix;
            p2.push_back(t);
            auto g2 = gen;
            g2.push_back(t);
            const double s = score + lp[static_cast<std::size_t>(t)];
            if (t == eos || g2.size() >= max_new) {
              if (s > best) {
                best = s;
                best_seq = g2;
              }
            } else {
              search(p2, g2, s);
            }
          }
        };
    search({1}, {}, 0.0);
    decoding::DecodeOptions opt;
    opt.mode = decoding::Mode::Beam;
    opt.beam_width = 81;
    opt.max_len = max_new + 1;
    EXPECT_EQ(decoding::decode(std::vector<std::int32_t>{}, 1, eos, lm.step(), opt), best_seq);
  }
}

TEST(Decoding, GreedyStopsAtEosOrLimit) {
  auto always = [](std::int32_t tok) {
    return [tok](int s, std::int32_t) {
      std::vector<float> lp(4, -5.0f);
      lp[static_cast<std::size_t>(tok)] = 0.0f;
      return std::make_pair(s + 1, lp);
    };
  };
  decoding::DecodeOptions opt;
  opt.max_len = 6;
  EXPECT_EQ(decoding::decode(0, 1, 2, always(2), opt), (std::vector<std::int32_t>{2}));
  EXPECT_EQ(decoding::decode(0, 1, 2, always(3), opt).size(), 5u);
  opt.max_len = 1;
  EXPECT_THROW(decoding::decode(0, 1, 2, always(3), opt), std::invalid_argument);
}
