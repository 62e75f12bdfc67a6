#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

#include "vqr/metrics.hpp"
#include "vqr/rng.hpp"

using namespace vqr;
using namespace vqr::metrics;

namespace {

Tokens toks(const std::string& s) { return text::tokenize(s); }

// Clipped n-gram precision by direct counting.
double clipped_precision(const Tokens& cand, const Tokens& ref, std::size_t n) {
  std::map<Tokens, int> rc, cc;
  for (std::size_t i = 0; i + n <= ref.size(); ++i) rc[Tokens(ref.begin() + i, ref.begin() + i + n)]++;
  for (std::size_t i = 0; i + n <= cand.size(); ++i) cc[Tokens(cand.begin() + i, cand.begin() + i + n)]++;
  int hit = 0, total = 0;
  for (const auto& [g, c] : cc) {
    hit += std::min(c, rc.count(g) ? rc.at(g) : 0);
    total += c;
  }
  return total ? double(hit) / total : 0.0;
}

// Exponential search over subsequences of a.
std::size_t brute_lcs(const Tokens& a, const Tokens& b) {
  std::size_t best = 0;
  for (std::uint32_t mask = 0; mask < (1u << a.size()); ++mask) {
    Tokens sub;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (mask & (1u << i)) sub.push_back(a[i]);
    }
    std::size_t j = 0;
    for (const auto& t : b) {
      if (j < sub.size() && sub[j] == t) ++j;
    }
    if (j == sub.size()) best = std::max(best, sub.size());
  }
  return best;
}

Tokens random_tokens(Rng& rng, std::size_t max_len, std::size_t vocab) {
  Tokens t(rng.index(max_len + 1));
  for (auto& x : t) x = "w" + std::to_string(rng.index(vocab));
  return t;
}

std::vector<Judgment> fixture(std::size_t items, std::size_t prefer_a) {
  std::vector<Judgment> out;
  for (std::size_t i = 0; i < items; ++i) {
    Judgment j;
    j.id = "q" + std::to_string(i);
    // Three raters, never unanimous, so every item exercises the majority rule.
    j.votes = i < prefer_a ? std::vector<Choice>{Choice::A, Choice::B, Choice::A}
                           : std::vector<Choice>{Choice::B, Choice::A, Choice::B};
    out.push_back(j);
  }
  return out;
}

// Copies its input into the output role: an exact oracle on a copy corpus.
class CopyModel : public model::Seq2SeqModel {
 public:
  model::ModelKind kind() const override { return model::ModelKind::Baseline; }
  const model::ParamStore& params() const override { return params_; }
  model::ParamStore& params() override { return params_; }
  model::LossResult loss(ad::Graph&, const model::BoundParams&, std::span<const model::Example>) const override {
    throw std::logic_error("not trainable");
  }
  text::TokenSequence generate(const text::TokenSequence& input, const std::vector<float>*,
                               const decoding::DecodeOptions&) const override {
    auto content = input.content();
    std::vector<std::int32_t> gen(content.begin() + 1, content.end());
    return model::to_output_sequence(gen);
  }

 private:
  model::ParamStore params_;
};

}  // namespace

TEST(Bleu, IdentityIsOne) {
  const std::vector<Tokens> c = {toks("what wood is this ?"), toks("love this ! is it oak ?")};
  EXPECT_DOUBLE_EQ(bleu(c, c), 1.0);
  EXPECT_DOUBLE_EQ(bleu(c, c, 4, Smoothing::AddOne), 1.0);
}

TEST(Bleu, ClippedUnigramPrecisionFixture) {
  const auto cand = toks("the the the the the the the"), ref = toks("the cat is on the mat");
  const auto s = bleu_stats({cand}, {ref});
  ASSERT_EQ(s.matches.size(), 4u);
  EXPECT_NEAR(double(s.matches[0]) / s.totals[0], 2.0 / 7.0, 1e-12);
  EXPECT_NEAR(double(s.matches[0]) / s.totals[0], clipped_precision(cand, ref, 1), 1e-12);
  EXPECT_EQ(s.candidate_length, 7u);
  EXPECT_EQ(s.reference_length, 6u);
  EXPECT_EQ(bleu({cand}, {ref}), 0.0);
}

TEST(Bleu, StatsMatchCountingOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto c = random_tokens(rng, 9, 4), r = random_tokens(rng, 9, 4);
    const auto s = bleu_stats({c}, {r});
    for (std::size_t n = 1; n <= 4; ++n) {
      const double p = s.totals[n - 1] ? double(s.matches[n - 1]) / s.totals[n - 1] : 0.0;
      EXPECT_NEAR(p, clipped_precision(c, r, n), 1e-12);
    }
  }
}

TEST(Bleu, CorpusFormulaWithBrevityPenalty) {
  const std::vector<Tokens> c = {toks("a b c d"), toks("e f g")};
  const std::vector<Tokens> r = {toks("a b c d e"), toks("e f g h")};
  // Matches per order: 7/7, 5/5, 3/3, 1/1; c = 7, r = 9.
  EXPECT_NEAR(bleu(c, r), std::exp(1.0 - 9.0 / 7.0), 1e-12);
}

TEST(Bleu, AddOneSmoothingAppliesAboveUnigrams) {
  const std::vector<Tokens> c = {toks("a x b y")}, r = {toks("a b c d")};
  EXPECT_EQ(bleu(c, r), 0.0);
  // p1 = 2/4; p2..p4 = (0+1)/(3+1), (0+1)/(2+1), (0+1)/(1+1); BP = 1.
  const double expect = std::exp((std::log(0.5) + std::log(0.25) + std::log(1.0 / 3) + std::log(0.5)) / 4.0);
  EXPECT_NEAR(bleu(c, r, 4, Smoothing::AddOne), expect, 1e-12);
  EXPECT_EQ(parse_smoothing("add-one"), Smoothing::AddOne);
  EXPECT_THROW(parse_smoothing("laplace"), std::invalid_argument);
}

TEST(Bleu, DegenerateInputs) {
  EXPECT_EQ(bleu({Tokens{}, Tokens{}}, {toks("a b"), toks("c")}), 0.0);
  EXPECT_THROW(bleu({}, {}), std::invalid_argument);
  EXPECT_THROW(bleu({toks("a")}, {toks("a"), toks("b")}), std::invalid_argument);
}

TEST(Bleu, InvariantUnderRelabeling) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Tokens> c, r;
    for (int i = 0; i < 4; ++i) {
      c.push_back(random_tokens(rng, 8, 3));
      r.push_back(random_tokens(rng, 8, 3));
      if (r.back().empty()) r.back().push_back("w0");
    }
    auto relabel = [](std::vector<Tokens> v) {
      for (auto& t : v) {
        for (auto& w : t) w = "z" + w;
      }
      return v;
    };
    EXPECT_EQ(bleu(c, r, 4, Smoothing::AddOne), bleu(relabel(c), relabel(r), 4, Smoothing::AddOne));
    EXPECT_EQ(rouge(c[0], r[0], RougeVariant::L).f1, rouge(relabel(c)[0], relabel(r)[0], RougeVariant::L).f1);
  }
}

TEST(Bleu, AppendingMatchingNgramNeverLowersShortCandidate) {
  const auto ref = toks("is this oak or maple wood ? love the grain");
  for (std::size_t len = 1; len < ref.size(); ++len) {
    const Tokens shorter(ref.begin(), ref.begin() + len);
    const Tokens longer(ref.begin(), ref.begin() + len + 1);
    EXPECT_GE(bleu({longer}, {ref}, 4, Smoothing::AddOne), bleu({shorter}, {ref}, 4, Smoothing::AddOne));
    EXPECT_GE(bleu({longer}, {ref}), bleu({shorter}, {ref}));
  }
}

TEST(Rouge, LcsFixture) {
  const auto r = rouge(toks("a c d"), toks("a b c d"), RougeVariant::L);
  EXPECT_EQ(lcs_length(toks("a c d"), toks("a b c d")), 3u);
  EXPECT_NEAR(r.precision, 1.0, 1e-12);
  EXPECT_NEAR(r.recall, 0.75, 1e-12);
  EXPECT_NEAR(r.f1, 2 * 0.75 / 1.75, 1e-6);
  EXPECT_NEAR(r.f1, 0.857, 5e-4);
}

TEST(Rouge, LcsMatchesBruteForce) {
  Rng rng(7);
  for (int trial = 0; trial < 300; ++trial) {
    const auto a = random_tokens(rng, 10, 3), b = random_tokens(rng, 10, 3);
    EXPECT_EQ(lcs_length(a, b), brute_lcs(a, b));
  }
}

TEST(Rouge, NgramOverlapFixture) {
  const auto r1 = rouge(toks("the cat the cat"), toks("the cat sat"), RougeVariant::One);
  EXPECT_NEAR(r1.precision, 0.5, 1e-12);
  EXPECT_NEAR(r1.recall, 2.0 / 3.0, 1e-12);
  const auto r2 = rouge(toks("the cat the cat"), toks("the cat sat"), RougeVariant::Two);
  EXPECT_NEAR(r2.precision, 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(r2.recall, 0.5, 1e-12);
  EXPECT_NEAR(r2.f1, 0.4, 1e-12);
}

TEST(Rouge, PerfectF1ExactlyWhenEqual) {
  Rng rng(8);
  for (int trial = 0; trial < 300; ++trial) {
    const auto a = random_tokens(rng, 6, 2), b = random_tokens(rng, 6, 2);
    if (b.empty()) continue;
    EXPECT_EQ(rouge(a, b, RougeVariant::L).f1 == 1.0, a == b);
  }
  for (auto v : {RougeVariant::One, RougeVariant::Two, RougeVariant::L}) {
    const auto same = rouge(toks("a b c"), toks("a b c"), v);
    EXPECT_EQ(same.f1, 1.0);
    const auto empty = rouge({}, toks("a b c"), v);
    EXPECT_EQ(empty.precision + empty.recall + empty.f1, 0.0);
    EXPECT_THROW(rouge(toks("a"), {}, v), std::invalid_argument);
  }
}

TEST(Scoring, IdentityScoresOne) {
  const std::vector<std::string> refs = {"what wood is this ?", "love it ! is this oak ?"};
  const auto r = score_texts(refs, refs);
  EXPECT_EQ(r.n_examples, 2u);
  EXPECT_DOUBLE_EQ(r.bleu, 1.0);
  EXPECT_DOUBLE_EQ(r.rouge1.f1, 1.0);
  EXPECT_DOUBLE_EQ(r.rouge2.f1, 1.0);
  EXPECT_DOUBLE_EQ(r.rougeL.f1, 1.0);
  const auto j = to_json(r);
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"n_examples", "bleu", "rouge1", "rouge2", "rougeL", "rouge_headline"}));
  EXPECT_EQ(j["rouge_headline"], "f1");
}

TEST(Scoring, CopyOracleModelScoresOne) {
  const auto corpus = text::copy_corpus(30, 10, 6, 2);
  std::vector<std::string> words;
  for (const auto& t : corpus) words.push_back(t.bland);
  const auto vocab = text::build_vocab(words, 100);
  const CopyModel m;
  const auto out = generate_texts(m, vocab, corpus, nullptr, {});
  std::vector<std::string> refs;
  for (const auto& t : corpus) refs.push_back(t.attractive);
  EXPECT_EQ(out, refs);
  EXPECT_DOUBLE_EQ(score_texts(out, refs).bleu, 1.0);
}

TEST(Scoring, MissingFeatureNamesExample) {
  training::TrainConfig c;
  c.kind = model::ModelKind::TransformerVis;
  c.d_model = 4;
  c.heads = 1;
  c.tf_layers = 1;
  c.ffn_dim = 4;
  c.feature_rows = 1;
  c.feature_cols = 3;
  training::Checkpoint cp;
  cp.config = c;
  cp.vocab = text::Vocab({"<pad>", "<bos>", "<eos>", "<unk>", "<sep>", "a"});
  cp.params = training::build_model(c, cp.vocab.size())->params();
  features::FeatureSet fs;
  fs.rows = 1;
  fs.cols = 3;
  fs.entries["img-1"] = {0.1f, 0.2f, 0.3f};
  const std::vector<text::TripleExample> test = {{"ok-1", "img-1", "a", "a"}, {"lost-2", "img-2", "a", "a"}};
  try {
    evaluate_model(cp, test, &fs, {});
    FAIL() << "expected FeatureError";
  } catch (const features::FeatureError& e) {
    EXPECT_NE(std::string(e.what()).find("lost-2"), std::string::npos);
  }
}

TEST(Preferences, MajorityRuleOnSmallItems) {
  const std::vector<Judgment> j = {{"x", {Choice::A, Choice::A, Choice::B}}, {"y", {Choice::B}},
                                   {"z", {Choice::B, Choice::A, Choice::A, Choice::B, Choice::A}}};
  const auto r = aggregate_preferences(j);
  EXPECT_EQ(r.n_items, 3u);
  EXPECT_EQ(r.n_prefer_a, 2u);
  EXPECT_NEAR(r.rate_a, 2.0 / 3.0, 1e-12);
}

TEST(Preferences, RateIsMajorityCountOverItems) {
  const auto high = aggregate_preferences(fixture(767, 652));
  EXPECT_EQ(high.n_items, 767u);
  EXPECT_EQ(high.n_prefer_a, 652u);
  EXPECT_DOUBLE_EQ(high.rate_a, 652.0 / 767.0);
  const auto low = aggregate_preferences(fixture(767, 410));
  EXPECT_EQ(low.n_prefer_a, 410u);
  EXPECT_DOUBLE_EQ(low.rate_a, 410.0 / 767.0);
}

TEST(Preferences, RateIgnoresItemOrder) {
  auto items = fixture(101, 37);
  const double base = aggregate_preferences(items).rate_a;
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    rng.shuffle(items);
    EXPECT_EQ(aggregate_preferences(items).rate_a, base);
  }
}

TEST(Preferences, EvenVoteCountRejectedNamingItem) {
  auto items = fixture(5, 2);
  items[3].votes.push_back(Choice::A);
  try {
    aggregate_preferences(items);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find(items[3].id), std::string::npos);
  }
  EXPECT_THROW(aggregate_preferences({}), std::invalid_argument);
}

TEST(Preferences, JudgmentFileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / ("vqr_judg_" + std::to_string(::getpid()) + ".jsonl");
  const auto items = fixture(9, 4);
  write_judgments(path.string(), items);
  const auto back = read_judgments(path.string());
  ASSERT_EQ(back.size(), items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    EXPECT_EQ(back[i].id, items[i].id);
    EXPECT_EQ(back[i].votes, items[i].votes);
  }
  std::filesystem::remove(path);
}
