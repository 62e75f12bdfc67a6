#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "vqr/text.hpp"

using namespace vqr;
using namespace vqr::text;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("vqr_text_" + name)).string();
}

// Upper tail of the chi-square distribution via the Wilson-Hilferty cube
// root normal approximation.
double chi_square_p_value(double stat, double df) {
  const double z = (std::cbrt(stat / df) - (1.0 - 2.0 / (9.0 * df))) / std::sqrt(2.0 / (9.0 * df));
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

}  // namespace

TEST(Tokenize, LowercasesAndDetachesPunctuation) {
  EXPECT_EQ(tokenize("What wood?"), (std::vector<std::string>{"what", "wood", "?"}));
  EXPECT_EQ(tokenize("Love it!! Nice, really."),
            (std::vector<std::string>{"love", "it", "!", "!", "nice", ",", "really", "."}));
  EXPECT_TRUE(tokenize("   ").empty());
}

TEST(BuildVocab, FrequencyOrderWithSpecialsFirst) {
  const auto v = build_vocab({"a a b"}, 7);
  ASSERT_EQ(v.size(), 7u);
  EXPECT_EQ(v.word(kPad), "<pad>");
  EXPECT_EQ(v.word(kSep), "<sep>");
  EXPECT_EQ(v.id("a"), 5);
  EXPECT_EQ(v.id("b"), 6);
}

TEST(BuildVocab, CapDropsRarerWords) {
  const auto v = build_vocab({"x y", "y"}, 6);
  EXPECT_EQ(v.size(), 6u);
  EXPECT_TRUE(v.contains("y"));
  EXPECT_FALSE(v.contains("x"));
}

TEST(BuildVocab, TiesBreakLexicographically) {
  const auto v = build_vocab({"pear apple fig"}, 7);
  EXPECT_EQ(v.word(5), "apple");
  EXPECT_EQ(v.word(6), "fig");
}

TEST(BuildVocab, RejectsEmptyCorpusAndTinyCap) {
  EXPECT_THROW(build_vocab({}, 10), std::invalid_argument);
  EXPECT_THROW(build_vocab({"a"}, 4), std::invalid_argument);
}

TEST(Encode, EmptyTextIsBosEos) {
  const Vocab v;
  const auto s = encode("", Role::Input, v);
  ASSERT_EQ(s.ids.size(), 30u);
  EXPECT_EQ(s.true_length, 2u);
  EXPECT_EQ(s.ids[0], kBos);
  EXPECT_EQ(s.ids[1], kEos);
  for (std::size_t i = 2; i < 30; ++i) EXPECT_EQ(s.ids[i], kPad);
}

TEST(Encode, MapsWordsAndUnknowns) {
  const Vocab v({"<pad>", "<bos>", "<eos>", "<unk>", "<sep>", "what", "wood", "?"});
  const auto s = encode("What wood?", Role::Output, v);
  ASSERT_EQ(s.ids.size(), 50u);
  EXPECT_EQ(s.content(), (std::vector<std::int32_t>{kBos, 5, 6, 7, kEos}));
  const auto u = encode("what oak ?", Role::Input, v);
  EXPECT_EQ(u.ids[2], kUnk);
  EXPECT_EQ(decode_tokens(u, v), "what <unk> ?");
}

TEST(Encode, TruncationKeepsEos) {
  std::string text;
  for (int i = 0; i < 40; ++i) text += "w" + std::to_string(i) + " ";
  const auto s = encode(text, Role::Input, Vocab());
  ASSERT_EQ(s.ids.size(), 30u);
  EXPECT_EQ(s.true_length, 30u);
  EXPECT_EQ(s.ids.back(), kEos);
  const auto o = encode(text + text, Role::Output, Vocab());
  EXPECT_EQ(o.ids.size(), 50u);
  EXPECT_EQ(o.ids.back(), kEos);
}

TEST(Decode, RoundTripsInVocabText) {
  const std::vector<std::string> corpus = {"love this ! what wood is this ?", "so pretty , where is it from ?"};
  const auto v = build_vocab(corpus, 100);
  for (const auto& c : corpus) EXPECT_EQ(decode_tokens(encode(c, Role::Output, v), v), c);
  EXPECT_EQ(decode_tokens(encode("", Role::Input, v), v), "");
  EXPECT_THROW(decode_tokens(std::vector<std::int32_t>{kBos, 999}, v), std::out_of_range);
}

TEST(SplitSentences, KeepsTerminatorRuns) {
  EXPECT_EQ(split_sentences("Love this!! What wood is that? ok"),
            (std::vector<std::string>{"Love this!!", "What wood is that?", "ok"}));
}

TEST(ConstructTriples, AppliesFilterAndKeySentenceRule) {
  const std::vector<RawQA> raw = {
      {"1", "img1", "Love this! What wood is that?", 2},
      {"2", "img2", "What wood?", 3},
      {"3", "img3", "Nice. Very nice.", 1},
      {"4", "img4", "Great room! Where is the rug from?", 0},
  };
  const auto r = construct_triples(raw);
  ASSERT_EQ(r.triples.size(), 2u);
  EXPECT_EQ(r.dropped, 2u);
  EXPECT_EQ(r.triples[0].bland, "What wood is that?");
  EXPECT_EQ(r.triples[0].attractive, "Love this! What wood is that?");
  EXPECT_EQ(r.triples[0].feature_ref, "img1");
  EXPECT_EQ(r.triples[1].bland, "Nice.");
  for (const auto& t : r.triples) EXPECT_NE(t.attractive.find(t.bland), std::string::npos);
}

TEST(Split, FourToOneDisjointAndDeterministic) {
  const auto corpus = synth_generate(4000, 8, 3).triples();
  const auto a = split(corpus, 9);
  const auto b = split(corpus, 9);
  EXPECT_EQ(a.train.size(), 3200u);
  EXPECT_EQ(a.test.size(), 800u);
  std::set<std::string> train_ids, test_ids;
  for (const auto& t : a.train) train_ids.insert(t.id);
  for (const auto& t : a.test) test_ids.insert(t.id);
  EXPECT_EQ(train_ids.size() + test_ids.size(), corpus.size());
  for (const auto& id : test_ids) EXPECT_EQ(train_ids.count(id), 0u);
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].id, b.train[i].id);
  const auto c = split(corpus, 10);
  bool differs = false;
  for (std::size_t i = 0; i < a.test.size() && !differs; ++i) differs = a.test[i].id != c.test[i].id;
  EXPECT_TRUE(differs);
}

TEST(Split, SmallSetsAndRejection) {
  const auto five = synth_generate(5, 2, 1).triples();
  const auto s = split(five, 0);
  EXPECT_EQ(s.train.size(), 4u);
  EXPECT_EQ(s.test.size(), 1u);
  EXPECT_THROW(split(synth_generate(4, 2, 1).triples(), 0), std::invalid_argument);
  const auto seven = split(synth_generate(7, 2, 1).triples(), 0);
  EXPECT_EQ(seven.train.size(), 6u);
}

TEST(Synth, KnownExampleMatchesGrammar) {
  EXPECT_EQ(synth_detail_suffix(3), "what is the stain ?");
  EXPECT_EQ(synth_emotion_prefixes()[synth_emotion_index("what wood is this ?")], "love this !");
  const auto corpus = synth_generate(3000, 8, 42);
  bool seen = false;
  for (const auto& e : corpus.examples) {
    if (e.triple.bland == "what wood is this ?" && e.detail_class == 3) {
      EXPECT_EQ(e.triple.attractive, "love this ! what wood is this ? what is the stain ?");
      seen = true;
    }
  }
  EXPECT_TRUE(seen);
}

TEST(Synth, DeterministicPerSeedAndFeaturesEncodeDetail) {
  const auto a = synth_generate(200, 8, 5, 32);
  const auto b = synth_generate(200, 8, 5, 32);
  for (std::size_t i = 0; i < a.examples.size(); ++i) {
    EXPECT_EQ(a.examples[i].triple.attractive, b.examples[i].triple.attractive);
    const auto& f = a.features.at(a.examples[i].triple.feature_ref);
    EXPECT_EQ(f, b.features.at(b.examples[i].triple.feature_ref));
    std::size_t best = 0;
    for (std::size_t j = 1; j < f.size(); ++j) {
      if (f[j] > f[best]) best = j;
    }
    EXPECT_EQ(best, a.examples[i].detail_class);
  }
  EXPECT_THROW(synth_generate(10, 1, 0), std::invalid_argument);
  EXPECT_THROW(synth_generate(10, 65, 0), std::invalid_argument);
}

TEST(Synth, DetailMarginalIsUniform) {
  const auto corpus = synth_generate(10000, 8, 11, 8);
  std::vector<std::size_t> counts(8, 0);
  for (const auto& e : corpus.examples) ++counts[e.detail_class];
  for (auto c : counts) EXPECT_NEAR(static_cast<double>(c) / 10000.0, 1.0 / 8.0, 0.05 / 8.0);
}

TEST(Synth, DetailIndependentOfBlandText) {
  const std::size_t k = 8;
  const auto corpus = synth_generate(10000, k, 23, k);
  std::map<std::string, std::vector<double>> table;
  std::vector<double> col(k, 0.0);
  for (const auto& e : corpus.examples) {
    auto& row = table[e.triple.bland];
    row.resize(k, 0.0);
    row[e.detail_class] += 1.0;
    col[e.detail_class] += 1.0;
  }
  const double n = static_cast<double>(corpus.examples.size());
  double stat = 0.0;
  for (const auto& [bland, row] : table) {
    double row_total = 0.0;
    for (double x : row) row_total += x;
    for (std::size_t d = 0; d < k; ++d) {
      const double expected = row_total * col[d] / n;
      stat += (row[d] - expected) * (row[d] - expected) / expected;
    }
  }
  const double df = static_cast<double>((table.size() - 1) * (k - 1));
  EXPECT_GT(chi_square_p_value(stat, df), 0.01) << "chi2=" << stat << " df=" << df;
}

TEST(CopyCorpus, InputEqualsOutputWithinLimits) {
  const auto c = copy_corpus(100, 50, 10, 1);
  ASSERT_EQ(c.size(), 100u);
  std::set<std::string> words;
  for (const auto& t : c) {
    EXPECT_EQ(t.bland, t.attractive);
    const auto toks = tokenize(t.bland);
    EXPECT_GE(toks.size(), 1u);
    EXPECT_LE(toks.size(), 10u);
    words.insert(toks.begin(), toks.end());
  }
  EXPECT_LE(words.size(), 50u);
}

TEST(JsonLines, TriplesAndRawRoundTrip) {
  const auto triples = synth_generate(20, 4, 2).triples();
  const auto path = temp_path("triples.jsonl");
  write_triples(path, triples);
  const auto back = read_triples(path);
  ASSERT_EQ(back.size(), triples.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].id, triples[i].id);
    EXPECT_EQ(back[i].attractive, triples[i].attractive);
  }
  const std::vector<RawQA> raw = {{"r1", "img", "A? B.", 3}};
  const auto rpath = temp_path("raw.jsonl");
  write_raw_qa(rpath, raw);
  const auto rb = read_raw_qa(rpath);
  ASSERT_EQ(rb.size(), 1u);
  EXPECT_EQ(rb[0].response_count, 3);
  EXPECT_EQ(rb[0].question_text, "A? B.");
  const auto v = build_vocab({"a b b"}, 10);
  EXPECT_EQ(vocab_from_json(vocab_to_json(v)).words(), v.words());
}
