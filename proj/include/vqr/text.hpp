#pragma once

// Tokenization, vocabulary, fixed-length encoding, triple construction,
// train/test split and the synthetic rewriting corpus.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vqr/features.hpp"

namespace vqr::text {

inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kBos = 1;
inline constexpr std::int32_t kEos = 2;
inline constexpr std::int32_t kUnk = 3;
inline constexpr std::int32_t kSep = 4;
inline constexpr std::size_t kNumSpecials = 5;

inline constexpr std::size_t kInputLength = 30;
inline constexpr std::size_t kOutputLength = 50;
inline constexpr std::size_t kDefaultVocabCap = 5000;

enum class Role { Input, Output };

std::size_t role_length(Role role);

class Vocab {
 public:
  Vocab();  // specials only
  explicit Vocab(std::vector<std::string> words);  // words[0..4] must be the specials

  std::size_t size() const { return words_.size(); }
  std::int32_t id(std::string_view word) const;  // kUnk when absent
  bool contains(std::string_view word) const;
  const std::string& word(std::int32_t id) const;
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::int32_t> index_;
};

struct TokenSequence {
  std::vector<std::int32_t> ids;
  std::size_t true_length = 0;
  Role role = Role::Input;

  // ids[0, true_length)
  std::vector<std::int32_t> content() const {
    return {ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(true_length)};
  }
};

struct RawQA {
  std::string id;
  std::string image_ref;
  std::string question_text;
  std::int64_t response_count = 0;
};

struct TripleExample {
  std::string id;
  std::string feature_ref;
  std::string bland;
  std::string attractive;
};

// Lowercases, detaches ? ! . , into their own tokens and splits on whitespace.
std::vector<std::string> tokenize(std::string_view text);

Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t cap);

TokenSequence encode(std::string_view text, Role role, const Vocab& vocab);

// Tokens between BOS and the first EOS, specials removed, joined by spaces.
std::string decode_tokens(const std::vector<std::int32_t>& ids, const Vocab& vocab);
inline std::string decode_tokens(const TokenSequence& seq, const Vocab& vocab) {
  return decode_tokens(seq.ids, vocab);
}

// Splits on ?, !, . keeping each terminator run with its sentence.
std::vector<std::string> split_sentences(std::string_view text);

struct ConstructResult {
  std::vector<TripleExample> triples;
  std::size_t dropped = 0;
};

ConstructResult construct_triples(const std::vector<RawQA>& raw);

struct Split {
  std::vector<TripleExample> train;
  std::vector<TripleExample> test;
};

Split split(const std::vector<TripleExample>& data, std::uint64_t seed);

// Synthetic corpus: the emotion prefix is a function of the bland text and
// the detail suffix a function of the side feature only.
struct SynthExample {
  TripleExample triple;
  std::size_t detail_class = 0;
  std::size_t emotion_class = 0;
};

struct SynthCorpus {
  std::vector<SynthExample> examples;
  features::FeatureSet features;

  std::vector<TripleExample> triples() const;
};

inline constexpr std::size_t kDefaultSynthFeatureDim = 1000;
inline constexpr double kSynthFeatureNoise = 0.1;

SynthCorpus synth_generate(std::size_t n, std::size_t k_details, std::uint64_t seed,
                           std::size_t feature_dim = kDefaultSynthFeatureDim);

const std::vector<std::string>& synth_emotion_prefixes();
std::string synth_detail_suffix(std::size_t detail_class);
std::size_t synth_emotion_index(std::string_view bland);

// Copy task: bland == attractive, a random run of 1..max_len words drawn
// from `vocab` word types "c0" .. "c<vocab-1>".
std::vector<TripleExample> copy_corpus(std::size_t n, std::size_t vocab, std::size_t max_len, std::uint64_t seed);

// JSON-lines I/O.
std::vector<RawQA> read_raw_qa(const std::string& path);
std::vector<TripleExample> read_triples(const std::string& path);
void write_triples(const std::string& path, const std::vector<TripleExample>& triples);
void write_raw_qa(const std::string& path, const std::vector<RawQA>& raw);

std::string vocab_to_json(const Vocab& vocab);
Vocab vocab_from_json(const std::string& json_text);

}  // namespace vqr::text
