#pragma once

// Corpus BLEU, ROUGE-1/2/L, model scoring over a test split, and
// majority-vote aggregation of pairwise human judgments.

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "vqr/features.hpp"
#include "vqr/training.hpp"

namespace vqr::metrics {

using Tokens = std::vector<std::string>;

enum class Smoothing { None, AddOne };
Smoothing parse_smoothing(const std::string& name);

struct BleuStats {
  std::vector<std::size_t> matches;  // clipped n-gram matches per order
  std::vector<std::size_t> totals;   // candidate n-grams per order
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
};

BleuStats bleu_stats(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
                     std::size_t max_n = 4);
double bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references, std::size_t max_n = 4,
            Smoothing smoothing = Smoothing::None);

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

enum class RougeVariant { One, Two, L };
PRF rouge(const Tokens& candidate, const Tokens& reference, RougeVariant variant);

std::size_t lcs_length(const Tokens& a, const Tokens& b);

struct ScoreReport {
  double bleu = 0.0;
  PRF rouge1, rouge2, rougeL;  // means over examples
  std::size_t n_examples = 0;
};

nlohmann::ordered_json to_json(const ScoreReport& r);

// Scores detokenized strings; both are tokenized with the pipeline tokenizer.
ScoreReport score_texts(const std::vector<std::string>& candidates, const std::vector<std::string>& references,
                        Smoothing smoothing = Smoothing::None);

// Decoded model outputs for every example, in order.
std::vector<std::string> generate_texts(const model::Seq2SeqModel& m, const text::Vocab& vocab,
                                        const std::vector<text::TripleExample>& test_set,
                                        const features::FeatureSet* features,
                                        const decoding::DecodeOptions& options);

ScoreReport evaluate_model(const training::Checkpoint& cp, const std::vector<text::TripleExample>& test_set,
                           const features::FeatureSet* features, const decoding::DecodeOptions& options,
                           Smoothing smoothing = Smoothing::None);

enum class Choice { A, B };

struct Judgment {
  std::string id;
  std::vector<Choice> votes;
};

struct PreferenceReport {
  std::size_t n_items = 0;
  std::size_t n_prefer_a = 0;
  double rate_a = 0.0;
};

PreferenceReport aggregate_preferences(const std::vector<Judgment>& judgments);
nlohmann::ordered_json to_json(const PreferenceReport& r);

std::vector<Judgment> read_judgments(const std::string& path);
void write_judgments(const std::string& path, const std::vector<Judgment>& judgments);

}  // namespace vqr::metrics
