#include "vqr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

namespace vqr::metrics {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::map<std::vector<std::string>, std::size_t> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++counts[Tokens(t.begin() + i, t.begin() + i + n)];
  return counts;
}

std::size_t clipped_overlap(const Tokens& cand, const Tokens& ref, std::size_t n) {
  const auto c = ngram_counts(cand, n);
  const auto r = ngram_counts(ref, n);
  std::size_t overlap = 0;
  for (const auto& [gram, count] : c) {
    auto it = r.find(gram);
    if (it != r.end()) overlap += std::min(count, it->second);
  }
  return overlap;
}

PRF from_counts(std::size_t overlap, std::size_t cand_total, std::size_t ref_total) {
  PRF p;
  p.precision = cand_total ? static_cast<double>(overlap) / static_cast<double>(cand_total) : 0.0;
  p.recall = ref_total ? static_cast<double>(overlap) / static_cast<double>(ref_total) : 0.0;
  const double s = p.precision + p.recall;
  p.f1 = s > 0.0 ? 2.0 * p.precision * p.recall / s : 0.0;
  return p;
}

std::size_t ngram_total(std::size_t len, std::size_t n) { return len >= n ? len - n + 1 : 0; }

ordered_json prf_json(const PRF& p) {
  return ordered_json{{"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}};
}

Choice parse_choice(const std::string& s, const std::string& id) {
  if (s == "A") return Choice::A;
  if (s == "B") return Choice::B;
  throw std::invalid_argument("judgment '" + id + "': vote '" + s + "' is not A or B");
}

}  // namespace

Smoothing parse_smoothing(const std::string& name) {
  if (name == "none") return Smoothing::None;
  if (name == "add-one") return Smoothing::AddOne;
  throw std::invalid_argument("unknown smoothing '" + name + "' (expected none|add-one)");
}

BleuStats bleu_stats(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
                     std::size_t max_n) {
  if (candidates.empty()) throw std::invalid_argument("bleu: empty candidate list");
  if (candidates.size() != references.size()) {
    throw std::invalid_argument("bleu: " + std::to_string(candidates.size()) + " candidates for " +
                                std::to_string(references.size()) + " references");
  }
  if (max_n == 0) throw std::invalid_argument("bleu: max_n must be positive");
  BleuStats s;
  s.matches.assign(max_n, 0);
  s.totals.assign(max_n, 0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    s.candidate_length += candidates[i].size();
    s.reference_length += references[i].size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      s.matches[n - 1] += clipped_overlap(candidates[i], references[i], n);
      s.totals[n - 1] += ngram_total(candidates[i].size(), n);
    }
  }
  return s;
}

double bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references, std::size_t max_n,
            Smoothing smoothing) {
  const auto s = bleu_stats(candidates, references, max_n);
  if (s.candidate_length == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < max_n; ++n) {
    double num = static_cast<double>(s.matches[n]);
    double den = static_cast<double>(s.totals[n]);
    if (smoothing == Smoothing::AddOne && n > 0) {
      num += 1.0;
      den += 1.0;
    }
    if (num == 0.0 || den == 0.0) return 0.0;
    log_sum += std::log(num / den);
  }
  const double c = static_cast<double>(s.candidate_length);
  const double r = static_cast<double>(s.reference_length);
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

PRF rouge(const Tokens& candidate, const Tokens& reference, RougeVariant variant) {
  if (reference.empty()) throw std::invalid_argument("rouge: empty reference");
  switch (variant) {
    case RougeVariant::One:
      return from_counts(clipped_overlap(candidate, reference, 1), candidate.size(), reference.size());
    case RougeVariant::Two:
      return from_counts(clipped_overlap(candidate, reference, 2), ngram_total(candidate.size(), 2),
                         ngram_total(reference.size(), 2));
    case RougeVariant::L:
      return from_counts(lcs_length(candidate, reference), candidate.size(), reference.size());
  }
  return {};
}

ordered_json to_json(const ScoreReport& r) {
  ordered_json j;
  j["n_examples"] = r.n_examples;
  j["bleu"] = r.bleu;
  j["rouge1"] = prf_json(r.rouge1);
  j["rouge2"] = prf_json(r.rouge2);
  j["rougeL"] = prf_json(r.rougeL);
  j["rouge_headline"] = "f1";
  return j;
}

ScoreReport score_texts(const std::vector<std::string>& candidates, const std::vector<std::string>& references,
                        Smoothing smoothing) {
  if (candidates.size() != references.size() || candidates.empty()) {
    throw std::invalid_argument("score: need equally many candidates and references, at least one");
  }
  std::vector<Tokens> c, r;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    c.push_back(text::tokenize(candidates[i]));
    r.push_back(text::tokenize(references[i]));
  }
  ScoreReport rep;
  rep.n_examples = c.size();
  rep.bleu = bleu(c, r, 4, smoothing);
  auto accumulate = [](PRF& acc, const PRF& p) {
    acc.precision += p.precision;
    acc.recall += p.recall;
    acc.f1 += p.f1;
  };
  for (std::size_t i = 0; i < c.size(); ++i) {
    accumulate(rep.rouge1, rouge(c[i], r[i], RougeVariant::One));
    accumulate(rep.rouge2, rouge(c[i], r[i], RougeVariant::Two));
    accumulate(rep.rougeL, rouge(c[i], r[i], RougeVariant::L));
  }
  const double n = static_cast<double>(c.size());
  for (PRF* p : {&rep.rouge1, &rep.rouge2, &rep.rougeL}) {
    p->precision /= n;
    p->recall /= n;
    p->f1 /= n;
  }
  return rep;
}

std::vector<std::string> generate_texts(const model::Seq2SeqModel& m, const text::Vocab& vocab,
                                        const std::vector<text::TripleExample>& test_set,
                                        const features::FeatureSet* features,
                                        const decoding::DecodeOptions& options) {
  const auto examples = training::make_examples(test_set, vocab, features, m.kind());
  std::vector<std::string> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    out.push_back(text::decode_tokens(m.generate(ex.input, ex.feature, options), vocab));
  }
  return out;
}

ScoreReport evaluate_model(const training::Checkpoint& cp, const std::vector<text::TripleExample>& test_set,
                           const features::FeatureSet* features, const decoding::DecodeOptions& options,
                           Smoothing smoothing) {
  if (test_set.empty()) throw std::invalid_argument("evaluate: empty test set");
  const auto m = training::load_model(cp);
  const auto candidates = generate_texts(*m, cp.vocab, test_set, features, options);
  std::vector<std::string> references;
  for (const auto& t : test_set) references.push_back(t.attractive);
  return score_texts(candidates, references, smoothing);
}

PreferenceReport aggregate_preferences(const std::vector<Judgment>& judgments) {
  if (judgments.empty()) throw std::invalid_argument("aggregate_preferences: no judgments");
  PreferenceReport r;
  for (const auto& j : judgments) {
    if (j.votes.empty() || j.votes.size() % 2 == 0) {
      throw std::invalid_argument("judgment '" + j.id + "' has " + std::to_string(j.votes.size()) +
                                  " votes; an odd count is required");
    }
    const auto a = static_cast<std::size_t>(std::count(j.votes.begin(), j.votes.end(), Choice::A));
    if (2 * a > j.votes.size()) ++r.n_prefer_a;
  }
  r.n_items = judgments.size();
  r.rate_a = static_cast<double>(r.n_prefer_a) / static_cast<double>(r.n_items);
  return r;
}

ordered_json to_json(const PreferenceReport& r) {
  return ordered_json{{"n_items", r.n_items}, {"n_prefer_a", r.n_prefer_a}, {"rate_a", r.rate_a}};
}

std::vector<Judgment> read_judgments(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read judgments '" + path + "'");
  std::vector<Judgment> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      Judgment jd;
      jd.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
      for (const auto& v : j.at("votes")) jd.votes.push_back(parse_choice(v.get<std::string>(), jd.id));
      out.push_back(std::move(jd));
    } catch (const json::exception& e) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_judgments(const std::string& path, const std::vector<Judgment>& judgments) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write judgments '" + path + "'");
  for (const auto& j : judgments) {
    ordered_json votes = ordered_json::array();
    for (auto v : j.votes) votes.push_back(v == Choice::A ? "A" : "B");
    out << ordered_json{{"id", j.id}, {"votes", votes}}.dump() << '\n';
  }
}

}  // namespace vqr::metrics
