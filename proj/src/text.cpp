#include "vqr/text.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <stdexcept>

#include "vqr/rng.hpp"

namespace vqr::text {

using nlohmann::json;

namespace {

const std::vector<std::string>& special_words() {
  static const std::vector<std::string> words = {"<pad>", "<bos>", "<eos>", "<unk>", "<sep>"};
  return words;
}

bool is_terminator(char c) { return c == '?' || c == '!' || c == '.'; }
bool is_detached(char c) { return is_terminator(c) || c == ','; }

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<json> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
  }
  return rows;
}

void write_lines(const std::string& path, const std::vector<json>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  for (const auto& r : rows) out << r.dump() << '\n';
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

}  // namespace

std::size_t role_length(Role role) { return role == Role::Input ? kInputLength : kOutputLength; }

Vocab::Vocab() : Vocab(special_words()) {}

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
  const auto& specials = special_words();
  if (words_.size() < kNumSpecials || !std::equal(specials.begin(), specials.end(), words_.begin())) {
    throw std::invalid_argument("vocab: first five entries must be the special tokens");
  }
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<std::int32_t>(i)).second) {
      throw std::invalid_argument("vocab: duplicate word '" + words_[i] + "'");
    }
  }
}

std::int32_t Vocab::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view word) const { return index_.count(std::string(word)) > 0; }

const std::string& Vocab::word(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw std::out_of_range("vocab: id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(words_.size()));
  }
  return words_[static_cast<std::size_t>(id)];
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (is_detached(ch)) {
      flush();
      tokens.emplace_back(1, ch);
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return tokens;
}

Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t cap) {
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  if (cap < kNumSpecials) throw std::invalid_argument("build_vocab: cap must be at least 5");
  std::map<std::string, std::size_t> counts;
  for (const auto& line : corpus) {
    for (auto& tok : tokenize(line)) ++counts[tok];
  }
  const auto& specials = special_words();
  for (const auto& s : specials) counts.erase(s);
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words = specials;
  for (const auto& [w, n] : ranked) {
    if (words.size() >= cap) break;
    words.push_back(w);
  }
  return Vocab(std::move(words));
}

TokenSequence encode(std::string_view text, Role role, const Vocab& vocab) {
  const std::size_t length = role_length(role);
  TokenSequence seq;
  seq.role = role;
  seq.ids.reserve(length);
  seq.ids.push_back(kBos);
  for (const auto& tok : tokenize(text)) {
    if (seq.ids.size() + 1 >= length) break;  // keep a slot for EOS
    seq.ids.push_back(vocab.id(tok));
  }
  seq.ids.push_back(kEos);
  seq.true_length = seq.ids.size();
  seq.ids.resize(length, kPad);
  return seq;
}

std::string decode_tokens(const std::vector<std::int32_t>& ids, const Vocab& vocab) {
  std::string out;
  for (auto id : ids) {
    const auto& w = vocab.word(id);
    if (id == kEos) break;
    if (id == kPad || id == kBos || id == kSep) continue;
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> sentences;
  std::string current;
  for (std::size_t i = 0; i < text.size(); ++i) {
    current.push_back(text[i]);
    if (is_terminator(text[i]) && (i + 1 == text.size() || !is_terminator(text[i + 1]))) {
      auto s = trim(current);
      if (!s.empty()) sentences.push_back(std::move(s));
      current.clear();
    }
  }
  auto tail = trim(current);
  if (!tail.empty()) sentences.push_back(std::move(tail));
  return sentences;
}

ConstructResult construct_triples(const std::vector<RawQA>& raw) {
  ConstructResult result;
  for (const auto& qa : raw) {
    const auto sentences = split_sentences(qa.question_text);
    if (qa.response_count < 1 || sentences.size() < 2) {
      ++result.dropped;
      continue;
    }
    auto key = std::find_if(sentences.begin(), sentences.end(),
                            [](const std::string& s) { return s.back() == '?'; });
    TripleExample t;
    t.id = qa.id;
    t.feature_ref = qa.image_ref;
    t.bland = key != sentences.end() ? *key : sentences.front();
    t.attractive = qa.question_text;
    result.triples.push_back(std::move(t));
  }
  return result;
}

Split split(const std::vector<TripleExample>& data, std::uint64_t seed) {
  if (data.size() < 5) {
    throw std::invalid_argument("split: need at least 5 examples, got " + std::to_string(data.size()));
  }
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n_train = (data.size() * 4 + 4) / 5;  // ceil(0.8 n)
  Split out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? out.train : out.test).push_back(data[order[i]]);
  }
  return out;
}

// Synthetic corpus -----------------------------------------------------------

namespace {

const std::vector<std::string>& bland_templates() {
  static const std::vector<std::string> t = {
      "what {} is this ?", "what {} is that ?",  "where is the {} from ?",
      "who made the {} ?", "is the {} custom ?", "how old is the {} ?",
  };
  return t;
}

const std::vector<std::string>& bland_nouns() {
  static const std::vector<std::string> n = {"wood",  "sofa",  "rug",     "lamp",    "tile",
                                             "table", "chair", "paint",   "counter", "sink",
                                             "cabinet", "floor"};
  return n;
}

const std::vector<std::string>& detail_frames() {
  static const std::vector<std::string> f = {
      "what is the {} ?",        "can you share the {} ?", "who chose the {} ?",
      "do you know the {} ?",    "please tell me the {} ?", "where did you get the {} ?",
      "what about the {} ?",     "any idea about the {} ?",
  };
  return f;
}

const std::vector<std::string>& detail_attributes() {
  static const std::vector<std::string> a = {"color", "brand", "size",  "stain",
                                             "finish", "material", "price", "style"};
  return a;
}

std::string fill(const std::string& pattern, const std::string& word) {
  const auto at = pattern.find("{}");
  return pattern.substr(0, at) + word + pattern.substr(at + 2);
}

}  // namespace

const std::vector<std::string>& synth_emotion_prefixes() {
  static const std::vector<std::string> p = {"so pretty !",       "great design !", "beautiful room !",
                                             "love this !",       "amazing kitchen !", "gorgeous !"};
  return p;
}

std::string synth_detail_suffix(std::size_t detail_class) {
  const auto& attrs = detail_attributes();
  const auto& frames = detail_frames();
  if (detail_class >= attrs.size() * frames.size()) {
    throw std::out_of_range("synth: detail class " + std::to_string(detail_class) + " out of range");
  }
  return fill(frames[detail_class / attrs.size()], attrs[detail_class % attrs.size()]);
}

std::size_t synth_emotion_index(std::string_view bland) {
  return static_cast<std::size_t>(fnv1a(bland) % synth_emotion_prefixes().size());
}

std::vector<TripleExample> SynthCorpus::triples() const {
  std::vector<TripleExample> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(e.triple);
  return out;
}

std::vector<TripleExample> copy_corpus(std::size_t n, std::size_t vocab, std::size_t max_len,
                                       std::uint64_t seed) {
  if (n == 0 || vocab == 0 || max_len == 0) throw std::invalid_argument("copy_corpus: sizes must be positive");
  if (max_len + 2 > kInputLength) throw std::invalid_argument("copy_corpus: sequences would be truncated");
  Rng rng(mix_seed(seed, 0x636f7079ULL));
  std::vector<TripleExample> out;
  out.reserve(n);
  char id[32];
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = 1 + rng.index(max_len);
    std::string sentence;
    for (std::size_t t = 0; t < len; ++t) {
      if (t) sentence += ' ';
      sentence += "c" + std::to_string(rng.index(vocab));
    }
    std::snprintf(id, sizeof id, "copy-%06zu", i);
    out.push_back(TripleExample{id, id, sentence, sentence});
  }
  return out;
}

SynthCorpus synth_generate(std::size_t n, std::size_t k_details, std::uint64_t seed,
                           std::size_t feature_dim) {
  if (n == 0) throw std::invalid_argument("synth_generate: n must be positive");
  if (k_details < 2 || k_details > 64) {
    throw std::invalid_argument("synth_generate: k_details must lie in [2, 64], got " +
                                std::to_string(k_details));
  }
  if (feature_dim < k_details) {
    throw std::invalid_argument("synth_generate: feature dim must be at least k_details");
  }
  const auto& templates = bland_templates();
  const auto& nouns = bland_nouns();
  const auto& prefixes = synth_emotion_prefixes();

  Rng rng(seed);
  SynthCorpus corpus;
  corpus.features.kind = features::FeatureKind::Pooled;
  corpus.features.rows = 1;
  corpus.features.cols = feature_dim;
  corpus.examples.reserve(n);
  char id_buf[32];
  for (std::size_t i = 0; i < n; ++i) {
    const auto& tmpl = templates[rng.index(templates.size())];
    const auto& noun = nouns[rng.index(nouns.size())];
    const std::size_t detail = rng.index(k_details);

    SynthExample ex;
    ex.detail_class = detail;
    std::snprintf(id_buf, sizeof(id_buf), "synth-%06zu", i);
    ex.triple.id = id_buf;
    ex.triple.feature_ref = id_buf;
    ex.triple.bland = fill(tmpl, noun);
    ex.emotion_class = synth_emotion_index(ex.triple.bland);
    ex.triple.attractive =
        prefixes[ex.emotion_class] + " " + ex.triple.bland + " " + synth_detail_suffix(detail);

    std::vector<float> feat(feature_dim);
    for (std::size_t j = 0; j < feature_dim; ++j) {
      const double signal = j == detail ? 1.0 : 0.0;
      feat[j] = static_cast<float>(signal + kSynthFeatureNoise * rng.normal());
    }
    corpus.features.entries.emplace(ex.triple.feature_ref, std::move(feat));
    corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

// I/O ------------------------------------------------------------------------

std::vector<RawQA> read_raw_qa(const std::string& path) {
  std::vector<RawQA> out;
  for (const auto& j : read_jsonl(path)) {
    RawQA r;
    r.id = j.at("id").get<std::string>();
    r.image_ref = j.at("image_ref").get<std::string>();
    r.question_text = j.at("question_text").get<std::string>();
    r.response_count = j.at("response_count").get<std::int64_t>();
    if (r.response_count < 0) {
      throw std::runtime_error(path + ": record '" + r.id + "' has negative response_count");
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<TripleExample> read_triples(const std::string& path) {
  std::vector<TripleExample> out;
  for (const auto& j : read_jsonl(path)) {
    TripleExample t;
    t.id = j.at("id").get<std::string>();
    t.feature_ref = j.at("feature_ref").get<std::string>();
    t.bland = j.at("bland").get<std::string>();
    t.attractive = j.at("attractive").get<std::string>();
    if (t.bland.empty()) throw std::runtime_error(path + ": record '" + t.id + "' has empty bland");
    out.push_back(std::move(t));
  }
  return out;
}

void write_triples(const std::string& path, const std::vector<TripleExample>& triples) {
  std::vector<json> rows;
  rows.reserve(triples.size());
  for (const auto& t : triples) {
    json j = json::object();
    j["id"] = t.id;
    j["feature_ref"] = t.feature_ref;
    j["bland"] = t.bland;
    j["attractive"] = t.attractive;
    rows.push_back(std::move(j));
  }
  write_lines(path, rows);
}

void write_raw_qa(const std::string& path, const std::vector<RawQA>& raw) {
  std::vector<json> rows;
  for (const auto& r : raw) {
    json j = json::object();
    j["id"] = r.id;
    j["image_ref"] = r.image_ref;
    j["question_text"] = r.question_text;
    j["response_count"] = r.response_count;
    rows.push_back(std::move(j));
  }
  write_lines(path, rows);
}

std::string vocab_to_json(const Vocab& vocab) { return json(vocab.words()).dump(); }

Vocab vocab_from_json(const std::string& json_text) {
  return Vocab(json::parse(json_text).get<std::vector<std::string>>());
}

}  // namespace vqr::text
