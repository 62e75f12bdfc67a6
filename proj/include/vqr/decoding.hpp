#pragma once

// Greedy and beam decoding over an abstract incremental step function.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vqr::decoding {

enum class Mode { Greedy, Beam };

struct DecodeOptions {
  Mode mode = Mode::Greedy;
  std::size_t beam_width = 1;
  std::size_t max_len = 50;  // output slots including the leading BOS
};

Mode parse_mode(const std::string& name);

// Lowest index among the maxima.
inline std::int32_t argmax(const std::vector<float>& scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return static_cast<std::int32_t>(best);
}

// `step(state, token)` consumes `token` and returns the successor state with
// log-probabilities for the next token. Decoding starts by feeding
// `start_token`; at most max_len - 1 tokens are produced. Returns the
// generated tokens (EOS included when emitted).
template <typename State, typename Step>
std::vector<std::int32_t> decode(const State& initial, std::int32_t start_token, std::int32_t eos,
                                 Step&& step, const DecodeOptions& options) {
  if (options.max_len < 2) throw std::invalid_argument("decode: max_len must be at least 2");
  const std::size_t max_new = options.max_len - 1;

  if (options.mode == Mode::Greedy) {
    std::vector<std::int32_t> out;
    auto [state, log_probs] = step(initial, start_token);
    while (true) {
      const auto tok = argmax(log_probs);
      out.push_back(tok);
      if (tok == eos || out.size() >= max_new) break;
      std::tie(state, log_probs) = step(state, tok);
    }
    return out;
  }

  if (options.beam_width == 0) throw std::invalid_argument("decode: beam width must be positive");
  struct Hyp {
    State state;
    std::vector<float> log_probs;
    double score = 0.0;
    std::vector<std::int32_t> tokens;
  };
  struct Finished {
    double score;
    std::vector<std::int32_t> tokens;
  };
  std::vector<Hyp> alive;
  {
    auto [s, lp] = step(initial, start_token);
    alive.push_back(Hyp{std::move(s), std::move(lp), 0.0, {}});
  }
  std::vector<Finished> finished;

  struct Cand {
    double score;
    std::size_t hyp;
    std::int32_t token;
  };
  while (!alive.empty()) {
    std::vector<Cand> cands;
    for (std::size_t h = 0; h < alive.size(); ++h) {
      const auto& lp = alive[h].log_probs;
      for (std::size_t v = 0; v < lp.size(); ++v) {
        cands.push_back({alive[h].score + lp[v], h, static_cast<std::int32_t>(v)});
      }
    }
    const std::size_t keep = std::min(options.beam_width, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.hyp != b.hyp) return a.hyp < b.hyp;
                        return a.token < b.token;
                      });
    std::vector<Hyp> next;
    for (std::size_t c = 0; c < keep; ++c) {
      const auto& cand = cands[c];
      auto tokens = alive[cand.hyp].tokens;
      tokens.push_back(cand.token);
      if (cand.token == eos || tokens.size() >= max_new) {
        finished.push_back({cand.score, std::move(tokens)});
        continue;
      }
      auto [s, lp] = step(alive[cand.hyp].state, cand.token);
      next.push_back(Hyp{std::move(s), std::move(lp), cand.score, std::move(tokens)});
    }
    alive = std::move(next);
    // Scores only decrease, so an alive hypothesis can no longer win once the
    // best finished one beats it.
    if (!finished.empty() && !alive.empty()) {
      double best_finished = finished.front().score;
      for (const auto& f : finished) best_finished = std::max(best_finished, f.score);
      double best_alive = alive.front().score;
      for (const auto& a : alive) best_alive = std::max(best_alive, a.score);
      if (best_alive <= best_finished) break;
    }
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i) {
    if (finished[i].score > finished[best].score) best = i;
  }
  return finished.at(best).tokens;
}

}  // namespace vqr::decoding
