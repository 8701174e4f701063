#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "discap/data/vocab.hpp"
#include "discap/error.hpp"

namespace discap::caption {

// A step model exposes
//   using State = ...;
//   State start() const;
//   std::vector<double> step(const State& state, data::TokenId previous, State& next) const;
// where step consumes `previous`, writes the resulting state to `next` and
// returns log-probabilities over the whole vocabulary. Tokens that can never be
// emitted carry -infinity.

struct Hypothesis {
  data::Caption tokens;
  double log_prob = 0.0;
};

// Higher log-probability first, then lexicographically smaller token sequence.
inline bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.tokens < b.tokens;
}

template <typename Model>
Hypothesis greedy_decode(const Model& model, std::size_t t_max) {
  require(t_max >= 1, "greedy_decode: t_max must be at least 1");
  Hypothesis out;
  auto state = model.start();
  data::TokenId previous = data::kBos;
  for (std::size_t t = 0; t < t_max; ++t) {
    auto next = state;
    const std::vector<double> logp = model.step(state, previous, next);
    std::size_t best = 0;
    for (std::size_t w = 1; w < logp.size(); ++w)
      if (logp[w] > logp[best]) best = w;
    out.tokens.push_back(static_cast<data::TokenId>(best));
    out.log_prob += logp[best];
    if (best == data::kEos) break;
    previous = static_cast<data::TokenId>(best);
    state = std::move(next);
  }
  return out;
}

// Length-synchronous beam search over summed log-probabilities. At each step
// the best `width` extensions are kept; those ending in EOS retire to the
// finished list and the live beam is refilled with the best unfinished
// extensions. Search stops once no live hypothesis can beat the best finished
// one. Unfinished hypotheses at t_max compete as they are.
template <typename Model>
Hypothesis beam_search(const Model& model, std::size_t width, std::size_t t_max) {
  require(width >= 1, "beam_search: width must be at least 1");
  require(t_max >= 1, "beam_search: t_max must be at least 1");
  using State = decltype(model.start());
  struct Beam {
    Hypothesis hyp;
    State state;
    data::TokenId last;
  };
  struct Candidate {
    Hypothesis hyp;
    std::size_t parent;
  };
  std::vector<Beam> live{{Hypothesis{}, model.start(), data::kBos}};
  std::vector<Hypothesis> finished;
  for (std::size_t t = 0; t < t_max && !live.empty(); ++t) {
    std::vector<State> next_states;
    std::vector<Candidate> candidates;
    for (std::size_t b = 0; b < live.size(); ++b) {
      State next = live[b].state;
      const std::vector<double> logp = model.step(live[b].state, live[b].last, next);
      next_states.push_back(std::move(next));
      for (std::size_t w = 0; w < logp.size(); ++w) {
        if (logp[w] == -std::numeric_limits<double>::infinity()) continue;
        Candidate c{live[b].hyp, b};
        c.hyp.tokens.push_back(static_cast<data::TokenId>(w));
        c.hyp.log_prob += logp[w];
        candidates.push_back(std::move(c));
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return better(a.hyp, b.hyp); });
    std::vector<Beam> next_live;
    for (std::size_t i = 0; i < candidates.size() && next_live.size() < width; ++i) {
      Candidate& c = candidates[i];
      if (c.hyp.tokens.back() == data::kEos) {
        if (i < width) finished.push_back(std::move(c.hyp));
        continue;
      }
      const data::TokenId last = c.hyp.tokens.back();
      next_live.push_back({std::move(c.hyp), next_states[c.parent], last});
    }
    live = std::move(next_live);
    if (!finished.empty() && !live.empty()) {
      const auto best_finished = *std::min_element(finished.begin(), finished.end(), better);
      if (!better(live.front().hyp, best_finished)) break;
    }
  }
  std::vector<Hypothesis> pool = std::move(finished);
  for (auto& b : live) pool.push_back(std::move(b.hyp));
  return *std::min_element(pool.begin(), pool.end(), better);
}

}  // namespace discap::caption
