#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "discap/rng.hpp"

namespace discap::testing {

using Words = std::vector<std::string>;

// Brute-force CIDEr-D over words: every n-gram is a space-joined string, term
// and document frequencies come from window scans, and vectors are dense over
// an explicit list of every n-gram seen.
class CiderOracle {
 public:
  CiderOracle(std::vector<std::vector<Words>> corpus, std::size_t n_max = 4, double sigma = 6.0)
      : corpus_(std::move(corpus)), n_max_(n_max), sigma_(sigma) {}

  static std::vector<std::string> grams(const Words& s, std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i + n <= s.size(); ++i) {
      std::string g;
      for (std::size_t k = 0; k < n; ++k) g += (k ? " " : "") + s[i + k];
      out.push_back(g);
    }
    return out;
  }

  static double term_frequency(const Words& s, std::size_t n, const std::string& gram) {
    const auto all = grams(s, n);
    return static_cast<double>(std::count(all.begin(), all.end(), gram));
  }

  double document_frequency(std::size_t n, const std::string& gram) const {
    double df = 0.0;
    for (const auto& doc : corpus_) {
      bool found = false;
      for (const auto& ref : doc)
        if (term_frequency(ref, n, gram) > 0.0) found = true;
      if (found) df += 1.0;
    }
    return df;
  }

  double score(const Words& candidate, const std::vector<Words>& references) const {
    const double n_docs = static_cast<double>(corpus_.size());
    double sum_over_refs = 0.0;
    for (const Words& ref : references) {
      double sum_over_n = 0.0;
      for (std::size_t n = 1; n <= n_max_; ++n) {
        std::vector<std::string> universe = grams(candidate, n);
        const auto rg = grams(ref, n);
        universe.insert(universe.end(), rg.begin(), rg.end());
        std::sort(universe.begin(), universe.end());
        universe.erase(std::unique(universe.begin(), universe.end()), universe.end());
        std::vector<double> c(universe.size()), r(universe.size());
        for (std::size_t k = 0; k < universe.size(); ++k) {
          const double idf = std::log(n_docs / std::max(1.0, document_frequency(n, universe[k])));
          c[k] = term_frequency(candidate, n, universe[k]) * idf;
          r[k] = term_frequency(ref, n, universe[k]) * idf;
        }
        double dot = 0.0, cc = 0.0, rr = 0.0;
        for (std::size_t k = 0; k < universe.size(); ++k) {
          dot += std::min(c[k], r[k]) * r[k];
          cc += c[k] * c[k];
          rr += r[k] * r[k];
        }
        if (cc == 0.0 || rr == 0.0) continue;
        const double gap = static_cast<double>(candidate.size()) - static_cast<double>(ref.size());
        sum_over_n += dot / (std::sqrt(cc) * std::sqrt(rr)) *
                      std::exp(-gap * gap / (2.0 * sigma_ * sigma_));
      }
      sum_over_refs += sum_over_n / static_cast<double>(n_max_);
    }
    return 10.0 * sum_over_refs / static_cast<double>(references.size());
  }

 private:
  std::vector<std::vector<Words>> corpus_;
  std::size_t n_max_;
  double sigma_;
};

// Random micro-corpus over a small alphabet so that n-grams repeat.
struct MicroCorpus {
  std::vector<std::vector<Words>> documents;
  std::vector<Words> candidates;  // one per document
};

inline MicroCorpus random_micro_corpus(Rng& rng) {
  static const std::vector<std::string> alphabet = {"a", "b", "c", "d", "e", "f", "g"};
  auto sentence = [&](std::size_t min_len, std::size_t max_len) {
    Words s(min_len + rng.below(max_len - min_len + 1));
    for (auto& w : s) w = alphabet[rng.below(3 + rng.below(alphabet.size() - 2))];
    return s;
  };
  MicroCorpus out;
  const std::size_t docs = 2 + rng.below(5);
  for (std::size_t d = 0; d < docs; ++d) {
    std::vector<Words> refs(1 + rng.below(4));
    for (auto& r : refs) r = sentence(1, 8);
    out.documents.push_back(refs);
    if (rng.bernoulli(0.25))
      out.candidates.push_back(refs[rng.below(refs.size())]);
    else
      out.candidates.push_back(sentence(0, 9));
  }
  return out;
}

}  // namespace discap::testing
