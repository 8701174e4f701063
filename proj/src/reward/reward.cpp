#include "discap/reward/reward.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "discap/error.hpp"

namespace discap::reward {

namespace {

using Counts = std::map<Ngram, double>;

std::vector<Counts> ngram_counts(const Sentence& sentence, std::size_t n_max) {
  std::vector<Counts> counts(n_max);
  for (std::size_t n = 1; n <= n_max; ++n)
    for (std::size_t i = 0; i + n <= sentence.size(); ++i)
      counts[n - 1][Ngram(sentence.begin() + i, sentence.begin() + i + n)] += 1.0;
  return counts;
}

struct Weighted {
  std::vector<Counts> vec;
  std::vector<double> squared_norm;
  double length = 0.0;
};

Weighted weigh(const Sentence& sentence, const CorpusStats& stats) {
  Weighted w;
  w.vec = ngram_counts(sentence, stats.n_max());
  w.squared_norm.assign(stats.n_max(), 0.0);
  w.length = static_cast<double>(sentence.size());
  for (std::size_t n = 0; n < stats.n_max(); ++n) {
    for (auto& [gram, value] : w.vec[n]) {
      value *= stats.idf(gram);
      w.squared_norm[n] += value * value;
    }
  }
  return w;
}

}  // namespace

std::size_t CorpusStats::df(const Ngram& gram) const {
  require(!gram.empty() && gram.size() <= n_max(), "CorpusStats: n-gram order out of range");
  const auto& table = document_frequency[gram.size() - 1];
  const auto it = table.find(gram);
  return it == table.end() ? 0 : it->second;
}

double CorpusStats::idf(const Ngram& gram) const {
  const std::size_t d = std::max<std::size_t>(1, df(gram));
  return std::log(static_cast<double>(documents)) - std::log(static_cast<double>(d));
}

CorpusStats corpus_stats(const std::vector<std::vector<Sentence>>& reference_sets,
                         std::size_t n_max) {
  require(!reference_sets.empty(), "corpus_stats: empty corpus");
  require(n_max >= 1, "corpus_stats: n_max must be at least 1");
  CorpusStats stats;
  stats.document_frequency.resize(n_max);
  stats.documents = reference_sets.size();
  for (std::size_t doc = 0; doc < reference_sets.size(); ++doc) {
    require(!reference_sets[doc].empty(),
            "corpus_stats: reference set " + std::to_string(doc) + " is empty");
    std::vector<std::set<Ngram>> seen(n_max);
    for (const Sentence& ref : reference_sets[doc]) {
      const auto counts = ngram_counts(data::content_tokens(ref), n_max);
      for (std::size_t n = 0; n < n_max; ++n)
        for (const auto& entry : counts[n]) seen[n].insert(entry.first);
    }
    for (std::size_t n = 0; n < n_max; ++n)
      for (const Ngram& gram : seen[n]) ++stats.document_frequency[n][gram];
  }
  return stats;
}

double cider_d(const Sentence& candidate, const std::vector<Sentence>& references,
               const CorpusStats& stats, const CiderConfig& config) {
  require(!references.empty(), "cider_d: no references");
  require(config.n_max == stats.n_max(), "cider_d: n_max differs from the corpus statistics");
  require(config.sigma > 0.0, "cider_d: sigma must be positive");
  const Weighted cand = weigh(data::content_tokens(candidate), stats);
  double total = 0.0;
  for (const Sentence& reference : references) {
    const Weighted ref = weigh(data::content_tokens(reference), stats);
    const double delta = cand.length - ref.length;
    const double penalty = std::exp(-(delta * delta) / (2.0 * config.sigma * config.sigma));
    double per_ref = 0.0;
    for (std::size_t n = 0; n < stats.n_max(); ++n) {
      if (cand.squared_norm[n] == 0.0 || ref.squared_norm[n] == 0.0) continue;
      double dot = 0.0;
      for (const auto& [gram, value] : cand.vec[n]) {
        const auto it = ref.vec[n].find(gram);
        if (it != ref.vec[n].end()) dot += std::min(value, it->second) * it->second;
      }
      per_ref += dot / std::sqrt(cand.squared_norm[n] * ref.squared_norm[n]) * penalty;
    }
    total += per_ref / static_cast<double>(stats.n_max());
  }
  return config.scale * total / static_cast<double>(references.size());
}

void validate(const RewardConfig& config) {
  require(std::isfinite(config.alpha) && config.alpha >= 0.0,
          "reward: alpha must be finite and nonnegative");
  require(config.loss.margin > 0.0, "reward: margin must be positive");
  require(config.loss.temperature > 0.0, "reward: temperature must be positive");
  require(config.cider.n_max >= 1, "reward: cider n_max must be at least 1");
  require(config.cider.sigma > 0.0, "reward: cider sigma must be positive");
}

std::vector<double> self_retrieval_rewards(const retrieval::RetrieverParams& retriever,
                                           const std::vector<Sentence>& captions,
                                           const Tensor& image_embeddings,
                                           const RewardConfig& config) {
  const std::size_t batch = image_embeddings.rows();
  require(image_embeddings.rank() == 2 && batch >= 1,
          "self_retrieval_rewards: image embeddings must be a nonempty matrix");
  require(captions.size() == batch, "self_retrieval_rewards: one caption per image required");
  std::vector<Sentence> content;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < batch; ++i) {
    Sentence c = data::content_tokens(captions[i]);
    if (c.empty()) continue;
    content.push_back(std::move(c));
    rows.push_back(i);
  }
  std::vector<std::vector<double>> sims(batch, std::vector<double>(batch, 0.0));
  if (!content.empty()) {
    const Tensor emb = retrieval::encode_caption_batch(retriever, content);
    require(emb.cols() == image_embeddings.cols(),
            "self_retrieval_rewards: embedding dimensions differ");
    const std::size_t d = emb.cols();
    for (std::size_t q = 0; q < rows.size(); ++q)
      for (std::size_t j = 0; j < batch; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += emb.at(q, k) * image_embeddings.at(j, k);
        sims[rows[q]][j] = acc;
      }
  }
  std::vector<double> out(batch);
  for (std::size_t i = 0; i < batch; ++i)
    out[i] = -retrieval::retrieval_loss_value(sims[i], i, config.loss);
  return out;
}

double self_retrieval_reward(const retrieval::RetrieverParams& retriever, const Sentence& caption,
                             const Tensor& image_embeddings, std::size_t positive,
                             const RewardConfig& config) {
  const std::size_t batch = image_embeddings.rows();
  require(image_embeddings.rank() == 2 && batch >= 1,
          "self_retrieval_reward: image embeddings must be a nonempty matrix");
  require(positive < batch, "self_retrieval_reward: positive index out of range");
  std::vector<double> sims(batch, 0.0);
  const Sentence content = data::content_tokens(caption);
  if (!content.empty()) {
    const Tensor c = retrieval::encode_caption(retriever, content);
    require(c.size() == image_embeddings.cols(),
            "self_retrieval_reward: embedding dimensions differ");
    for (std::size_t j = 0; j < batch; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < c.size(); ++k) acc += c[k] * image_embeddings.at(j, k);
      sims[j] = acc;
    }
  }
  return -retrieval::retrieval_loss_value(sims, positive, config.loss);
}

double combine_labeled(double cider, double retrieval_reward, double alpha) {
  return cider + alpha * retrieval_reward;
}

double combine_unlabeled(double retrieval_reward, double alpha) {
  return alpha * retrieval_reward;
}

double labeled_reward(const Sentence& caption, const std::vector<Sentence>& references,
                      const retrieval::RetrieverParams* retriever, const Tensor& image_embeddings,
                      std::size_t index, const CorpusStats& stats, const RewardConfig& config) {
  const double cider = cider_d(caption, references, stats, config.cider);
  if (config.alpha == 0.0) return cider;
  require(retriever != nullptr, "labeled_reward: retriever required when alpha > 0");
  return combine_labeled(
      cider, self_retrieval_reward(*retriever, caption, image_embeddings, index, config),
      config.alpha);
}

double unlabeled_reward(const Sentence& caption, const retrieval::RetrieverParams* retriever,
                        const Tensor& image_embeddings, std::size_t index,
                        const RewardConfig& config) {
  if (config.alpha == 0.0) return 0.0;
  require(retriever != nullptr, "unlabeled_reward: retriever required when alpha > 0");
  return combine_unlabeled(
      self_retrieval_reward(*retriever, caption, image_embeddings, index, config), config.alpha);
}

}  // namespace discap::reward
