#pragma once

#include <cstddef>
#include <map>
#include <vector>

#include "discap/data/vocab.hpp"
#include "discap/grad/tensor.hpp"
#include "discap/retrieval/retriever.hpp"

namespace discap::reward {

using grad::Tensor;
using Sentence = data::Caption;
using Ngram = std::vector<data::TokenId>;

struct CiderConfig {
  std::size_t n_max = 4;
  double sigma = 6.0;
  double scale = 10.0;
};

// Document frequencies where one document is one image's reference set.
struct CorpusStats {
  std::vector<std::map<Ngram, std::size_t>> document_frequency;  // index n - 1
  std::size_t documents = 0;

  std::size_t n_max() const { return document_frequency.size(); }
  std::size_t df(const Ngram& gram) const;
  // log(documents / max(1, df))
  double idf(const Ngram& gram) const;
};

CorpusStats corpus_stats(const std::vector<std::vector<Sentence>>& reference_sets,
                         std::size_t n_max = 4);

// CIDEr-D in [0, scale]: mean over references of the mean over n of the
// clipped TF-IDF cosine, each damped by a Gaussian penalty on the length gap.
double cider_d(const Sentence& candidate, const std::vector<Sentence>& references,
               const CorpusStats& stats, const CiderConfig& config = {});

struct RewardConfig {
  double alpha = 1.0;
  retrieval::LossConfig loss;
  CiderConfig cider;
};

void validate(const RewardConfig& config);

// Negative retrieval loss of a generated caption used as a query against
// unit-norm image embeddings (rows of a [B x D] matrix). Only the tokens before
// the first EOS are encoded; a caption with no content has zero similarity to
// every image.
double self_retrieval_reward(const retrieval::RetrieverParams& retriever, const Sentence& caption,
                             const Tensor& image_embeddings, std::size_t positive,
                             const RewardConfig& config);

// Same for caption i against image i of the batch, for every i.
std::vector<double> self_retrieval_rewards(const retrieval::RetrieverParams& retriever,
                                           const std::vector<Sentence>& captions,
                                           const Tensor& image_embeddings,
                                           const RewardConfig& config);

// cider + alpha * retrieval_reward
double combine_labeled(double cider, double retrieval_reward, double alpha);
// alpha * retrieval_reward
double combine_unlabeled(double retrieval_reward, double alpha);

// With alpha = 0 the retriever is not consulted.
double labeled_reward(const Sentence& caption, const std::vector<Sentence>& references,
                      const retrieval::RetrieverParams* retriever, const Tensor& image_embeddings,
                      std::size_t index, const CorpusStats& stats, const RewardConfig& config);

double unlabeled_reward(const Sentence& caption, const retrieval::RetrieverParams* retriever,
                        const Tensor& image_embeddings, std::size_t index,
                        const RewardConfig& config);

}  // namespace discap::reward
