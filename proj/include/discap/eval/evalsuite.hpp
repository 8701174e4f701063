#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "discap/caption/captioner.hpp"
#include "discap/data/dataset.hpp"
#include "discap/data/vocab.hpp"
#include "discap/retrieval/retriever.hpp"
#include "discap/reward/reward.hpp"

namespace discap::eval {

using reward::Sentence;

// Corpus-level BLEU-1..4: clipped n-gram counts and candidate lengths are
// summed over the corpus; the reference length of each candidate is the
// closest one, shorter on ties. No smoothing.
std::array<double, 4> corpus_bleu(const std::vector<Sentence>& candidates,
                                  const std::vector<std::vector<Sentence>>& references);

// Longest-common-subsequence F-measure against the references, taking the
// best precision and best recall over references.
double rouge_l(const Sentence& candidate, const std::vector<Sentence>& references,
               double beta_sq = 1.2);

struct CaptionMetrics {
  double cider_d = 0.0;
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
};

// Candidates and references are compared on their content tokens. CIDEr-D and
// ROUGE-L are averaged over images.
CaptionMetrics caption_metrics(const std::vector<Sentence>& generated,
                               const std::vector<std::vector<Sentence>>& references,
                               const reward::CorpusStats& stats,
                               const reward::CiderConfig& cider = {});

// Recall@k of generated caption i retrieving image i among all images. A
// caption without content tokens never retrieves its image.
std::vector<double> self_retrieval_eval(const retrieval::RetrieverParams& retriever,
                                        const std::vector<Sentence>& generated,
                                        const std::vector<const data::ImageRecord*>& images,
                                        const std::vector<std::size_t>& ks = {1, 5, 10});

struct UniqueNovel {
  double unique_pct = 0.0;
  double novel_pct = 0.0;
};

UniqueNovel uniqueness_novelty(const std::vector<Sentence>& generated,
                               const std::vector<Sentence>& training_captions);

struct EvalReport {
  double cider_d = 0.0;
  double bleu_1 = 0.0;
  double bleu_2 = 0.0;
  double bleu_3 = 0.0;
  double bleu_4 = 0.0;
  double rouge_l = 0.0;
  double recall_at_1 = 0.0;
  double recall_at_5 = 0.0;
  double recall_at_10 = 0.0;
  double unique_pct = 0.0;
  double novel_pct = 0.0;
  std::string config_fingerprint;
  std::uint64_t seed = 0;

  bool operator==(const EvalReport&) const = default;
};

std::string to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);
void save_report(const std::filesystem::path& path, const EvalReport& report);
EvalReport load_report(const std::filesystem::path& path);

struct EvalInputs {
  const caption::CaptionerParams* captioner = nullptr;
  const retrieval::RetrieverParams* retriever = nullptr;
  std::vector<const data::ImageRecord*> images;  // labeled test images
  std::vector<const data::ImageRecord*> training;  // source of the novelty reference set
  const data::Vocabulary* vocab = nullptr;
  std::size_t beam_width = 5;
  std::size_t t_max = data::kMaxCaptionTokens;
};

struct Evaluation {
  EvalReport report;
  std::vector<Sentence> captions;  // generated, without EOS
};

// Scores one given caption per image of `inputs.images`; the captioner is not
// used. CIDEr-D statistics come from the evaluated images' references. Recall
// uses k = 1, 5, 10 clamped to the image count.
Evaluation score(const EvalInputs& inputs, std::vector<Sentence> captions,
                 const std::string& config_fingerprint, std::uint64_t seed);

// Generates one caption per image with the captioner and scores it.
Evaluation evaluate(const EvalInputs& inputs, const std::string& config_fingerprint,
                    std::uint64_t seed);

}  // namespace discap::eval
