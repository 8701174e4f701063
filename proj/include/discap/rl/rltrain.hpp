#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "discap/caption/captioner.hpp"
#include "discap/data/dataset.hpp"
#include "discap/data/vocab.hpp"
#include "discap/retrieval/retriever.hpp"
#include "discap/reward/reward.hpp"
#include "discap/rl/adam.hpp"
#include "discap/rng.hpp"

namespace discap::rl {

using grad::Tape;
using grad::Tensor;
using grad::Var;

// baseline: CIDEr reward only, labeled images only.
// sr-fl: CIDEr plus self-retrieval, labeled images only.
// sr-pl: as sr-fl plus mined unlabeled images rewarded by retrieval alone.
enum class Mode { baseline, sr_fl, sr_pl };

std::string_view to_string(Mode mode);
Mode parse_mode(std::string_view name);

// Labeled to unlabeled proportion of a mixed batch.
struct BatchRatio {
  std::size_t labeled = 1;
  std::size_t unlabeled = 1;

  bool operator==(const BatchRatio&) const = default;
};

BatchRatio parse_ratio(std::string_view text);  // "n_l:n_u"
std::string to_string(const BatchRatio& ratio);

// Labeled and unlabeled image counts of a batch; at least one labeled image.
std::pair<std::size_t, std::size_t> split_batch(std::size_t batch_size, const BatchRatio& ratio);

struct LabeledImage {
  const data::ImageRecord* record;
  std::vector<reward::Sentence> references;
};

std::vector<LabeledImage> encode_references(const std::vector<const data::ImageRecord*>& images,
                                            const data::Vocabulary& vocab,
                                            std::size_t t_max = data::kMaxCaptionTokens);

// Ranks the unlabeled pool against query captions with a frozen retriever.
class NegativeMiner {
 public:
  NegativeMiner(const retrieval::RetrieverParams& retriever,
                const std::vector<const data::ImageRecord*>& pool,
                const retrieval::MiningRange& range);

  std::size_t pool_size() const { return pool_embeddings_.rows(); }
  const retrieval::MiningRange& range() const { return range_; }

  // Every pool index whose rank for the query lies in the clamped range, in
  // random order.
  std::vector<retrieval::MinedNegative> candidates(const reward::Sentence& query, Rng& rng) const;

 private:
  const retrieval::RetrieverParams* retriever_;
  Tensor pool_embeddings_;
  retrieval::MiningRange range_;
};

struct BatchPlan {
  std::vector<std::size_t> labeled;        // indices into the labeled set
  std::vector<std::size_t> query_caption;  // reference used for mining, per labeled image
  std::vector<std::size_t> unlabeled;      // indices into the unlabeled pool
  std::vector<std::size_t> unlabeled_rank; // rank of each mined image for its query
};

// Draws n_labeled distinct labeled images and a random reference of each.
// Unlabeled images are mined round-robin over those queries, skipping
// duplicates, until n_unlabeled distinct images are collected.
BatchPlan compose_batch(const std::vector<LabeledImage>& labeled, std::size_t n_labeled,
                        std::size_t n_unlabeled, const NegativeMiner* miner, Rng& rng);

// One image of an RL batch; unlabeled images carry no references.
struct RlImage {
  const std::vector<double>* features;
  const std::vector<reward::Sentence>* references;  // nullptr when unlabeled
};

struct RewardContext {
  const retrieval::RetrieverParams* retriever = nullptr;  // may be null when alpha == 0
  const reward::CorpusStats* stats = nullptr;
  reward::RewardConfig config;
};

// Reward of caption i for image i; the retrieval term of every caption is
// computed against all images of the batch.
std::vector<double> batch_rewards(const RewardContext& context, const std::vector<RlImage>& batch,
                                  const std::vector<reward::Sentence>& captions,
                                  const Tensor& image_embeddings);

// Batch image embeddings, or an empty tensor when the retriever is not needed.
Tensor batch_image_embeddings(const RewardContext& context, const std::vector<RlImage>& batch);

// Mean over the batch of -(reward - baseline) * log p(sample).
Var reinforce_loss(Tape& tape, Var log_probs, const std::vector<double>& rewards,
                   const std::vector<double>& baselines);

struct StepDiagnostics {
  double mean_reward = 0.0;
  double mean_baseline = 0.0;
  double mean_advantage = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  std::size_t labeled = 0;
  std::size_t unlabeled = 0;
};

struct StepConfig {
  double clip_norm = 5.0;
  std::size_t t_max = data::kMaxCaptionTokens;
};

// Samples one caption per image, uses the greedy caption's reward on the same
// batch as baseline, and applies one clipped Adam update. Throws a numerical
// abort when the loss or gradients are not finite.
StepDiagnostics reinforce_step(caption::CaptionerParams& params, OptimizerState& optimizer,
                               const std::vector<RlImage>& batch, const RewardContext& context,
                               const StepConfig& step, Rng& rng);

struct RlConfig {
  Mode mode = Mode::sr_pl;
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  BatchRatio ratio;
  double lr = 2e-4;
  CosineSchedule schedule;
  retrieval::MiningRange mining;
  reward::RewardConfig reward;
  StepConfig step;
  std::uint64_t seed = 1;
  bool record_wall_time = false;
};

// Reward settings in force for a mode: baseline ignores alpha.
reward::RewardConfig effective_reward(const RlConfig& config);

struct RlEpoch {
  std::size_t epoch = 0;
  double mean_reward = 0.0;
  double mean_baseline = 0.0;
  double val_cider = 0.0;
  double val_recall_at_1 = 0.0;
  double val_reward = 0.0;  // selection score: val_cider + alpha * mean retrieval reward
  double lr = 0.0;
  double wall_time_s = 0.0;
};

struct RlResult {
  caption::CaptionerParams params;  // best validation epoch
  caption::CaptionerParams last_params;
  OptimizerState optimizer;
  std::vector<RlEpoch> history;
  std::size_t best_epoch = 0;
};

struct RlData {
  std::vector<const data::ImageRecord*> labeled;
  std::vector<const data::ImageRecord*> unlabeled;
  std::vector<const data::ImageRecord*> validation;
};

// Each epoch takes ceil(|labeled| / n_labeled) steps. Validation decodes
// greedily and scores CIDEr-D against the validation references, recall@1 of
// the generated captions over the validation images, and the self-retrieval
// reward within consecutive groups of batch_size validation images.
RlResult train_rl(const caption::CaptionerParams& initial,
                  const retrieval::RetrieverParams& retriever, const RlData& data,
                  const data::Vocabulary& vocab, const RlConfig& config,
                  const std::function<void(const RlEpoch&)>& on_epoch = {});

std::string history_line(const RlEpoch& epoch, const std::optional<std::string>& fingerprint);
void save_history(const std::filesystem::path& path, const std::vector<RlEpoch>& history,
                  const std::optional<std::string>& fingerprint = std::nullopt);

}  // namespace discap::rl
