#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "discap/checkpoint.hpp"
#include "discap/data/dataset.hpp"
#include "discap/data/vocab.hpp"
#include "discap/grad/tape.hpp"
#include "discap/rng.hpp"

namespace discap::retrieval {

using grad::Tape;
using grad::Tensor;
using grad::Var;

struct RetrieverDims {
  std::size_t vocab = 0;
  std::size_t embed = 32;   // E_r (300 in the original setup)
  std::size_t hidden = 64;  // H_r (1024 in the original setup)
  std::size_t joint = 32;   // D_joint (1024 in the original setup)
  std::size_t image = 64;   // D_img (2048 in the original setup)
};

// GRU caption encoder plus bias-free image projection into a shared space.
// Gate weights are split into input and recurrent halves; biases are [1 x H]
// rows so they can be broadcast over a batch.
struct RetrieverParams {
  Tensor embed;       // [V x E]
  Tensor update_x;    // [H x E]
  Tensor update_h;    // [H x H]
  Tensor update_b;    // [1 x H]
  Tensor reset_x;     // [H x E]
  Tensor reset_h;     // [H x H]
  Tensor reset_b;     // [1 x H]
  Tensor cand_x;      // [H x E]
  Tensor cand_h;      // [H x H]
  Tensor cand_b;      // [1 x H]
  Tensor cap_proj;    // [D x H]
  Tensor img_proj;    // [D x D_img]

  RetrieverDims dims() const;
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  static const std::vector<std::string>& names();

  void store(Checkpoint& ckpt) const;
  static RetrieverParams load(const Checkpoint& ckpt);

  bool operator==(const RetrieverParams&) const = default;
};

RetrieverParams init_retriever(const RetrieverDims& dims, std::uint64_t seed);

// Parameters bound to a tape as leaves.
struct BoundRetriever {
  const RetrieverParams* params;
  std::vector<Var> vars;
};

BoundRetriever bind(Tape& tape, const RetrieverParams& params, bool trainable);

// Unit-norm caption embeddings as rows of a [B x D] node. Captions must be
// nonempty; shorter captions keep their final state while longer ones run on.
Var encode_captions(Tape& tape, const BoundRetriever& model, const std::vector<data::Caption>& captions);

// Unit-norm image embeddings as rows of a [B x D] node.
Var encode_images(Tape& tape, const BoundRetriever& model, const Tensor& features);

// Forward-only conveniences.
Tensor encode_caption(const RetrieverParams& params, const data::Caption& caption);
Tensor encode_image(const RetrieverParams& params, const std::vector<double>& features);
Tensor encode_caption_batch(const RetrieverParams& params, const std::vector<data::Caption>& captions);
Tensor encode_image_batch(const RetrieverParams& params, const std::vector<const data::ImageRecord*>& images);

// Rows of `features` stacked into a [B x D_img] matrix.
Tensor feature_matrix(const std::vector<const data::ImageRecord*>& images);

double similarity(const Tensor& c, const Tensor& v);

enum class LossKind { vse_pp, vse0, softmax };

std::string_view to_string(LossKind kind);
LossKind parse_loss_kind(std::string_view name);

struct LossConfig {
  LossKind kind = LossKind::vse_pp;
  double margin = 0.2;
  double temperature = 0.1;
};

// Text-to-image loss for one query given its similarity vector against the
// batch images (a length-n vector node) and the index of its own image.
Var retrieval_loss(Tape& tape, Var sims, std::size_t positive, const LossConfig& config);

// Same loss evaluated on plain numbers.
double retrieval_loss_value(const std::vector<double>& sims, std::size_t positive,
                            const LossConfig& config);

struct RetrieverTrainConfig {
  std::size_t epochs = 25;
  std::size_t batch_size = 128;
  double lr = 2e-3;
  LossConfig loss;
  std::uint64_t seed = 1;
};

struct RetrieverEpoch {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double val_recall_at_1 = 0.0;
};

struct RetrieverTrainResult {
  RetrieverParams params;
  std::vector<RetrieverEpoch> history;
  double best_val_recall_at_1 = 0.0;
};

// Each epoch pairs every labeled image with one of its references drawn at
// random. Validation queries use the first reference of each image. Returns the
// parameters of the epoch with the best validation recall@1.
RetrieverTrainResult train_retriever(const std::vector<const data::ImageRecord*>& labeled,
                                     const std::vector<const data::ImageRecord*>& validation,
                                     const data::Vocabulary& vocab, const RetrieverDims& dims,
                                     const RetrieverTrainConfig& config,
                                     const std::function<void(const RetrieverEpoch&)>& on_epoch = {});

struct MiningRange {
  std::size_t h_min = 100;
  std::size_t h_max = 1000;
};

// Effective 1-based inclusive rank range for a pool of the given size.
std::pair<std::size_t, std::size_t> clamp_range(const MiningRange& range, std::size_t pool_size);

struct MinedNegative {
  std::size_t pool_index = 0;
  std::size_t rank = 0;  // 1-based position in the descending similarity order
};

// Ranks the pool by similarity to the query (descending, ties by pool order)
// and draws `count` distinct ranks uniformly from the clamped range.
std::vector<MinedNegative> mine_hard_negatives(const Tensor& query_embedding,
                                               const Tensor& pool_embeddings,
                                               const MiningRange& range, std::size_t count,
                                               Rng& rng);

std::vector<MinedNegative> mine_hard_negatives(const RetrieverParams& params,
                                               const data::Caption& query,
                                               const std::vector<const data::ImageRecord*>& pool,
                                               const MiningRange& range, std::size_t count,
                                               Rng& rng);

// 1-based rank of candidate `own` in row `query` of a similarity matrix;
// candidates tied with it rank ahead only if they come earlier.
std::size_t rank_of(const Tensor& sims, std::size_t query, std::size_t own);

// Query i belongs to candidate i. Returns one recall value per k.
std::vector<double> recall_at_k(const Tensor& query_embeddings, const Tensor& candidate_embeddings,
                                const std::vector<std::size_t>& ks);

std::vector<double> recall_at_k(const RetrieverParams& params,
                                const std::vector<data::Caption>& queries,
                                const std::vector<const data::ImageRecord*>& candidates,
                                const std::vector<std::size_t>& ks);

}  // namespace discap::retrieval
