#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "discap/caption/decoding.hpp"
#include "discap/checkpoint.hpp"
#include "discap/data/dataset.hpp"
#include "discap/data/vocab.hpp"
#include "discap/grad/tape.hpp"
#include "discap/rng.hpp"

namespace discap::caption {

using grad::Tape;
using grad::Tensor;
using grad::Var;

// Decoding never emits PAD or BOS: the output softmax runs over the ids from
// EOS upward, so a vocabulary of size V has V - 2 emittable tokens.
inline constexpr data::TokenId kFirstEmittable = data::kEos;

struct CaptionerDims {
  std::size_t vocab = 0;
  std::size_t embed = 32;   // E_c
  std::size_t hidden = 64;  // H
  std::size_t image = 64;   // D_img
};

// LSTM decoder. Gate rows are ordered input, forget, candidate, output; the
// gate input is the word embedding followed by the previous hidden state.
struct CaptionerParams {
  Tensor embed;   // [V x E]
  Tensor init_h;  // [H x D_img]
  Tensor init_c;  // [H x D_img]
  Tensor gate_w;  // [4H x (E + H)]
  Tensor gate_b;  // [4H]
  Tensor out_w;   // [V x H]
  Tensor out_b;   // [V]

  CaptionerDims dims() const;
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  static const std::vector<std::string>& names();

  void store(Checkpoint& ckpt) const;
  static CaptionerParams load(const Checkpoint& ckpt);

  bool operator==(const CaptionerParams&) const = default;
};

// Uniform in [-0.08, 0.08] with the forget-gate bias set to 1.
CaptionerParams init_captioner(const CaptionerDims& dims, std::uint64_t seed);

struct DecoderState {
  std::vector<double> h;
  std::vector<double> c;

  bool operator==(const DecoderState&) const = default;
};

DecoderState initial_state(const CaptionerParams& params, const std::vector<double>& features);

struct StepOutput {
  std::vector<double> log_probs;  // length V; PAD and BOS are -infinity
  DecoderState state;
};

// One decoder step without a tape: consumes `previous` and returns the next
// word distribution.
StepOutput decode_step(const CaptionerParams& params, const DecoderState& state,
                       data::TokenId previous);

// Step model over decode_step for the decoding templates.
class StepModel {
 public:
  using State = DecoderState;
  StepModel(const CaptionerParams& params, const std::vector<double>& features)
      : params_(&params), features_(&features) {}
  State start() const { return initial_state(*params_, *features_); }
  std::vector<double> step(const State& state, data::TokenId previous, State& next) const;

 private:
  const CaptionerParams* params_;
  const std::vector<double>* features_;
};

data::Caption greedy_decode(const CaptionerParams& params, const std::vector<double>& features,
                            std::size_t t_max);
data::Caption beam_search(const CaptionerParams& params, const std::vector<double>& features,
                          std::size_t width, std::size_t t_max);

// One caption per image without EOS: greedy when width is 1, beam search
// otherwise.
std::vector<data::Caption> generate_captions(const CaptionerParams& params,
                                             const std::vector<const data::ImageRecord*>& images,
                                             std::size_t width, std::size_t t_max);

// Tape-side model: parameters as leaves plus per-gate blocks shared by all
// steps of a tape.
struct BoundCaptioner {
  const CaptionerParams* params;
  std::vector<Var> vars;
  std::vector<Var> gate_blocks;  // [H x (E + H)] per gate
  std::vector<Var> gate_bias;    // [H x 1] per gate
  Var out_w;                     // emittable rows of the output projection
  Var out_b;                     // emittable entries as a column
  Var select_x;                  // [E x (E + H)] placement of the embedding
  Var select_h;                  // [H x (E + H)] placement of the hidden state
};

BoundCaptioner bind(Tape& tape, const CaptionerParams& params, bool trainable);

// Leaf values in their tape shapes: bias vectors become single columns.
std::vector<Tensor> leaf_values(const CaptionerParams& params);

// Builds the derived nodes over caller-supplied leaves, one per leaf value.
BoundCaptioner bind_leaves(Tape& tape, const CaptionerParams& params, std::vector<Var> leaves);

// Gradients of the bound leaves, reshaped to the parameter shapes.
std::vector<Tensor> gradients(const Tape& tape, const BoundCaptioner& model);

struct BatchState {
  Var h;  // [B x H]
  Var c;  // [B x H]
};

BatchState initial_state(Tape& tape, const BoundCaptioner& model, const Tensor& features);

// Feeds one token per row and returns [B x (V - 2)] log-probabilities over the
// emittable tokens; column j is token j + 2.
Var step_log_probs(Tape& tape, const BoundCaptioner& model, BatchState& state,
                   const std::vector<data::TokenId>& previous);

struct SampledCaption {
  data::Caption tokens;            // ends with EOS unless t_max was reached
  std::vector<double> step_log_probs;
  double log_prob = 0.0;           // sum of step_log_probs
};

struct SampleBatch {
  std::vector<SampledCaption> captions;
  Var log_probs;  // [B], differentiable sum of log-probabilities per caption
};

// Draws one caption per feature row.
SampleBatch sample_captions(Tape& tape, const BoundCaptioner& model, const Tensor& features,
                            Rng& rng, std::size_t t_max);

SampledCaption sample_caption(Tape& tape, const BoundCaptioner& model,
                              const std::vector<double>& features, Rng& rng, std::size_t t_max,
                              Var* log_prob = nullptr);

// Teacher-forced log-probability of each token sequence exactly as given
// (no EOS appended). With `sample_prob` > 0 each input word after the first is
// replaced, with that probability, by a draw from the model's previous
// distribution. Returns a [B] node.
Var sequence_log_probs(Tape& tape, const BoundCaptioner& model, const Tensor& features,
                       const std::vector<data::Caption>& sequences, double sample_prob = 0.0,
                       Rng* rng = nullptr);

// Negative log-likelihood of the caption with EOS appended.
Var xent_loss(Tape& tape, const BoundCaptioner& model, const std::vector<double>& features,
              const data::Caption& caption);

// Input word substitution probability for an epoch: +step every `every`
// epochs, capped.
struct ScheduledSampling {
  double step = 0.05;
  std::size_t every = 5;
  double cap = 0.25;
};

double scheduled_sampling_prob(const ScheduledSampling& schedule, std::size_t epoch);

struct MleConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 50;
  double lr = 5e-3;
  ScheduledSampling schedule;
  std::size_t t_max = data::kMaxCaptionTokens;
  std::uint64_t seed = 1;
};

struct MleEpoch {
  std::size_t epoch = 0;
  double sample_prob = 0.0;
  double train_loss = 0.0;  // mean negative log-likelihood per target token
  double val_loss = 0.0;
};

struct MleResult {
  CaptionerParams params;
  std::vector<MleEpoch> history;
  double best_val_loss = 0.0;
};

// Each epoch visits every labeled image with one reference drawn at random.
// Validation loss is the per-token likelihood over all references of the
// validation images, without sampling. Returns the best-validation parameters
// (the last epoch when there is no validation set).
MleResult pretrain_mle(const std::vector<const data::ImageRecord*>& labeled,
                       const std::vector<const data::ImageRecord*>& validation,
                       const data::Vocabulary& vocab, const CaptionerDims& dims,
                       const MleConfig& config,
                       const std::function<void(const MleEpoch&)>& on_epoch = {});

// Mean per-token negative log-likelihood of each image's references.
double mean_token_nll(const CaptionerParams& params,
                      const std::vector<const data::ImageRecord*>& images,
                      const data::Vocabulary& vocab);

}  // namespace discap::caption
