#include "discap/rl/rltrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "discap/error.hpp"

namespace discap::rl {

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::baseline:
      return "baseline";
    case Mode::sr_fl:
      return "sr-fl";
    case Mode::sr_pl:
      return "sr-pl";
  }
  return "?";
}

Mode parse_mode(std::string_view name) {
  for (Mode m : {Mode::baseline, Mode::sr_fl, Mode::sr_pl})
    if (to_string(m) == name) return m;
  fail("unknown mode '" + std::string(name) + "' (expected baseline, sr-fl or sr-pl)");
}

BatchRatio parse_ratio(std::string_view text) {
  const auto colon = text.find(':');
  require(colon != std::string_view::npos, "ratio must look like n_l:n_u");
  auto parse = [&](std::string_view part) {
    require(!part.empty() && part.find_first_not_of("0123456789") == std::string_view::npos,
            "ratio must look like n_l:n_u, got '" + std::string(text) + "'");
    return static_cast<std::size_t>(std::stoull(std::string(part)));
  };
  BatchRatio r{parse(text.substr(0, colon)), parse(text.substr(colon + 1))};
  require(r.labeled > 0, "ratio needs a positive labeled share");
  return r;
}

std::string to_string(const BatchRatio& ratio) {
  return std::to_string(ratio.labeled) + ":" + std::to_string(ratio.unlabeled);
}

std::pair<std::size_t, std::size_t> split_batch(std::size_t batch_size, const BatchRatio& ratio) {
  require(batch_size >= 1, "batch size must be positive");
  require(ratio.labeled > 0, "ratio needs a positive labeled share");
  const std::size_t parts = ratio.labeled + ratio.unlabeled;
  std::size_t n_l = (batch_size * ratio.labeled + parts / 2) / parts;
  n_l = std::clamp<std::size_t>(n_l, 1, batch_size);
  return {n_l, batch_size - n_l};
}

std::vector<LabeledImage> encode_references(const std::vector<const data::ImageRecord*>& images,
                                            const data::Vocabulary& vocab, std::size_t t_max) {
  std::vector<LabeledImage> out;
  out.reserve(images.size());
  for (const auto* r : images) {
    require(r->labeled(), "record " + r->id + " has no reference captions");
    LabeledImage li{r, {}};
    for (const auto& c : r->captions) {
      reward::Sentence s = vocab.encode(c);
      if (s.size() > t_max) s.resize(t_max);
      li.references.push_back(std::move(s));
    }
    out.push_back(std::move(li));
  }
  return out;
}

NegativeMiner::NegativeMiner(const retrieval::RetrieverParams& retriever,
                             const std::vector<const data::ImageRecord*>& pool,
                             const retrieval::MiningRange& range)
    : retriever_(&retriever), range_(range) {
  require(!pool.empty(), "NegativeMiner: empty unlabeled pool");
  require(range.h_min >= 1 && range.h_min <= range.h_max,
          "NegativeMiner: mining range needs 1 <= h_min <= h_max");
  pool_embeddings_ = retrieval::encode_image_batch(retriever, pool);
}

std::vector<retrieval::MinedNegative> NegativeMiner::candidates(const reward::Sentence& query,
                                                                Rng& rng) const {
  const auto [lo, hi] = retrieval::clamp_range(range_, pool_size());
  const Tensor q = retrieval::encode_caption(*retriever_, data::content_tokens(query));
  return retrieval::mine_hard_negatives(q, pool_embeddings_, range_, hi - lo + 1, rng);
}

BatchPlan compose_batch(const std::vector<LabeledImage>& labeled, std::size_t n_labeled,
                        std::size_t n_unlabeled, const NegativeMiner* miner, Rng& rng) {
  require(n_labeled >= 1, "compose_batch: at least one labeled image per batch");
  require(n_labeled <= labeled.size(),
          "compose_batch: " + std::to_string(n_labeled) + " labeled images requested but only " +
              std::to_string(labeled.size()) + " available");
  if (n_unlabeled > 0) {
    require(miner != nullptr, "compose_batch: unlabeled images requested without a pool");
    require(miner->pool_size() >= n_unlabeled,
            "compose_batch: unlabeled pool of " + std::to_string(miner->pool_size()) +
                " is too small; at least " + std::to_string(n_unlabeled) + " images required");
  }
  BatchPlan plan;
  plan.labeled = rng.sample_without_replacement(labeled.size(), n_labeled);
  for (std::size_t i : plan.labeled) {
    require(!labeled[i].references.empty(),
            "compose_batch: labeled image " + labeled[i].record->id + " has no references");
    plan.query_caption.push_back(rng.below(labeled[i].references.size()));
  }
  if (n_unlabeled == 0) return plan;

  std::vector<std::vector<retrieval::MinedNegative>> lists;
  for (std::size_t q = 0; q < n_labeled; ++q)
    lists.push_back(miner->candidates(
        labeled[plan.labeled[q]].references[plan.query_caption[q]], rng));
  std::vector<std::size_t> cursor(n_labeled, 0);
  std::set<std::size_t> used;
  bool progressed = true;
  while (plan.unlabeled.size() < n_unlabeled && progressed) {
    progressed = false;
    for (std::size_t q = 0; q < n_labeled && plan.unlabeled.size() < n_unlabeled; ++q) {
      auto& list = lists[q];
      while (cursor[q] < list.size() && used.count(list[cursor[q]].pool_index)) ++cursor[q];
      if (cursor[q] == list.size()) continue;
      const auto& pick = list[cursor[q]++];
      used.insert(pick.pool_index);
      plan.unlabeled.push_back(pick.pool_index);
      plan.unlabeled_rank.push_back(pick.rank);
      progressed = true;
    }
  }
  if (plan.unlabeled.size() < n_unlabeled) {
    const auto [lo, hi] = retrieval::clamp_range(miner->range(), miner->pool_size());
    throw Error(ErrorCode::config_invalid,
                "compose_batch: mining range [" + std::to_string(lo) + ", " + std::to_string(hi) +
                    "] yields only " + std::to_string(plan.unlabeled.size()) +
                    " distinct images; at least " + std::to_string(n_unlabeled) + " required");
  }
  return plan;
}

Tensor batch_image_embeddings(const RewardContext& context, const std::vector<RlImage>& batch) {
  if (context.config.alpha == 0.0) return Tensor::zeros({batch.size(), 1});
  require(context.retriever != nullptr, "batch rewards: retriever required when alpha > 0");
  require(!batch.empty(), "batch rewards: empty batch");
  const std::size_t dim = batch.front().features->size();
  std::vector<double> values;
  values.reserve(batch.size() * dim);
  for (const auto& img : batch) {
    require(img.features->size() == dim, "batch rewards: feature dimensions differ");
    values.insert(values.end(), img.features->begin(), img.features->end());
  }
  Tape tape;
  const auto model = retrieval::bind(tape, *context.retriever, false);
  return tape.value(
      retrieval::encode_images(tape, model, Tensor::matrix(batch.size(), dim, std::move(values))));
}

std::vector<double> batch_rewards(const RewardContext& context, const std::vector<RlImage>& batch,
                                  const std::vector<reward::Sentence>& captions,
                                  const Tensor& image_embeddings) {
  require(captions.size() == batch.size(), "batch rewards: one caption per image required");
  const double alpha = context.config.alpha;
  std::vector<double> retrieval_reward(batch.size(), 0.0);
  if (alpha != 0.0) {
    require(context.retriever != nullptr, "batch rewards: retriever required when alpha > 0");
    retrieval_reward = reward::self_retrieval_rewards(*context.retriever, captions,
                                                      image_embeddings, context.config);
  }
  std::vector<double> out(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].references == nullptr) {
      out[i] = reward::combine_unlabeled(retrieval_reward[i], alpha);
      continue;
    }
    require(context.stats != nullptr, "batch rewards: corpus statistics required");
    const double cider =
        reward::cider_d(captions[i], *batch[i].references, *context.stats, context.config.cider);
    out[i] = alpha == 0.0 ? cider : reward::combine_labeled(cider, retrieval_reward[i], alpha);
  }
  return out;
}

Var reinforce_loss(Tape& tape, Var log_probs, const std::vector<double>& rewards,
                   const std::vector<double>& baselines) {
  const std::size_t n = rewards.size();
  require(n > 0 && baselines.size() == n && tape.value(log_probs).size() == n,
          "reinforce_loss: one reward and baseline per sample required");
  std::vector<double> coef(n);
  for (std::size_t i = 0; i < n; ++i)
    coef[i] = -(rewards[i] - baselines[i]) / static_cast<double>(n);
  return tape.sum(tape.multiply(log_probs, tape.constant(Tensor::vector(std::move(coef)))));
}

StepDiagnostics reinforce_step(caption::CaptionerParams& params, OptimizerState& optimizer,
                               const std::vector<RlImage>& batch, const RewardContext& context,
                               const StepConfig& step, Rng& rng) {
  require(!batch.empty(), "reinforce_step: empty batch");
  const std::size_t n = batch.size();
  const std::size_t dim = batch.front().features->size();
  std::vector<double> values;
  values.reserve(n * dim);
  StepDiagnostics diag;
  for (const auto& img : batch) {
    require(img.features->size() == dim, "reinforce_step: feature dimensions differ");
    values.insert(values.end(), img.features->begin(), img.features->end());
    ++(img.references ? diag.labeled : diag.unlabeled);
  }
  const Tensor features = Tensor::matrix(n, dim, std::move(values));
  const Tensor image_embeddings = batch_image_embeddings(context, batch);

  Tape tape;
  const caption::BoundCaptioner model = caption::bind(tape, params, true);
  caption::SampleBatch samples = caption::sample_captions(tape, model, features, rng, step.t_max);
  std::vector<reward::Sentence> sampled, greedy;
  for (std::size_t i = 0; i < n; ++i) {
    sampled.push_back(samples.captions[i].tokens);
    greedy.push_back(caption::greedy_decode(params, *batch[i].features, step.t_max));
  }
  const std::vector<double> rewards = batch_rewards(context, batch, sampled, image_embeddings);
  const std::vector<double> baselines = batch_rewards(context, batch, greedy, image_embeddings);
  for (std::size_t i = 0; i < n; ++i) {
    diag.mean_reward += rewards[i] / static_cast<double>(n);
    diag.mean_baseline += baselines[i] / static_cast<double>(n);
  }
  diag.mean_advantage = diag.mean_reward - diag.mean_baseline;

  const Var loss = reinforce_loss(tape, samples.log_probs, rewards, baselines);
  diag.loss = tape.value(loss).item();
  auto abort = [&](const std::string& what) {
    throw Error(ErrorCode::numerical_abort,
                "reinforce_step: " + what + " (loss " + std::to_string(diag.loss) +
                    ", mean reward " + std::to_string(diag.mean_reward) + ", mean baseline " +
                    std::to_string(diag.mean_baseline) + ")");
  };
  if (!std::isfinite(diag.loss)) abort("non-finite loss");
  tape.backward(loss);
  std::vector<Tensor> grads = caption::gradients(tape, model);
  diag.grad_norm = clip_global_norm(grads, step.clip_norm);
  if (!std::isfinite(diag.grad_norm)) abort("non-finite gradient");
  diag.lr = optimizer.current_lr();
  adam_update(optimizer, params.tensors(), grads);
  return diag;
}

reward::RewardConfig effective_reward(const RlConfig& config) {
  reward::RewardConfig r = config.reward;
  if (config.mode == Mode::baseline) r.alpha = 0.0;
  return r;
}

namespace {

struct Validation {
  double cider = 0.0;
  double recall_at_1 = 0.0;
  double retrieval_reward = 0.0;
};

Validation validate_epoch(const caption::CaptionerParams& params,
                          const retrieval::RetrieverParams& retriever,
                          const std::vector<LabeledImage>& validation,
                          const reward::CorpusStats& stats, const RlConfig& config,
                          const reward::RewardConfig& reward_config) {
  Validation v;
  if (validation.empty()) return v;
  std::vector<const data::ImageRecord*> images;
  for (const auto& li : validation) images.push_back(li.record);
  const auto captions = caption::generate_captions(params, images, 1, config.step.t_max);
  for (std::size_t i = 0; i < validation.size(); ++i)
    v.cider += reward::cider_d(captions[i], validation[i].references, stats, reward_config.cider);
  v.cider /= static_cast<double>(validation.size());

  const Tensor image_embeddings = retrieval::encode_image_batch(retriever, images);
  std::vector<reward::Sentence> queries;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < captions.size(); ++i)
    if (!captions[i].empty()) {
      queries.push_back(captions[i]);
      rows.push_back(i);
    }
  std::size_t hits = 0;
  if (!queries.empty()) {
    const Tensor q = retrieval::encode_caption_batch(retriever, queries);
    const std::size_t d = q.cols();
    for (std::size_t k = 0; k < rows.size(); ++k) {
      std::vector<double> sims(images.size(), 0.0);
      for (std::size_t j = 0; j < images.size(); ++j)
        for (std::size_t c = 0; c < d; ++c) sims[j] += q.at(k, c) * image_embeddings.at(j, c);
      const Tensor row = Tensor::matrix(1, sims.size(), sims);
      if (retrieval::rank_of(row, 0, rows[k]) == 1) ++hits;
    }
  }
  v.recall_at_1 = static_cast<double>(hits) / static_cast<double>(images.size());

  if (reward_config.alpha != 0.0) {
    for (std::size_t start = 0; start < images.size(); start += config.batch_size) {
      const std::size_t end = std::min(images.size(), start + config.batch_size);
      std::vector<double> block;
      for (std::size_t j = start; j < end; ++j)
        for (std::size_t c = 0; c < image_embeddings.cols(); ++c)
          block.push_back(image_embeddings.at(j, c));
      const Tensor group = Tensor::matrix(end - start, image_embeddings.cols(), block);
      const std::vector<reward::Sentence> group_captions(captions.begin() + start,
                                                         captions.begin() + end);
      for (double r : reward::self_retrieval_rewards(retriever, group_captions, group, reward_config))
        v.retrieval_reward += r;
    }
    v.retrieval_reward /= static_cast<double>(images.size());
  }
  return v;
}

}  // namespace

RlResult train_rl(const caption::CaptionerParams& initial,
                  const retrieval::RetrieverParams& retriever, const RlData& data,
                  const data::Vocabulary& vocab, const RlConfig& config,
                  const std::function<void(const RlEpoch&)>& on_epoch) {
  const reward::RewardConfig reward_config = effective_reward(config);
  reward::validate(reward_config);
  require(config.step.clip_norm > 0.0, "train_rl: clip norm must be positive");
  if (data.labeled.empty())
    throw Error(ErrorCode::config_invalid, "train_rl: no labeled images");

  std::size_t n_l = config.batch_size, n_u = 0;
  if (config.mode == Mode::sr_pl) {
    std::tie(n_l, n_u) = split_batch(config.batch_size, config.ratio);
    if (n_u > 0 && data.unlabeled.empty())
      throw Error(ErrorCode::config_invalid, "train_rl: mode sr-pl needs an unlabeled pool");
  }
  n_l = std::min(n_l, data.labeled.size());

  const std::vector<LabeledImage> labeled = encode_references(data.labeled, vocab, config.step.t_max);
  const std::vector<LabeledImage> validation =
      encode_references(data.validation, vocab, config.step.t_max);
  std::vector<std::vector<reward::Sentence>> train_sets, val_sets;
  for (const auto& li : labeled) train_sets.push_back(li.references);
  for (const auto& li : validation) val_sets.push_back(li.references);
  const reward::CorpusStats train_stats = reward::corpus_stats(train_sets, reward_config.cider.n_max);
  const reward::CorpusStats val_stats =
      validation.empty() ? reward::CorpusStats{} : reward::corpus_stats(val_sets, reward_config.cider.n_max);

  std::optional<NegativeMiner> miner;
  if (n_u > 0) miner.emplace(retriever, data.unlabeled, config.mining);

  RewardContext context{&retriever, &train_stats, reward_config};
  RlResult result;
  caption::CaptionerParams params = initial;
  result.params = params;
  OptimizerState& opt = result.optimizer;
  opt.base_lr = config.lr;
  opt.schedule = config.schedule;
  Rng rng(config.seed);
  const std::size_t steps = (labeled.size() + n_l - 1) / n_l;
  bool have_best = false;
  double best_score = 0.0;
  const auto started = std::chrono::steady_clock::now();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    RlEpoch record;
    record.epoch = epoch;
    for (std::size_t s = 0; s < steps; ++s) {
      const BatchPlan plan = compose_batch(labeled, n_l, n_u, miner ? &*miner : nullptr, rng);
      std::vector<RlImage> batch;
      for (std::size_t i : plan.labeled)
        batch.push_back({&labeled[i].record->features, &labeled[i].references});
      for (std::size_t u : plan.unlabeled) batch.push_back({&data.unlabeled[u]->features, nullptr});
      const StepDiagnostics diag = reinforce_step(params, opt, batch, context, config.step, rng);
      record.mean_reward += diag.mean_reward / static_cast<double>(steps);
      record.mean_baseline += diag.mean_baseline / static_cast<double>(steps);
    }
    record.lr = opt.current_lr();
    const Validation v =
        validate_epoch(params, retriever, validation, val_stats, config, reward_config);
    record.val_cider = v.cider;
    record.val_recall_at_1 = v.recall_at_1;
    record.val_reward = reward::combine_labeled(v.cider, v.retrieval_reward, reward_config.alpha);
    if (config.record_wall_time)
      record.wall_time_s =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (!have_best || validation.empty() || record.val_reward > best_score) {
      result.params = params;
      result.best_epoch = epoch;
      best_score = record.val_reward;
      have_best = true;
    }
    result.history.push_back(record);
    if (on_epoch) on_epoch(record);
  }
  result.last_params = params;
  return result;
}

std::string history_line(const RlEpoch& e, const std::optional<std::string>& fingerprint) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["mean_reward"] = e.mean_reward;
  j["mean_baseline"] = e.mean_baseline;
  j["val_cider"] = e.val_cider;
  j["val_recall_at_1"] = e.val_recall_at_1;
  j["val_reward"] = e.val_reward;
  j["lr"] = e.lr;
  j["wall_time_s"] = e.wall_time_s;
  if (fingerprint) j["config_fingerprint"] = *fingerprint;
  return j.dump();
}

void save_history(const std::filesystem::path& path, const std::vector<RlEpoch>& history,
                  const std::optional<std::string>& fingerprint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::missing_artifact, "cannot write " + path.string());
  for (const auto& e : history) out << history_line(e, fingerprint) << '\n';
  if (!out) throw Error(ErrorCode::missing_artifact, "failed writing " + path.string());
}

}  // namespace discap::rl
