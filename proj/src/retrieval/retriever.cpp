#include "discap/retrieval/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "discap/error.hpp"
#include "discap/rl/adam.hpp"

namespace discap::retrieval {
namespace {

constexpr double kInitScale = 0.1;

Tensor uniform_tensor(Rng& rng, grad::Shape shape, double scale) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values) v = rng.uniform(-scale, scale);
  return t;
}

Var minus(Tape& tape, Var a, Var b) { return tape.add(a, tape.scale(b, -1.0)); }

Var broadcast_rows(Tape& tape, Var row, std::size_t n) {
  return tape.gather_rows(row, std::vector<std::size_t>(n, 0));
}

enum Slot {
  kEmbed,
  kUpdateX,
  kUpdateH,
  kUpdateB,
  kResetX,
  kResetH,
  kResetB,
  kCandX,
  kCandH,
  kCandB,
  kCapProj,
  kImgProj,
};

}  // namespace

RetrieverDims RetrieverParams::dims() const {
  return {embed.shape.at(0), embed.shape.at(1), update_h.shape.at(0), cap_proj.shape.at(0),
          img_proj.shape.at(1)};
}

std::vector<Tensor*> RetrieverParams::tensors() {
  return {&embed,  &update_x, &update_h, &update_b, &reset_x,  &reset_h,
          &reset_b, &cand_x,  &cand_h,   &cand_b,   &cap_proj, &img_proj};
}

std::vector<const Tensor*> RetrieverParams::tensors() const {
  return {&embed,  &update_x, &update_h, &update_b, &reset_x,  &reset_h,
          &reset_b, &cand_x,  &cand_h,   &cand_b,   &cap_proj, &img_proj};
}

const std::vector<std::string>& RetrieverParams::names() {
  static const std::vector<std::string> kNames = {
      "retriever.embed",   "retriever.update_x", "retriever.update_h", "retriever.update_b",
      "retriever.reset_x", "retriever.reset_h",  "retriever.reset_b",  "retriever.cand_x",
      "retriever.cand_h",  "retriever.cand_b",   "retriever.cap_proj", "retriever.img_proj"};
  return kNames;
}

void RetrieverParams::store(Checkpoint& ckpt) const {
  const auto ts = tensors();
  for (std::size_t k = 0; k < ts.size(); ++k) ckpt.add(names()[k], *ts[k]);
}

RetrieverParams RetrieverParams::load(const Checkpoint& ckpt) {
  RetrieverParams p;
  auto ts = p.tensors();
  for (std::size_t k = 0; k < ts.size(); ++k) *ts[k] = ckpt.get(names()[k]);
  const RetrieverDims d = p.dims();
  const std::size_t h = d.hidden, e = d.embed;
  const bool ok = p.update_x.shape == grad::Shape{h, e} && p.reset_x.shape == p.update_x.shape &&
                  p.cand_x.shape == p.update_x.shape && p.reset_h.shape == grad::Shape{h, h} &&
                  p.cand_h.shape == p.reset_h.shape && p.update_b.shape == grad::Shape{1, h} &&
                  p.reset_b.shape == p.update_b.shape && p.cand_b.shape == p.update_b.shape &&
                  p.cap_proj.shape == grad::Shape{d.joint, h};
  if (!ok) throw Error(ErrorCode::malformed_file, "retriever checkpoint has inconsistent shapes");
  return p;
}

RetrieverParams init_retriever(const RetrieverDims& d, std::uint64_t seed) {
  require(d.vocab > 0 && d.embed > 0 && d.hidden > 0 && d.joint > 0 && d.image > 0,
          "init_retriever: dims must be positive");
  Rng rng(seed);
  const double s = kInitScale;
  RetrieverParams p;
  p.embed = uniform_tensor(rng, {d.vocab, d.embed}, s);
  p.update_x = uniform_tensor(rng, {d.hidden, d.embed}, s);
  p.update_h = uniform_tensor(rng, {d.hidden, d.hidden}, s);
  p.update_b = Tensor::zeros({1, d.hidden});
  p.reset_x = uniform_tensor(rng, {d.hidden, d.embed}, s);
  p.reset_h = uniform_tensor(rng, {d.hidden, d.hidden}, s);
  p.reset_b = Tensor::zeros({1, d.hidden});
  p.cand_x = uniform_tensor(rng, {d.hidden, d.embed}, s);
  p.cand_h = uniform_tensor(rng, {d.hidden, d.hidden}, s);
  p.cand_b = Tensor::zeros({1, d.hidden});
  p.cap_proj = uniform_tensor(rng, {d.joint, d.hidden}, 1.0 / std::sqrt(double(d.hidden)));
  p.img_proj = uniform_tensor(rng, {d.joint, d.image}, 1.0 / std::sqrt(double(d.image)));
  return p;
}

BoundRetriever bind(Tape& tape, const RetrieverParams& params, bool trainable) {
  BoundRetriever out{&params, {}};
  for (const Tensor* t : params.tensors()) out.vars.push_back(tape.leaf(*t, trainable));
  return out;
}

Var encode_captions(Tape& tape, const BoundRetriever& model,
                    const std::vector<data::Caption>& captions) {
  require(!captions.empty(), "encode_captions: no captions");
  const std::size_t vocab = model.params->embed.shape[0];
  const std::size_t n = captions.size();
  std::size_t longest = 0;
  for (const auto& c : captions) {
    require(!c.empty(), "encode_caption: empty caption");
    for (data::TokenId id : c)
      require(id < vocab, "encode_caption: token id " + std::to_string(id) +
                              " out of range for vocabulary of " + std::to_string(vocab));
    longest = std::max(longest, c.size());
  }
  const auto& v = model.vars;
  const Var update_b = broadcast_rows(tape, v[kUpdateB], n);
  const Var reset_b = broadcast_rows(tape, v[kResetB], n);
  const Var cand_b = broadcast_rows(tape, v[kCandB], n);
  const std::size_t hidden = model.params->update_h.shape[0];

  Var h{};
  for (std::size_t t = 0; t < longest; ++t) {
    std::vector<std::size_t> ids(n);
    std::vector<double> mask(n * hidden, 0.0);
    bool all_active = true;
    for (std::size_t b = 0; b < n; ++b) {
      const bool active = t < captions[b].size();
      ids[b] = active ? captions[b][t] : data::kPad;
      all_active = all_active && active;
      if (active) std::fill_n(mask.begin() + b * hidden, hidden, 1.0);
    }
    const Var x = tape.gather_rows(v[kEmbed], ids);
    Var next;
    if (t == 0) {
      const Var z = tape.sigmoid(tape.add(tape.matmul(x, v[kUpdateX], true), update_b));
      const Var cand = tape.tanh(tape.add(tape.matmul(x, v[kCandX], true), cand_b));
      next = minus(tape, cand, tape.multiply(z, cand));
    } else {
      const Var z = tape.sigmoid(tape.add(
          tape.add(tape.matmul(x, v[kUpdateX], true), tape.matmul(h, v[kUpdateH], true)),
          update_b));
      const Var r = tape.sigmoid(tape.add(
          tape.add(tape.matmul(x, v[kResetX], true), tape.matmul(h, v[kResetH], true)), reset_b));
      const Var cand = tape.tanh(tape.add(
          tape.add(tape.matmul(x, v[kCandX], true),
                   tape.matmul(tape.multiply(r, h), v[kCandH], true)),
          cand_b));
      next = tape.add(cand, tape.multiply(z, minus(tape, h, cand)));
    }
    if (t == 0 || all_active) {
      h = next;
    } else {
      const Var m = tape.constant(Tensor::matrix(n, hidden, std::move(mask)));
      h = tape.add(h, tape.multiply(m, minus(tape, next, h)));
    }
  }
  return tape.l2_normalize(tape.matmul(h, v[kCapProj], true));
}

Var encode_images(Tape& tape, const BoundRetriever& model, const Tensor& features) {
  const std::size_t dim = model.params->img_proj.shape[1];
  require(features.rank() == 2 && features.shape[1] == dim,
          "encode_image: expected features of width " + std::to_string(dim) + ", got " +
              grad::shape_string(features.shape));
  return tape.l2_normalize(tape.matmul(tape.constant(features), model.vars[kImgProj], true));
}

Tensor encode_caption_batch(const RetrieverParams& params,
                            const std::vector<data::Caption>& captions) {
  Tape tape;
  const BoundRetriever model = bind(tape, params, false);
  return tape.value(encode_captions(tape, model, captions));
}

Tensor encode_caption(const RetrieverParams& params, const data::Caption& caption) {
  Tensor m = encode_caption_batch(params, {caption});
  return Tensor::vector(std::move(m.values));
}

Tensor feature_matrix(const std::vector<const data::ImageRecord*>& images) {
  require(!images.empty(), "feature_matrix: no images");
  const std::size_t dim = images.front()->features.size();
  std::vector<double> values;
  values.reserve(images.size() * dim);
  for (const auto* r : images) {
    require(r->features.size() == dim, "feature_matrix: record " + r->id +
                                           " has feature dimension " +
                                           std::to_string(r->features.size()));
    values.insert(values.end(), r->features.begin(), r->features.end());
  }
  return Tensor::matrix(images.size(), dim, std::move(values));
}

Tensor encode_image(const RetrieverParams& params, const std::vector<double>& features) {
  require(!features.empty(), "encode_image: empty feature vector");
  Tape tape;
  const BoundRetriever model = bind(tape, params, false);
  Tensor m = tape.value(encode_images(tape, model, Tensor::matrix(1, features.size(), features)));
  return Tensor::vector(std::move(m.values));
}

Tensor encode_image_batch(const RetrieverParams& params,
                          const std::vector<const data::ImageRecord*>& images) {
  Tape tape;
  const BoundRetriever model = bind(tape, params, false);
  return tape.value(encode_images(tape, model, feature_matrix(images)));
}

double similarity(const Tensor& c, const Tensor& v) {
  require(c.size() == v.size(), "similarity: embedding sizes differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) acc += c[i] * v[i];
  return acc;
}

std::string_view to_string(LossKind kind) {
  switch (kind) {
    case LossKind::vse_pp:
      return "vse_pp";
    case LossKind::vse0:
      return "vse0";
    case LossKind::softmax:
      return "softmax";
  }
  return "?";
}

LossKind parse_loss_kind(std::string_view name) {
  for (LossKind k : {LossKind::vse_pp, LossKind::vse0, LossKind::softmax})
    if (to_string(k) == name) return k;
  fail("unknown retrieval loss kind '" + std::string(name) + "'");
}

Var retrieval_loss(Tape& tape, Var sims, std::size_t positive, const LossConfig& config) {
  const Tensor& s = tape.value(sims);
  require(s.rank() == 1, "retrieval_loss: similarities must be a vector");
  const std::size_t n = s.size();
  require(positive < n, "retrieval_loss: positive index " + std::to_string(positive) +
                            " out of range for batch of " + std::to_string(n));
  if (config.kind == LossKind::softmax) {
    require(config.temperature > 0.0, "retrieval_loss: temperature must be positive");
    const Var logp = tape.log_softmax(tape.scale(sims, 1.0 / config.temperature));
    return tape.scale(tape.sum(tape.gather_rows(logp, {positive})), -1.0);
  }
  require(config.margin > 0.0, "retrieval_loss: margin must be positive");
  if (n == 1) return tape.scale(tape.sum(sims), 0.0);
  std::vector<std::size_t> negatives;
  for (std::size_t j = 0; j < n; ++j)
    if (j != positive) negatives.push_back(j);
  if (config.kind == LossKind::vse_pp) {
    std::size_t hardest = negatives.front();
    for (std::size_t j : negatives)
      if (s[j] > s[hardest]) hardest = j;
    negatives = {hardest};
  }
  const std::size_t k = negatives.size();
  const Var pos = tape.gather_rows(sims, std::vector<std::size_t>(k, positive));
  const Var neg = tape.gather_rows(sims, negatives);
  const Var hinge = tape.add(minus(tape, neg, pos), tape.constant(Tensor::filled({k}, config.margin)));
  return tape.sum(tape.clamp_min_zero(hinge));
}

double retrieval_loss_value(const std::vector<double>& sims, std::size_t positive,
                            const LossConfig& config) {
  require(!sims.empty(), "retrieval_loss: empty batch");
  Tape tape;
  return tape.value(retrieval_loss(tape, tape.constant(Tensor::vector(sims)), positive, config))
      .item();
}

RetrieverTrainResult train_retriever(const std::vector<const data::ImageRecord*>& labeled,
                                     const std::vector<const data::ImageRecord*>& validation,
                                     const data::Vocabulary& vocab, const RetrieverDims& dims_in,
                                     const RetrieverTrainConfig& config,
                                     const std::function<void(const RetrieverEpoch&)>& on_epoch) {
  require(!labeled.empty(), "train_retriever: no labeled data");
  require(config.batch_size > 0, "train_retriever: batch_size must be positive");
  for (const auto* r : labeled)
    require(r->labeled(), "train_retriever: record " + r->id + " has no captions");
  RetrieverDims dims = dims_in;
  dims.vocab = vocab.size();
  dims.image = labeled.front()->features.size();

  std::vector<std::vector<data::Caption>> references;
  for (const auto* r : labeled) {
    std::vector<data::Caption> caps;
    for (const auto& c : r->captions) caps.push_back(vocab.encode(c));
    references.push_back(std::move(caps));
  }
  std::vector<data::Caption> val_queries;
  for (const auto* r : validation) {
    require(r->labeled(), "train_retriever: validation record " + r->id + " has no captions");
    val_queries.push_back(vocab.encode(r->captions.front()));
  }

  RetrieverTrainResult result;
  result.params = init_retriever(dims, config.seed);
  RetrieverParams params = result.params;
  Rng rng(config.seed);
  rl::OptimizerState opt;
  opt.base_lr = config.lr;
  std::vector<std::size_t> order(labeled.size());
  std::iota(order.begin(), order.end(), 0);
  bool have_best = false;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<const data::ImageRecord*> images;
      std::vector<data::Caption> captions;
      for (std::size_t p = start; p < end; ++p) {
        const auto& refs = references[order[p]];
        images.push_back(labeled[order[p]]);
        captions.push_back(refs[rng.below(refs.size())]);
      }
      const std::size_t n = images.size();
      Tape tape;
      const BoundRetriever model = bind(tape, params, true);
      const Var c = encode_captions(tape, model, captions);
      const Var v = encode_images(tape, model, feature_matrix(images));
      const Var sims = tape.matmul(c, v, true);
      std::vector<Var> losses;
      for (std::size_t i = 0; i < n; ++i)
        losses.push_back(retrieval_loss(tape, tape.slice(sims, i * n, (i + 1) * n), i, config.loss));
      const Var loss = tape.mean(tape.concat(losses));
      const double value = tape.value(loss).item();
      if (!std::isfinite(value))
        throw Error(ErrorCode::numerical_abort, "train_retriever: non-finite loss at epoch " +
                                                    std::to_string(epoch));
      tape.backward(loss);
      std::vector<Tensor> grads;
      for (const Var& var : model.vars) grads.push_back(tape.grad(var));
      rl::adam_update(opt, params.tensors(), grads);
      loss_total += value;
      ++batches;
    }
    RetrieverEpoch record{epoch, loss_total / static_cast<double>(batches), 0.0};
    if (!validation.empty())
      record.val_recall_at_1 = recall_at_k(params, val_queries, validation, {1}).front();
    if (!have_best || record.val_recall_at_1 > result.best_val_recall_at_1 || validation.empty()) {
      result.params = params;
      result.best_val_recall_at_1 = record.val_recall_at_1;
      have_best = true;
    }
    result.history.push_back(record);
    if (on_epoch) on_epoch(record);
  }
  return result;
}

std::pair<std::size_t, std::size_t> clamp_range(const MiningRange& range, std::size_t pool_size) {
  require(pool_size > 0, "mining: empty pool");
  const std::size_t lo = std::max<std::size_t>(1, range.h_min);
  const std::size_t hi = std::min(range.h_max, pool_size);
  if (lo > hi) return {1, pool_size};
  return {lo, hi};
}

std::vector<MinedNegative> mine_hard_negatives(const Tensor& query, const Tensor& pool,
                                               const MiningRange& range, std::size_t count,
                                               Rng& rng) {
  require(pool.rank() == 2 && pool.shape[0] > 0, "mining: pool must be a nonempty matrix");
  require(count >= 1, "mining: count must be at least 1");
  require(query.size() == pool.shape[1], "mining: query and pool embeddings differ in size");
  const std::size_t n = pool.shape[0];
  const auto [lo, hi] = clamp_range(range, n);
  const std::size_t width = hi - lo + 1;
  if (count > width)
    fail("mining: need " + std::to_string(count) + " negatives but the clamped range [" +
         std::to_string(lo) + ", " + std::to_string(hi) + "] holds only " + std::to_string(width));
  std::vector<double> sims(n);
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t d = 0; d < query.size(); ++d) acc += query[d] * pool.at(j, d);
    sims[j] = acc;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  std::vector<MinedNegative> out;
  for (std::size_t offset : rng.sample_without_replacement(width, count)) {
    const std::size_t rank = lo + offset;
    out.push_back({order[rank - 1], rank});
  }
  return out;
}

std::vector<MinedNegative> mine_hard_negatives(const RetrieverParams& params,
                                               const data::Caption& query,
                                               const std::vector<const data::ImageRecord*>& pool,
                                               const MiningRange& range, std::size_t count,
                                               Rng& rng) {
  require(!pool.empty(), "mining: empty pool");
  return mine_hard_negatives(encode_caption(params, query), encode_image_batch(params, pool), range,
                             count, rng);
}

std::size_t rank_of(const Tensor& sims, std::size_t query, std::size_t own) {
  const std::size_t n = sims.shape[1];
  const double target = sims.at(query, own);
  std::size_t rank = 1;
  for (std::size_t j = 0; j < n; ++j) {
    const double s = sims.at(query, j);
    if (s > target || (s == target && j < own)) ++rank;
  }
  return rank;
}

std::vector<double> recall_at_k(const Tensor& queries, const Tensor& candidates,
                                const std::vector<std::size_t>& ks) {
  require(queries.rank() == 2 && candidates.rank() == 2 && queries.shape == candidates.shape,
          "recall_at_k: queries and candidates must be aligned");
  const std::size_t n = candidates.shape[0];
  for (std::size_t k : ks) {
    require(k >= 1, "recall_at_k: k must be at least 1");
    require(k <= n, "recall_at_k: k exceeds candidate count");
  }
  Tape tape;
  const Tensor sims =
      tape.value(tape.matmul(tape.constant(queries), tape.constant(candidates), true));
  std::vector<double> hits(ks.size(), 0.0);
  for (std::size_t q = 0; q < n; ++q) {
    const std::size_t r = rank_of(sims, q, q);
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (r <= ks[i]) hits[i] += 1.0;
  }
  for (double& h : hits) h /= static_cast<double>(n);
  return hits;
}

std::vector<double> recall_at_k(const RetrieverParams& params,
                                const std::vector<data::Caption>& queries,
                                const std::vector<const data::ImageRecord*>& candidates,
                                const std::vector<std::size_t>& ks) {
  require(queries.size() == candidates.size(),
          "recall_at_k: " + std::to_string(queries.size()) + " queries for " +
              std::to_string(candidates.size()) + " candidates");
  return recall_at_k(encode_caption_batch(params, queries), encode_image_batch(params, candidates),
                     ks);
}

}  // namespace discap::retrieval
