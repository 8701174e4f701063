#include "discap/caption/captioner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "discap/error.hpp"
#include "discap/rl/adam.hpp"

namespace discap::caption {
namespace {

constexpr double kInitScale = 0.08;
constexpr std::size_t kEvalChunk = 250;

Tensor uniform_tensor(Rng& rng, grad::Shape shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values) v = rng.uniform(-kInitScale, kInitScale);
  return t;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out(end - begin);
  std::iota(out.begin(), out.end(), begin);
  return out;
}

Tensor column(const Tensor& v) { return Tensor::matrix(v.size(), 1, v.values); }

Tensor ones_column(std::size_t n) { return Tensor::filled({n, 1}, 1.0); }

void check_token(data::TokenId id, std::size_t vocab, const char* what) {
  if (id >= vocab)
    fail(std::string(what) + ": token id " + std::to_string(id) + " out of range for vocabulary of " +
         std::to_string(vocab));
}

enum Slot { kEmbed, kInitH, kInitC, kGateW, kGateB, kOutW, kOutB };

}  // namespace

CaptionerDims CaptionerParams::dims() const {
  return {embed.shape.at(0), embed.shape.at(1), init_h.shape.at(0), init_h.shape.at(1)};
}

std::vector<Tensor*> CaptionerParams::tensors() {
  return {&embed, &init_h, &init_c, &gate_w, &gate_b, &out_w, &out_b};
}

std::vector<const Tensor*> CaptionerParams::tensors() const {
  return {&embed, &init_h, &init_c, &gate_w, &gate_b, &out_w, &out_b};
}

const std::vector<std::string>& CaptionerParams::names() {
  static const std::vector<std::string> kNames = {
      "captioner.embed",  "captioner.init_h", "captioner.init_c", "captioner.gate_w",
      "captioner.gate_b", "captioner.out_w",  "captioner.out_b"};
  return kNames;
}

void CaptionerParams::store(Checkpoint& ckpt) const {
  const auto ts = tensors();
  for (std::size_t k = 0; k < ts.size(); ++k) ckpt.add(names()[k], *ts[k]);
}

CaptionerParams CaptionerParams::load(const Checkpoint& ckpt) {
  CaptionerParams p;
  auto ts = p.tensors();
  for (std::size_t k = 0; k < ts.size(); ++k) *ts[k] = ckpt.get(names()[k]);
  const bool ranks_ok = p.embed.rank() == 2 && p.init_h.rank() == 2;
  if (ranks_ok) {
    const CaptionerDims d = p.dims();
    const bool ok =
        p.init_c.shape == p.init_h.shape &&
        p.gate_w.shape == grad::Shape{4 * d.hidden, d.embed + d.hidden} &&
        p.gate_b.shape == grad::Shape{4 * d.hidden} &&
        p.out_w.shape == grad::Shape{d.vocab, d.hidden} && p.out_b.shape == grad::Shape{d.vocab} &&
        d.vocab > kFirstEmittable;
    if (ok) return p;
  }
  throw Error(ErrorCode::malformed_file, "captioner checkpoint has inconsistent shapes");
}

CaptionerParams init_captioner(const CaptionerDims& d, std::uint64_t seed) {
  require(d.embed > 0 && d.hidden > 0 && d.image > 0, "init_captioner: dims must be positive");
  require(d.vocab > kFirstEmittable, "init_captioner: vocabulary needs at least one emittable id");
  Rng rng(seed);
  CaptionerParams p;
  p.embed = uniform_tensor(rng, {d.vocab, d.embed});
  p.init_h = uniform_tensor(rng, {d.hidden, d.image});
  p.init_c = uniform_tensor(rng, {d.hidden, d.image});
  p.gate_w = uniform_tensor(rng, {4 * d.hidden, d.embed + d.hidden});
  p.gate_b = uniform_tensor(rng, {4 * d.hidden});
  for (std::size_t i = d.hidden; i < 2 * d.hidden; ++i) p.gate_b[i] = 1.0;
  p.out_w = uniform_tensor(rng, {d.vocab, d.hidden});
  p.out_b = uniform_tensor(rng, {d.vocab});
  return p;
}

DecoderState initial_state(const CaptionerParams& p, const std::vector<double>& features) {
  const std::size_t hidden = p.init_h.shape[0], dim = p.init_h.shape[1];
  require(features.size() == dim, "initial_state: expected " + std::to_string(dim) +
                                      " features, got " + std::to_string(features.size()));
  DecoderState s{std::vector<double>(hidden, 0.0), std::vector<double>(hidden, 0.0)};
  for (std::size_t i = 0; i < hidden; ++i)
    for (std::size_t k = 0; k < dim; ++k) {
      s.h[i] += p.init_h.at(i, k) * features[k];
      s.c[i] += p.init_c.at(i, k) * features[k];
    }
  return s;
}

StepOutput decode_step(const CaptionerParams& p, const DecoderState& state,
                       data::TokenId previous) {
  const std::size_t vocab = p.embed.shape[0], e_dim = p.embed.shape[1];
  const std::size_t hidden = p.init_h.shape[0], width = e_dim + hidden;
  check_token(previous, vocab, "decode_step");
  require(state.h.size() == hidden && state.c.size() == hidden, "decode_step: state size mismatch");
  std::vector<double> input(width);
  for (std::size_t k = 0; k < e_dim; ++k) input[k] = p.embed.at(previous, k);
  for (std::size_t k = 0; k < hidden; ++k) input[e_dim + k] = state.h[k];
  std::vector<double> pre(4 * hidden);
  for (std::size_t r = 0; r < 4 * hidden; ++r) {
    const double* row = &p.gate_w.values[r * width];
    double acc = 0.0;
    for (std::size_t k = 0; k < width; ++k) acc += row[k] * input[k];
    pre[r] = acc + p.gate_b[r];
  }
  StepOutput out;
  out.state.h.resize(hidden);
  out.state.c.resize(hidden);
  for (std::size_t i = 0; i < hidden; ++i) {
    const double in_gate = sigmoid(pre[i]);
    const double forget = sigmoid(pre[hidden + i]);
    const double cand = std::tanh(pre[2 * hidden + i]);
    const double out_gate = sigmoid(pre[3 * hidden + i]);
    out.state.c[i] = forget * state.c[i] + in_gate * cand;
    out.state.h[i] = out_gate * std::tanh(out.state.c[i]);
  }
  out.log_probs.assign(vocab, -std::numeric_limits<double>::infinity());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t w = kFirstEmittable; w < vocab; ++w) {
    double acc = 0.0;
    for (std::size_t k = 0; k < hidden; ++k) acc += p.out_w.at(w, k) * out.state.h[k];
    out.log_probs[w] = acc + p.out_b[w];
    mx = std::max(mx, out.log_probs[w]);
  }
  double total = 0.0;
  for (std::size_t w = kFirstEmittable; w < vocab; ++w) total += std::exp(out.log_probs[w] - mx);
  const double lse = mx + std::log(total);
  for (std::size_t w = kFirstEmittable; w < vocab; ++w) out.log_probs[w] -= lse;
  return out;
}

std::vector<double> StepModel::step(const State& state, data::TokenId previous, State& next) const {
  StepOutput out = decode_step(*params_, state, previous);
  next = std::move(out.state);
  return std::move(out.log_probs);
}

data::Caption greedy_decode(const CaptionerParams& params, const std::vector<double>& features,
                            std::size_t t_max) {
  return caption::greedy_decode(StepModel(params, features), t_max).tokens;
}

data::Caption beam_search(const CaptionerParams& params, const std::vector<double>& features,
                          std::size_t width, std::size_t t_max) {
  return caption::beam_search(StepModel(params, features), width, t_max).tokens;
}

std::vector<data::Caption> generate_captions(const CaptionerParams& params,
                                             const std::vector<const data::ImageRecord*>& images,
                                             std::size_t width, std::size_t t_max) {
  require(width >= 1, "generate_captions: width must be at least 1");
  std::vector<data::Caption> out;
  out.reserve(images.size());
  for (const auto* r : images)
    out.push_back(data::content_tokens(width == 1 ? greedy_decode(params, r->features, t_max)
                                                  : beam_search(params, r->features, width, t_max)));
  return out;
}

std::vector<Tensor> leaf_values(const CaptionerParams& p) {
  return {p.embed, p.init_h, p.init_c, p.gate_w, column(p.gate_b), p.out_w, column(p.out_b)};
}

BoundCaptioner bind(Tape& tape, const CaptionerParams& p, bool trainable) {
  std::vector<Var> leaves;
  for (Tensor& t : leaf_values(p)) leaves.push_back(tape.leaf(std::move(t), trainable));
  return bind_leaves(tape, p, std::move(leaves));
}

BoundCaptioner bind_leaves(Tape& tape, const CaptionerParams& p, std::vector<Var> leaves) {
  require(leaves.size() == 7, "bind_leaves: expected 7 leaves");
  const CaptionerDims d = p.dims();
  BoundCaptioner m;
  m.params = &p;
  m.vars = std::move(leaves);
  for (std::size_t g = 0; g < 4; ++g) {
    const auto rows = range(g * d.hidden, (g + 1) * d.hidden);
    m.gate_blocks.push_back(tape.gather_rows(m.vars[kGateW], rows));
    m.gate_bias.push_back(tape.gather_rows(m.vars[kGateB], rows));
  }
  const auto emittable = range(kFirstEmittable, d.vocab);
  m.out_w = tape.gather_rows(m.vars[kOutW], emittable);
  m.out_b = tape.gather_rows(m.vars[kOutB], emittable);
  const std::size_t width = d.embed + d.hidden;
  Tensor sx = Tensor::zeros({d.embed, width});
  for (std::size_t i = 0; i < d.embed; ++i) sx.at(i, i) = 1.0;
  Tensor sh = Tensor::zeros({d.hidden, width});
  for (std::size_t i = 0; i < d.hidden; ++i) sh.at(i, d.embed + i) = 1.0;
  m.select_x = tape.constant(std::move(sx));
  m.select_h = tape.constant(std::move(sh));
  return m;
}

std::vector<Tensor> gradients(const Tape& tape, const BoundCaptioner& model) {
  std::vector<Tensor> out;
  const auto shapes = model.params->tensors();
  for (std::size_t k = 0; k < model.vars.size(); ++k)
    out.push_back(Tensor(shapes[k]->shape, tape.grad(model.vars[k]).values));
  return out;
}

BatchState initial_state(Tape& tape, const BoundCaptioner& model, const Tensor& features) {
  const std::size_t dim = model.params->init_h.shape[1];
  require(features.rank() == 2 && features.shape[1] == dim,
          "initial_state: expected features of width " + std::to_string(dim) + ", got " +
              grad::shape_string(features.shape));
  const Var f = tape.constant(features);
  return {tape.matmul(f, model.vars[kInitH], true), tape.matmul(f, model.vars[kInitC], true)};
}

Var step_log_probs(Tape& tape, const BoundCaptioner& model, BatchState& state,
                   const std::vector<data::TokenId>& previous) {
  const std::size_t vocab = model.params->embed.shape[0];
  std::vector<std::size_t> ids;
  for (data::TokenId id : previous) {
    check_token(id, vocab, "step_log_probs");
    ids.push_back(id);
  }
  const Var ones = tape.constant(ones_column(ids.size()));
  const Var x = tape.gather_rows(model.vars[kEmbed], ids);
  const Var input =
      tape.add(tape.matmul(x, model.select_x), tape.matmul(state.h, model.select_h));
  std::vector<Var> pre;
  for (std::size_t g = 0; g < 4; ++g)
    pre.push_back(tape.add(tape.matmul(input, model.gate_blocks[g], true),
                           tape.matmul(ones, model.gate_bias[g], true)));
  const Var in_gate = tape.sigmoid(pre[0]);
  const Var forget = tape.sigmoid(pre[1]);
  const Var cand = tape.tanh(pre[2]);
  const Var out_gate = tape.sigmoid(pre[3]);
  state.c = tape.add(tape.multiply(forget, state.c), tape.multiply(in_gate, cand));
  state.h = tape.multiply(out_gate, tape.tanh(state.c));
  const Var logits =
      tape.add(tape.matmul(state.h, model.out_w, true), tape.matmul(ones, model.out_b, true));
  return tape.log_softmax(logits);
}

namespace {

data::TokenId draw(Rng& rng, const Tensor& logp, std::size_t row) {
  const std::size_t width = logp.shape[1];
  std::vector<double> probs(width);
  for (std::size_t j = 0; j < width; ++j) probs[j] = std::exp(logp.at(row, j));
  return static_cast<data::TokenId>(kFirstEmittable + rng.categorical(probs));
}

}  // namespace

SampleBatch sample_captions(Tape& tape, const BoundCaptioner& model, const Tensor& features,
                            Rng& rng, std::size_t t_max) {
  require(t_max >= 1, "sample_caption: t_max must be at least 1");
  BatchState state = initial_state(tape, model, features);
  const std::size_t n = features.shape[0];
  const std::size_t width = model.params->embed.shape[0] - kFirstEmittable;
  SampleBatch out;
  out.captions.resize(n);
  std::vector<data::TokenId> previous(n, data::kBos);
  std::vector<bool> alive(n, true);
  Var total{};
  for (std::size_t t = 0; t < t_max; ++t) {
    if (std::none_of(alive.begin(), alive.end(), [](bool a) { return a; })) break;
    const Var logp = step_log_probs(tape, model, state, previous);
    const Tensor& lp = tape.value(logp);
    Tensor pick = Tensor::zeros({n, width});
    for (std::size_t b = 0; b < n; ++b) {
      if (!alive[b]) continue;
      const data::TokenId w = draw(rng, lp, b);
      const double step = lp.at(b, w - kFirstEmittable);
      auto& cap = out.captions[b];
      cap.tokens.push_back(w);
      cap.step_log_probs.push_back(step);
      cap.log_prob += step;
      pick.at(b, w - kFirstEmittable) = 1.0;
      previous[b] = w;
      if (w == data::kEos) alive[b] = false;
    }
    const Var chosen = tape.multiply(logp, tape.constant(std::move(pick)));
    total = t == 0 ? chosen : tape.add(total, chosen);
  }
  out.log_probs = tape.matmul(total, tape.constant(Tensor::filled({width}, 1.0)));
  return out;
}

SampledCaption sample_caption(Tape& tape, const BoundCaptioner& model,
                              const std::vector<double>& features, Rng& rng, std::size_t t_max,
                              Var* log_prob) {
  SampleBatch batch =
      sample_captions(tape, model, Tensor::matrix(1, features.size(), features), rng, t_max);
  if (log_prob) *log_prob = tape.sum(batch.log_probs);
  return std::move(batch.captions.front());
}

Var sequence_log_probs(Tape& tape, const BoundCaptioner& model, const Tensor& features,
                       const std::vector<data::Caption>& sequences, double sample_prob, Rng* rng) {
  const std::size_t n = sequences.size();
  require(n > 0 && features.rank() == 2 && features.shape[0] == n,
          "sequence_log_probs: one feature row per sequence required");
  require(sample_prob == 0.0 || rng != nullptr, "sequence_log_probs: sampling needs an rng");
  const std::size_t vocab = model.params->embed.shape[0];
  const std::size_t width = vocab - kFirstEmittable;
  std::size_t longest = 0;
  for (const auto& s : sequences) {
    require(!s.empty(), "sequence_log_probs: empty target sequence");
    for (data::TokenId id : s) {
      check_token(id, vocab, "xent_loss");
      if (id < kFirstEmittable) fail("xent_loss: PAD and BOS cannot be targets");
    }
    longest = std::max(longest, s.size());
  }
  BatchState state = initial_state(tape, model, features);
  std::vector<data::TokenId> previous(n, data::kBos);
  Var total{};
  for (std::size_t t = 0; t < longest; ++t) {
    const Var logp = step_log_probs(tape, model, state, previous);
    const Tensor& lp = tape.value(logp);
    Tensor pick = Tensor::zeros({n, width});
    for (std::size_t b = 0; b < n; ++b) {
      if (t >= sequences[b].size()) continue;
      const data::TokenId target = sequences[b][t];
      pick.at(b, target - kFirstEmittable) = 1.0;
      previous[b] = target;
      if (sample_prob > 0.0 && rng->bernoulli(sample_prob)) previous[b] = draw(*rng, lp, b);
    }
    const Var chosen = tape.multiply(logp, tape.constant(std::move(pick)));
    total = t == 0 ? chosen : tape.add(total, chosen);
  }
  return tape.matmul(total, tape.constant(Tensor::filled({width}, 1.0)));
}

Var xent_loss(Tape& tape, const BoundCaptioner& model, const std::vector<double>& features,
              const data::Caption& caption) {
  require(!caption.empty(), "xent_loss: empty caption");
  data::Caption target = caption;
  target.push_back(data::kEos);
  const Var lp =
      sequence_log_probs(tape, model, Tensor::matrix(1, features.size(), features), {target});
  return tape.scale(tape.sum(lp), -1.0);
}

double scheduled_sampling_prob(const ScheduledSampling& s, std::size_t epoch) {
  if (s.every == 0) return 0.0;
  return std::min(s.cap, s.step * static_cast<double>(epoch / s.every));
}

namespace {

data::Caption training_target(const data::Vocabulary& vocab, const data::TokenList& tokens,
                              std::size_t t_max) {
  data::Caption out = vocab.encode(tokens);
  if (out.size() > t_max) out.resize(t_max);
  out.push_back(data::kEos);
  return out;
}

std::size_t token_count(const std::vector<data::Caption>& seqs) {
  std::size_t n = 0;
  for (const auto& s : seqs) n += s.size();
  return n;
}

}  // namespace

double mean_token_nll(const CaptionerParams& params,
                      const std::vector<const data::ImageRecord*>& images,
                      const data::Vocabulary& vocab) {
  std::vector<std::vector<double>> feats;
  std::vector<data::Caption> targets;
  for (const auto* r : images)
    for (const auto& c : r->captions) {
      feats.push_back(r->features);
      targets.push_back(training_target(vocab, c, data::kMaxCaptionTokens));
    }
  require(!targets.empty(), "mean_token_nll: no reference captions");
  double nll = 0.0;
  for (std::size_t start = 0; start < targets.size(); start += kEvalChunk) {
    const std::size_t end = std::min(targets.size(), start + kEvalChunk);
    std::vector<data::Caption> chunk(targets.begin() + start, targets.begin() + end);
    std::vector<double> values;
    for (std::size_t i = start; i < end; ++i)
      values.insert(values.end(), feats[i].begin(), feats[i].end());
    Tape tape;
    const BoundCaptioner model = bind(tape, params, false);
    const Var lp = sequence_log_probs(
        tape, model, Tensor::matrix(chunk.size(), feats[start].size(), std::move(values)), chunk);
    for (double v : tape.value(lp).values) nll -= v;
  }
  return nll / static_cast<double>(token_count(targets));
}

MleResult pretrain_mle(const std::vector<const data::ImageRecord*>& labeled,
                       const std::vector<const data::ImageRecord*>& validation,
                       const data::Vocabulary& vocab, const CaptionerDims& dims_in,
                       const MleConfig& config,
                       const std::function<void(const MleEpoch&)>& on_epoch) {
  require(!labeled.empty(), "pretrain_mle: no labeled data");
  require(config.batch_size > 0, "pretrain_mle: batch_size must be positive");
  for (const auto* r : labeled)
    require(r->labeled(), "pretrain_mle: record " + r->id + " has no captions");
  CaptionerDims dims = dims_in;
  dims.vocab = vocab.size();
  dims.image = labeled.front()->features.size();

  MleResult result;
  CaptionerParams params = init_captioner(dims, config.seed);
  result.params = params;
  Rng rng(config.seed);
  rl::OptimizerState opt;
  opt.base_lr = config.lr;
  std::vector<std::size_t> order(labeled.size());
  std::iota(order.begin(), order.end(), 0);
  bool have_best = false;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double p_ss = scheduled_sampling_prob(config.schedule, epoch);
    rng.shuffle(order);
    double nll = 0.0;
    std::size_t tokens = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<data::Caption> targets;
      std::vector<double> values;
      for (std::size_t p = start; p < end; ++p) {
        const auto* r = labeled[order[p]];
        targets.push_back(
            training_target(vocab, r->captions[rng.below(r->captions.size())], config.t_max));
        values.insert(values.end(), r->features.begin(), r->features.end());
      }
      const std::size_t count = token_count(targets);
      Tape tape;
      const BoundCaptioner model = bind(tape, params, true);
      const Var lp = sequence_log_probs(
          tape, model, Tensor::matrix(targets.size(), dims.image, std::move(values)), targets, p_ss,
          &rng);
      const Var loss = tape.scale(tape.sum(lp), -1.0 / static_cast<double>(count));
      const double value = tape.value(loss).item();
      if (!std::isfinite(value))
        throw Error(ErrorCode::numerical_abort,
                    "pretrain_mle: non-finite loss at epoch " + std::to_string(epoch));
      tape.backward(loss);
      rl::adam_update(opt, params.tensors(), gradients(tape, model));
      nll += value * static_cast<double>(count);
      tokens += count;
    }
    MleEpoch record{epoch, p_ss, nll / static_cast<double>(tokens), 0.0};
    if (!validation.empty()) record.val_loss = mean_token_nll(params, validation, vocab);
    if (!have_best || validation.empty() || record.val_loss < result.best_val_loss) {
      result.params = params;
      result.best_val_loss = record.val_loss;
      have_best = true;
    }
    result.history.push_back(record);
    if (on_epoch) on_epoch(record);
  }
  return result;
}

}  // namespace discap::caption
