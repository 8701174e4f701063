#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <map>

#include "discap/caption/captioner.hpp"
#include "discap/error.hpp"

namespace discap::caption {
namespace {

CaptionerDims small_dims(std::size_t vocab = 7) {
  CaptionerDims d;
  d.vocab = vocab;
  d.embed = 3;
  d.hidden = 4;
  d.image = 5;
  return d;
}

CaptionerParams randomized(std::uint64_t seed, std::size_t vocab = 7, double scale = 1.0) {
  CaptionerParams p = init_captioner(small_dims(vocab), seed);
  Rng rng(seed * 7 + 1);
  for (Tensor* t : p.tensors())
    for (double& v : t->values) v = rng.uniform(-scale, scale);
  return p;
}

std::vector<double> random_features(Rng& rng, std::size_t n = 5) {
  std::vector<double> f(n);
  for (double& v : f) v = rng.uniform(-1, 1);
  return f;
}

const double kNegInf = -std::numeric_limits<double>::infinity();

TEST(InitCaptioner, DeterministicShapesAndForgetBias) {
  CaptionerDims d;
  d.vocab = 50;
  d.hidden = 64;
  const CaptionerParams a = init_captioner(d, 3);
  EXPECT_EQ(a, init_captioner(d, 3));
  EXPECT_NE(a, init_captioner(d, 4));
  EXPECT_EQ(a.gate_w.shape, (grad::Shape{256, d.embed + 64}));
  for (std::size_t i = 64; i < 128; ++i) EXPECT_EQ(a.gate_b[i], 1.0);
  for (const Tensor* t : a.tensors())
    for (std::size_t i = 0; i < t->size(); ++i)
      if (t != &a.gate_b || i < 64 || i >= 128) EXPECT_LE(std::abs((*t)[i]), 0.08);
}

TEST(InitCaptioner, CheckpointRoundTrip) {
  const CaptionerParams p = randomized(5);
  Checkpoint ckpt;
  p.store(ckpt);
  EXPECT_EQ(CaptionerParams::load(Checkpoint::from_bytes(ckpt.to_bytes())), p);
}

TEST(DecodeStep, ValidDistributionAndPure) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const CaptionerParams p = randomized(10 + trial);
    const auto f = random_features(rng);
    const DecoderState s = initial_state(p, f);
    const StepOutput a = decode_step(p, s, static_cast<data::TokenId>(rng.below(7)));
    double total = 0.0;
    for (double v : a.log_probs) total += std::exp(v);
    EXPECT_NEAR(total, 1.0, 1e-9);
    EXPECT_EQ(a.log_probs[data::kPad], kNegInf);
    EXPECT_EQ(a.log_probs[data::kBos], kNegInf);
    const StepOutput b = decode_step(p, s, 4);
    const StepOutput c = decode_step(p, s, 4);
    EXPECT_EQ(b.log_probs, c.log_probs);
    EXPECT_EQ(b.state, c.state);
  }
}

TEST(DecodeStep, ZeroOutputProjectionIsUniformOverEmittable) {
  CaptionerParams p = randomized(2);
  p.out_w = Tensor::zeros(p.out_w.shape);
  p.out_b = Tensor::zeros(p.out_b.shape);
  Rng rng(2);
  const StepOutput out = decode_step(p, initial_state(p, random_features(rng)), data::kBos);
  for (std::size_t w = kFirstEmittable; w < 7; ++w)
    EXPECT_NEAR(out.log_probs[w], -std::log(5.0), 1e-15);
}

TEST(DecodeStep, RejectsOutOfRangeToken) {
  const CaptionerParams p = randomized(3);
  Rng rng(3);
  EXPECT_THROW(decode_step(p, initial_state(p, random_features(rng)), 7), Error);
  EXPECT_THROW(initial_state(p, std::vector<double>(4, 0.0)), Error);
}

TEST(DecodeStep, TapeAndPlainPathsAgree) {
  Rng rng(4);
  const CaptionerParams p = randomized(4);
  const auto f1 = random_features(rng), f2 = random_features(rng);
  Tape tape;
  const BoundCaptioner model = bind(tape, p, false);
  std::vector<double> both = f1;
  both.insert(both.end(), f2.begin(), f2.end());
  BatchState bs = initial_state(tape, model, Tensor::matrix(2, 5, both));
  DecoderState s1 = initial_state(p, f1), s2 = initial_state(p, f2);
  const std::vector<std::vector<data::TokenId>> inputs{{1, 1}, {4, 6}, {2, 5}, {3, 3}};
  for (const auto& in : inputs) {
    const Tensor& lp = tape.value(step_log_probs(tape, model, bs, in));
    const StepOutput o1 = decode_step(p, s1, in[0]), o2 = decode_step(p, s2, in[1]);
    for (std::size_t w = kFirstEmittable; w < 7; ++w) {
      EXPECT_NEAR(lp.at(0, w - kFirstEmittable), o1.log_probs[w], 1e-12);
      EXPECT_NEAR(lp.at(1, w - kFirstEmittable), o2.log_probs[w], 1e-12);
    }
    s1 = o1.state;
    s2 = o2.state;
  }
}

TEST(XentLoss, ZeroOutputProjectionGivesLengthTimesLogVocab) {
  CaptionerParams p = randomized(5);
  p.out_w = Tensor::zeros(p.out_w.shape);
  p.out_b = Tensor::zeros(p.out_b.shape);
  Rng rng(5);
  Tape tape;
  const BoundCaptioner model = bind(tape, p, true);
  const data::Caption caption{4, 5, 6};
  const double loss = tape.value(xent_loss(tape, model, random_features(rng), caption)).item();
  EXPECT_NEAR(loss, 4 * std::log(5.0), 1e-12);
}

// Evaluates a loss with one leaf replaced by the probe variable.
double probe_error(const CaptionerParams& p, std::size_t slot,
                   const std::function<Var(Tape&, const BoundCaptioner&)>& loss) {
  const Tensor point = leaf_values(p)[slot];
  auto fn = [&](Tape& tape, Var x) {
    std::vector<Var> leaves;
    for (Tensor& t : leaf_values(p)) leaves.push_back(tape.constant(std::move(t)));
    leaves[slot] = x;
    return loss(tape, bind_leaves(tape, p, std::move(leaves)));
  };
  return grad::grad_check(fn, point, 1e-5);
}

TEST(XentLoss, GradientPassesFiniteDifferences) {
  Rng rng(6);
  const CaptionerParams p = randomized(6, 7, 0.5);
  const auto f = random_features(rng);
  const data::Caption caption{4, 3, 6, 5};
  for (std::size_t slot = 0; slot < 7; ++slot)
    EXPECT_LT(probe_error(p, slot,
                          [&](Tape& t, const BoundCaptioner& m) { return xent_loss(t, m, f, caption); }),
              1e-4)
        << CaptionerParams::names()[slot];
}

TEST(XentLoss, DecreasesUnderSmallGradientSteps) {
  Rng rng(7);
  CaptionerParams p = randomized(7, 7, 0.3);
  const auto f = random_features(rng);
  const data::Caption caption{4, 6, 5};
  double previous = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 50; ++step) {
    Tape tape;
    const BoundCaptioner model = bind(tape, p, true);
    const Var loss = xent_loss(tape, model, f, caption);
    const double value = tape.value(loss).item();
    EXPECT_LT(value, previous) << "step " << step;
    previous = value;
    tape.backward(loss);
    const auto grads = gradients(tape, model);
    auto ts = p.tensors();
    for (std::size_t k = 0; k < ts.size(); ++k)
      for (std::size_t i = 0; i < ts[k]->size(); ++i) ts[k]->values[i] -= 0.01 * grads[k][i];
  }
}

TEST(XentLoss, RejectsBadTargets) {
  const CaptionerParams p = randomized(8);
  Rng rng(8);
  const auto f = random_features(rng);
  Tape tape;
  const BoundCaptioner model = bind(tape, p, true);
  EXPECT_THROW(xent_loss(tape, model, f, {4, 7}), Error);
  EXPECT_THROW(xent_loss(tape, model, f, {}), Error);
  EXPECT_THROW(xent_loss(tape, model, f, {4, data::kBos}), Error);
}

void check_well_formed(const data::Caption& c, std::size_t t_max) {
  EXPECT_GE(c.size(), 1u);
  EXPECT_LE(c.size(), t_max);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_GE(c[i], kFirstEmittable);
    if (c[i] == data::kEos) EXPECT_EQ(i + 1, c.size());
  }
}

TEST(SampleCaption, ForcedDistributionIsDeterministic) {
  CaptionerParams p = randomized(9);
  p.out_w = Tensor::zeros(p.out_w.shape);
  p.out_b = Tensor::zeros(p.out_b.shape);
  p.out_b[5] = 1e6;
  Rng rng(9);
  const auto f = random_features(rng);
  Tape tape;
  const BoundCaptioner model = bind(tape, p, true);
  Var node;
  const SampledCaption s = sample_caption(tape, model, f, rng, 4, &node);
  EXPECT_EQ(s.tokens, (data::Caption{5, 5, 5, 5}));
  EXPECT_NEAR(s.log_prob, 0.0, 1e-12);
  EXPECT_EQ(greedy_decode(p, f, 4), s.tokens);
  EXPECT_EQ(beam_search(p, f, 3, 4), s.tokens);
}

TEST(SampleCaption, FirstWordFrequencyMatchesDistribution) {
  const CaptionerParams p = randomized(10, 6, 1.5);
  Rng rng(10);
  const auto f = random_features(rng);
  const auto probs = decode_step(p, initial_state(p, f), data::kBos).log_probs;
  std::map<data::TokenId, int> counts;
  const int draws = 100000;
  std::vector<double> rows;
  for (int i = 0; i < draws; ++i) rows.insert(rows.end(), f.begin(), f.end());
  Tape tape;
  const BoundCaptioner model = bind(tape, p, false);
  const SampleBatch batch = sample_captions(tape, model, Tensor::matrix(draws, 5, rows), rng, 1);
  for (const auto& c : batch.captions) counts[c.tokens.front()]++;
  for (std::size_t w = kFirstEmittable; w < 6; ++w) {
    const double pw = std::exp(probs[w]);
    const double sigma = std::sqrt(draws * pw * (1 - pw));
    EXPECT_NEAR(counts[static_cast<data::TokenId>(w)], draws * pw, 3 * sigma) << "token " << w;
  }
  EXPECT_EQ(counts.count(data::kPad) + counts.count(data::kBos), 0u);
}

TEST(SampleCaption, BookkeepingAndShape) {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const CaptionerParams p = randomized(20 + trial);
    const auto f = random_features(rng);
    Tape tape;
    const BoundCaptioner model = bind(tape, p, true);
    Var node;
    const SampledCaption s = sample_caption(tape, model, f, rng, 6, &node);
    check_well_formed(s.tokens, 6);
    double total = 0.0;
    for (double v : s.step_log_probs) total += v;
    EXPECT_NEAR(total, s.log_prob, 1e-12);
    EXPECT_NEAR(tape.value(node).item(), s.log_prob, 1e-12);
  }
}

TEST(SampleCaption, GradientMatchesTeacherForcedLikelihood) {
  Rng rng(12);
  int with_eos = 0;
  for (int trial = 0; trial < 30; ++trial) {
    const CaptionerParams p = randomized(40 + trial);
    const auto f = random_features(rng);
    Tape ts;
    const BoundCaptioner ms = bind(ts, p, true);
    Var node;
    const SampledCaption s = sample_caption(ts, ms, f, rng, 5, &node);
    ts.backward(node);
    const auto gs = gradients(ts, ms);

    Tape tx;
    const BoundCaptioner mx = bind(tx, p, true);
    Var other;
    const bool ended = s.tokens.back() == data::kEos;
    if (ended) {
      data::Caption words(s.tokens.begin(), s.tokens.end() - 1);
      if (words.empty()) continue;
      other = tx.scale(xent_loss(tx, mx, f, words), -1.0);
      ++with_eos;
    } else {
      other = tx.sum(sequence_log_probs(tx, mx, Tensor::matrix(1, 5, f), {s.tokens}));
    }
    EXPECT_NEAR(tx.value(other).item(), s.log_prob, 1e-12);
    tx.backward(other);
    const auto gx = gradients(tx, mx);
    for (std::size_t k = 0; k < gs.size(); ++k)
      for (std::size_t i = 0; i < gs[k].size(); ++i) EXPECT_NEAR(gs[k][i], gx[k][i], 1e-10);
  }
  EXPECT_GT(with_eos, 0);
}

TEST(GreedyDecode, DeterministicAndWellFormed) {
  Rng rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    const CaptionerParams p = randomized(60 + trial);
    const auto f = random_features(rng);
    const data::Caption a = greedy_decode(p, f, 6);
    EXPECT_EQ(a, greedy_decode(p, f, 6));
    check_well_formed(a, 6);
    check_well_formed(beam_search(p, f, 3, 6), 6);
  }
}

TEST(BeamSearch, WidthOneEqualsGreedy) {
  Rng rng(14);
  for (int trial = 0; trial < 100; ++trial) {
    const CaptionerParams p = randomized(100 + trial, 7, 2.0);
    const auto f = random_features(rng);
    EXPECT_EQ(beam_search(p, f, 1, 8), greedy_decode(p, f, 8)) << "model " << trial;
  }
}

// Fixed conditional tables over EOS, A and B for sequences of at most two
// tokens. Greedy takes A first, yet B then EOS is the most likely sequence.
struct ToyModel {
  using State = data::Caption;
  static constexpr data::TokenId kA = 3, kB = 4;
  State start() const { return {}; }
  std::vector<double> step(const State& prefix, data::TokenId previous, State& next) const {
    next = prefix;
    if (previous != data::kBos) next.push_back(previous);
    std::vector<double> p(5, 0.0);
    if (next.empty()) {
      p[data::kEos] = 0.1, p[kA] = 0.5, p[kB] = 0.4;
    } else if (next.front() == kA) {
      p[data::kEos] = 0.3, p[kA] = 0.35, p[kB] = 0.35;
    } else {
      p[data::kEos] = 0.9, p[kA] = 0.05, p[kB] = 0.05;
    }
    std::vector<double> out(5, -std::numeric_limits<double>::infinity());
    for (std::size_t w = 2; w < 5; ++w) out[w] = std::log(p[w]);
    return out;
  }
};

Hypothesis enumerate_best(const ToyModel& m, std::size_t t_max) {
  Hypothesis best{{}, -std::numeric_limits<double>::infinity()};
  std::function<void(const ToyModel::State&, data::TokenId, Hypothesis)> walk =
      [&](const ToyModel::State& s, data::TokenId prev, Hypothesis h) {
        ToyModel::State next;
        const auto lp = m.step(s, prev, next);
        for (data::TokenId w = 2; w < 5; ++w) {
          Hypothesis e = h;
          e.tokens.push_back(w);
          e.log_prob += lp[w];
          if (w == data::kEos || e.tokens.size() == t_max) {
            if (better(e, best)) best = e;
          } else {
            walk(next, w, e);
          }
        }
      };
  walk(m.start(), data::kBos, Hypothesis{});
  return best;
}

TEST(BeamSearch, FindsSequenceGreedyMisses) {
  const ToyModel m;
  const Hypothesis greedy = caption::greedy_decode(m, 2);
  const Hypothesis beam = caption::beam_search(m, 2, 2);
  const Hypothesis best = enumerate_best(m, 2);
  EXPECT_EQ(greedy.tokens, (data::Caption{ToyModel::kA, ToyModel::kA}));
  EXPECT_EQ(beam.tokens, best.tokens);
  EXPECT_EQ(beam.tokens, (data::Caption{ToyModel::kB, data::kEos}));
  EXPECT_GT(beam.log_prob, greedy.log_prob);
  EXPECT_NEAR(beam.log_prob, std::log(0.36), 1e-15);
}

TEST(BeamSearch, FullWidthIsExhaustive) {
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    const CaptionerParams p = randomized(300 + trial, 5, 2.0);
    const auto f = random_features(rng);
    const StepModel model(p, f);
    // best over all sequences of up to three tokens
    Hypothesis best{{}, -std::numeric_limits<double>::infinity()};
    std::function<void(const DecoderState&, data::TokenId, Hypothesis)> walk =
        [&](const DecoderState& s, data::TokenId prev, Hypothesis h) {
          DecoderState next;
          const auto lp = model.step(s, prev, next);
          for (data::TokenId w = 2; w < 5; ++w) {
            Hypothesis e = h;
            e.tokens.push_back(w);
            e.log_prob += lp[w];
            if (w == data::kEos || e.tokens.size() == 3) {
              if (better(e, best)) best = e;
            } else {
              walk(next, w, e);
            }
          }
        };
    walk(model.start(), data::kBos, Hypothesis{});
    const Hypothesis beam = caption::beam_search(model, 9, 3);
    EXPECT_EQ(beam.tokens, best.tokens);
    EXPECT_NEAR(beam.log_prob, best.log_prob, 1e-12);
  }
}

TEST(ScheduledSampling, FollowsStepSchedule) {
  const ScheduledSampling s;
  for (std::size_t e = 0; e < 5; ++e) EXPECT_EQ(scheduled_sampling_prob(s, e), 0.0);
  EXPECT_EQ(scheduled_sampling_prob(s, 5), 0.05);
  EXPECT_EQ(scheduled_sampling_prob(s, 9), 0.05);
  EXPECT_NEAR(scheduled_sampling_prob(s, 10), 0.10, 1e-15);
  EXPECT_NEAR(scheduled_sampling_prob(s, 20), 0.20, 1e-15);
  for (std::size_t e : {25u, 26u, 50u, 1000u}) EXPECT_EQ(scheduled_sampling_prob(s, e), 0.25);
}

std::vector<data::ImageRecord> single_caption_records(std::size_t n, std::uint64_t seed) {
  data::GenerateConfig g;
  g.n_labeled = n;
  g.n_unlabeled = 0;
  g.n_validation = 0;
  g.n_test = 0;
  g.seed = seed;
  auto records = data::generate(g).records;
  for (auto& r : records) r.captions.resize(1);
  return records;
}

TEST(PretrainMle, OverfitsSmallSet) {
  const auto records = single_caption_records(50, 3);
  std::vector<const data::ImageRecord*> ptrs;
  std::vector<data::TokenList> corpus;
  for (const auto& r : records) {
    ptrs.push_back(&r);
    corpus.push_back(r.captions.front());
  }
  const auto vocab = data::build_vocab(corpus, 1);
  MleConfig c;
  c.epochs = 150;
  c.batch_size = 25;
  c.lr = 1e-2;
  const MleResult result = pretrain_mle(ptrs, {}, vocab, {}, c);
  const double perplexity = std::exp(mean_token_nll(result.params, ptrs, vocab));
  EXPECT_LT(perplexity, 1.1);
}

TEST(PretrainMle, DeterministicPerSeed) {
  const auto records = single_caption_records(30, 4);
  std::vector<const data::ImageRecord*> train, val;
  std::vector<data::TokenList> corpus;
  for (std::size_t i = 0; i < records.size(); ++i) {
    (i < 20 ? train : val).push_back(&records[i]);
    corpus.push_back(records[i].captions.front());
  }
  const auto vocab = data::build_vocab(corpus, 1);
  MleConfig c;
  c.epochs = 7;
  c.batch_size = 8;
  const MleResult a = pretrain_mle(train, val, vocab, {}, c);
  const MleResult b = pretrain_mle(train, val, vocab, {}, c);
  Checkpoint ca, cb;
  a.params.store(ca);
  b.params.store(cb);
  EXPECT_EQ(ca.to_bytes(), cb.to_bytes());
  EXPECT_EQ(a.history.back().sample_prob, 0.05);
}

}  // namespace
}  // namespace discap::caption
