#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "discap/caption/captioner.hpp"
#include "discap/cli/commands.hpp"
#include "discap/eval/evalsuite.hpp"
#include "discap/retrieval/retriever.hpp"
#include "discap/reward/reward.hpp"
#include "discap/rl/rltrain.hpp"
#include "support/cider_oracle.hpp"
#include "support/op_checks.hpp"
#include "support/reinforce_toy.hpp"

namespace {

using namespace discap;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

Outcome within_budget(Outcome o, double elapsed, double budget) {
  o.detail += "; " + fmt(elapsed, 1) + " s (budget " + fmt(budget, 0) + " s)";
  if (elapsed >= budget) o.pass = false;
  return o;
}

// Criterion 1

Outcome autodiff_ops() {
  double worst = 0.0;
  std::string worst_op;
  std::size_t ops = 0;
  for (const auto& check : testing::all_op_checks()) {
    const double err = testing::worst_op_error(check, 100, 1000 + ops);
    if (err > worst) worst = err, worst_op = check.name;
    ++ops;
  }
  return {worst < 1e-4, std::to_string(ops) + " op checks x 100 trials, worst relative error " +
                            fmt(worst * 1e6, 3) + "e-6 (" + worst_op + ")"};
}

// Criterion 2

Outcome reinforce_estimator() {
  double worst_exact = 0.0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const testing::ReinforceToy toy(seed);
    const auto fd = toy.finite_difference_gradient();
    Rng rng(seed + 50);
    for (double b : {0.0, rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)}) {
      const auto exact = toy.exact_policy_gradient(b);
      for (std::size_t i = 0; i < fd.size(); ++i)
        worst_exact = std::max(worst_exact, std::abs(exact[i] - fd[i]));
    }
  }
  const testing::ReinforceToy toy(5);
  const auto exact = toy.exact_policy_gradient(
      toy.reward(caption::greedy_decode(toy.params, toy.features, testing::ReinforceToy::kTMax)));
  const auto est = toy.single_sample_estimates(10000, 17);
  double worst_z = 0.0;
  bool within = true;
  for (std::size_t i = 0; i < exact.size(); ++i) {
    const double gap = std::abs(est.mean[i] - exact[i]);
    if (est.standard_error[i] == 0.0) {
      within = within && gap < 1e-12;
    } else {
      worst_z = std::max(worst_z, gap / est.standard_error[i]);
    }
  }
  within = within && worst_z <= 3.0;
  return {worst_exact < 1e-8 && within,
          "exact vs finite-difference max gap " + fmt(worst_exact * 1e10, 3) +
              "e-10 over 3 toys x 3 baselines; 10^4-draw estimator worst |mean - exact| = " +
              fmt(worst_z, 2) + " SE over " + std::to_string(exact.size()) + " coordinates"};
}

// Criterion 3

class Interner {
 public:
  reward::Sentence ids(const testing::Words& words) {
    reward::Sentence out;
    for (const auto& w : words) {
      auto [it, inserted] = table_.emplace(w, static_cast<data::TokenId>(table_.size() + 4));
      out.push_back(it->second);
    }
    return out;
  }
  std::vector<reward::Sentence> ids(const std::vector<testing::Words>& sentences) {
    std::vector<reward::Sentence> out;
    for (const auto& s : sentences) out.push_back(ids(s));
    return out;
  }

 private:
  std::map<std::string, data::TokenId> table_;
};

Outcome cider_oracle() {
  Rng rng(2024);
  double worst = 0.0;
  std::size_t scored = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto micro = testing::random_micro_corpus(rng);
    Interner in;
    std::vector<std::vector<reward::Sentence>> sets;
    for (const auto& doc : micro.documents) sets.push_back(in.ids(doc));
    const reward::CorpusStats stats = reward::corpus_stats(sets, 4);
    const testing::CiderOracle oracle(micro.documents);
    for (std::size_t d = 0; d < micro.documents.size(); ++d) {
      const double got = reward::cider_d(in.ids(micro.candidates[d]), sets[d], stats);
      worst = std::max(worst, std::abs(got - oracle.score(micro.candidates[d], micro.documents[d])));
      ++scored;
    }
  }
  Interner in;
  const std::vector<std::vector<testing::Words>> corpus = {{{"a", "big", "red", "circle"}},
                                                           {{"a", "small", "blue", "square"}}};
  std::vector<std::vector<reward::Sentence>> sets;
  for (const auto& doc : corpus) sets.push_back(in.ids(doc));
  const double identity = reward::cider_d(sets[0][0], sets[0], reward::corpus_stats(sets, 4));
  return {worst < 1e-9 && identity == 10.0,
          "20 micro-corpora, " + std::to_string(scored) + " candidates, max |main - oracle| " +
              fmt(worst * 1e12, 3) + "e-12; identity score " + fmt(identity, 12)};
}

// Criterion 4

double enumerate_loss(const std::vector<double>& s, std::size_t i,
                      const retrieval::LossConfig& c) {
  if (c.kind == retrieval::LossKind::softmax) {
    double z = 0.0;
    for (double v : s) z += std::exp(v / c.temperature);
    return std::log(z) - s[i] / c.temperature;
  }
  double best = 0.0, total = 0.0;
  for (std::size_t j = 0; j < s.size(); ++j) {
    if (j == i) continue;
    const double h = std::max(0.0, c.margin - s[i] + s[j]);
    best = std::max(best, h);
    total += h;
  }
  return c.kind == retrieval::LossKind::vse_pp ? best : total;
}

grad::Tensor random_unit_rows(Rng& rng, std::size_t n, std::size_t d) {
  grad::Tensor t = grad::Tensor::zeros({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += std::pow(t.at(i, k) = rng.normal(), 2);
    for (std::size_t k = 0; k < d; ++k) t.at(i, k) /= std::sqrt(s);
  }
  return t;
}

Outcome retrieval_losses() {
  using retrieval::LossKind;
  Rng rng(404);
  double worst = 0.0;
  std::size_t batches = 0;
  for (int trial = 0; trial < 300; ++trial, ++batches) {
    const std::size_t n = 1 + rng.below(8), d = 2 + rng.below(6);
    const grad::Tensor caps = random_unit_rows(rng, n, d), imgs = random_unit_rows(rng, n, d);
    const retrieval::LossConfig cfgs[] = {{LossKind::vse_pp, rng.uniform(0.05, 0.5), 0.1},
                                          {LossKind::vse0, rng.uniform(0.05, 0.5), 0.1},
                                          {LossKind::softmax, 0.2, rng.uniform(0.05, 1.0)}};
    for (std::size_t q = 0; q < n; ++q) {
      std::vector<double> sims(n);
      for (std::size_t j = 0; j < n; ++j)
        sims[j] = retrieval::similarity(grad::Tensor::vector({caps.values.begin() + q * d,
                                                              caps.values.begin() + (q + 1) * d}),
                                        grad::Tensor::vector({imgs.values.begin() + j * d,
                                                              imgs.values.begin() + (j + 1) * d}));
      for (const auto& c : cfgs) {
        const double want = enumerate_loss(sims, q, c);
        grad::Tape tape;
        const auto v = retrieval::retrieval_loss(tape, tape.constant(grad::Tensor::vector(sims)), q, c);
        worst = std::max(worst, std::abs(tape.value(v).item() - want));
        worst = std::max(worst, std::abs(retrieval::retrieval_loss_value(sims, q, c) - want));
      }
    }
  }
  bool ordered = true;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    std::vector<double> s(n);
    for (double& v : s) v = rng.uniform(-1, 1);
    const std::size_t i = rng.below(n);
    const double margin = rng.uniform(0.0, 0.5);
    ordered = ordered && retrieval::retrieval_loss_value(s, i, {LossKind::vse_pp, margin, 0.1}) <=
                             retrieval::retrieval_loss_value(s, i, {LossKind::vse0, margin, 0.1});
  }
  bool log_n = true;
  for (std::size_t n = 1; n <= 8; ++n)
    for (double t : {0.05, 0.1, 1.0})
      log_n = log_n && retrieval::retrieval_loss_value(std::vector<double>(n, 0.37), n / 2,
                                                       {LossKind::softmax, 0.2, t}) ==
                           std::log(static_cast<double>(n));
  return {worst < 1e-12 && ordered && log_n,
          std::to_string(batches) + " random batches (n <= 8), max |loss - enumeration| " +
              fmt(worst * 1e15, 3) + "e-15; VSE++ <= VSE0 on 10^4 instances: " +
              (ordered ? "yes" : "no") + "; equal-similarity softmax == ln n: " +
              (log_n ? "yes" : "no")};
}

// Shared default-world state for criteria 5 to 8.

struct World {
  data::GeneratedData generated;
  std::optional<data::RecordIndex> index;
  data::Vocabulary vocab;
  std::vector<const data::ImageRecord*> labeled, unlabeled, validation, test;
  retrieval::RetrieverParams retriever;
  std::optional<caption::CaptionerParams> mle;
  double mle_seconds = 0.0;
};

World make_world() {
  World w;
  w.generated = data::generate(data::GenerateConfig{});
  w.index.emplace(w.generated.records);
  w.labeled = w.index->resolve(w.generated.split.labeled);
  w.unlabeled = w.index->resolve(w.generated.split.unlabeled);
  w.validation = w.index->resolve(w.generated.split.validation);
  w.test = w.index->resolve(w.generated.split.test);
  std::vector<data::TokenList> captions;
  for (const auto* r : w.labeled) captions.insert(captions.end(), r->captions.begin(), r->captions.end());
  w.vocab = data::build_vocab(captions, data::kDefaultMinCount);
  return w;
}

// Criterion 5

Outcome retriever_training(World& w) {
  retrieval::RetrieverDims dims;
  dims.vocab = w.vocab.size();
  w.retriever =
      retrieval::train_retriever(w.labeled, w.validation, w.vocab, dims, {}).params;
  std::vector<data::Caption> queries;
  for (const auto* r : w.validation) queries.push_back(w.vocab.encode(r->captions.front()));
  const double r1 = retrieval::recall_at_k(w.retriever, queries, w.validation, {1})[0];
  return {r1 >= 0.8, "validation caption-to-image recall@1 " + fmt(r1) + " over " +
                         std::to_string(w.validation.size()) + " images (threshold 0.8)"};
}

// Criteria 6 and 7

struct RunScore {
  double recall_at_1 = 0.0;
  double unique_pct = 0.0;
};

RunScore rl_run(const World& w, rl::Mode mode, std::uint64_t seed) {
  rl::RlConfig c;
  c.mode = mode;
  c.seed = seed;
  const auto result =
      rl::train_rl(*w.mle, w.retriever, {w.labeled, w.unlabeled, w.validation}, w.vocab, c);
  eval::EvalInputs in;
  in.captioner = &result.params;
  in.retriever = &w.retriever;
  in.images = w.test;
  in.training = w.labeled;
  in.vocab = &w.vocab;
  const auto report = eval::evaluate(in, "", seed).report;
  return {report.recall_at_1, report.unique_pct};
}

const std::uint64_t kSeeds[] = {1, 2, 3};
std::map<std::uint64_t, RunScore> g_sr_fl;

Outcome self_retrieval_effect(World& w) {
  const auto start = Clock::now();
  w.mle = caption::pretrain_mle(w.labeled, w.validation, w.vocab, caption::CaptionerDims{},
                                caption::MleConfig{})
              .params;
  w.mle_seconds = seconds_since(start);
  bool every_seed = true;
  double uniq_base = 0.0, uniq_fl = 0.0;
  std::string detail = "test recall@1 baseline/sr-fl:";
  for (std::uint64_t seed : kSeeds) {
    const RunScore base = rl_run(w, rl::Mode::baseline, seed);
    const RunScore fl = rl_run(w, rl::Mode::sr_fl, seed);
    g_sr_fl[seed] = fl;
    every_seed = every_seed && fl.recall_at_1 > base.recall_at_1;
    uniq_base += base.unique_pct / 3.0;
    uniq_fl += fl.unique_pct / 3.0;
    detail += " seed " + std::to_string(seed) + " " + fmt(base.recall_at_1, 3) + "/" +
              fmt(fl.recall_at_1, 3) + ";";
  }
  detail += " mean uniqueness " + fmt(uniq_base, 1) + "% -> " + fmt(uniq_fl, 1) + "%";
  return {every_seed && uniq_fl >= uniq_base, detail};
}

Outcome semi_supervised_effect(const World& w) {
  if (!w.mle || g_sr_fl.size() != 3) return {false, "sr-fl runs unavailable"};
  double pl = 0.0, fl = 0.0;
  std::string detail = "test recall@1 sr-fl/sr-pl:";
  for (std::uint64_t seed : kSeeds) {
    const RunScore s = rl_run(w, rl::Mode::sr_pl, seed);
    pl += s.recall_at_1 / 3.0;
    fl += g_sr_fl[seed].recall_at_1 / 3.0;
    detail += " seed " + std::to_string(seed) + " " + fmt(g_sr_fl[seed].recall_at_1, 3) + "/" +
              fmt(s.recall_at_1, 3) + ";";
  }
  detail += " means " + fmt(fl) + " vs " + fmt(pl) + " (pool " +
            std::to_string(w.unlabeled.size()) + ", range [100, 1000])";
  return {pl >= fl, detail};
}

// Criterion 8

Outcome mining_contract(const World& w) {
  bool ok = true;
  std::size_t checked = 0;
  std::string detail;
  ok = ok && retrieval::clamp_range({100, 1000}, 1000) == std::pair<std::size_t, std::size_t>{100, 1000};
  ok = ok && retrieval::clamp_range({100, 1000}, 2000) == std::pair<std::size_t, std::size_t>{100, 1000};

  // Random pools: ranks agree with a brute-force sort and stay in range.
  Rng rng(808);
  for (std::size_t pool_size : {60u, 500u, 1000u, 2500u}) {
    const grad::Tensor pool = random_unit_rows(rng, pool_size, 6);
    const auto [lo, hi] = retrieval::clamp_range({100, 1000}, pool_size);
    for (int trial = 0; trial < 10; ++trial) {
      const grad::Tensor q = grad::Tensor::vector(random_unit_rows(rng, 1, 6).values);
      std::vector<std::pair<double, std::size_t>> keyed;
      for (std::size_t j = 0; j < pool_size; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 6; ++k) s += q[k] * pool.at(j, k);
        keyed.push_back({-s, j});
      }
      std::sort(keyed.begin(), keyed.end());
      for (const auto& m : retrieval::mine_hard_negatives(q, pool, {100, 1000}, 16, rng)) {
        ok = ok && m.rank >= lo && m.rank <= hi && keyed[m.rank - 1].second == m.pool_index;
        ++checked;
      }
    }
  }

  // Real sr-pl batches on the default unlabeled pool and a truncated one.
  const auto labeled = rl::encode_references(w.labeled, w.vocab);
  std::size_t batch_ranks = 0, lo_seen = SIZE_MAX, hi_seen = 0;
  for (std::size_t pool_size : {w.unlabeled.size(), std::size_t{400}}) {
    const std::vector<const data::ImageRecord*> pool(w.unlabeled.begin(),
                                                     w.unlabeled.begin() + pool_size);
    const rl::NegativeMiner miner(w.retriever, pool, {100, 1000});
    const auto [lo, hi] = retrieval::clamp_range({100, 1000}, pool_size);
    Rng batch_rng(pool_size);
    for (int b = 0; b < 20; ++b) {
      const auto plan = rl::compose_batch(labeled, 16, 16, &miner, batch_rng);
      for (std::size_t r : plan.unlabeled_rank) {
        ok = ok && r >= lo && r <= hi;
        if (pool_size == w.unlabeled.size()) lo_seen = std::min(lo_seen, r), hi_seen = std::max(hi_seen, r);
        ++batch_ranks;
      }
    }
  }
  detail = std::to_string(checked) + " mined ranks on random pools match brute force; " +
           std::to_string(batch_ranks) + " batch ranks in range; default pool of " +
           std::to_string(w.unlabeled.size()) + " uses [100, 1000], observed [" +
           std::to_string(lo_seen) + ", " + std::to_string(hi_seen) + "]";
  return {ok, detail};
}

// Criterion 9

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

caption::Hypothesis enumerate_best(const ToyModel& m, std::size_t t_max) {
  caption::Hypothesis best{{}, -std::numeric_limits<double>::infinity()};
  std::function<void(const ToyModel::State&, data::TokenId, caption::Hypothesis)> walk =
      [&](const ToyModel::State& s, data::TokenId prev, caption::Hypothesis h) {
        ToyModel::State next;
        const auto lp = m.step(s, prev, next);
        for (data::TokenId w = 2; w < 5; ++w) {
          caption::Hypothesis e = h;
          e.tokens.push_back(w);
          e.log_prob += lp[w];
          if (w == data::kEos || e.tokens.size() == t_max) {
            if (caption::better(e, best)) best = e;
          } else {
            walk(next, w, e);
          }
        }
      };
  walk(m.start(), data::kBos, caption::Hypothesis{});
  return best;
}

Outcome decoding() {
  Rng rng(909);
  std::size_t equal = 0;
  for (int trial = 0; trial < 100; ++trial) {
    caption::CaptionerDims d;
    d.vocab = 7, d.embed = 3, d.hidden = 4, d.image = 5;
    caption::CaptionerParams p = caption::init_captioner(d, 500 + trial);
    for (grad::Tensor* t : p.tensors())
      for (double& v : t->values) v = rng.uniform(-2.0, 2.0);
    std::vector<double> f(5);
    for (double& v : f) v = rng.uniform(-1, 1);
    if (caption::beam_search(p, f, 1, 8) == caption::greedy_decode(p, f, 8)) ++equal;
  }
  const ToyModel m;
  const auto greedy = caption::greedy_decode(m, 2);
  const auto beam = caption::beam_search(m, 2, 2);
  const auto best = enumerate_best(m, 2);
  const bool toy = beam.tokens == best.tokens && beam.log_prob > greedy.log_prob;
  return {equal == 100 && toy,
          std::to_string(equal) + "/100 random models give beam-1 == greedy; toy: greedy log p " +
              fmt(greedy.log_prob) + ", beam-2 log p " + fmt(beam.log_prob) +
              ", exhaustive best log p " + fmt(best.log_prob)};
}

// Criterion 10

std::map<std::string, std::string> read_tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::ifstream in(entry.path(), std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    out[entry.path().filename().string()] = s.str();
  }
  return out;
}

Outcome determinism(const fs::path& work_dir) {
  const std::vector<std::string> steps = {"gen-data",  "build-vocab", "train-retriever",
                                          "pretrain-captioner", "train-rl", "generate",
                                          "evaluate"};
  std::vector<std::map<std::string, std::string>> trees;
  for (const char* name : {"run_a", "run_b"}) {
    const fs::path dir = work_dir / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    const fs::path config = dir / "config.json";
    std::ofstream(config) << "{\"paths\": {\"dir\": \"" << (dir / "artifacts").string() << "\"}}\n";
    for (const auto& step : steps) {
      std::ostringstream out, err;
      const int rc = cli::run({step, "--config", config.string()}, out, err);
      if (rc != 0) return {false, std::string(name) + " " + step + " exited " + std::to_string(rc) + ": " + err.str()};
    }
    trees.push_back(read_tree(dir / "artifacts"));
  }
  std::vector<std::string> differing;
  for (const auto& [file, bytes] : trees[0]) {
    const auto it = trees[1].find(file);
    if (it == trees[1].end() || it->second != bytes) differing.push_back(file);
  }
  const eval::EvalReport report = eval::load_report(work_dir / "run_a" / "artifacts" / "report.json");
  const bool populated = !report.config_fingerprint.empty() && std::isfinite(report.cider_d) &&
                         std::isfinite(report.recall_at_1);
  std::string detail = std::to_string(trees[0].size()) + " artifacts compared across two default " +
                       "pipeline runs; differing: " +
                       (differing.empty() ? std::string("none") : differing.front()) +
                       "; report CIDEr-D " + fmt(report.cider_d) + ", recall@1 " +
                       fmt(report.recall_at_1) + ", fingerprint " + report.config_fingerprint;
  return {differing.empty() && trees[0].size() == trees[1].size() && populated, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string work_dir = "acceptance_work";
  app.add_option("--work-dir", work_dir, "scratch directory for pipeline runs");
  CLI11_PARSE(app, argc, argv);

  struct Criterion {
    int number;
    std::string name;
    double budget_s;  // 0 when untimed
    std::function<Outcome()> run;
  };
  World world = make_world();
  const std::vector<Criterion> criteria = {
      {1, "autodiff finite differences", 30, autodiff_ops},
      {2, "REINFORCE estimator", 60, reinforce_estimator},
      {3, "CIDEr-D oracle", 10, cider_oracle},
      {4, "retrieval losses", 10, retrieval_losses},
      {5, "retriever training", 120, [&] { return retriever_training(world); }},
      {8, "mining contract", 0, [&] { return mining_contract(world); }},
      {9, "decoding", 0, decoding},
      {6, "self-retrieval reward effect", 600, [&] { return self_retrieval_effect(world); }},
      {7, "unlabeled pool effect", 600, [&] { return semi_supervised_effect(world); }},
      {10, "determinism", 0, [&] { return determinism(work_dir); }},
  };

  std::map<int, std::string> lines;
  bool all = true;
  for (const auto& c : criteria) {
    const auto start = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double elapsed = seconds_since(start);
    o = c.budget_s > 0 ? within_budget(o, elapsed, c.budget_s)
                       : Outcome{o.pass, o.detail + "; " + fmt(elapsed, 1) + " s"};
    all = all && o.pass;
    const std::string line = std::string(o.pass ? "PASS" : "FAIL") + " criterion " +
                             std::to_string(c.number) + " (" + c.name + "): " + o.detail;
    std::cerr << line << std::endl;
    lines[c.number] = line;
  }
  std::cout << "\nacceptance summary\n";
  for (const auto& [n, line] : lines) std::cout << line << "\n";
  std::cout << (all ? "all criteria passed" : "some criteria failed") << std::endl;
  return all ? 0 : 1;
}
