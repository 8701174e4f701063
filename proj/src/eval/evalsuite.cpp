#include "discap/eval/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "discap/error.hpp"

namespace discap::eval {

namespace {

using Ngram = std::vector<data::TokenId>;

std::map<Ngram, std::size_t> ngram_counts(const Sentence& s, std::size_t n) {
  std::map<Ngram, std::size_t> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[Ngram(s.begin() + i, s.begin() + i + n)];
  return out;
}

std::vector<Sentence> content(const std::vector<Sentence>& sentences) {
  std::vector<Sentence> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) out.push_back(data::content_tokens(s));
  return out;
}

std::size_t lcs_length(const Sentence& a, const Sentence& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

void check_alignment(std::size_t generated, std::size_t references) {
  require(generated > 0, "caption metrics: no generated captions");
  require(generated == references, "caption metrics: " + std::to_string(generated) +
                                       " captions for " + std::to_string(references) +
                                       " reference sets");
}

}  // namespace

std::array<double, 4> corpus_bleu(const std::vector<Sentence>& candidates,
                                  const std::vector<std::vector<Sentence>>& references) {
  check_alignment(candidates.size(), references.size());
  std::array<double, 4> matched{}, total{};
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Sentence& c = candidates[i];
    require(!references[i].empty(), "bleu: image " + std::to_string(i) + " has no references");
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<Ngram, std::size_t> max_ref;
      for (const auto& r : references[i])
        for (const auto& [g, k] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], k);
      for (const auto& [g, k] : ngram_counts(c, n)) {
        const auto it = max_ref.find(g);
        matched[n - 1] += static_cast<double>(std::min(k, it == max_ref.end() ? 0 : it->second));
      }
      total[n - 1] += static_cast<double>(c.size() >= n ? c.size() - n + 1 : 0);
    }
    std::size_t best = references[i].front().size();
    for (const auto& r : references[i]) {
      const auto gap = [&](std::size_t len) {
        return len > c.size() ? len - c.size() : c.size() - len;
      };
      if (gap(r.size()) < gap(best) || (gap(r.size()) == gap(best) && r.size() < best))
        best = r.size();
    }
    cand_len += static_cast<double>(c.size());
    ref_len += static_cast<double>(best);
  }
  const double brevity =
      cand_len == 0.0 ? 0.0 : (cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0);
  std::array<double, 4> out{};
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    if (matched[n] == 0.0 || total[n] == 0.0) zero = true;
    if (!zero) log_sum += std::log(matched[n] / total[n]);
    out[n] = zero ? 0.0 : brevity * std::exp(log_sum / static_cast<double>(n + 1));
  }
  return out;
}

double rouge_l(const Sentence& candidate, const std::vector<Sentence>& references,
               double beta_sq) {
  require(!references.empty(), "rouge_l: no references");
  require(beta_sq > 0.0, "rouge_l: beta squared must be positive");
  if (candidate.empty()) return 0.0;
  double precision = 0.0, recall = 0.0;
  for (const auto& r : references) {
    if (r.empty()) continue;
    const double lcs = static_cast<double>(lcs_length(candidate, r));
    precision = std::max(precision, lcs / static_cast<double>(candidate.size()));
    recall = std::max(recall, lcs / static_cast<double>(r.size()));
  }
  if (precision == 0.0 || recall == 0.0) return 0.0;
  return (1.0 + beta_sq) * precision * recall / (recall + beta_sq * precision);
}

CaptionMetrics caption_metrics(const std::vector<Sentence>& generated,
                               const std::vector<std::vector<Sentence>>& references,
                               const reward::CorpusStats& stats,
                               const reward::CiderConfig& cider) {
  check_alignment(generated.size(), references.size());
  const std::vector<Sentence> cands = content(generated);
  std::vector<std::vector<Sentence>> refs;
  refs.reserve(references.size());
  for (const auto& set : references) {
    require(!set.empty(), "caption metrics: an image has no references");
    refs.push_back(content(set));
  }
  CaptionMetrics m;
  m.bleu = corpus_bleu(cands, refs);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    m.cider_d += reward::cider_d(cands[i], refs[i], stats, cider);
    m.rouge_l += rouge_l(cands[i], refs[i]);
  }
  const double n = static_cast<double>(cands.size());
  m.cider_d /= n;
  m.rouge_l /= n;
  return m;
}

std::vector<double> self_retrieval_eval(const retrieval::RetrieverParams& retriever,
                                        const std::vector<Sentence>& generated,
                                        const std::vector<const data::ImageRecord*>& images,
                                        const std::vector<std::size_t>& ks) {
  require(!images.empty(), "self retrieval: no images");
  require(generated.size() == images.size(),
          "self retrieval: " + std::to_string(generated.size()) + " captions for " +
              std::to_string(images.size()) + " images");
  for (std::size_t k : ks)
    require(k >= 1 && k <= images.size(), "self retrieval: k must lie in [1, image count]");
  std::vector<Sentence> queries;
  std::vector<std::size_t> owners;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    Sentence c = data::content_tokens(generated[i]);
    if (c.empty()) continue;
    queries.push_back(std::move(c));
    owners.push_back(i);
  }
  std::vector<double> hits(ks.size(), 0.0);
  if (!queries.empty()) {
    const grad::Tensor q = retrieval::encode_caption_batch(retriever, queries);
    const grad::Tensor v = retrieval::encode_image_batch(retriever, images);
    const std::size_t d = q.cols();
    grad::Tensor sims = grad::Tensor::zeros({queries.size(), images.size()});
    for (std::size_t a = 0; a < queries.size(); ++a)
      for (std::size_t j = 0; j < images.size(); ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += q.at(a, c) * v.at(j, c);
        sims.at(a, j) = s;
      }
    for (std::size_t a = 0; a < queries.size(); ++a) {
      const std::size_t rank = retrieval::rank_of(sims, a, owners[a]);
      for (std::size_t i = 0; i < ks.size(); ++i)
        if (rank <= ks[i]) hits[i] += 1.0;
    }
  }
  for (double& h : hits) h /= static_cast<double>(images.size());
  return hits;
}

UniqueNovel uniqueness_novelty(const std::vector<Sentence>& generated,
                               const std::vector<Sentence>& training_captions) {
  UniqueNovel out;
  if (generated.empty()) return out;
  std::set<Sentence> seen;
  for (const auto& s : training_captions) seen.insert(data::content_tokens(s));
  std::set<Sentence> distinct;
  std::size_t novel = 0;
  for (const auto& g : generated) {
    Sentence c = data::content_tokens(g);
    if (!seen.count(c)) ++novel;
    distinct.insert(std::move(c));
  }
  const double n = static_cast<double>(generated.size());
  out.unique_pct = 100.0 * static_cast<double>(distinct.size()) / n;
  out.novel_pct = 100.0 * static_cast<double>(novel) / n;
  return out;
}

std::string to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["cider_d"] = r.cider_d;
  j["bleu_1"] = r.bleu_1;
  j["bleu_2"] = r.bleu_2;
  j["bleu_3"] = r.bleu_3;
  j["bleu_4"] = r.bleu_4;
  j["rouge_l"] = r.rouge_l;
  j["recall_at_1"] = r.recall_at_1;
  j["recall_at_5"] = r.recall_at_5;
  j["recall_at_10"] = r.recall_at_10;
  j["unique_pct"] = r.unique_pct;
  j["novel_pct"] = r.novel_pct;
  j["config_fingerprint"] = r.config_fingerprint;
  j["seed"] = r.seed;
  return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
  static const std::set<std::string> kFields = {
      "cider_d",     "bleu_1",      "bleu_2",       "bleu_3",     "bleu_4",
      "rouge_l",     "recall_at_1", "recall_at_5",  "recall_at_10", "unique_pct",
      "novel_pct",   "config_fingerprint", "seed"};
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::malformed_file, std::string("eval report: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::malformed_file, "eval report: expected an object");
  for (const auto& [k, v] : j.items())
    if (!kFields.count(k)) throw Error(ErrorCode::malformed_file, "eval report: unknown field " + k);
  for (const auto& k : kFields)
    if (!j.contains(k)) throw Error(ErrorCode::malformed_file, "eval report: missing field " + k);
  EvalReport r;
  try {
    r.cider_d = j.at("cider_d").get<double>();
    r.bleu_1 = j.at("bleu_1").get<double>();
    r.bleu_2 = j.at("bleu_2").get<double>();
    r.bleu_3 = j.at("bleu_3").get<double>();
    r.bleu_4 = j.at("bleu_4").get<double>();
    r.rouge_l = j.at("rouge_l").get<double>();
    r.recall_at_1 = j.at("recall_at_1").get<double>();
    r.recall_at_5 = j.at("recall_at_5").get<double>();
    r.recall_at_10 = j.at("recall_at_10").get<double>();
    r.unique_pct = j.at("unique_pct").get<double>();
    r.novel_pct = j.at("novel_pct").get<double>();
    r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::malformed_file, std::string("eval report: ") + e.what());
  }
  return r;
}

void save_report(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::missing_artifact, "cannot write " + path.string());
  out << to_json(report);
  if (!out) throw Error(ErrorCode::missing_artifact, "failed writing " + path.string());
}

EvalReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::missing_artifact, "cannot read " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return report_from_json(text.str());
}

Evaluation evaluate(const EvalInputs& in, const std::string& config_fingerprint,
                    std::uint64_t seed) {
  require(in.captioner != nullptr, "evaluate: missing captioner");
  require(!in.images.empty(), "evaluate: no images");
  return score(in, caption::generate_captions(*in.captioner, in.images, in.beam_width, in.t_max),
               config_fingerprint, seed);
}

Evaluation score(const EvalInputs& in, std::vector<Sentence> captions,
                 const std::string& config_fingerprint, std::uint64_t seed) {
  require(in.retriever && in.vocab, "evaluate: missing retriever or vocabulary");
  require(!in.images.empty(), "evaluate: no images");
  require(captions.size() == in.images.size(), "evaluate: one caption per image required");
  Evaluation out;
  out.captions = std::move(captions);

  std::vector<std::vector<Sentence>> refs;
  for (const auto* r : in.images) {
    require(r->labeled(), "evaluate: image " + r->id + " has no reference captions");
    std::vector<Sentence> set;
    for (const auto& c : r->captions) {
      Sentence s = in.vocab->encode(c);
      if (s.size() > in.t_max) s.resize(in.t_max);
      set.push_back(std::move(s));
    }
    refs.push_back(std::move(set));
  }
  const reward::CorpusStats stats = reward::corpus_stats(refs);
  const CaptionMetrics m = caption_metrics(out.captions, refs, stats);

  std::vector<std::size_t> ks;
  for (std::size_t k : {1, 5, 10}) ks.push_back(std::min(k, in.images.size()));
  const std::vector<double> recall = self_retrieval_eval(*in.retriever, out.captions, in.images, ks);

  std::vector<Sentence> training;
  for (const auto* r : in.training)
    for (const auto& c : r->captions) {
      Sentence s = in.vocab->encode(c);
      if (s.size() > in.t_max) s.resize(in.t_max);
      training.push_back(std::move(s));
    }
  const UniqueNovel un = uniqueness_novelty(out.captions, training);

  EvalReport& rep = out.report;
  rep.cider_d = m.cider_d;
  rep.bleu_1 = m.bleu[0];
  rep.bleu_2 = m.bleu[1];
  rep.bleu_3 = m.bleu[2];
  rep.bleu_4 = m.bleu[3];
  rep.rouge_l = m.rouge_l;
  rep.recall_at_1 = recall[0];
  rep.recall_at_5 = recall[1];
  rep.recall_at_10 = recall[2];
  rep.unique_pct = un.unique_pct;
  rep.novel_pct = un.novel_pct;
  rep.config_fingerprint = config_fingerprint;
  rep.seed = seed;
  return out;
}

}  // namespace discap::eval
