#include "discap/cli/commands.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "discap/checkpoint.hpp"
#include "discap/eval/evalsuite.hpp"
#include "discap/rl/adam.hpp"

namespace discap::cli {

using nlohmann::ordered_json;

namespace {

void require_artifact(const std::filesystem::path& path, const std::string& what,
                      const std::string& producer) {
  if (!std::filesystem::exists(path))
    throw Error(ErrorCode::missing_artifact,
                what + " " + path.string() + " not found (run " + producer + " first)");
}

void ensure_parent(const std::filesystem::path& path) {
  const auto parent = path.parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::missing_artifact, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::missing_artifact, "failed writing " + path.string());
}

void save_checkpoint(const std::filesystem::path& path, Checkpoint ckpt,
                     const std::string& fingerprint) {
  ensure_parent(path);
  ckpt.set_fingerprint(fingerprint);
  ckpt.save(path);
}

struct Corpus {
  std::vector<data::ImageRecord> records;
  data::DatasetSplit split;
};

Corpus load_corpus(const RunConfig& c) {
  require_artifact(c.paths.dataset, "dataset", "gen-data");
  require_artifact(c.paths.split, "split", "gen-data");
  Corpus corpus{data::load_dataset(c.paths.dataset), data::load_split(c.paths.split)};
  data::validate_split(corpus.split, corpus.records);
  return corpus;
}

data::Vocabulary load_vocab(const RunConfig& c) {
  require_artifact(c.paths.vocab, "vocabulary", "build-vocab");
  return data::load_vocab(c.paths.vocab);
}

retrieval::RetrieverParams load_retriever(const RunConfig& c) {
  require_artifact(c.paths.retriever, "retriever checkpoint", "train-retriever");
  return retrieval::RetrieverParams::load(Checkpoint::load(c.paths.retriever));
}

std::filesystem::path captioner_path(const RunConfig& c, std::string& producer) {
  producer = c.generate_from == "rl" ? "train-rl" : "pretrain-captioner";
  return c.generate_from == "rl" ? c.paths.captioner_rl : c.paths.captioner_mle;
}

caption::CaptionerParams load_captioner(const std::filesystem::path& path,
                                        const std::string& producer) {
  require_artifact(path, "captioner checkpoint", producer);
  return caption::CaptionerParams::load(Checkpoint::load(path));
}

void check_vocab_size(std::size_t expected, std::size_t actual, const std::string& what) {
  if (expected != actual)
    throw Error(ErrorCode::config_invalid, what + " was trained with a vocabulary of " +
                                               std::to_string(expected) + " but the vocabulary has " +
                                               std::to_string(actual) + " entries");
}

std::string caption_text(const data::Vocabulary& vocab, const data::Caption& caption) {
  std::string text;
  for (const auto& w : vocab.decode(data::content_tokens(caption))) {
    if (!text.empty()) text += ' ';
    text += w;
  }
  return text;
}

}  // namespace

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::missing_artifact:
      return 2;
    case ErrorCode::config_invalid:
      return 3;
    case ErrorCode::numerical_abort:
      return 4;
    case ErrorCode::malformed_file:
      return 5;
    case ErrorCode::invalid_argument:
      return 1;
  }
  return 1;
}

void gen_data(const RunConfig& c, std::ostream& log) {
  const data::GeneratedData g = data::generate(c.data);
  ensure_parent(c.paths.dataset);
  data::save_dataset(c.paths.dataset, g.records);
  ensure_parent(c.paths.split);
  data::save_split(c.paths.split, g.split, c.fingerprint);
  log << "gen-data: " << g.records.size() << " records (" << g.split.labeled.size() << " labeled, "
      << g.split.unlabeled.size() << " unlabeled, " << g.split.validation.size() << " validation, "
      << g.split.test.size() << " test)\n";
}

void build_vocab(const RunConfig& c, std::ostream& log) {
  const Corpus corpus = load_corpus(c);
  const data::RecordIndex index(corpus.records);
  std::vector<data::TokenList> captions;
  for (const auto* r : index.resolve(corpus.split.labeled))
    captions.insert(captions.end(), r->captions.begin(), r->captions.end());
  if (captions.empty())
    throw Error(ErrorCode::config_invalid, "build-vocab: the labeled split has no captions");
  const data::Vocabulary vocab = data::build_vocab(captions, c.min_count);
  ensure_parent(c.paths.vocab);
  data::save_vocab(c.paths.vocab, vocab, c.fingerprint);
  log << "build-vocab: " << vocab.size() << " entries\n";
}

void train_retriever(const RunConfig& c, std::ostream& log) {
  const Corpus corpus = load_corpus(c);
  const data::Vocabulary vocab = load_vocab(c);
  const data::RecordIndex index(corpus.records);
  retrieval::RetrieverDims dims = c.retriever_dims;
  dims.vocab = vocab.size();
  std::string history;
  const auto result = retrieval::train_retriever(
      index.resolve(corpus.split.labeled), index.resolve(corpus.split.validation), vocab, dims,
      c.retriever, [&](const retrieval::RetrieverEpoch& e) {
        ordered_json j;
        j["epoch"] = e.epoch;
        j["mean_loss"] = e.mean_loss;
        j["val_recall_at_1"] = e.val_recall_at_1;
        j["config_fingerprint"] = c.fingerprint;
        history += j.dump() + "\n";
        log << "train-retriever: epoch " << e.epoch << " loss " << e.mean_loss << " val R@1 "
            << e.val_recall_at_1 << "\n";
      });
  Checkpoint ckpt;
  result.params.store(ckpt);
  save_checkpoint(c.paths.retriever, std::move(ckpt), c.fingerprint);
  write_text(c.paths.retriever_history, history);
}

void pretrain_captioner(const RunConfig& c, std::ostream& log) {
  const Corpus corpus = load_corpus(c);
  const data::Vocabulary vocab = load_vocab(c);
  const data::RecordIndex index(corpus.records);
  caption::CaptionerDims dims = c.captioner_dims;
  dims.vocab = vocab.size();
  std::string history;
  const auto result = caption::pretrain_mle(
      index.resolve(corpus.split.labeled), index.resolve(corpus.split.validation), vocab, dims,
      c.mle, [&](const caption::MleEpoch& e) {
        ordered_json j;
        j["epoch"] = e.epoch;
        j["sample_prob"] = e.sample_prob;
        j["train_loss"] = e.train_loss;
        j["val_loss"] = e.val_loss;
        j["config_fingerprint"] = c.fingerprint;
        history += j.dump() + "\n";
        log << "pretrain-captioner: epoch " << e.epoch << " train " << e.train_loss << " val "
            << e.val_loss << "\n";
      });
  Checkpoint ckpt;
  result.params.store(ckpt);
  save_checkpoint(c.paths.captioner_mle, std::move(ckpt), c.fingerprint);
  write_text(c.paths.mle_history, history);
}

void train_rl(const RunConfig& c, std::ostream& log) {
  const Corpus corpus = load_corpus(c);
  const data::Vocabulary vocab = load_vocab(c);
  const retrieval::RetrieverParams retriever = load_retriever(c);
  const caption::CaptionerParams initial =
      load_captioner(c.paths.captioner_mle, "pretrain-captioner");
  check_vocab_size(retriever.embed.shape[0], vocab.size(), "the retriever");
  check_vocab_size(initial.embed.shape[0], vocab.size(), "the captioner");
  const data::RecordIndex index(corpus.records);
  rl::RlData d{index.resolve(corpus.split.labeled), index.resolve(corpus.split.unlabeled),
               index.resolve(corpus.split.validation)};
  if (c.rl.mode == rl::Mode::sr_pl && d.unlabeled.empty())
    throw Error(ErrorCode::config_invalid,
                "train-rl: rl.mode sr-pl needs an unlabeled pool but the split has none "
                "(data.n_unlabeled)");
  const auto result = rl::train_rl(initial, retriever, d, vocab, c.rl, [&](const rl::RlEpoch& e) {
    log << "train-rl: epoch " << e.epoch << " reward " << e.mean_reward << " baseline "
        << e.mean_baseline << " val CIDEr-D " << e.val_cider << " val R@1 " << e.val_recall_at_1
        << "\n";
  });
  Checkpoint ckpt;
  result.params.store(ckpt);
  save_checkpoint(c.paths.captioner_rl, std::move(ckpt), c.fingerprint);
  Checkpoint opt;
  rl::store_optimizer(opt, "adam", result.optimizer);
  save_checkpoint(c.paths.rl_optimizer, std::move(opt), c.fingerprint);
  ensure_parent(c.paths.rl_history);
  rl::save_history(c.paths.rl_history, result.history, c.fingerprint);
  log << "train-rl: best epoch " << result.best_epoch << "\n";
}

namespace {

eval::EvalInputs eval_inputs(const RunConfig& c, const data::RecordIndex& index,
                             const data::DatasetSplit& split, const data::Vocabulary& vocab,
                             const caption::CaptionerParams* captioner,
                             const retrieval::RetrieverParams* retriever) {
  eval::EvalInputs in;
  in.captioner = captioner;
  in.retriever = retriever;
  in.images = index.resolve(split.test);
  in.training = index.resolve(split.labeled);
  in.vocab = &vocab;
  in.beam_width = c.beam_width;
  in.t_max = c.t_max;
  return in;
}

std::vector<data::Caption> generate_and_save(const RunConfig& c, const Corpus& corpus,
                                             const data::Vocabulary& vocab) {
  std::string producer;
  const auto path = captioner_path(c, producer);
  const caption::CaptionerParams captioner = load_captioner(path, producer);
  check_vocab_size(captioner.embed.shape[0], vocab.size(), "the captioner");
  const data::RecordIndex index(corpus.records);
  const auto images = index.resolve(corpus.split.test);
  const auto captions = caption::generate_captions(captioner, images, c.beam_width, c.t_max);
  std::string text;
  for (std::size_t i = 0; i < images.size(); ++i) {
    ordered_json j;
    j["id"] = images[i]->id;
    j["caption"] = caption_text(vocab, captions[i]);
    j["config_fingerprint"] = c.fingerprint;
    text += j.dump() + "\n";
  }
  write_text(c.paths.generations, text);
  return captions;
}

// Captions of a generation file in test-split order, or nothing when the file
// belongs to another configuration or another split.
std::optional<std::vector<data::Caption>> read_generations(const RunConfig& c,
                                                          const Corpus& corpus,
                                                          const data::Vocabulary& vocab) {
  std::ifstream in(c.paths.generations);
  if (!in) return std::nullopt;
  std::map<std::string, data::Caption> by_id;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      if (j.at("config_fingerprint").get<std::string>() != c.fingerprint) return std::nullopt;
      by_id[j.at("id").get<std::string>()] =
          vocab.encode(data::tokenize(j.at("caption").get<std::string>(), c.t_max));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::malformed_file, c.paths.generations.string() + " line " +
                                                 std::to_string(line_no) + ": " + e.what());
    }
  }
  std::vector<data::Caption> out;
  for (const auto& id : corpus.split.test) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) return std::nullopt;
    out.push_back(it->second);
  }
  return out;
}

}  // namespace

void generate(const RunConfig& c, std::ostream& log) {
  const Corpus corpus = load_corpus(c);
  const data::Vocabulary vocab = load_vocab(c);
  const auto captions = generate_and_save(c, corpus, vocab);
  log << "generate: " << captions.size() << " captions\n";
}

void evaluate(const RunConfig& c, std::ostream& log) {
  const Corpus corpus = load_corpus(c);
  const data::Vocabulary vocab = load_vocab(c);
  const retrieval::RetrieverParams retriever = load_retriever(c);
  check_vocab_size(retriever.embed.shape[0], vocab.size(), "the retriever");
  auto captions = read_generations(c, corpus, vocab);
  if (!captions) {
    log << "evaluate: generating test captions\n";
    captions = generate_and_save(c, corpus, vocab);
  }
  const data::RecordIndex index(corpus.records);
  const eval::EvalInputs in = eval_inputs(c, index, corpus.split, vocab, nullptr, &retriever);
  const eval::Evaluation result = eval::score(in, std::move(*captions), c.fingerprint, c.seed);
  ensure_parent(c.paths.report);
  eval::save_report(c.paths.report, result.report);
  const auto& r = result.report;
  log << "evaluate: CIDEr-D " << r.cider_d << " BLEU-4 " << r.bleu_4 << " ROUGE-L " << r.rouge_l
      << " R@1 " << r.recall_at_1 << " R@5 " << r.recall_at_5 << " R@10 " << r.recall_at_10
      << " unique " << r.unique_pct << "% novel " << r.novel_pct << "%\n";
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Discriminative captioning with self-retrieval rewards on a synthetic shape world"};
  app.footer(keys_help());
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;

  using Command = void (*)(const RunConfig&, std::ostream&);
  const std::vector<std::tuple<std::string, std::string, Command>> commands = {
      {"gen-data", "generate the synthetic dataset and split", gen_data},
      {"build-vocab", "build the vocabulary from labeled training captions", build_vocab},
      {"train-retriever", "train the text-to-image retriever", train_retriever},
      {"pretrain-captioner", "pretrain the captioner with cross-entropy", pretrain_captioner},
      {"train-rl", "fine-tune the captioner with REINFORCE", train_rl},
      {"generate", "caption the test images", generate},
      {"evaluate", "score test captions and write the report", evaluate},
  };
  std::vector<std::pair<CLI::App*, Command>> subs;
  for (const auto& [name, help, fn] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON configuration file")->required();
    sub->add_option("--set", overrides, "override one key, key=value (repeatable)");
    sub->footer(keys_help());
    subs.emplace_back(sub, fn);
  }

  std::vector<std::string> argv_storage = {"discap"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_storage) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << to_string(ErrorCode::config_invalid) << ": " << e.what() << "\n";
    return exit_code(ErrorCode::config_invalid);
  }

  try {
    const RunConfig config = resolve(load_config(config_path, overrides));
    for (const auto& [sub, fn] : subs)
      if (sub->parsed()) fn(config, out);
    return 0;
  } catch (const Error& e) {
    err << to_string(e.code()) << ": " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    err << "internal_error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace discap::cli
