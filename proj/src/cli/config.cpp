#include "discap/cli/config.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "discap/error.hpp"

namespace discap::cli {

using nlohmann::json;

namespace {

[[noreturn]] void invalid(const std::string& message) {
  throw Error(ErrorCode::config_invalid, message);
}

bool same_kind(const json& a, const json& b) {
  if (a.is_boolean() || b.is_boolean()) return a.is_boolean() && b.is_boolean();
  if (a.is_number_integer() && a.get<std::int64_t>() >= 0) return b.is_number_unsigned() ||
                                                                   (b.is_number_integer() && b.get<std::int64_t>() >= 0);
  if (a.is_number()) return b.is_number();
  return a.type() == b.type();
}

void flatten_into(const json& node, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  for (const auto& [k, v] : node.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object())
      flatten_into(v, key, out);
    else
      out.emplace_back(key, v);
  }
}

template <typename T>
T get(const FlatConfig& c, const std::string& key) {
  return c.at(key).get<T>();
}

}  // namespace

const std::vector<KeySpec>& config_keys() {
  static const std::vector<KeySpec> keys = {
      {"seed", 1, "seed for data generation, initialisation, batching and sampling", ""},
      {"record_wall_time", false, "write elapsed seconds into the RL history (breaks byte identity)", ""},
      {"paths.dir", "artifacts", "directory that relative artifact paths resolve against", ""},
      {"paths.dataset", "dataset.jsonl", "generated records (JSON Lines)", ""},
      {"paths.split", "split.json", "labeled/unlabeled/validation/test ids", ""},
      {"paths.vocab", "vocab.json", "vocabulary", ""},
      {"paths.retriever", "retriever.ckpt", "retriever checkpoint", ""},
      {"paths.retriever_history", "retriever_history.jsonl", "retriever training history", ""},
      {"paths.captioner_mle", "captioner_mle.ckpt", "cross-entropy pretrained captioner", ""},
      {"paths.mle_history", "mle_history.jsonl", "pretraining history", ""},
      {"paths.captioner_rl", "captioner_rl.ckpt", "best-validation RL captioner", ""},
      {"paths.rl_optimizer", "rl_optimizer.ckpt", "RL optimizer state after the last epoch", ""},
      {"paths.rl_history", "rl_history.jsonl", "RL history, one object per epoch", ""},
      {"paths.generations", "generations.jsonl", "generated test captions", ""},
      {"paths.report", "report.json", "evaluation report", ""},
      {"data.n_labeled", 2000, "labeled training images", ""},
      {"data.n_unlabeled", 2000, "unlabeled pool images", ""},
      {"data.n_validation", 500, "validation images", ""},
      {"data.n_test", 500, "test images", ""},
      {"data.feature_dim", 64, "image feature dimension D_img", "2048"},
      {"data.noise", 0.5, "feature noise standard deviation", ""},
      {"vocab.min_count", 6, "words seen fewer times map to UNK", "6"},
      {"vocab.t_max", 16, "maximum caption length in tokens", "16"},
      {"dims.caption_embed", 32, "captioner word embedding E_c", ""},
      {"dims.caption_hidden", 64, "captioner LSTM hidden size H", ""},
      {"dims.retriever_embed", 32, "retriever word embedding E_r", "300"},
      {"dims.retriever_hidden", 64, "retriever GRU hidden size H_r", "1024"},
      {"dims.joint", 32, "joint embedding size D_joint", "1024"},
      {"retriever.epochs", 25, "retriever training epochs", ""},
      {"retriever.batch_size", 128, "retriever batch size", ""},
      {"retriever.lr", 2e-3, "retriever learning rate", ""},
      {"retriever.loss", "vse_pp", "retriever loss: vse_pp, vse0 or softmax", "vse_pp"},
      {"retriever.margin", 0.2, "triplet margin m", ""},
      {"retriever.temperature", 0.1, "softmax temperature", ""},
      {"mle.epochs", 30, "cross-entropy pretraining epochs", ""},
      {"mle.batch_size", 50, "pretraining batch size", ""},
      {"mle.lr", 5e-3, "pretraining learning rate", ""},
      {"mle.ss_step", 0.05, "scheduled sampling increment", "0.05"},
      {"mle.ss_every", 5, "epochs between scheduled sampling increments", "5"},
      {"mle.ss_cap", 0.25, "maximum scheduled sampling probability", "0.25"},
      {"rl.mode", "sr-pl", "baseline, sr-fl or sr-pl", ""},
      {"rl.epochs", 3, "RL epochs", ""},
      {"rl.batch_size", 32, "RL batch size (labeled plus unlabeled)", ""},
      {"rl.ratio", "1:1", "labeled:unlabeled proportion in sr-pl batches", "1:1"},
      {"rl.lr", 2e-4, "RL learning rate", ""},
      {"rl.clip_norm", 5.0, "global gradient norm clip", ""},
      {"rl.h_min", 100, "lowest mined rank", "100"},
      {"rl.h_max", 1000, "highest mined rank", "1000"},
      {"rl.cosine", false, "cosine annealing with warm restarts", ""},
      {"rl.cosine_period", 1000, "steps in the first cosine period", ""},
      {"rl.cosine_multiplier", 2.0, "period growth after each restart", ""},
      {"rl.cosine_min_lr", 0.0, "learning rate at the end of a period", ""},
      {"reward.alpha", 1.0, "weight of the self-retrieval reward (ignored by baseline)", "1"},
      {"reward.loss", "vse_pp", "self-retrieval loss: vse_pp, vse0 or softmax", "vse_pp"},
      {"reward.margin", 0.2, "triplet margin of the self-retrieval reward", ""},
      {"reward.temperature", 0.1, "softmax temperature of the self-retrieval reward", ""},
      {"reward.cider_n", 4, "largest CIDEr-D n-gram", "4"},
      {"reward.cider_sigma", 6.0, "CIDEr-D length penalty sigma", "6"},
      {"generate.beam_width", 5, "beam width for test captions (1 = greedy)", "5"},
      {"generate.from", "rl", "captioner used for generation: rl or mle", ""},
  };
  return keys;
}

std::string keys_help() {
  std::ostringstream out;
  out << "Configuration keys (JSON file, nested or dotted; override with --set key=value):\n";
  for (const auto& k : config_keys()) {
    out << "  " << std::left << std::setw(24) << k.name << " " << std::setw(24)
        << k.default_value.dump() << " " << k.description;
    if (!k.published.empty()) out << " [published: " << k.published << "]";
    out << "\n";
  }
  return out.str();
}

FlatConfig default_flat_config() {
  FlatConfig c;
  for (const auto& k : config_keys()) c[k.name] = k.default_value;
  return c;
}

FlatConfig merge_config(FlatConfig base, const json& document) {
  if (!document.is_object()) invalid("config: top level must be a JSON object");
  std::vector<std::pair<std::string, json>> entries;
  flatten_into(document, "", entries);
  for (auto& [key, value] : entries) {
    const auto it = base.find(key);
    if (it == base.end()) invalid("config: unknown key '" + key + "'");
    if (!same_kind(it->second, value))
      invalid("config: key '" + key + "' expects a value like " + it->second.dump() + ", got " +
              value.dump());
    if (it->second.is_number_float() && value.is_number()) value = value.get<double>();
    it->second = value;
  }
  return base;
}

void apply_override(FlatConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) invalid("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  const auto it = config.find(key);
  if (it != config.end() && it->second.is_string() && !value.is_string()) value = text;
  json doc = json::object();
  doc[key] = value;
  config = merge_config(std::move(config), doc);
}

std::string canonical_json(const FlatConfig& config) {
  json j = json::object();
  for (const auto& [k, v] : config)
    if (k.rfind("paths.", 0) != 0) j[k] = v;
  return j.dump();
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fingerprint(const FlatConfig& config) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(canonical_json(config));
  return out.str();
}

RunConfig resolve(const FlatConfig& c) {
  RunConfig r;
  auto positive = [&](const std::string& key) {
    const auto v = get<std::int64_t>(c, key);
    if (v <= 0) invalid("config: " + key + " must be positive");
    return static_cast<std::size_t>(v);
  };
  auto count = [&](const std::string& key) {
    const auto v = get<std::int64_t>(c, key);
    if (v < 0) invalid("config: " + key + " must not be negative");
    return static_cast<std::size_t>(v);
  };
  auto positive_real = [&](const std::string& key) {
    const double v = get<double>(c, key);
    if (!(v > 0.0)) invalid("config: " + key + " must be positive");
    return v;
  };
  auto loss_kind = [&](const std::string& key) {
    try {
      return retrieval::parse_loss_kind(get<std::string>(c, key));
    } catch (const Error& e) {
      invalid("config: " + key + ": " + e.what());
    }
  };

  const std::filesystem::path dir = get<std::string>(c, "paths.dir");
  auto path = [&](const std::string& key) {
    const std::filesystem::path p = get<std::string>(c, key);
    if (p.empty()) invalid("config: " + key + " must not be empty");
    return p.is_absolute() ? p : dir / p;
  };
  r.paths.dir = dir;
  r.paths.dataset = path("paths.dataset");
  r.paths.split = path("paths.split");
  r.paths.vocab = path("paths.vocab");
  r.paths.retriever = path("paths.retriever");
  r.paths.retriever_history = path("paths.retriever_history");
  r.paths.captioner_mle = path("paths.captioner_mle");
  r.paths.mle_history = path("paths.mle_history");
  r.paths.captioner_rl = path("paths.captioner_rl");
  r.paths.rl_optimizer = path("paths.rl_optimizer");
  r.paths.rl_history = path("paths.rl_history");
  r.paths.generations = path("paths.generations");
  r.paths.report = path("paths.report");

  r.seed = get<std::uint64_t>(c, "seed");
  r.record_wall_time = get<bool>(c, "record_wall_time");

  r.data.n_labeled = positive("data.n_labeled");
  r.data.n_unlabeled = count("data.n_unlabeled");
  r.data.n_validation = count("data.n_validation");
  r.data.n_test = positive("data.n_test");
  r.data.feature_dim = positive("data.feature_dim");
  r.data.noise = get<double>(c, "data.noise");
  if (r.data.noise < 0.0) invalid("config: data.noise must not be negative");
  r.data.seed = r.seed;
  if (r.data.feature_dim < r.data.inventories.one_hot_width())
    invalid("config: data.feature_dim must be at least " +
            std::to_string(r.data.inventories.one_hot_width()));

  r.min_count = positive("vocab.min_count");
  r.t_max = positive("vocab.t_max");

  r.captioner_dims.embed = positive("dims.caption_embed");
  r.captioner_dims.hidden = positive("dims.caption_hidden");
  r.captioner_dims.image = r.data.feature_dim;
  r.retriever_dims.embed = positive("dims.retriever_embed");
  r.retriever_dims.hidden = positive("dims.retriever_hidden");
  r.retriever_dims.joint = positive("dims.joint");
  r.retriever_dims.image = r.data.feature_dim;

  r.retriever.epochs = positive("retriever.epochs");
  r.retriever.batch_size = positive("retriever.batch_size");
  r.retriever.lr = positive_real("retriever.lr");
  r.retriever.loss.kind = loss_kind("retriever.loss");
  r.retriever.loss.margin = positive_real("retriever.margin");
  r.retriever.loss.temperature = positive_real("retriever.temperature");
  r.retriever.seed = r.seed;

  r.mle.epochs = positive("mle.epochs");
  r.mle.batch_size = positive("mle.batch_size");
  r.mle.lr = positive_real("mle.lr");
  r.mle.schedule.step = get<double>(c, "mle.ss_step");
  r.mle.schedule.every = positive("mle.ss_every");
  r.mle.schedule.cap = get<double>(c, "mle.ss_cap");
  if (r.mle.schedule.step < 0.0 || r.mle.schedule.cap < 0.0 || r.mle.schedule.cap > 1.0)
    invalid("config: scheduled sampling needs ss_step >= 0 and ss_cap in [0, 1]");
  r.mle.t_max = r.t_max;
  r.mle.seed = r.seed;

  try {
    r.rl.mode = rl::parse_mode(get<std::string>(c, "rl.mode"));
    r.rl.ratio = rl::parse_ratio(get<std::string>(c, "rl.ratio"));
  } catch (const Error& e) {
    invalid(std::string("config: ") + e.what());
  }
  r.rl.epochs = positive("rl.epochs");
  r.rl.batch_size = positive("rl.batch_size");
  r.rl.lr = positive_real("rl.lr");
  r.rl.step.clip_norm = positive_real("rl.clip_norm");
  r.rl.step.t_max = r.t_max;
  r.rl.mining.h_min = positive("rl.h_min");
  r.rl.mining.h_max = positive("rl.h_max");
  if (r.rl.mining.h_min > r.rl.mining.h_max) invalid("config: rl.h_min must not exceed rl.h_max");
  r.rl.schedule.enabled = get<bool>(c, "rl.cosine");
  r.rl.schedule.period = positive("rl.cosine_period");
  r.rl.schedule.multiplier = positive_real("rl.cosine_multiplier");
  r.rl.schedule.min_lr = get<double>(c, "rl.cosine_min_lr");
  r.rl.seed = r.seed;
  r.rl.record_wall_time = r.record_wall_time;
  if (r.rl.mode == rl::Mode::sr_pl && r.data.n_unlabeled == 0)
    invalid("config: rl.mode sr-pl needs an unlabeled pool but data.n_unlabeled is 0");

  r.rl.reward.alpha = get<double>(c, "reward.alpha");
  r.rl.reward.loss.kind = loss_kind("reward.loss");
  r.rl.reward.loss.margin = positive_real("reward.margin");
  r.rl.reward.loss.temperature = positive_real("reward.temperature");
  r.rl.reward.cider.n_max = positive("reward.cider_n");
  r.rl.reward.cider.sigma = positive_real("reward.cider_sigma");
  try {
    reward::validate(r.rl.reward);
  } catch (const Error& e) {
    invalid(std::string("config: ") + e.what());
  }

  r.beam_width = positive("generate.beam_width");
  r.generate_from = get<std::string>(c, "generate.from");
  if (r.generate_from != "rl" && r.generate_from != "mle")
    invalid("config: generate.from must be rl or mle");

  r.fingerprint = fingerprint(c);
  return r;
}

FlatConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) invalid("cannot read config file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    invalid("config file " + path.string() + ": " + e.what());
  }
  FlatConfig config = merge_config(default_flat_config(), doc);
  for (const auto& o : overrides) apply_override(config, o);
  return config;
}

}  // namespace discap::cli
