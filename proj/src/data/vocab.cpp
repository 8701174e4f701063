#include "discap/data/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <unordered_map>

#include <json.hpp>

#include "discap/error.hpp"

namespace discap::data {
namespace {

using nlohmann::json;

const std::string kSpecialNames[kFirstWordId] = {"PAD", "BOS", "EOS", "UNK"};

[[noreturn]] void malformed(const std::filesystem::path& path, const std::string& what) {
  throw Error(ErrorCode::malformed_file, path.string() + ": " + what);
}

}  // namespace

Vocabulary::Vocabulary(std::map<std::string, TokenId> tokens) : tokens_(std::move(tokens)) {
  words_.assign(tokens_.size(), std::string());
  std::vector<bool> filled(tokens_.size(), false);
  for (const auto& [word, id] : tokens_) {
    if (id < kFirstWordId || id - kFirstWordId >= tokens_.size())
      fail("vocabulary: id " + std::to_string(id) + " for '" + word + "' is not dense");
    if (filled[id - kFirstWordId]) fail("vocabulary: id " + std::to_string(id) + " is reused");
    filled[id - kFirstWordId] = true;
    words_[id - kFirstWordId] = word;
  }
}

TokenId Vocabulary::id(const std::string& token) const {
  auto it = tokens_.find(token);
  return it == tokens_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < kFirstWordId) return kSpecialNames[id];
  require(id - kFirstWordId < words_.size(), "vocabulary: id " + std::to_string(id) +
                                                 " out of range");
  return words_[id - kFirstWordId];
}

Caption Vocabulary::encode(const TokenList& tokens) const {
  Caption out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

TokenList Vocabulary::decode(const Caption& ids) const {
  TokenList out;
  for (TokenId id : ids) {
    if (id == kEos) break;
    if (id == kPad || id == kBos) continue;
    out.push_back(token(id));
  }
  return out;
}

Vocabulary build_vocab(const std::vector<TokenList>& corpus, std::size_t min_count) {
  if (corpus.empty()) fail("build_vocab: empty corpus");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& caption : corpus)
    for (const auto& tok : caption) ++counts[tok];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [tok, n] : counts)
    if (n >= min_count) kept.emplace_back(tok, n);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::map<std::string, TokenId> tokens;
  for (std::size_t i = 0; i < kept.size(); ++i)
    tokens.emplace(kept[i].first, static_cast<TokenId>(kFirstWordId + i));
  return Vocabulary(std::move(tokens));
}

void save_vocab(const std::filesystem::path& path, const Vocabulary& vocab,
                const std::optional<std::string>& fingerprint) {
  json obj;
  obj["specials"] = {{"PAD", kPad}, {"BOS", kBos}, {"EOS", kEos}, {"UNK", kUnk}};
  obj["tokens"] = json::object();
  for (const auto& [tok, id] : vocab.tokens()) obj["tokens"][tok] = id;
  if (fingerprint) obj["config_fingerprint"] = *fingerprint;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write " + path.string());
  out << obj.dump(2) << '\n';
}

Vocabulary load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::missing_artifact, "cannot open " + path.string());
  json obj;
  try {
    obj = json::parse(in);
  } catch (const json::parse_error& e) {
    malformed(path, std::string("invalid JSON: ") + e.what());
  }
  static const std::set<std::string> kKeys = {"specials", "tokens", "config_fingerprint"};
  if (!obj.is_object()) malformed(path, "vocabulary file must hold an object");
  for (const auto& [key, _] : obj.items())
    if (!kKeys.count(key)) malformed(path, "unknown field '" + key + "'");
  const json expected = {{"PAD", kPad}, {"BOS", kBos}, {"EOS", kEos}, {"UNK", kUnk}};
  if (!obj.contains("specials") || obj["specials"] != expected)
    malformed(path, "specials must be {PAD:0, BOS:1, EOS:2, UNK:3}");
  if (!obj.contains("tokens") || !obj["tokens"].is_object())
    malformed(path, "missing tokens object");
  std::map<std::string, TokenId> tokens;
  for (const auto& [tok, id] : obj["tokens"].items()) {
    if (!id.is_number_unsigned()) malformed(path, "token '" + tok + "' has a non-integer id");
    tokens.emplace(tok, id.get<TokenId>());
  }
  try {
    return Vocabulary(std::move(tokens));
  } catch (const Error& e) {
    malformed(path, e.what());
  }
}

Caption content_tokens(const Caption& caption) {
  Caption out;
  for (TokenId id : caption) {
    if (id == kEos) break;
    if (id == kPad || id == kBos) continue;
    out.push_back(id);
  }
  return out;
}

}  // namespace discap::data
