#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "discap/data/dataset.hpp"

namespace discap::data {

using TokenId = std::uint32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kFirstWordId = 4;

// Words seen fewer than this many times map to UNK.
inline constexpr std::size_t kDefaultMinCount = 6;

using Caption = std::vector<TokenId>;

class Vocabulary {
 public:
  Vocabulary() = default;
  // `tokens` maps regular words to ids; ids must be dense from kFirstWordId.
  explicit Vocabulary(std::map<std::string, TokenId> tokens);

  std::size_t size() const { return words_.size() + kFirstWordId; }
  TokenId id(const std::string& token) const;
  const std::string& token(TokenId id) const;
  bool contains(const std::string& token) const { return tokens_.count(token) > 0; }
  const std::map<std::string, TokenId>& tokens() const { return tokens_; }

  Caption encode(const TokenList& tokens) const;
  // Stops at EOS; PAD and BOS are skipped.
  TokenList decode(const Caption& ids) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::map<std::string, TokenId> tokens_;
  std::vector<std::string> words_;
};

// Ids are assigned by descending count, ties broken lexicographically.
Vocabulary build_vocab(const std::vector<TokenList>& corpus,
                       std::size_t min_count = kDefaultMinCount);

void save_vocab(const std::filesystem::path& path, const Vocabulary& vocab,
                const std::optional<std::string>& fingerprint = std::nullopt);
Vocabulary load_vocab(const std::filesystem::path& path);

// Drops everything from the first EOS on and strips BOS/PAD.
Caption content_tokens(const Caption& caption);

}  // namespace discap::data
