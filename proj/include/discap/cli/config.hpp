#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "discap/caption/captioner.hpp"
#include "discap/data/dataset.hpp"
#include "discap/retrieval/retriever.hpp"
#include "discap/reward/reward.hpp"
#include "discap/rl/rltrain.hpp"

namespace discap::cli {

struct KeySpec {
  std::string name;
  nlohmann::json default_value;
  std::string description;
  std::string published;  // value used in the original large-scale setup, if any
};

// Every configuration key with its default, in display order.
const std::vector<KeySpec>& config_keys();

// Help text listing every key, its default and the published value.
std::string keys_help();

// Flat dotted-key view of a configuration; always holds every key.
using FlatConfig = std::map<std::string, nlohmann::json>;

FlatConfig default_flat_config();

// Merges a JSON document (nested objects or dotted keys) into the defaults.
// Unknown keys and values of the wrong type are config errors.
FlatConfig merge_config(FlatConfig base, const nlohmann::json& document);

// Applies one "key=value" override; the value is parsed as JSON when possible
// and otherwise taken as a string.
void apply_override(FlatConfig& config, const std::string& assignment);

// Compact JSON of every key except paths.*, keys sorted.
std::string canonical_json(const FlatConfig& config);

// 64-bit FNV-1a of the canonical JSON, as 16 lowercase hex digits.
std::string fingerprint(const FlatConfig& config);

std::uint64_t fnv1a64(std::string_view bytes);

struct Paths {
  std::filesystem::path dir;
  std::filesystem::path dataset, split, vocab;
  std::filesystem::path retriever, retriever_history;
  std::filesystem::path captioner_mle, mle_history;
  std::filesystem::path captioner_rl, rl_optimizer, rl_history;
  std::filesystem::path generations, report;
};

struct RunConfig {
  Paths paths;
  std::uint64_t seed = 1;
  bool record_wall_time = false;
  data::GenerateConfig data;
  std::size_t min_count = data::kDefaultMinCount;
  std::size_t t_max = data::kMaxCaptionTokens;
  retrieval::RetrieverDims retriever_dims;
  caption::CaptionerDims captioner_dims;
  retrieval::RetrieverTrainConfig retriever;
  caption::MleConfig mle;
  rl::RlConfig rl;
  std::size_t beam_width = 5;
  std::string generate_from = "rl";
  std::string fingerprint;
};

// Typed view; validates ranges and throws config_invalid on bad values.
RunConfig resolve(const FlatConfig& config);

// Reads a JSON config file and applies overrides in order.
FlatConfig load_config(const std::filesystem::path& path,
                       const std::vector<std::string>& overrides = {});

}  // namespace discap::cli
