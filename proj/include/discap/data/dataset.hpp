#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace discap::data {

using TokenList = std::vector<std::string>;

// Longest caption kept for training targets and decoding.
inline constexpr std::size_t kMaxCaptionTokens = 16;

struct Inventories {
  std::vector<std::string> shapes;
  std::vector<std::string> colors;
  std::vector<std::string> sizes;
  std::vector<std::string> backgrounds;

  static Inventories defaults();
  std::size_t one_hot_width() const {
    return shapes.size() + colors.size() + sizes.size() + backgrounds.size();
  }
};

struct AttributeTuple {
  std::string shape;
  std::string color;
  std::string size;
  std::string background;

  bool operator==(const AttributeTuple&) const = default;
};

struct ImageRecord {
  std::string id;
  std::vector<double> features;
  AttributeTuple attrs;
  std::vector<TokenList> captions;  // empty for unlabeled images

  bool labeled() const { return !captions.empty(); }
  bool operator==(const ImageRecord&) const = default;
};

struct DatasetSplit {
  std::vector<std::string> labeled;
  std::vector<std::string> unlabeled;
  std::vector<std::string> validation;
  std::vector<std::string> test;

  bool operator==(const DatasetSplit&) const = default;
};

struct GenerateConfig {
  std::size_t n_labeled = 2000;
  std::size_t n_unlabeled = 2000;
  std::size_t n_validation = 500;
  std::size_t n_test = 500;
  std::size_t feature_dim = 64;
  double noise = 0.5;
  std::uint64_t seed = 1;
  Inventories inventories = Inventories::defaults();
};

struct GeneratedData {
  std::vector<ImageRecord> records;
  DatasetSplit split;
};

// Features are a fixed seeded projection of the scaled attribute one-hot code
// plus Gaussian noise. Shape carries twice the weight of the other attributes.
// Every record outside the unlabeled pool gets one caption per template, the
// first being the fully discriminative one.
GeneratedData generate(const GenerateConfig& config);

std::vector<TokenList> caption_templates(const AttributeTuple& attrs);

// Lowercases, splits on whitespace, drops punctuation, truncates.
TokenList tokenize(const std::string& text, std::size_t max_tokens = kMaxCaptionTokens);

// Lookup by id over a loaded record list.
class RecordIndex {
 public:
  explicit RecordIndex(const std::vector<ImageRecord>& records);
  const ImageRecord& at(const std::string& id) const;
  bool contains(const std::string& id) const { return by_id_.count(id) > 0; }
  std::vector<const ImageRecord*> resolve(const std::vector<std::string>& ids) const;

 private:
  const std::vector<ImageRecord>* records_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

void save_dataset(const std::filesystem::path& path, const std::vector<ImageRecord>& records);
std::vector<ImageRecord> load_dataset(const std::filesystem::path& path);

void save_split(const std::filesystem::path& path, const DatasetSplit& split,
                const std::optional<std::string>& fingerprint = std::nullopt);
DatasetSplit load_split(const std::filesystem::path& path);

// Pairwise disjoint and covering every record.
void validate_split(const DatasetSplit& split, const std::vector<ImageRecord>& records);

}  // namespace discap::data
