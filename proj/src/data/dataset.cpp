#include "discap/data/dataset.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <regex>
#include <set>
#include <sstream>

#include <json.hpp>

#include "discap/error.hpp"
#include "discap/rng.hpp"

namespace discap::data {
namespace {

using nlohmann::json;

constexpr double kShapeSalience = 2.0;

[[noreturn]] void malformed(const std::filesystem::path& path, std::size_t line,
                            const std::string& what) {
  throw Error(ErrorCode::malformed_file,
              path.string() + ":" + std::to_string(line) + ": " + what);
}

std::ifstream open_for_read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::missing_artifact, "cannot open " + path.string());
  return in;
}

std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write " + path.string());
  return out;
}

std::string make_id(std::size_t index) {
  std::ostringstream out;
  out << "img-" << std::setw(6) << std::setfill('0') << index;
  return out.str();
}

}  // namespace

Inventories Inventories::defaults() {
  return Inventories{
      {"circle", "square", "triangle", "star", "hexagon", "diamond", "cross", "heart", "pentagon",
       "oval"},
      {"red", "green", "blue", "yellow", "purple", "orange", "pink", "brown", "black", "white",
       "gray", "cyan"},
      {"small", "medium", "large"},
      {"grass", "sand", "water", "snow", "brick", "wood", "stone", "carpet", "metal", "leaves"},
  };
}

std::vector<TokenList> caption_templates(const AttributeTuple& a) {
  return {
      {"a", a.size, a.color, a.shape, "on", "a", a.background},
      {"a", a.shape},
      {"a", a.shape},
      {"a", a.shape},
      {"a", a.size, a.color, a.shape, "on", "a", a.background},
  };
}

TokenList tokenize(const std::string& text, std::size_t max_tokens) {
  TokenList tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty() && tokens.size() < max_tokens) tokens.push_back(current);
    current.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return tokens;
}

GeneratedData generate(const GenerateConfig& config) {
  const Inventories& inv = config.inventories;
  if (inv.shapes.empty() || inv.colors.empty() || inv.sizes.empty() || inv.backgrounds.empty())
    fail("generate: every attribute inventory must be nonempty");
  const std::size_t total =
      config.n_labeled + config.n_unlabeled + config.n_validation + config.n_test;
  if (total == 0) fail("generate: record counts must not all be zero");
  const std::size_t width = inv.one_hot_width();
  if (config.feature_dim < width)
    fail("generate: feature_dim " + std::to_string(config.feature_dim) +
         " is smaller than the attribute code width " + std::to_string(width));
  if (!(config.noise >= 0.0) || !std::isfinite(config.noise))
    fail("generate: noise must be finite and nonnegative");

  Rng projection_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<double> projection(config.feature_dim * width);
  for (double& v : projection) v = projection_rng.normal();

  Rng rng(config.seed);
  GeneratedData out;
  out.records.reserve(total);
  const std::size_t offsets[4] = {0, inv.shapes.size(), inv.shapes.size() + inv.colors.size(),
                                  inv.shapes.size() + inv.colors.size() + inv.sizes.size()};
  const std::pair<std::size_t, std::vector<std::string>*> groups[4] = {
      {config.n_labeled, &out.split.labeled},
      {config.n_unlabeled, &out.split.unlabeled},
      {config.n_validation, &out.split.validation},
      {config.n_test, &out.split.test},
  };
  for (std::size_t g = 0; g < 4; ++g) {
    const bool with_captions = g != 1;
    for (std::size_t i = 0; i < groups[g].first; ++i) {
      ImageRecord rec;
      rec.id = make_id(out.records.size());
      const std::size_t picks[4] = {rng.below(inv.shapes.size()), rng.below(inv.colors.size()),
                                    rng.below(inv.sizes.size()),
                                    rng.below(inv.backgrounds.size())};
      rec.attrs = {inv.shapes[picks[0]], inv.colors[picks[1]], inv.sizes[picks[2]],
                   inv.backgrounds[picks[3]]};
      rec.features.assign(config.feature_dim, 0.0);
      for (std::size_t a = 0; a < 4; ++a) {
        const std::size_t column = offsets[a] + picks[a];
        const double weight = a == 0 ? kShapeSalience : 1.0;
        for (std::size_t d = 0; d < config.feature_dim; ++d)
          rec.features[d] += weight * projection[d * width + column];
      }
      for (double& v : rec.features) v += config.noise * rng.normal();
      if (with_captions) rec.captions = caption_templates(rec.attrs);
      groups[g].second->push_back(rec.id);
      out.records.push_back(std::move(rec));
    }
  }
  return out;
}

RecordIndex::RecordIndex(const std::vector<ImageRecord>& records) : records_(&records) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!by_id_.emplace(records[i].id, i).second) fail("duplicate record id " + records[i].id);
  }
}

const ImageRecord& RecordIndex::at(const std::string& id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) fail("unknown record id " + id);
  return (*records_)[it->second];
}

std::vector<const ImageRecord*> RecordIndex::resolve(const std::vector<std::string>& ids) const {
  std::vector<const ImageRecord*> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(&at(id));
  return out;
}

void save_dataset(const std::filesystem::path& path, const std::vector<ImageRecord>& records) {
  std::ofstream out = open_for_write(path);
  for (const auto& rec : records) {
    json line;
    line["id"] = rec.id;
    line["features"] = rec.features;
    line["attrs"] = {{"shape", rec.attrs.shape},
                     {"color", rec.attrs.color},
                     {"size", rec.attrs.size},
                     {"background", rec.attrs.background}};
    line["captions"] = rec.captions;
    out << line.dump() << '\n';
  }
}

std::vector<ImageRecord> load_dataset(const std::filesystem::path& path) {
  static const std::set<std::string> kFields = {"id", "features", "attrs", "captions"};
  static const std::set<std::string> kAttrFields = {"shape", "color", "size", "background"};
  std::ifstream in = open_for_read(path);
  std::vector<ImageRecord> records;
  std::string text;
  std::size_t line_no = 0;
  std::optional<std::size_t> dim;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.empty()) continue;
    json obj;
    try {
      obj = json::parse(text);
    } catch (const json::exception& e) {
      // Overflowing numbers fail inside the parser; recover the id from the raw text.
      static const std::regex kId(R"re("id"\s*:\s*"([^"]*)")re");
      std::smatch m;
      const std::string who =
          std::regex_search(text, m, kId) ? "record " + m[1].str() + ": " : std::string();
      malformed(path, line_no, who + "invalid or non-finite value: " + e.what());
    }
    if (!obj.is_object()) malformed(path, line_no, "record is not an object");
    for (const auto& [key, _] : obj.items())
      if (!kFields.count(key)) malformed(path, line_no, "unknown field '" + key + "'");
    for (const auto& key : kFields)
      if (!obj.contains(key)) malformed(path, line_no, "missing field '" + key + "'");

    ImageRecord rec;
    if (!obj["id"].is_string()) malformed(path, line_no, "id must be a string");
    rec.id = obj["id"].get<std::string>();
    if (!obj["features"].is_array()) malformed(path, line_no, "features must be an array");
    for (const auto& v : obj["features"]) {
      if (!v.is_number() || !std::isfinite(v.get<double>()))
        malformed(path, line_no, "record " + rec.id + " has a non-finite feature");
      rec.features.push_back(v.get<double>());
    }
    if (rec.features.empty()) malformed(path, line_no, "record " + rec.id + " has no features");
    if (dim && *dim != rec.features.size())
      malformed(path, line_no, "record " + rec.id + " has feature dimension " +
                                   std::to_string(rec.features.size()) + ", expected " +
                                   std::to_string(*dim));
    dim = rec.features.size();

    const json& attrs = obj["attrs"];
    if (!attrs.is_object()) malformed(path, line_no, "attrs must be an object");
    for (const auto& [key, value] : attrs.items()) {
      if (!kAttrFields.count(key)) malformed(path, line_no, "unknown attribute '" + key + "'");
      if (!value.is_string()) malformed(path, line_no, "attribute '" + key + "' must be a string");
    }
    for (const auto& key : kAttrFields)
      if (!attrs.contains(key)) malformed(path, line_no, "missing attribute '" + key + "'");
    rec.attrs = {attrs["shape"], attrs["color"], attrs["size"], attrs["background"]};

    if (!obj["captions"].is_array()) malformed(path, line_no, "captions must be an array");
    for (const auto& caption : obj["captions"]) {
      if (!caption.is_array()) malformed(path, line_no, "each caption must be a token array");
      TokenList tokens;
      for (const auto& tok : caption) {
        if (!tok.is_string()) malformed(path, line_no, "caption tokens must be strings");
        tokens.push_back(tok.get<std::string>());
      }
      if (tokens.size() > kMaxCaptionTokens) tokens.resize(kMaxCaptionTokens);
      rec.captions.push_back(std::move(tokens));
    }
    records.push_back(std::move(rec));
  }
  return records;
}

void save_split(const std::filesystem::path& path, const DatasetSplit& split,
                const std::optional<std::string>& fingerprint) {
  json obj = {{"labeled", split.labeled},
              {"unlabeled", split.unlabeled},
              {"validation", split.validation},
              {"test", split.test}};
  if (fingerprint) obj["config_fingerprint"] = *fingerprint;
  std::ofstream out = open_for_write(path);
  out << obj.dump(2) << '\n';
}

DatasetSplit load_split(const std::filesystem::path& path) {
  std::ifstream in = open_for_read(path);
  json obj;
  try {
    obj = json::parse(in);
  } catch (const json::parse_error& e) {
    malformed(path, 0, std::string("invalid JSON: ") + e.what());
  }
  static const std::set<std::string> kKeys = {"labeled", "unlabeled", "validation", "test",
                                              "config_fingerprint"};
  if (!obj.is_object()) malformed(path, 0, "split file must hold an object");
  for (const auto& [key, _] : obj.items())
    if (!kKeys.count(key)) malformed(path, 0, "unknown field '" + key + "'");
  DatasetSplit split;
  auto read = [&](const char* key, std::vector<std::string>& dst) {
    if (!obj.contains(key) || !obj[key].is_array())
      malformed(path, 0, std::string("missing id array '") + key + "'");
    for (const auto& v : obj[key]) {
      if (!v.is_string()) malformed(path, 0, std::string("non-string id in '") + key + "'");
      dst.push_back(v.get<std::string>());
    }
  };
  read("labeled", split.labeled);
  read("unlabeled", split.unlabeled);
  read("validation", split.validation);
  read("test", split.test);
  return split;
}

void validate_split(const DatasetSplit& split, const std::vector<ImageRecord>& records) {
  std::set<std::string> seen;
  for (const auto* part : {&split.labeled, &split.unlabeled, &split.validation, &split.test}) {
    for (const auto& id : *part) {
      if (!seen.insert(id).second) fail("split: id " + id + " appears in more than one list");
    }
  }
  std::set<std::string> all;
  for (const auto& r : records) all.insert(r.id);
  if (seen != all) fail("split: ids do not cover the dataset exactly");
}

}  // namespace discap::data
