#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "discap/grad/tensor.hpp"

namespace discap {

struct NamedTensor {
  std::string name;
  grad::Tensor value;

  bool operator==(const NamedTensor&) const = default;
};

// Binary tensor container shared by every trained component.
//
// Layout, all integers unsigned 64-bit little-endian:
//   "RCKPT1" | count | count x { name length | UTF-8 name | rank | dims... |
//   values as IEEE-754 binary64 little-endian }
class Checkpoint {
 public:
  void add(std::string name, grad::Tensor value);
  bool contains(std::string_view name) const;
  const grad::Tensor& get(std::string_view name) const;
  const std::vector<NamedTensor>& tensors() const { return tensors_; }

  // Stored as a zero-valued scalar whose name carries the fingerprint.
  void set_fingerprint(const std::string& fingerprint);

  std::string to_bytes() const;
  static Checkpoint from_bytes(std::string_view bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  bool operator==(const Checkpoint&) const = default;

 private:
  std::vector<NamedTensor> tensors_;
};

inline constexpr std::string_view kFingerprintPrefix = "meta.config_fingerprint.";

}  // namespace discap
