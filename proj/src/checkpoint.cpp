#include "discap/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "discap/error.hpp"

namespace discap {
namespace {

constexpr std::string_view kMagic = "RCKPT1";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    const auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw Error(ErrorCode::malformed_file,
                  "checkpoint truncated at byte " + std::to_string(pos_));
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::add(std::string name, grad::Tensor value) {
  require(!contains(name), "checkpoint: duplicate tensor " + name);
  tensors_.push_back({std::move(name), std::move(value)});
}

bool Checkpoint::contains(std::string_view name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return true;
  return false;
}

const grad::Tensor& Checkpoint::get(std::string_view name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return t.value;
  throw Error(ErrorCode::malformed_file, "checkpoint has no tensor named " + std::string(name));
}

void Checkpoint::set_fingerprint(const std::string& fingerprint) {
  std::erase_if(tensors_, [](const NamedTensor& t) { return t.name.starts_with(kFingerprintPrefix); });
  add(std::string(kFingerprintPrefix) + fingerprint, grad::Tensor::scalar(0.0));
}

std::string Checkpoint::to_bytes() const {
  std::string out(kMagic);
  put_u64(out, tensors_.size());
  for (const auto& t : tensors_) {
    put_u64(out, t.name.size());
    out += t.name;
    put_u64(out, t.value.rank());
    for (auto d : t.value.shape) put_u64(out, d);
    for (double v : t.value.values) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint Checkpoint::from_bytes(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(kMagic.size()) != kMagic)
    throw Error(ErrorCode::malformed_file, "checkpoint: bad magic bytes");
  Checkpoint ckpt;
  const std::uint64_t count = in.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(in.take(in.u64()));
    const std::uint64_t rank = in.u64();
    if (rank > 8) throw Error(ErrorCode::malformed_file, "checkpoint: implausible rank for " + name);
    grad::Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& d : shape) {
      d = in.u64();
      if (d == 0) throw Error(ErrorCode::malformed_file, "checkpoint: zero dimension in " + name);
      n *= d;
    }
    if (n > bytes.size() / 8) throw Error(ErrorCode::malformed_file, "checkpoint truncated in " + name);
    std::vector<double> values(n);
    for (auto& v : values) v = std::bit_cast<double>(in.u64());
    ckpt.add(std::move(name), grad::Tensor(std::move(shape), std::move(values)));
  }
  if (!in.done()) throw Error(ErrorCode::malformed_file, "checkpoint: trailing bytes");
  return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write " + path.string());
  const std::string bytes = to_bytes();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::missing_artifact, "cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_bytes(buf.str());
}

}  // namespace discap
