// Versioned binary checkpoints: model config plus named parameter tensors.
//
// Layout (little-endian):
//   magic "DBRCKPT\0" | u32 version | u64 config length | config key=value text
//   | u64 tensor count | per tensor: u64 name length, name, u64 rank, u64 dims...,
//     raw IEEE-754 doubles
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepbirads/model.hpp"
#include "deepbirads/tensor.hpp"

namespace deepbirads {

struct CheckpointVersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'D', 'B', 'R', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void pod(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    out_.append(p, sizeof v);
  }
  void bytes(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_ += s;
  }
  void doubles(std::span<const double> v) { out_.append(reinterpret_cast<const char*>(v.data()), v.size_bytes()); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& in) : in_(in) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string bytes() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void doubles(std::span<double> v) {
    need(v.size_bytes());
    std::memcpy(v.data(), in_.data() + pos_, v.size_bytes());
    pos_ += v.size_bytes();
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw ValidationError("checkpoint is truncated");
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(DeepBiradsModel& model) {
  detail::ByteWriter w;
  for (char c : kCheckpointMagic) w.pod(c);
  w.pod(kCheckpointVersion);
  w.bytes(model.config().to_kv());
  auto params = model.parameters();
  w.pod<std::uint64_t>(params.size());
  for (const auto& p : params) {
    w.bytes(p.name);
    w.pod<std::uint64_t>(p.tensor.rank());
    for (auto d : p.tensor.shape()) w.pod<std::uint64_t>(d);
    w.doubles(p.tensor.data());
  }
  return w.take();
}

inline ModelConfig checkpoint_config(const std::string& bytes) {
  detail::ByteReader r(bytes);
  char magic[8];
  for (char& c : magic) c = r.pod<char>();
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw CheckpointVersionError("not a deepbirads checkpoint");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint format version " + std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));
  return ModelConfig::from_kv(r.bytes());
}

/// Rebuilds the model described by the checkpoint. If `expected` is given its
/// architecture must match the stored one.
inline DeepBiradsModel deserialize_checkpoint(const std::string& bytes, const ModelConfig* expected = nullptr) {
  detail::ByteReader r(bytes);
  for (int i = 0; i < 8; ++i) r.pod<char>();
  r.pod<std::uint32_t>();
  const ModelConfig cfg = checkpoint_config(bytes);
  r.bytes();
  if (expected) {
    ModelConfig a = *expected, b = cfg;
    a.seed = b.seed = 0;
    a.dropout = b.dropout = 0.0;
    if (!(a == b))
      throw CheckpointVersionError("checkpoint was written for a different model configuration:\n" + cfg.to_kv());
  }
  DeepBiradsModel model(cfg);
  auto params = model.parameters();
  const auto count = r.pod<std::uint64_t>();
  if (count != params.size())
    throw CheckpointVersionError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                                 std::to_string(params.size()));
  for (auto& p : params) {
    const std::string name = r.bytes();
    if (name != p.name) throw CheckpointVersionError("checkpoint tensor '" + name + "' where '" + p.name + "' expected");
    Shape shape(r.pod<std::uint64_t>());
    for (auto& d : shape) d = r.pod<std::uint64_t>();
    if (shape != p.tensor.shape())
      throw CheckpointVersionError("tensor " + name + " has shape " + shape_string(shape) + ", model expects " +
                                   shape_string(p.tensor.shape()));
    r.doubles(p.tensor.mutable_data());
  }
  if (!r.done()) throw ValidationError("checkpoint has trailing bytes");
  return model;
}

inline void save_checkpoint(DeepBiradsModel& model, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(model);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

inline DeepBiradsModel load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str(), expected);
}

}  // namespace deepbirads
