#include <gtest/gtest.h>

#include <filesystem>

#include "deepbirads/checkpoint.hpp"
#include "test_util.hpp"

using namespace deepbirads;
namespace fs = std::filesystem;

namespace {

ModelConfig config() {
  ModelConfig c;
  c.layers = 3;
  c.latent = 14;
  c.queries = 2;
  c.base_channels = 2;
  c.n_bands = 2;
  c.image_height = c.image_width = 16;
  c.seed = 21;
  return c;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  DeepBiradsModel m(config());
  // Perturb so the check does not merely re-derive the initialization.
  for (auto& p : m.parameters())
    for (auto& v : p.tensor.mutable_data()) v = std::nextafter(v, 1e300) * 1.0000001;
  auto bytes = serialize_checkpoint(m);
  auto back = deserialize_checkpoint(bytes);
  EXPECT_EQ(back.config(), m.config());
  auto a = m.parameters(), b = back.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    ASSERT_EQ(a[i].tensor.shape(), b[i].tensor.shape());
    EXPECT_EQ(0, std::memcmp(a[i].tensor.data().data(), b[i].tensor.data().data(), a[i].tensor.numel() * 8));
  }
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST(Checkpoint, FileRoundTrip) {
  auto dir = fs::temp_directory_path() / "deepbirads_test_checkpoint";
  fs::remove_all(dir);
  fs::create_directories(dir);
  DeepBiradsModel m(config());
  save_checkpoint(m, dir / "c.bin");
  auto back = load_checkpoint(dir / "c.bin");
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(m));
  EXPECT_THROW(load_checkpoint(dir / "missing.bin"), UsageError);
}

TEST(Checkpoint, RejectsForeignAndFutureFormats) {
  DeepBiradsModel m(config());
  auto bytes = serialize_checkpoint(m);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), CheckpointVersionError);
  auto future = bytes;
  future[8] = 2;
  EXPECT_THROW(deserialize_checkpoint(future), CheckpointVersionError);
}

TEST(Checkpoint, RejectsArchitectureMismatch) {
  DeepBiradsModel m(config());
  auto bytes = serialize_checkpoint(m);
  auto other = config();
  other.layers = 4;
  other.image_height = other.image_width = 32;
  EXPECT_THROW(deserialize_checkpoint(bytes, &other), CheckpointVersionError);
  auto same_arch = config();
  same_arch.seed = 5;
  same_arch.dropout = 0.0;
  EXPECT_NO_THROW(deserialize_checkpoint(bytes, &same_arch));
}

TEST(Checkpoint, RejectsRenamedOrReshapedTensor) {
  DeepBiradsModel m(config());
  auto bytes = serialize_checkpoint(m);
  const std::string first = m.parameters().front().name;
  auto pos = bytes.find(first);
  ASSERT_NE(pos, std::string::npos);
  auto renamed = bytes;
  renamed[pos] = 'X';
  EXPECT_THROW(deserialize_checkpoint(renamed), CheckpointVersionError);
  // The first dimension follows the name and the rank.
  auto reshaped = bytes;
  reshaped[pos + first.size() + 8] += 1;
  EXPECT_THROW(deserialize_checkpoint(reshaped), CheckpointVersionError);
}

TEST(Checkpoint, TruncationAndTrailingBytes) {
  DeepBiradsModel m(config());
  auto bytes = serialize_checkpoint(m);
  for (std::size_t cut : {std::size_t{4}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_ANY_THROW(deserialize_checkpoint(bytes.substr(0, cut))) << cut;
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), ValidationError);
}
