#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "mjlab/snapshot.hpp"

using namespace mjlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mjlab_snapshot_test";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Snapshot, RoundTripIsBitwise) {
  const Tensor t = mjlab::testing::randn({3, 4, 2}, 1);
  save_tensor(t, scratch("a.bin"));
  const Tensor u = load_tensor(scratch("a.bin"));
  EXPECT_EQ(u.shape(), t.shape());
  EXPECT_TRUE(mjlab::testing::bitwise_equal(u.data(), t.data()));
  EXPECT_FALSE(u.requires_grad());
}

TEST(Snapshot, LayoutIsRankDimsPayload) {
  save_tensor(Tensor::from({2}, {1.5, -2.0}), scratch("b.bin"));
  EXPECT_EQ(fs::file_size(scratch("b.bin")), 8u + 8u + 16u);
  std::ifstream in(scratch("b.bin"), std::ios::binary);
  std::uint64_t rank = 0, dim = 0;
  double first = 0;
  in.read(reinterpret_cast<char*>(&rank), 8).read(reinterpret_cast<char*>(&dim), 8).read(reinterpret_cast<char*>(&first), 8);
  EXPECT_EQ(rank, 1u);
  EXPECT_EQ(dim, 2u);
  EXPECT_EQ(first, 1.5);
}

TEST(Snapshot, TruncatedAndTrailingBytesAreRejected) {
  save_tensor(Tensor::from({3}, {1, 2, 3}), scratch("c.bin"));
  fs::resize_file(scratch("c.bin"), fs::file_size(scratch("c.bin")) - 4);
  EXPECT_THROW(load_tensor(scratch("c.bin")), SnapshotError);
  save_tensor(Tensor::from({1}, {1}), scratch("d.bin"));
  std::ofstream(scratch("d.bin"), std::ios::app | std::ios::binary) << 'x';
  EXPECT_THROW(load_tensor(scratch("d.bin")), SnapshotError);
  EXPECT_THROW(load_tensor(scratch("missing.bin")), SnapshotError);
}
