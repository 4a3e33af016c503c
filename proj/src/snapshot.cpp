#include "mjlab/snapshot.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace mjlab {
namespace {

static_assert(std::endian::native == std::endian::little,
              "snapshot I/O assumes a little-endian host");

void write_u64(std::ofstream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::ifstream& in, const std::filesystem::path& path) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw SnapshotError("truncated snapshot header: " + path.string());
  return v;
}

}  // namespace

void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw SnapshotError("cannot open for writing: " + path.string());
  write_u64(out, t.rank());
  for (auto d : t.shape()) write_u64(out, d);
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
  if (!out) throw SnapshotError("write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SnapshotError("cannot open snapshot: " + path.string());
  const std::uint64_t rank = read_u64(in, path);
  if (rank == 0 || rank > 8) throw SnapshotError("implausible rank in " + path.string());
  Shape shape(rank);
  for (auto& d : shape) d = read_u64(in, path);
  std::vector<double> data(shape_numel(shape));
  if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double))))
    throw SnapshotError("truncated snapshot payload: " + path.string());
  if (in.peek() != std::ifstream::traits_type::eof())
    throw SnapshotError("trailing bytes in snapshot: " + path.string());
  return Tensor::from(std::move(shape), std::move(data));
}

}  // namespace mjlab
