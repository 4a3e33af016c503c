#pragma once

#include <filesystem>
#include <stdexcept>

#include "mjlab/tensor.hpp"

namespace mjlab {

class SnapshotError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Binary tensor snapshot: u64 rank, rank x u64 dims, then the float64
// payload in row-major order. Everything little-endian.
void save_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace mjlab
