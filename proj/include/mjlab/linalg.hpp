#pragma once

#include <cstddef>
#include <vector>

#include "mjlab/tensor.hpp"

namespace mjlab::linalg {

/// Singular values in descending order via one-sided Jacobi rotations.
std::vector<double> singular_values(const Tensor& a);

/// Number of singular values above sigma_max * max(rows, cols) * rel_tol.
std::size_t numeric_rank(const Tensor& a, double rel_tol = 1e-12);

/// [a_1 a_2 ...] for matrices sharing a row count.
Tensor hconcat(const std::vector<Tensor>& blocks);

}  // namespace mjlab::linalg
