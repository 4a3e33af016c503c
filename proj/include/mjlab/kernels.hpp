#pragma once

// Data-parallel inner loops. Each kernel exists twice: an OpenMP version used
// by the library and a serial reference under kernels::serial kept for tests
// and benchmarks. Every output element is produced by exactly one thread with
// a fixed left-to-right reduction order, so both versions agree bitwise for
// any thread count.

#include <cstddef>
#include <span>

namespace mjlab::kernels {

enum class Accumulate { No, Yes };

// C[m,n] (+)= A[m,k] * B[k,n]
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, Accumulate acc = Accumulate::No);
// C[m,n] (+)= A[m,k] * B[n,k]^T
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, Accumulate acc = Accumulate::No);
// C[m,n] (+)= A[k,m]^T * B[k,n]
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, Accumulate acc = Accumulate::No);

// In-place numerically stabilised softmax over each row of x[rows, cols].
void softmax_rows(std::span<double> x, std::size_t rows, std::size_t cols);

// For each sample row, index of the most cosine-similar center (lowest index
// wins ties) and that similarity. Inputs are expected to be unit-norm rows.
void nearest_center(std::span<const double> samples, std::span<const double> centers,
                    std::size_t n, std::size_t k, std::size_t d,
                    std::span<std::size_t> assign, std::span<double> best_sim);

/// Worker cap read from MJLAB_THREADS; 0 when unset.
int thread_cap_from_env();
/// Applies MJLAB_THREADS to the OpenMP runtime if set.
void configure_threads();

namespace serial {

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, Accumulate acc = Accumulate::No);
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, Accumulate acc = Accumulate::No);
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, Accumulate acc = Accumulate::No);
void softmax_rows(std::span<double> x, std::size_t rows, std::size_t cols);
void nearest_center(std::span<const double> samples, std::span<const double> centers,
                    std::size_t n, std::size_t k, std::size_t d,
                    std::span<std::size_t> assign, std::span<double> best_sim);

}  // namespace serial
}  // namespace mjlab::kernels
