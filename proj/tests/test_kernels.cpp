#include <gtest/gtest.h>

#include <omp.h>

#include "helpers.hpp"
#include "mjlab/kernels.hpp"

using namespace mjlab;
using mjlab::testing::bitwise_equal;

namespace {

std::vector<double> normals(std::size_t n, std::uint64_t seed) { return Rng(seed).normals(n); }

// Big enough to cross the parallel threshold.
constexpr std::size_t M = 67, K = 45, N = 53;

}  // namespace

TEST(Kernels, GemmVariantsMatchSerialBitwise) {
  const auto a = normals(M * K, 1), b = normals(K * N, 2), bt = normals(N * K, 3), at = normals(K * M, 4);
  for (auto acc : {kernels::Accumulate::No, kernels::Accumulate::Yes}) {
    std::vector<double> c1(M * N, 0.5), c2(M * N, 0.5);
    kernels::gemm_nn(a, b, c1, M, K, N, acc);
    kernels::serial::gemm_nn(a, b, c2, M, K, N, acc);
    EXPECT_TRUE(bitwise_equal(c1, c2));
    std::fill(c1.begin(), c1.end(), 0.5), std::fill(c2.begin(), c2.end(), 0.5);
    kernels::gemm_nt(a, bt, c1, M, K, N, acc);
    kernels::serial::gemm_nt(a, bt, c2, M, K, N, acc);
    EXPECT_TRUE(bitwise_equal(c1, c2));
    std::fill(c1.begin(), c1.end(), 0.5), std::fill(c2.begin(), c2.end(), 0.5);
    kernels::gemm_tn(at, b, c1, M, K, N, acc);
    kernels::serial::gemm_tn(at, b, c2, M, K, N, acc);
    EXPECT_TRUE(bitwise_equal(c1, c2));
  }
}

TEST(Kernels, GemmAgreesAcrossThreadCounts) {
  const auto a = normals(M * K, 5), b = normals(K * N, 6);
  std::vector<double> one(M * N), four(M * N);
  const int prev = omp_get_max_threads();
  omp_set_num_threads(1);
  kernels::gemm_nn(a, b, one, M, K, N);
  omp_set_num_threads(4);
  kernels::gemm_nn(a, b, four, M, K, N);
  omp_set_num_threads(prev);
  EXPECT_TRUE(bitwise_equal(one, four));
}

TEST(Kernels, GemmTransposesAgree) {
  const auto a = normals(M * K, 7), b = normals(K * N, 8);
  std::vector<double> at(K * M), bt(N * K);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k = 0; k < K; ++k) at[k * M + i] = a[i * K + k];
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < N; ++j) bt[j * K + k] = b[k * N + j];
  std::vector<double> c1(M * N), c2(M * N), c3(M * N);
  kernels::gemm_nn(a, b, c1, M, K, N);
  kernels::gemm_nt(a, bt, c2, M, K, N);
  kernels::gemm_tn(at, b, c3, M, K, N);
  for (std::size_t i = 0; i < c1.size(); ++i) {
    EXPECT_NEAR(c1[i], c2[i], 1e-12);
    EXPECT_NEAR(c1[i], c3[i], 1e-12);
  }
}

TEST(Kernels, SoftmaxMatchesSerialBitwise) {
  auto x = normals(300 * 120, 9);
  auto y = x;
  kernels::softmax_rows(x, 300, 120);
  kernels::serial::softmax_rows(y, 300, 120);
  EXPECT_TRUE(bitwise_equal(x, y));
}

TEST(Kernels, NearestCenterMatchesSerialAndBreaksTiesLow) {
  const std::size_t n = 2000, k = 5, d = 8;
  auto s = normals(n * d, 10), c = normals(k * d, 11);
  std::vector<std::size_t> a1(n), a2(n);
  std::vector<double> b1(n), b2(n);
  kernels::nearest_center(s, c, n, k, d, a1, b1);
  kernels::serial::nearest_center(s, c, n, k, d, a2, b2);
  EXPECT_EQ(a1, a2);
  EXPECT_TRUE(bitwise_equal(b1, b2));

  const std::vector<double> sample{1.0, 0.0}, twins{0.0, 1.0, 1.0, 0.0, 1.0, 0.0};
  std::vector<std::size_t> a(1);
  std::vector<double> b(1);
  kernels::nearest_center(sample, twins, 1, 3, 2, a, b);
  EXPECT_EQ(a[0], 1u);
}

TEST(Kernels, ThreadCapFromEnvironment) {
  setenv("MJLAB_THREADS", "3", 1);
  EXPECT_EQ(kernels::thread_cap_from_env(), 3);
  setenv("MJLAB_THREADS", "junk", 1);
  EXPECT_EQ(kernels::thread_cap_from_env(), 0);
  unsetenv("MJLAB_THREADS");
  EXPECT_EQ(kernels::thread_cap_from_env(), 0);
}
