// Serial reference vs OpenMP kernels. Set MJLAB_THREADS to cap the workers.
#include <benchmark/benchmark.h>

#include <vector>

#include "mjlab/kernels.hpp"
#include "mjlab/rng.hpp"

namespace k = mjlab::kernels;

namespace {

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  mjlab::Rng rng(seed);
  return rng.normals(n);
}

template <bool Parallel>
void BM_GemmNN(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(n * n, 1), b = filled(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::gemm_nn(a, b, c, n, n, n);
    else
      k::serial::gemm_nn(a, b, c, n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * n * n * n));
}

template <bool Parallel>
void BM_GemmNT(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(n * n, 3), b = filled(n * n, 4);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::gemm_nt(a, b, c, n, n, n);
    else
      k::serial::gemm_nt(a, b, c, n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * n * n * n));
}

template <bool Parallel>
void BM_Softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t cols = 64;
  const auto src = filled(rows * cols, 5);
  std::vector<double> x(src);
  for (auto _ : state) {
    x = src;
    if constexpr (Parallel)
      k::softmax_rows(x, rows, cols);
    else
      k::serial::softmax_rows(x, rows, cols);
    benchmark::DoNotOptimize(x.data());
  }
}

template <bool Parallel>
void BM_NearestCenter(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t centers = 5, d = 32;
  const auto s = filled(n * d, 6), c = filled(centers * d, 7);
  std::vector<std::size_t> assign(n);
  std::vector<double> sim(n);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::nearest_center(s, c, n, centers, d, assign, sim);
    else
      k::serial::nearest_center(s, c, n, centers, d, assign, sim);
    benchmark::DoNotOptimize(assign.data());
  }
}

}  // namespace

BENCHMARK(BM_GemmNN<false>)->Arg(32)->Arg(128)->Arg(256);
BENCHMARK(BM_GemmNN<true>)->Arg(32)->Arg(128)->Arg(256);
BENCHMARK(BM_GemmNT<false>)->Arg(32)->Arg(128)->Arg(256);
BENCHMARK(BM_GemmNT<true>)->Arg(32)->Arg(128)->Arg(256);
BENCHMARK(BM_Softmax<false>)->Arg(512)->Arg(4096);
BENCHMARK(BM_Softmax<true>)->Arg(512)->Arg(4096);
BENCHMARK(BM_NearestCenter<false>)->Arg(2000)->Arg(20000);
BENCHMARK(BM_NearestCenter<true>)->Arg(2000)->Arg(20000);

int main(int argc, char** argv) {
  k::configure_threads();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
