#include "mjlab/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdlib>
#include <string>

namespace mjlab::kernels {
namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelWork = 1u << 15;

inline double dot_nn(const double* a_row, std::span<const double> b, std::size_t k,
                     std::size_t n, std::size_t j) {
  double s = 0.0;
  for (std::size_t p = 0; p < k; ++p) s += a_row[p] * b[p * n + j];
  return s;
}

inline double dot_nt(const double* a_row, const double* b_row, std::size_t k) {
  double s = 0.0;
  for (std::size_t p = 0; p < k; ++p) s += a_row[p] * b_row[p];
  return s;
}

inline double dot_tn(std::span<const double> a, std::span<const double> b, std::size_t m,
                     std::size_t k, std::size_t n, std::size_t i, std::size_t j) {
  double s = 0.0;
  for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[p * n + j];
  return s;
}

inline void store(double& dst, double v, Accumulate acc) {
  if (acc == Accumulate::Yes) {
    dst += v;
  } else {
    dst = v;
  }
}

inline void softmax_row(double* x, std::size_t cols) {
  double mx = x[0];
  for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    x[j] = std::exp(x[j] - mx);
    z += x[j];
  }
  for (std::size_t j = 0; j < cols; ++j) x[j] /= z;
}

inline void nearest_row(const double* s, std::span<const double> centers, std::size_t k,
                        std::size_t d, std::size_t& assign, double& best) {
  std::size_t arg = 0;
  double bs = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    const double sim = dot_nt(s, centers.data() + c * d, d);
    if (sim > bs) {
      bs = sim;
      arg = c;
    }
  }
  assign = arg;
  best = bs;
}

}  // namespace

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, Accumulate acc) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const double* a_row = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) store(c[i * n + j], dot_nn(a_row, b, k, n, j), acc);
  }
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, Accumulate acc) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const double* a_row = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      store(c[i * n + j], dot_nt(a_row, b.data() + j * k, k), acc);
    }
  }
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, Accumulate acc) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      store(c[i * n + j], dot_tn(a, b, m, k, n, static_cast<std::size_t>(i), j), acc);
    }
  }
}

void softmax_rows(std::span<double> x, std::size_t rows, std::size_t cols) {
  const auto r = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
  for (std::ptrdiff_t i = 0; i < r; ++i) softmax_row(x.data() + i * cols, cols);
}

void nearest_center(std::span<const double> samples, std::span<const double> centers,
                    std::size_t n, std::size_t k, std::size_t d,
                    std::span<std::size_t> assign, std::span<double> best_sim) {
  const auto r = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static) if (n * k * d >= kParallelWork)
  for (std::ptrdiff_t i = 0; i < r; ++i) {
    nearest_row(samples.data() + i * d, centers, k, d, assign[i], best_sim[i]);
  }
}

int thread_cap_from_env() {
  const char* env = std::getenv("MJLAB_THREADS");
  if (env == nullptr) return 0;
  try {
    return std::max(0, std::stoi(env));
  } catch (const std::exception&) {
    return 0;
  }
}

void configure_threads() {
  if (const int cap = thread_cap_from_env(); cap > 0) omp_set_num_threads(cap);
}

namespace serial {

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, Accumulate acc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) store(c[i * n + j], dot_nn(a.data() + i * k, b, k, n, j), acc);
  }
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, Accumulate acc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      store(c[i * n + j], dot_nt(a.data() + i * k, b.data() + j * k, k), acc);
    }
  }
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, Accumulate acc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) store(c[i * n + j], dot_tn(a, b, m, k, n, i, j), acc);
  }
}

void softmax_rows(std::span<double> x, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) softmax_row(x.data() + i * cols, cols);
}

void nearest_center(std::span<const double> samples, std::span<const double> centers,
                    std::size_t n, std::size_t k, std::size_t d,
                    std::span<std::size_t> assign, std::span<double> best_sim) {
  for (std::size_t i = 0; i < n; ++i) {
    nearest_row(samples.data() + i * d, centers, k, d, assign[i], best_sim[i]);
  }
}

}  // namespace serial
}  // namespace mjlab::kernels
