#include "mjlab/linalg.hpp"

#include <algorithm>
#include <cmath>

namespace mjlab::linalg {

std::vector<double> singular_values(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("singular_values: expected a matrix");
  // Work on the orientation with fewer columns; rotations act on column pairs.
  const bool wide = a.cols() > a.rows();
  const std::size_t m = wide ? a.cols() : a.rows();
  const std::size_t n = wide ? a.rows() : a.cols();
  std::vector<double> u(m * n);  // column-major working copy
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double x = a.at(i, j);
      if (wide) {
        u[i * m + j] = x;
      } else {
        u[j * m + i] = x;
      }
    }

  constexpr double kEps = 1e-15;
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        double* cp = u.data() + p * m;
        double* cq = u.data() + q * m;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += cp[i] * cp[i];
          beta += cq[i] * cq[i];
          gamma += cp[i] * cq[i];
        }
        if (std::abs(gamma) <= kEps * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = cp[i], y = cq[i];
          cp[i] = c * x - s * y;
          cq[i] = s * x + c * y;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += u[j * m + i] * u[j * m + i];
    sv[j] = std::sqrt(s);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

std::size_t numeric_rank(const Tensor& a, double rel_tol) {
  const auto sv = singular_values(a);
  if (sv.empty() || sv.front() == 0.0) return 0;
  const double tol = sv.front() * static_cast<double>(std::max(a.rows(), a.cols())) * rel_tol;
  return static_cast<std::size_t>(std::count_if(sv.begin(), sv.end(), [tol](double s) { return s > tol; }));
}

Tensor hconcat(const std::vector<Tensor>& blocks) {
  if (blocks.empty()) throw ShapeError("hconcat: no blocks");
  const std::size_t rows = blocks.front().rows();
  std::size_t cols = 0;
  for (const auto& b : blocks) {
    if (b.rows() != rows) throw ShapeError("hconcat: row counts differ");
    cols += b.cols();
  }
  std::vector<double> out(rows * cols);
  std::size_t c0 = 0;
  for (const auto& b : blocks) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < b.cols(); ++j) out[i * cols + c0 + j] = b.at(i, j);
    c0 += b.cols();
  }
  return Tensor::matrix(rows, cols, std::move(out));
}

}  // namespace mjlab::linalg
