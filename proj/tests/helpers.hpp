#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "mjlab/rng.hpp"
#include "mjlab/tensor.hpp"

namespace mjlab::testing {

inline Tensor randn(Shape shape, std::uint64_t seed, double sd = 1.0, bool grad = false) {
  Rng rng(seed);
  const std::size_t n = shape_numel(shape);
  return Tensor::from(std::move(shape), rng.normals(n, sd), grad);
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over every
/// entry of every parameter, numeric from central differences of f.
inline double max_grad_error(const std::function<Tensor()>& f, std::vector<Tensor> params, double h = 1e-5,
                             double floor = 1e-4) {
  for (auto& p : params) p.zero_grad();
  backward(f());
  double worst = 0.0;
  for (auto& p : params) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double orig = p[i];
      double up = 0.0, down = 0.0;
      {
        NoGradGuard g;
        p.mutable_data()[i] = orig + h;
        up = f().item();
        p.mutable_data()[i] = orig - h;
        down = f().item();
        p.mutable_data()[i] = orig;
      }
      const double numeric = (up - down) / (2 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

/// Fixed random projection of a tensor to a scalar, so every entry matters.
inline Tensor probe_sum(const Tensor& t, std::uint64_t seed = 99) {
  return sum(mul(t, randn(t.shape(), seed)));
}

}  // namespace mjlab::testing
