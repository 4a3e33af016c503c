#pragma once

#include <cstddef>
#include <vector>

#include "mjlab/tensor.hpp"

namespace mjlab {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam with decoupled weight decay. Parameters without a gradient buffer are
/// skipped for that step.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWOptions opts);

  void step(double lr);
  void zero_grad();
  std::size_t steps_taken() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamWOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Linear warmup over the first warmup_ratio of steps, cosine decay to zero after.
double warmup_cosine_lr(double base_lr, std::size_t step, std::size_t total_steps, double warmup_ratio);

}  // namespace mjlab
