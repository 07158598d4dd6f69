#pragma once

#include <vector>

#include "stylelab/tensor.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
};

// Adam over a fixed parameter list. Moments are kept in double.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options);

  // Applies one update from the accumulated gradients and returns the global
  // gradient norm before clipping. Does not zero the gradients.
  double step();
  void zero_grad();

  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }
  long steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

double grad_norm(const std::vector<Tensor>& params);

STYLELAB_END_PRECISION
}  // namespace stylelab
