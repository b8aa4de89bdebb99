#pragma once

#include <utility>
#include <vector>

#include "hulm/model.hpp"

namespace hulm {

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Plain Adam with bias correction, no weight decay. Moment buffers are bound
// to the position of each tensor in the list passed to step(), so callers must
// pass the same tensors in the same order every time.
class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}

  void step(const std::vector<std::pair<Matrix*, const Matrix*>>& params_and_grads);
  std::size_t steps() const noexcept { return t_; }

 private:
  AdamConfig config_;
  std::size_t t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

}  // namespace hulm
