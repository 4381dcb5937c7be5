#pragma once

#include <string>
#include <vector>

#include "npnorm/tensor.hpp"

namespace npnorm {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-parameter first/second moment estimates plus the shared step counter.
struct AdamState {
  AdamConfig config;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;

  static AdamState init(const std::vector<const Tensor*>& params,
                        AdamConfig config = {});
};

// Bias-corrected ADAM update in place. `names` is used only for error
// messages when a gradient is non-finite.
void adam_step(AdamState& state, std::vector<Tensor*> params,
               const std::vector<const Tensor*>& grads, double lr,
               const std::vector<std::string>& names = {});

// Geometric interpolation from lr_start (epoch 0) to lr_end (last epoch).
struct LrSchedule {
  double lr_start;
  double lr_end;
  std::size_t epochs;

  LrSchedule(double start, double end, std::size_t n_epochs);
  double at(std::size_t epoch) const;
};

}  // namespace npnorm
