#pragma once

#include <cstdint>
#include <vector>

#include "felrec/tensor.hpp"

namespace felrec {

// SGD with momentum: v <- mu*v + g; w <- w - lr*v. No weight decay.
struct OptimizerState {
  std::vector<std::vector<real>> momentum;  // one buffer per parameter, same shape
  std::int64_t step_count = 0;
  real base_lr = 0.01;
  real mu = 0.9;

  static OptimizerState init(const std::vector<Tensor>& params, real base_lr = 0.01,
                             real mu = 0.9);
};

// Applies one update to every parameter from its accumulated gradient, then
// clears the gradients. A parameter with no gradient this step is skipped
// (its momentum still decays). Non-finite gradients abort the whole step.
void sgd_step(std::vector<Tensor>& params, OptimizerState& state, real lr);

struct ScheduleConfig {
  std::int64_t total_epochs = 100;
  std::int64_t warmup_epochs = 10;
  std::int64_t steps_per_epoch = 1;
  real base_lr = 0.01;

  std::int64_t total_steps() const { return total_epochs * steps_per_epoch; }
  std::int64_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }
  void validate() const;
};

// Linear ramp 0 -> base_lr over the warmup steps, then a single cosine decay
// to 0 at the final step, no restarts. Steps past the schedule clamp to 0.
real cosine_lr(std::int64_t step, const ScheduleConfig& cfg);

// Truncated normal (resampled beyond two standard deviations).
std::vector<real> truncated_normal(std::int64_t n, real stddev, Rng& rng);

}  // namespace felrec
