#include "felrec/optim.hpp"

#include <cmath>

namespace felrec {

OptimizerState OptimizerState::init(const std::vector<Tensor>& params, real base_lr, real mu) {
  OptimizerState st;
  st.base_lr = base_lr;
  st.mu = mu;
  st.momentum.reserve(params.size());
  for (const auto& p : params)
    st.momentum.emplace_back(static_cast<std::size_t>(p.size()), real(0));
  return st;
}

void sgd_step(std::vector<Tensor>& params, OptimizerState& state, real lr) {
  if (params.size() != state.momentum.size())
    throw NumericError("sgd_step: optimizer state tracks " + std::to_string(state.momentum.size()) +
                       " parameters, got " + std::to_string(params.size()));
  // Validate first so a bad gradient aborts before any parameter moves.
  for (const auto& p : params) {
    for (real g : p.grad())
      if (!std::isfinite(g))
        throw NumericError("sgd_step: non-finite gradient in parameter '" + p.name() + "'");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].raw_values();
    auto& v = state.momentum[i];
    const auto& g = params[i].grad();
    if (g.empty()) {
      for (auto& vi : v) vi *= state.mu;
      continue;
    }
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = state.mu * v[j] + g[j];
      w[j] -= lr * v[j];
    }
    params[i].zero_grad();
  }
  ++state.step_count;
}

void ScheduleConfig::validate() const {
  if (total_epochs <= 0 || steps_per_epoch <= 0 || warmup_epochs < 0)
    throw NumericError("schedule: epochs and steps per epoch must be positive");
  if (warmup_epochs >= total_epochs)
    throw NumericError("schedule: warmup epochs (" + std::to_string(warmup_epochs) +
                       ") must be smaller than total epochs (" + std::to_string(total_epochs) + ")");
}

real cosine_lr(std::int64_t step, const ScheduleConfig& cfg) {
  cfg.validate();
  const std::int64_t warm = cfg.warmup_steps();
  const std::int64_t total = cfg.total_steps();
  if (step < 0) step = 0;
  if (step >= total) return real(0);  // clamp to the final value
  if (step < warm) return cfg.base_lr * static_cast<real>(step) / static_cast<real>(warm);
  const real progress = static_cast<real>(step - warm) / static_cast<real>(total - warm);
  return cfg.base_lr * real(0.5) * (real(1) + std::cos(real(M_PI) * progress));
}

std::vector<real> truncated_normal(std::int64_t n, real stddev, Rng& rng) {
  std::normal_distribution<real> dist(real(0), stddev);
  std::vector<real> out(static_cast<std::size_t>(n));
  for (auto& v : out) {
    do {
      v = dist(rng);
    } while (std::abs(v) > 2 * stddev);
  }
  return out;
}

}  // namespace felrec
