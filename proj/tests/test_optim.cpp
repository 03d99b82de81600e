#include <cmath>
#include <doctest.h>

#include "felrec/optim.hpp"

using namespace felrec;

namespace {

std::vector<Tensor> one_param(real w) {
  return {Tensor::param({1}, {w}, "w")};
}

void set_grad(Tensor& t, real g) {
  t.raw_grad().assign(1, g);
  t.node()->grad[0] = g;
}

}  // namespace

TEST_CASE("sgd momentum recurrence") {
  auto params = one_param(1.0);
  auto state = OptimizerState::init(params, 0.01, 0.9);

  set_grad(params[0], 1.0);
  sgd_step(params, state, 0.1);
  CHECK(state.momentum[0][0] == doctest::Approx(1.0));
  CHECK(params[0].values()[0] == doctest::Approx(0.9));
  CHECK(state.step_count == 1);

  set_grad(params[0], 1.0);
  sgd_step(params, state, 0.1);
  CHECK(state.momentum[0][0] == doctest::Approx(1.9));
  CHECK(params[0].values()[0] == doctest::Approx(0.71));
  CHECK(state.step_count == 2);
}

TEST_CASE("sgd with zero gradient and zero momentum is the identity") {
  auto params = one_param(3.5);
  auto state = OptimizerState::init(params);
  set_grad(params[0], 0.0);
  sgd_step(params, state, 0.5);
  CHECK(params[0].values()[0] == 3.5);
}

TEST_CASE("non-finite gradient aborts and names the parameter") {
  auto params = one_param(1.0);
  auto state = OptimizerState::init(params);
  set_grad(params[0], std::numeric_limits<real>::quiet_NaN());
  CHECK_THROWS_WITH_AS(sgd_step(params, state, 0.1), doctest::Contains("'w'"), NumericError);
  // The parameter must be untouched by the aborted step.
  CHECK(params[0].values()[0] == 1.0);
}

TEST_CASE("cosine schedule values") {
  ScheduleConfig cfg;
  cfg.total_epochs = 100;
  cfg.warmup_epochs = 10;
  cfg.steps_per_epoch = 4;
  cfg.base_lr = 0.01;
  const std::int64_t warm = cfg.warmup_steps();
  const std::int64_t total = cfg.total_steps();

  CHECK(cosine_lr(0, cfg) == 0.0);
  CHECK(cosine_lr(warm, cfg) == doctest::Approx(0.01));  // warmup end hits the base rate
  // Halfway through the decay phase: 0.5 * (1 + cos(pi/2)) * base.
  CHECK(cosine_lr(warm + (total - warm) / 2, cfg) == doctest::Approx(0.005));
  CHECK(cosine_lr(total, cfg) == 0.0);
  CHECK(cosine_lr(total + 500, cfg) == 0.0);  // clamped past the schedule
}

TEST_CASE("cosine schedule is continuous and non-increasing after warmup") {
  ScheduleConfig cfg;
  cfg.total_epochs = 20;
  cfg.warmup_epochs = 3;
  cfg.steps_per_epoch = 7;
  cfg.base_lr = 0.01;
  const std::int64_t warm = cfg.warmup_steps();

  // Continuity at the boundary: one step before warmup end is within one
  // warmup increment of the base rate.
  const real before = cosine_lr(warm - 1, cfg);
  const real at = cosine_lr(warm, cfg);
  CHECK(at == doctest::Approx(cfg.base_lr));
  CHECK(std::abs(at - before) <= cfg.base_lr / static_cast<real>(warm) + 1e-12);

  real prev = at;
  for (std::int64_t s = warm + 1; s <= cfg.total_steps(); ++s) {
    const real lr = cosine_lr(s, cfg);
    CHECK(lr <= prev + 1e-15);
    prev = lr;
  }
}

TEST_CASE("schedule validation") {
  ScheduleConfig cfg;
  cfg.total_epochs = 5;
  cfg.warmup_epochs = 5;
  CHECK_THROWS_AS(cosine_lr(0, cfg), NumericError);
}

TEST_CASE("truncated normal stays within two standard deviations") {
  Rng rng(5);
  const auto v = truncated_normal(10000, 0.02, rng);
  for (auto x : v) CHECK(std::abs(x) <= 0.04);
  double mean = 0;
  for (auto x : v) mean += x;
  CHECK(std::abs(mean / static_cast<double>(v.size())) < 0.002);
}
