// Shared test utilities: random tensors and the central finite-difference
// gradient oracle. The oracle is independent of the reverse-mode sweep it
// checks: it only calls forward evaluations at perturbed inputs.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "felrec/tensor.hpp"

namespace testsupport {

inline felrec::Tensor rand_tensor(felrec::Shape shape, felrec::Rng& rng, bool param = false,
                                  double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<felrec::real> v(static_cast<std::size_t>(felrec::numel(shape)));
  for (auto& x : v) x = dist(rng);
  return param ? felrec::Tensor::param(std::move(shape), std::move(v), "t")
               : felrec::Tensor::from(std::move(shape), std::move(v));
}

// Moves values away from zero; for kinked ops (relu) so the perturbation
// cannot cross the kink.
inline felrec::Tensor rand_tensor_away_from_zero(felrec::Shape shape, felrec::Rng& rng,
                                                 bool param, double margin = 0.05) {
  felrec::Tensor t = rand_tensor(std::move(shape), rng, param);
  for (auto& v : t.raw_values())
    if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
  return t;
}

// Max mixed relative/absolute error between reverse-mode gradients and
// central finite differences over every coordinate of every input.
template <class F>
double max_grad_error(F&& fn, std::vector<felrec::Tensor> inputs, double h = 1e-5) {
  using felrec::Tensor;
  for (auto& t : inputs) t.zero_grad();
  Tensor loss = fn();
  felrec::backward(loss);

  double max_err = 0;
  for (auto& t : inputs) {
    const std::vector<felrec::real> analytic =
        t.has_grad() ? t.grad() : std::vector<felrec::real>(static_cast<std::size_t>(t.size()), 0.0);
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      const double orig = t.raw_values()[i];
      t.raw_values()[i] = orig + h;
      const double fp = fn().value();
      t.raw_values()[i] = orig - h;
      const double fm = fn().value();
      t.raw_values()[i] = orig;
      const double fd = (fp - fm) / (2 * h);
      const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(fd)});
      max_err = std::max(max_err, std::abs(analytic[i] - fd) / denom);
    }
    t.zero_grad();
  }
  return max_err;
}

}  // namespace testsupport
