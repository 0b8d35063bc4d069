// Central-difference verification of analytic gradients.
//
// Error per coordinate is |analytic - numeric| / max(1, |numeric|); the
// report carries the maximum over every checked coordinate. Inputs near a
// relu kink give meaningless numeric derivatives, so callers keep relu
// pre-activations at least a few steps away from zero.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "moon/rng.hpp"
#include "moon/tensor.hpp"

namespace moon {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  bool passed = false;
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct Coordinate {
  std::size_t input;
  std::size_t index;
};

// Checks the listed coordinates. `inputs` must be leaves tracking gradients;
// they are perturbed in place and restored.
inline GradCheckReport finite_difference_check(const ScalarFn& f, std::vector<Tensor>& inputs,
                                               const std::vector<Coordinate>& coords, double step, double tolerance) {
  if (step <= 0.0) throw Error("finite_difference_check: step must be positive");
  for (auto& t : inputs) t.zero_grad();
  const Tensor loss = f(inputs);
  if (loss.size() != 1) throw ShapeError("finite_difference_check: f must be scalar, got " + shape_str(loss.shape()));
  loss.backward();

  GradCheckReport report;
  for (const auto& c : coords) {
    Tensor& t = inputs.at(c.input);
    const double analytic = t.has_grad() ? t.grad()[c.index] : 0.0;
    auto vals = t.mutable_values();
    const double orig = vals[c.index];
    vals[c.index] = orig + step;
    const double fp = f(inputs).item();
    vals[c.index] = orig - step;
    const double fm = f(inputs).item();
    vals[c.index] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
    report.max_relative_error = std::max(report.max_relative_error, std::isnan(err) ? INFINITY : err);
    ++report.coordinates;
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

// Checks every coordinate of every input.
inline GradCheckReport finite_difference_check(const ScalarFn& f, std::vector<Tensor>& inputs, double step,
                                               double tolerance) {
  std::vector<Coordinate> coords;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (std::size_t j = 0; j < inputs[i].size(); ++j) coords.push_back({i, j});
  return finite_difference_check(f, inputs, coords, step, tolerance);
}

// Checks a seeded random subsample of at most `per_input` coordinates from each input.
inline GradCheckReport finite_difference_check_sampled(const ScalarFn& f, std::vector<Tensor>& inputs,
                                                       std::size_t per_input, std::uint64_t seed, double step,
                                                       double tolerance) {
  Rng rng(seed);
  std::vector<Coordinate> coords;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::size_t n = inputs[i].size();
    if (n <= per_input) {
      for (std::size_t j = 0; j < n; ++j) coords.push_back({i, j});
    } else {
      for (std::size_t s = 0; s < per_input; ++s) coords.push_back({i, static_cast<std::size_t>(rng.index(n))});
    }
  }
  return finite_difference_check(f, inputs, coords, step, tolerance);
}

}  // namespace moon
