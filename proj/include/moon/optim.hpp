// Adam and the step-decay learning-rate schedule.
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "moon/error.hpp"
#include "moon/tensor.hpp"

namespace moon {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;
};

// One bias-corrected Adam update over `params`, in place. A parameter with no
// recorded gradient is treated as having a zero gradient.
inline void adam_step(std::vector<Tensor>& params, AdamState& state, double lr, const AdamOptions& opt = {}) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw Error("adam_step: state does not match parameter list");
  ++state.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto grad = params[i].has_grad() ? params[i].grad() : std::span<const double>{};
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g;
      v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g * g;
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + opt.eps);
    }
  }
}

// initial * 0.5^floor(epoch / 20)
inline double lr_schedule(std::size_t epoch, double initial, std::size_t every = 20) {
  return initial * std::ldexp(1.0, -static_cast<int>(epoch / every));
}

}  // namespace moon
