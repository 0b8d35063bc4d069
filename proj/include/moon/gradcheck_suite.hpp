// Named finite-difference cases grouped by scope (primitives, losses, ori,
// full), shared by the gradcheck command and the tests.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "moon/gradcheck.hpp"
#include "moon/losses.hpp"
#include "moon/model.hpp"
#include "moon/ops.hpp"
#include "moon/ori.hpp"

namespace moon {

struct GradCase {
  std::string name;
  // Builds the inputs and the scalar function for one trial. The function may
  // capture state (a model) that lives as long as the returned closure.
  std::function<std::pair<std::vector<Tensor>, ScalarFn>(Rng&)> build;
  double tolerance = 1e-4;
  double step = 1e-5;
  std::size_t sample = 0;  // coordinates checked per trial; 0 means all
};

namespace gradsuite {

inline Tensor uniform(Rng& r, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = r.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// |x| in [margin, 1] with random sign; keeps relu inputs off the kink.
inline Tensor off_kink(Rng& r, Shape shape, double margin = 0.1) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) {
    const double m = r.uniform(margin, 1.0);
    x = r.uniform() < 0.5 ? -m : m;
  }
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Fixed non-uniform weights so every output coordinate gets its own gradient.
inline Tensor weighted_sum(const Tensor& t) {
  std::vector<double> w(t.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + 0.37 * static_cast<double>(i));
  return sum(mul(t, Tensor::from(t.shape(), std::move(w))));
}

inline std::vector<int> random_grades(Rng& r, std::size_t n, int k) {
  std::vector<int> g(n);
  for (auto& x : g) x = static_cast<int>(r.index(static_cast<std::uint64_t>(k)));
  return g;
}

using V = std::vector<Tensor>;


// A case whose function does not depend on the trial beyond its inputs.
inline GradCase simple(std::string name, std::function<V(Rng&)> inputs, ScalarFn f, double tol = 1e-4) {
  GradCase c;
  c.name = std::move(name);
  c.build = [inputs, f](Rng& r) { return std::make_pair(inputs(r), f); };
  c.tolerance = tol;
  return c;
}

inline std::vector<GradCase> primitive_cases() {
  return {
      simple("matmul", [](Rng& r) { return V{uniform(r, {3, 4}), uniform(r, {4, 2})}; },
             [](const V& x) { return weighted_sum(matmul(x[0], x[1])); }),
      simple("add", [](Rng& r) { return V{uniform(r, {2, 3}), uniform(r, {2, 3})}; },
             [](const V& x) { return weighted_sum(add(x[0], x[1])); }),
      simple("sub", [](Rng& r) { return V{uniform(r, {2, 3}), uniform(r, {2, 3})}; },
             [](const V& x) { return weighted_sum(sub(x[0], x[1])); }),
      simple("mul", [](Rng& r) { return V{uniform(r, {2, 3}), uniform(r, {2, 3})}; },
             [](const V& x) { return weighted_sum(mul(x[0], x[1])); }),
      simple("div", [](Rng& r) { return V{uniform(r, {5}), uniform(r, {1}, 0.5, 2.0)}; },
             [](const V& x) { return weighted_sum(div(x[0], x[1])); }),
      simple("scale", [](Rng& r) { return V{uniform(r, {4})}; },
             [](const V& x) { return weighted_sum(scale(x[0], -1.7)); }),
      simple("add_scalar", [](Rng& r) { return V{uniform(r, {4})}; },
             [](const V& x) { return weighted_sum(add_scalar(x[0], 0.3)); }),
      simple("concat", [](Rng& r) { return V{uniform(r, {2, 3}), uniform(r, {2, 2})}; },
             [](const V& x) { return weighted_sum(concat({x[0], x[1]}, 1)); }),
      simple("slice", [](Rng& r) { return V{uniform(r, {3, 4})}; },
             [](const V& x) { return weighted_sum(slice(x[0], 1, 1, 3)); }),
      simple("transpose", [](Rng& r) { return V{uniform(r, {3, 2})}; },
             [](const V& x) { return weighted_sum(transpose(x[0])); }),
      simple("reshape", [](Rng& r) { return V{uniform(r, {2, 6})}; },
             [](const V& x) { return weighted_sum(reshape(x[0], {3, 4})); }),
      simple("linear", [](Rng& r) { return V{uniform(r, {3, 4}), uniform(r, {4, 2}), uniform(r, {2})}; },
             [](const V& x) { return weighted_sum(linear(x[0], x[1], x[2])); }),
      simple("conv3d", [](Rng& r) { return V{uniform(r, {2, 4, 3, 5}), uniform(r, {2, 2, 3, 3, 3}), uniform(r, {2})}; },
             [](const V& x) { return weighted_sum(conv3d(x[0], x[1], x[2], 2, 1)); }),
      simple("conv3d_stride1",
             [](Rng& r) { return V{uniform(r, {1, 3, 3, 4}), uniform(r, {2, 1, 3, 3, 3}), uniform(r, {2})}; },
             [](const V& x) { return weighted_sum(conv3d(x[0], x[1], x[2], 1, 1)); }),
      simple("adaptive_avg_pool3d", [](Rng& r) { return V{uniform(r, {2, 5, 3, 4})}; },
             [](const V& x) { return weighted_sum(adaptive_avg_pool3d(x[0], {2, 2, 3})); }),
      simple("nearest_interpolate3d", [](Rng& r) { return V{uniform(r, {2, 2, 3, 2})}; },
             [](const V& x) { return weighted_sum(nearest_interpolate3d(x[0], {3, 2, 4})); }),
      simple("softmax", [](Rng& r) { return V{uniform(r, {3, 4}, -3, 3)}; },
             [](const V& x) { return weighted_sum(softmax(x[0], 1)); }),
      simple("log_softmax", [](Rng& r) { return V{uniform(r, {3, 4}, -3, 3)}; },
             [](const V& x) { return weighted_sum(log_softmax(x[0], 0)); }),
      simple("relu", [](Rng& r) { return V{off_kink(r, {6})}; }, [](const V& x) { return weighted_sum(relu(x[0])); }),
      simple("sigmoid", [](Rng& r) { return V{uniform(r, {5}, -4, 4)}; },
             [](const V& x) { return weighted_sum(sigmoid(x[0])); }),
      simple("standardize", [](Rng& r) { return V{uniform(r, {6, 3})}; },
             [](const V& x) { return weighted_sum(standardize(x[0], 1e-12)); }),
      simple("sum", [](Rng& r) { return V{uniform(r, {7})}; }, [](const V& x) { return scale(sum(x[0]), 0.7); }),
      simple("mean", [](Rng& r) { return V{uniform(r, {7})}; }, [](const V& x) { return mean(x[0]); }),
      simple("mse", [](Rng& r) { return V{uniform(r, {5}), uniform(r, {5})}; },
             [](const V& x) { return mse(x[0], x[1]); }),
      simple("frobenius_norm", [](Rng& r) { return V{uniform(r, {3, 3})}; },
             [](const V& x) { return frobenius_norm(x[0]); }),
      simple("trace_gram", [](Rng& r) { return V{uniform(r, {4, 2}), uniform(r, {4, 2})}; },
             [](const V& x) { return trace_gram(x[0], x[1]); }),
  };
}

inline std::vector<GradCase> loss_cases() {
  std::vector<GradCase> out;
  out.push_back({"ordinal_loss", [](Rng& r) {
                   const auto y = random_grades(r, 5, 4);
                   ScalarFn f = [y](const V& x) { return ordinal_loss(x[0], y); };
                   return std::make_pair(V{uniform(r, {5, 3}, 0, 1)}, f);
                 }});
  out.push_back({"cross_entropy_loss", [](Rng& r) {
                   const auto y = random_grades(r, 5, 4);
                   ScalarFn f = [y](const V& x) { return cross_entropy_loss(x[0], y); };
                   return std::make_pair(V{uniform(r, {5, 4}, -3, 3)}, f);
                 }});
  out.push_back({"hybrid_loss", [](Rng& r) {
                   const auto y = random_grades(r, 4, 4);
                   ScalarFn f = [y](const V& x) { return hybrid_loss(x[0], x[1], y, 0.5); };
                   return std::make_pair(V{uniform(r, {4, 3}, 0, 1), uniform(r, {4, 4}, -3, 3)}, f);
                 }});
  out.push_back(simple("dcca_loss", [](Rng& r) { return V{uniform(r, {6, 3}), uniform(r, {6, 3})}; },
                       [](const V& x) { return dcca_loss(x[0], x[1]); }));
  out.push_back({"dcca_loss_projected", [](Rng& r) {
                   auto store = std::make_shared<ParameterStore>();
                   auto f1 = std::make_shared<ProjectionNet>(ProjectionNet::create(*store, "f1", 3, 16, 8, r));
                   auto f2 = std::make_shared<ProjectionNet>(ProjectionNet::create(*store, "f2", 3, 16, 8, r));
                   V in = store->tensors();
                   in.push_back(uniform(r, {6, 3}));
                   in.push_back(uniform(r, {6, 3}));
                   ScalarFn f = [store, f1, f2](const V& x) {
                     return dcca_loss(x[8], x[9], std::cref(*f1), std::cref(*f2));
                   };
                   return std::make_pair(in, f);
                 },
                 1e-4, 1e-6, 24});
  out.push_back({"overall_loss", [](Rng& r) {
                   const auto y = random_grades(r, 5, 4);
                   ScalarFn f = [y](const V& x) { return overall_loss(x[0], y, x[1], x[2], x[3], 0.9).total; };
                   return std::make_pair(V{uniform(r, {5, 3}, 0.1, 0.9), uniform(r, {5, 3}), uniform(r, {5, 3}),
                                           uniform(r, {5, 3})},
                                         f);
                 }});
  return out;
}

inline std::vector<GradCase> ori_cases() {
  std::vector<GradCase> out;
  for (auto s : {OriStrategy::add, OriStrategy::concat, OriStrategy::self_attn, OriStrategy::query_swap,
                 OriStrategy::switching}) {
    out.push_back({"ori_" + to_string(s), [s](Rng& r) {
                     OriConfig cfg;
                     cfg.strategy = s;
                     cfg.channels = 3;
                     cfg.iterations = 4;
                     cfg.pooled_shape = {2, 2, 2};
                     auto store = std::make_shared<ParameterStore>();
                     auto ori = std::make_shared<Ori>(cfg, *store, "ori", r);
                     // the zero restoration init would hide the interaction path
                     for (int st = 0; st < 3; ++st) {
                       for (auto& v : ori->restore_weight(st).mutable_values()) v = r.uniform(-1, 1);
                       for (auto& v : ori->restore_bias(st).mutable_values()) v = r.uniform(-1, 1);
                     }
                     V in = store->tensors();
                     const std::size_t base = in.size();
                     for (int st = 0; st < 3; ++st) in.push_back(uniform(r, {3, 3, 2, 3}));
                     ScalarFn f = [store, ori, base](const V& x) {
                       const auto o = ori->forward({x[base], x[base + 1], x[base + 2]});
                       return add(add(weighted_sum(o[0]), weighted_sum(o[1])), weighted_sum(mul(o[2], o[2])));
                     };
                     return std::make_pair(in, f);
                   },
                   1e-4, 1e-6, 12});
  }
  return out;
}

// Whole model on a batch of four, through the combined objective.
inline ModelConfig gradcheck_model_config() {
  ModelConfig m;
  for (auto& b : m.backbone) {
    b.input_shape = {6, 6, 6};
    b.stem_channels = 2;
    b.channels = {3, 4};
    b.attention_stages = {2};
    b.output_channels = 4;
  }
  m.ori.channels = 4;
  m.ori.iterations = 4;
  m.ori.pooled_shape = {2, 2, 2};
  m.adaptor_dim = 5;
  m.dcca_hidden = 6;
  m.dcca_out = 4;
  return m;
}

inline std::vector<GradCase> full_cases() {
  GradCase c;
  c.name = "moon_forward+overall_loss";
  c.tolerance = 1e-3;
  c.step = 1e-6;
  c.sample = 4;
  c.build = [](Rng& r) {
    const ModelConfig cfg = gradcheck_model_config();
    auto model = std::make_shared<MoonModel>(cfg, r.next_u64());
    auto& store = model->params();
    // Zero-initialized tensors (biases, restoration) get random values: a zero
    // bias puts relu inputs fed by all-zero windows exactly on the kink, and a
    // zero restoration hides the ORI path. Positive hidden biases in the DCCA
    // projections keep their relus live, since a projected column that is
    // constant over the batch has zero variance and standardization then has
    // no usable derivative.
    for (auto& e : store.entries()) {
      auto vals = e.tensor.mutable_values();
      if (std::all_of(vals.begin(), vals.end(), [](double v) { return v == 0.0; }))
        for (auto& v : vals) v = (r.uniform() < 0.5 ? -1.0 : 1.0) * r.uniform(0.05, 0.5);
      if (e.name.rfind("dcca.", 0) == 0 && e.name.ends_with(".b1"))
        for (auto& v : vals) v = 1.0;
    }
    auto batch = std::make_shared<std::vector<ModelInput>>();
    for (int i = 0; i < 4; ++i) {
      ModelInput in;
      in.id = "G" + std::to_string(i);
      in.grade = i;
      for (int o = 0; o < kOrganCount; ++o) {
        const auto& s = cfg.backbone[o].input_shape;
        std::vector<double> v(s[0] * s[1] * s[2]);
        // distinct intensity offsets spread the branch outputs over the batch
        for (auto& x : v) x = r.uniform(0, 1) + 0.5 * i;
        in.volumes[o] = Tensor::from({1, s[0], s[1], s[2]}, std::move(v));
      }
      in.prior = make_prior_record(r.uniform(5, 90), r.uniform(300, 2000), r.uniform(100, 1200));
      batch->push_back(std::move(in));
    }
    ScalarFn f = [model, batch](const V&) {
      std::vector<const ModelInput*> ptrs;
      std::vector<int> grades;
      for (const auto& in : *batch) {
        ptrs.push_back(&in);
        grades.push_back(in.grade);
      }
      const auto out = model->forward_batch(ptrs);
      return overall_loss(out.h_f, grades, out.h_e, out.h_l, out.h_s, 0.9, model->projections()).total;
    };
    return std::make_pair(store.tensors(), f);
  };
  return {c};
}

}  // namespace gradsuite

inline const std::vector<std::string>& gradcheck_scopes() {
  static const std::vector<std::string> s{"primitives", "losses", "ori", "full"};
  return s;
}

inline std::vector<GradCase> gradcheck_cases(const std::string& scope) {
  if (scope == "primitives") return gradsuite::primitive_cases();
  if (scope == "losses") return gradsuite::loss_cases();
  if (scope == "ori") return gradsuite::ori_cases();
  if (scope == "full") return gradsuite::full_cases();
  throw ConfigError("unknown gradcheck scope '" + scope + "' (expected primitives|losses|ori|full)");
}

struct GradCaseResult {
  std::string scope, name;
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  std::size_t trials = 0, coordinates = 0;
  double seconds = 0.0;
  bool passed = false;
};

inline GradCaseResult run_grad_case(const GradCase& c, std::size_t trials, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCaseResult res;
  res.name = c.name;
  res.tolerance = c.tolerance;
  res.trials = trials;
  Rng rng(derive_seed(seed, "gradcheck." + c.name));
  for (std::size_t t = 0; t < trials; ++t) {
    auto [inputs, f] = c.build(rng);
    const auto report = c.sample ? finite_difference_check_sampled(f, inputs, c.sample, rng.next_u64(), c.step, c.tolerance)
                                 : finite_difference_check(f, inputs, c.step, c.tolerance);
    res.max_relative_error = std::max(res.max_relative_error, report.max_relative_error);
    res.coordinates += report.coordinates;
  }
  res.passed = res.max_relative_error < c.tolerance;
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

inline std::vector<GradCaseResult> run_gradcheck(const std::string& scope, std::size_t trials = 100,
                                                 std::uint64_t seed = 2024) {
  std::vector<GradCaseResult> out;
  for (const auto& c : gradcheck_cases(scope)) {
    out.push_back(run_grad_case(c, trials, seed));
    out.back().scope = scope;
  }
  return out;
}

inline std::string gradcheck_table(const std::vector<GradCaseResult>& rows) {
  std::string out = "scope       case                         max_rel_err  tolerance  coords   verdict\n";
  for (const auto& r : rows) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "%-11s %-28s %11.3e  %9.0e  %6zu   %s\n", r.scope.c_str(), r.name.c_str(),
                  r.max_relative_error, r.tolerance, r.coordinates, r.passed ? "pass" : "FAIL");
    out += buf;
  }
  return out;
}

}  // namespace moon
