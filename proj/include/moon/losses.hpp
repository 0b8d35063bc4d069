// Ordinal encoding and the training objectives: ordinal regression,
// cross-entropy (ablation), Deep CCA alignment and the weighted composite.
#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moon/error.hpp"
#include "moon/nn.hpp"
#include "moon/ops.hpp"

namespace moon {

inline constexpr int kDefaultGrades = 4;
inline constexpr double kDefaultLambda = 0.9;
inline constexpr double kDccaEpsilon = 1e-12;

// ---- ordinal encoding --------------------------------------------------------

// Cumulative encoding: entry j is 1 iff grade > j.
inline std::vector<double> ordinal_encode(int grade, int grades) {
  if (grades < 2) throw ConfigError("ordinal_encode: need at least 2 grades");
  if (grade < 0 || grade >= grades)
    throw ConfigError("ordinal_encode: grade " + std::to_string(grade) + " outside [0, " + std::to_string(grades) + ")");
  std::vector<double> out(static_cast<std::size_t>(grades - 1), 0.0);
  for (int j = 0; j < grades - 1; ++j) out[static_cast<std::size_t>(j)] = grade > j ? 1.0 : 0.0;
  return out;
}

// Number of threshold outputs above 0.5.
inline int ordinal_decode(std::span<const double> thresholds) {
  int g = 0;
  for (double t : thresholds) g += t > 0.5 ? 1 : 0;
  return g;
}

// (n x K-1) matrix of cumulative encodings.
inline Tensor ordinal_targets(std::span<const int> grades, int num_grades) {
  std::vector<double> v;
  v.reserve(grades.size() * static_cast<std::size_t>(num_grades - 1));
  for (int g : grades) {
    const auto e = ordinal_encode(g, num_grades);
    v.insert(v.end(), e.begin(), e.end());
  }
  return Tensor::from({grades.size(), static_cast<std::size_t>(num_grades - 1)}, std::move(v));
}

// ---- losses ------------------------------------------------------------------

// Squared L2 distance between threshold predictions (n x K-1) and the
// encoded grades, averaged over the batch.
inline Tensor ordinal_loss(const Tensor& predictions, std::span<const int> grades) {
  if (predictions.rank() != 2 || predictions.dim(0) != grades.size())
    throw ShapeError("ordinal_loss: predictions " + shape_str(predictions.shape()) + " vs " +
                     std::to_string(grades.size()) + " labels");
  const auto targets = ordinal_targets(grades, static_cast<int>(predictions.dim(1)) + 1);
  const auto diff = sub(predictions, targets);
  return scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(grades.size()));
}

// Mean negative log-likelihood of the true class under softmax(logits).
inline Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> grades) {
  if (logits.rank() != 2 || logits.dim(0) != grades.size())
    throw ShapeError("cross_entropy_loss: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(grades.size()) + " labels");
  const std::size_t k = logits.dim(1);
  std::vector<double> onehot(logits.size(), 0.0);
  for (std::size_t i = 0; i < grades.size(); ++i) {
    if (grades[i] < 0 || static_cast<std::size_t>(grades[i]) >= k)
      throw ConfigError("cross_entropy_loss: grade out of range");
    onehot[i * k + static_cast<std::size_t>(grades[i])] = 1.0;
  }
  const auto picked = mul(log_softmax(logits, 1), Tensor::from(logits.shape(), std::move(onehot)));
  return scale(sum(picked), -1.0 / static_cast<double>(grades.size()));
}

// w * CE + (1 - w) * ordinal.
inline Tensor hybrid_loss(const Tensor& thresholds, const Tensor& logits, std::span<const int> grades, double ce_weight) {
  return add(scale(cross_entropy_loss(logits, grades), ce_weight),
             scale(ordinal_loss(thresholds, grades), 1.0 - ce_weight));
}

enum class LossKind { ordinal, ce, hybrid };

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "ordinal") return LossKind::ordinal;
  if (s == "ce") return LossKind::ce;
  if (s == "hybrid") return LossKind::hybrid;
  throw ConfigError("unknown loss '" + s + "' (expected ordinal|ce|hybrid)");
}

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::ordinal: return "ordinal";
    case LossKind::ce: return "ce";
    case LossKind::hybrid: return "hybrid";
  }
  return "?";
}

// ---- Deep CCA ----------------------------------------------------------------

using Projection = std::function<Tensor(const Tensor&)>;

inline Tensor identity_projection(const Tensor& x) { return x; }

// Two fully connected layers with a relu between them.
struct ProjectionNet {
  Tensor w1, b1, w2, b2;

  static ProjectionNet create(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t hidden,
                              std::size_t out, Rng& rng) {
    ProjectionNet p;
    p.w1 = store.add_glorot(prefix + ".w1", {in, hidden}, in, hidden, rng);
    p.b1 = store.add_zeros(prefix + ".b1", {hidden});
    p.w2 = store.add_glorot(prefix + ".w2", {hidden, out}, hidden, out, rng);
    p.b2 = store.add_zeros(prefix + ".b2", {out});
    return p;
  }

  static std::size_t parameter_count(std::size_t in, std::size_t hidden, std::size_t out) {
    return in * hidden + hidden + hidden * out + out;
  }

  Tensor operator()(const Tensor& x) const { return linear(relu(linear(x, w1, b1)), w2, b2); }
};

// -Tr(H1^T H2) / (|H1|_F |H2|_F + eps) on the projected, column-standardized views.
inline Tensor dcca_loss(const Tensor& h1, const Tensor& h2, const Projection& f1, const Projection& f2,
                        double eps = kDccaEpsilon) {
  if (h1.rank() != 2 || h2.rank() != 2 || h1.dim(0) != h2.dim(0))
    throw ShapeError("dcca_loss: views " + shape_str(h1.shape()) + " and " + shape_str(h2.shape()) +
                     " must be (n x d) with equal n");
  if (h1.dim(0) < 2) throw ShapeError("dcca_loss: need at least 2 samples to standardize, got 1");
  const auto p1 = standardize(f1(h1), eps);
  const auto p2 = standardize(f2(h2), eps);
  if (p1.shape() != p2.shape())
    throw ShapeError("dcca_loss: projected views " + shape_str(p1.shape()) + " and " + shape_str(p2.shape()) + " differ");
  const auto tr = trace_gram(p1, p2);
  const auto denom = add_scalar(mul(frobenius_norm(p1), frobenius_norm(p2)), eps);
  return scale(div(tr, denom), -1.0);
}

inline Tensor dcca_loss(const Tensor& h1, const Tensor& h2, double eps = kDccaEpsilon) {
  return dcca_loss(h1, h2, identity_projection, identity_projection, eps);
}

// Projection networks for the two alignment pairs (esophagus-liver and
// esophagus-spleen), one network per view.
struct DccaProjections {
  Projection eso_for_liver = identity_projection;
  Projection liver = identity_projection;
  Projection eso_for_spleen = identity_projection;
  Projection spleen = identity_projection;
};

struct OverallLoss {
  Tensor total;
  Tensor task;     // ordinal (or ce/hybrid) term
  Tensor dcca_liver;
  Tensor dcca_spleen;
};

inline void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw ConfigError("lambda must lie in [0, 1], got " + std::to_string(lambda));
}

// lambda * task + (1 - lambda) * [dcca(H_E, H_L) + dcca(H_E, H_S)].
inline OverallLoss combine_overall(const Tensor& task, const Tensor& dcca_l, const Tensor& dcca_s, double lambda) {
  check_lambda(lambda);
  OverallLoss out{Tensor{}, task, dcca_l, dcca_s};
  out.total = add(scale(task, lambda), scale(add(dcca_l, dcca_s), 1.0 - lambda));
  return out;
}

inline OverallLoss overall_loss(const Tensor& fused, std::span<const int> grades, const Tensor& h_e, const Tensor& h_l,
                                const Tensor& h_s, double lambda, const DccaProjections& proj = {}) {
  check_lambda(lambda);
  const auto ord = ordinal_loss(fused, grades);
  const auto dl = dcca_loss(h_e, h_l, proj.eso_for_liver, proj.liver);
  const auto ds = dcca_loss(h_e, h_s, proj.eso_for_spleen, proj.spleen);
  return combine_overall(ord, dl, ds, lambda);
}

}  // namespace moon
