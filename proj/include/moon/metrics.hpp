// Evaluation metrics: threshold accuracy/AUC, multi-class accuracy, Kendall's
// tau-b, confusion-derived precision/recall/F1, Dice, percentile bootstrap,
// and the serialized evaluation report.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "moon/error.hpp"
#include "moon/rng.hpp"
#include "moon/volume.hpp"

namespace moon {

// Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie). Absent when one class is missing.
inline std::optional<double> auc(std::span<const double> scores, std::span<const int> positive) {
  if (scores.size() != positive.size()) throw ShapeError("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // Average ranks (1-based) over tie groups.
  double rank_sum_pos = 0.0;
  std::size_t npos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (positive[idx[k]]) {
        rank_sum_pos += avg;
        ++npos;
      }
    i = j + 1;
  }
  const std::size_t nneg = n - npos;
  if (npos == 0 || nneg == 0) return std::nullopt;
  const double np = static_cast<double>(npos), nn = static_cast<double>(nneg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

struct ThresholdResult {
  double accuracy = 0.0;
  std::optional<double> auc;
};

// Binarizes at grade >= tau for labels and decoded predictions; AUC uses the continuous scores.
inline ThresholdResult threshold_binary(std::span<const int> labels, std::span<const int> predicted,
                                        std::span<const double> scores, int tau) {
  if (labels.size() != predicted.size() || labels.size() != scores.size())
    throw ShapeError("threshold_binary: input lengths differ");
  if (labels.empty()) throw ShapeError("threshold_binary: empty input");
  std::vector<int> pos(labels.size());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    pos[i] = labels[i] >= tau;
    correct += (predicted[i] >= tau) == (labels[i] >= tau);
  }
  return {static_cast<double>(correct) / static_cast<double>(labels.size()), auc(scores, pos)};
}

// ---- Kendall tau-b -------------------------------------------------------------

namespace detail {

// Number of tied pairs within runs of equal values of a sorted range: sum t(t-1)/2.
template <class It, class Eq>
long long tied_pairs(It begin, It end, Eq eq) {
  long long total = 0;
  for (It i = begin; i != end;) {
    It j = i;
    long long t = 0;
    while (j != end && eq(*j, *i)) {
      ++j;
      ++t;
    }
    total += t * (t - 1) / 2;
    i = j;
  }
  return total;
}

// Merge sort on b counting swaps (discordant inversions).
inline long long count_inversions(std::vector<double>& v, std::vector<double>& tmp, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = (lo + hi) / 2;
  long long inv = count_inversions(v, tmp, lo, mid) + count_inversions(v, tmp, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      inv += static_cast<long long>(mid - i);
      tmp[k++] = v[j++];
    } else {
      tmp[k++] = v[i++];
    }
  }
  while (i < mid) tmp[k++] = v[i++];
  while (j < hi) tmp[k++] = v[j++];
  std::copy(tmp.begin() + lo, tmp.begin() + hi, v.begin() + lo);
  return inv;
}

}  // namespace detail

// Knight's O(n log n) tau-b. Absent when n < 2 or either input is constant.
inline std::optional<double> kendall_tau_b(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("kendall_tau_b: inputs differ in length");
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  std::vector<std::pair<double, double>> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = {x[i], y[i]};
  std::sort(p.begin(), p.end());
  const long long n0 = static_cast<long long>(n) * static_cast<long long>(n - 1) / 2;
  const long long n1 = detail::tied_pairs(p.begin(), p.end(), [](auto& a, auto& b) { return a.first == b.first; });
  const long long n3 = detail::tied_pairs(p.begin(), p.end(), [](auto& a, auto& b) { return a == b; });
  std::vector<double> ys(n), tmp(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = p[i].second;
  const long long swaps = detail::count_inversions(ys, tmp, 0, n);
  const long long n2 = detail::tied_pairs(ys.begin(), ys.end(), [](double a, double b) { return a == b; });
  const double denom = std::sqrt(static_cast<double>(n0 - n1)) * std::sqrt(static_cast<double>(n0 - n2));
  if (denom == 0.0) return std::nullopt;
  // concordant - discordant = n0 - n1 - n2 + n3 - 2 * swaps
  return static_cast<double>(n0 - n1 - n2 + n3 - 2 * swaps) / denom;
}

inline std::optional<double> kendall_tau_b(std::span<const int> x, std::span<const int> y) {
  std::vector<double> a(x.begin(), x.end()), b(y.begin(), y.end());
  return kendall_tau_b(std::span<const double>(a), std::span<const double>(b));
}

// ---- confusion and per-class rates ---------------------------------------------

using Confusion = std::vector<std::vector<std::size_t>>;  // [true][predicted]

inline Confusion confusion_matrix(std::span<const int> labels, std::span<const int> predicted, int k) {
  if (labels.size() != predicted.size()) throw ShapeError("confusion_matrix: input lengths differ");
  Confusion m(static_cast<std::size_t>(k), std::vector<std::size_t>(static_cast<std::size_t>(k), 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k || predicted[i] < 0 || predicted[i] >= k)
      throw ConfigError("confusion_matrix: grade outside [0, " + std::to_string(k) + ")");
    ++m[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predicted[i])];
  }
  return m;
}

inline double multiclass_accuracy(const Confusion& m) {
  std::size_t diag = 0, total = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j) {
      total += m[i][j];
      if (i == j) diag += m[i][j];
    }
  if (total == 0) throw ShapeError("multiclass_accuracy: empty confusion matrix");
  return static_cast<double>(diag) / static_cast<double>(total);
}

inline double f1_score(double precision, double recall) {
  return precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
}

struct ClassRates {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::size_t support = 0;
};

// Precision is 0 for a never-predicted class, recall 0 for an absent class.
inline std::vector<ClassRates> per_class_prf(const Confusion& m) {
  std::vector<ClassRates> out(m.size());
  for (std::size_t c = 0; c < m.size(); ++c) {
    std::size_t tp = m[c][c], predicted = 0, actual = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      predicted += m[i][c];
      actual += m[c][i];
    }
    auto& r = out[c];
    r.support = actual;
    r.precision = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
    r.recall = actual ? static_cast<double>(tp) / static_cast<double>(actual) : 0.0;
    r.f1 = f1_score(r.precision, r.recall);
  }
  return out;
}

// 2|A & B| / (|A| + |B|); 1 when both are empty.
inline double dice(const Mask& a, const Mask& b) {
  if (a.dims != b.dims) throw ShapeError("dice: mask shapes differ");
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.data[i] != 0, y = b.data[i] != 0;
    na += x;
    nb += y;
    inter += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

// ---- bootstrap -----------------------------------------------------------------

// A metric over a resampled index set; absent when undefined on that sample.
using SampleMetric = std::function<std::optional<double>(std::span<const std::size_t>)>;

struct Interval {
  double lo = 0.0, hi = 0.0;
};

inline constexpr std::size_t kBootstrapReplicates = 1000;

// Linear-interpolated percentile of sorted values, q in [0, 1].
inline double percentile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

// Percentile interval over `replicates` resamples of n indices with replacement.
inline Interval bootstrap_ci(const SampleMetric& metric, std::size_t n, std::uint64_t seed,
                             std::size_t replicates = kBootstrapReplicates, double level = 0.95) {
  if (n < 2) throw ShapeError("bootstrap_ci: need at least 2 samples");
  if (replicates == 0) throw ConfigError("bootstrap_ci: replicates must be positive");
  Rng rng(derive_seed(seed, "bootstrap", 0));
  std::vector<double> values;
  std::vector<std::size_t> idx(n);
  std::size_t skipped = 0;
  for (std::size_t r = 0; r < replicates; ++r) {
    for (auto& i : idx) i = static_cast<std::size_t>(rng.index(n));
    const auto v = metric(idx);
    if (v) values.push_back(*v);
    else ++skipped;
  }
  if (static_cast<double>(skipped) > 0.1 * static_cast<double>(replicates))
    throw NumericError("bootstrap_ci: metric undefined on " + std::to_string(skipped) + " of " +
                       std::to_string(replicates) + " replicates");
  std::sort(values.begin(), values.end());
  const double alpha = (1.0 - level) / 2.0;
  return {percentile_sorted(values, alpha), percentile_sorted(values, 1.0 - alpha)};
}

// ---- ROC -------------------------------------------------------------------------

struct RocPoint {
  double threshold, fpr, tpr;
};

// Points for descending thresholds at each distinct score, starting at (0, 0).
inline std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> positive) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  double np = 0, nn = 0;
  for (int p : positive) (p ? np : nn) += 1;
  std::vector<RocPoint> out{{INFINITY, 0.0, 0.0}};
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (positive[idx[j]] ? tp : fp) += 1;
      ++j;
    }
    out.push_back({scores[idx[i]], nn > 0 ? fp / nn : 0.0, np > 0 ? tp / np : 0.0});
    i = j;
  }
  return out;
}

// ---- report ------------------------------------------------------------------------

struct MetricValue {
  std::string name;
  std::optional<double> value;
  std::optional<Interval> ci;
};

struct EvalReport {
  int grades = 4;
  std::size_t samples = 0;
  Confusion confusion;
  std::vector<MetricValue> metrics;  // in emission order
  std::vector<ClassRates> per_class;
  std::vector<std::vector<RocPoint>> roc;  // one curve per threshold tau = 1..K-1

  const MetricValue& get(const std::string& name) const {
    for (const auto& m : metrics)
      if (m.name == name) return m;
    throw Error("EvalReport: no metric named " + name);
  }
};

// Expected grade under the cumulative model: sum of the K-1 threshold outputs.
inline double expected_grade_score(std::span<const double> thresholds) {
  return std::accumulate(thresholds.begin(), thresholds.end(), 0.0);
}

inline std::string threshold_label(int tau, int k) {
  return tau == k - 1 ? "G" + std::to_string(tau) : "ge_G" + std::to_string(tau);
}

inline EvalReport evaluate(std::span<const int> labels, std::span<const int> predicted, std::span<const double> scores,
                           int k, std::uint64_t seed, std::size_t replicates = kBootstrapReplicates) {
  if (labels.size() != predicted.size() || labels.size() != scores.size())
    throw ShapeError("evaluate: input lengths differ");
  if (labels.empty()) throw ShapeError("evaluate: empty evaluation set");
  EvalReport r;
  r.grades = k;
  r.samples = labels.size();
  r.confusion = confusion_matrix(labels, predicted, k);
  r.per_class = per_class_prf(r.confusion);

  const std::size_t n = labels.size();
  auto gather = [&](std::span<const std::size_t> idx, auto& dst, auto src) {
    dst.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) dst[i] = src[idx[i]];
  };
  auto with_ci = [&](const std::string& name, const SampleMetric& m, std::uint64_t tag) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    MetricValue mv{name, m(all), std::nullopt};
    if (mv.value && n >= 2) {
      try {
        mv.ci = bootstrap_ci(m, n, derive_seed(seed, name, tag), replicates);
      } catch (const NumericError&) {
        mv.ci = std::nullopt;  // too many undefined replicates; report the point value only
      }
    }
    r.metrics.push_back(mv);
  };

  for (int tau = 1; tau < k; ++tau) {
    const std::string label = threshold_label(tau, k);
    with_ci("acc_" + label, [&, tau](std::span<const std::size_t> idx) -> std::optional<double> {
      std::size_t c = 0;
      for (auto i : idx) c += (predicted[i] >= tau) == (labels[i] >= tau);
      return static_cast<double>(c) / static_cast<double>(idx.size());
    }, static_cast<std::uint64_t>(tau));
    with_ci("auc_" + label, [&, tau](std::span<const std::size_t> idx) -> std::optional<double> {
      std::vector<double> s;
      std::vector<int> p;
      gather(idx, s, scores);
      p.resize(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) p[i] = labels[idx[i]] >= tau;
      return auc(s, p);
    }, static_cast<std::uint64_t>(tau));
    std::vector<int> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = labels[i] >= tau;
    r.roc.push_back(roc_curve(scores, pos));
  }
  with_ci("multiclass_acc", [&](std::span<const std::size_t> idx) -> std::optional<double> {
    std::size_t c = 0;
    for (auto i : idx) c += predicted[i] == labels[i];
    return static_cast<double>(c) / static_cast<double>(idx.size());
  }, 0);
  with_ci("kendall_tau_b", [&](std::span<const std::size_t> idx) -> std::optional<double> {
    std::vector<int> a, b;
    gather(idx, a, labels);
    gather(idx, b, predicted);
    return kendall_tau_b(std::span<const int>(a), std::span<const int>(b));
  }, 0);
  return r;
}

namespace detail {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

}  // namespace detail

// One metric per row: name,value,ci_lo,ci_hi (empty cells when absent).
inline std::string report_csv(const EvalReport& r) {
  std::string out = "name,value,ci_lo,ci_hi\n";
  for (const auto& m : r.metrics)
    out += m.name + "," + detail::fmt_opt(m.value) + "," + (m.ci ? detail::fmt(m.ci->lo) : "") + "," +
           (m.ci ? detail::fmt(m.ci->hi) : "") + "\n";
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& pc = r.per_class[c];
    const std::string g = "G" + std::to_string(c);
    out += "precision_" + g + "," + detail::fmt(pc.precision) + ",,\n";
    out += "recall_" + g + "," + detail::fmt(pc.recall) + ",,\n";
    out += "f1_" + g + "," + detail::fmt(pc.f1) + ",,\n";
    out += "support_" + g + "," + std::to_string(pc.support) + ",,\n";
  }
  return out;
}

// Rows are true grades, columns predicted grades.
inline std::string confusion_csv(const Confusion& m) {
  std::string out = "true\\pred";
  for (std::size_t j = 0; j < m.size(); ++j) out += ",G" + std::to_string(j);
  out += "\n";
  for (std::size_t i = 0; i < m.size(); ++i) {
    out += "G" + std::to_string(i);
    for (auto v : m[i]) out += "," + std::to_string(v);
    out += "\n";
  }
  return out;
}

inline std::string roc_csv(const std::vector<RocPoint>& pts) {
  std::string out = "threshold,fpr,tpr\n";
  for (const auto& p : pts)
    out += (std::isinf(p.threshold) ? std::string("inf") : detail::fmt(p.threshold)) + "," + detail::fmt(p.fpr) + "," +
           detail::fmt(p.tpr) + "\n";
  return out;
}

inline nlohmann::ordered_json report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["grades"] = r.grades;
  j["samples"] = r.samples;
  auto& metrics = j["metrics"] = nlohmann::ordered_json::object();
  for (const auto& m : r.metrics) {
    nlohmann::ordered_json e;
    e["value"] = m.value ? nlohmann::ordered_json(*m.value) : nlohmann::ordered_json(nullptr);
    e["ci"] = m.ci ? nlohmann::ordered_json::array({m.ci->lo, m.ci->hi}) : nlohmann::ordered_json(nullptr);
    metrics[m.name] = e;
  }
  auto& per_class = j["per_class"] = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& pc = r.per_class[c];
    per_class.push_back(
        {{"grade", c}, {"precision", pc.precision}, {"recall", pc.recall}, {"f1", pc.f1}, {"support", pc.support}});
  }
  j["confusion"] = r.confusion;
  return j;
}

inline std::string report_json(const EvalReport& r) { return report_to_json(r).dump(2) + "\n"; }

}  // namespace moon
