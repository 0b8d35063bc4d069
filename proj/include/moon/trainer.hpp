// Mini-batch training with Adam, step decay and best-on-validation selection.
#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "moon/config.hpp"
#include "moon/dataset.hpp"
#include "moon/losses.hpp"
#include "moon/metrics.hpp"
#include "moon/model.hpp"
#include "moon/optim.hpp"
#include "moon/parallel.hpp"

namespace moon {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  std::size_t decay_every = 20;
  double lambda = kDefaultLambda;
  std::uint64_t seed = 1;
  bool augment_flips = false;
  double intensity_jitter = 0.0;  // relative sd of a per-volume intensity scale

  void validate(const ModelConfig& model) const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
    if (model.dcca_active() && batch_size < 4)
      throw ConfigError("train: batch size must be >= 4 when DCCA is enabled, got " + std::to_string(batch_size));
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning rate must be positive");
    if (decay_every < 1) throw ConfigError("train: decay interval must be >= 1");
    check_lambda(lambda);
    if (!(intensity_jitter >= 0.0)) throw ConfigError("train: intensity jitter must be >= 0");
  }

  static TrainConfig from_config(const FlatConfig& c) {
    TrainConfig t;
    auto size = [&](const std::string& k, std::size_t fb) {
      const auto v = c.get_int(k, static_cast<std::int64_t>(fb));
      if (v < 0) throw ConfigError("config key '" + k + "' must be >= 0");
      return static_cast<std::size_t>(v);
    };
    t.epochs = size("train.epochs", t.epochs);
    t.batch_size = size("train.batch_size", t.batch_size);
    t.learning_rate = c.get_double("train.learning_rate", t.learning_rate);
    t.decay_every = size("train.decay_every", t.decay_every);
    t.lambda = c.get_double("train.lambda", t.lambda);
    t.seed = static_cast<std::uint64_t>(c.get_int("train.seed", static_cast<std::int64_t>(t.seed)));
    t.augment_flips = c.get_bool("train.augment_flips", t.augment_flips);
    t.intensity_jitter = c.get_double("train.intensity_jitter", t.intensity_jitter);
    return t;
  }

  FlatConfig to_config() const {
    FlatConfig c;
    c.set("train.epochs", std::to_string(epochs));
    c.set("train.batch_size", std::to_string(batch_size));
    c.set("train.learning_rate", detail::fmt_double(learning_rate));
    c.set("train.decay_every", std::to_string(decay_every));
    c.set("train.lambda", detail::fmt_double(lambda));
    c.set("train.seed", std::to_string(seed));
    c.set("train.augment_flips", augment_flips ? "true" : "false");
    c.set("train.intensity_jitter", detail::fmt_double(intensity_jitter));
    return c;
  }
};

// ---- prediction --------------------------------------------------------------

struct Predictions {
  std::vector<std::string> ids;
  std::vector<int> labels, predicted;
  std::vector<double> scores;                   // expected grade (sum of fused thresholds)
  std::vector<std::vector<double>> thresholds;  // fused K-1 outputs per subject
};

inline Predictions predict(const MoonModel& model, const std::vector<ModelInput>& inputs) {
  Predictions p;
  const std::size_t n = inputs.size();
  p.ids.resize(n);
  p.labels.resize(n);
  p.predicted.resize(n);
  p.scores.resize(n);
  p.thresholds.resize(n);
  parallel_for(n, [&](std::size_t i) {
    const auto out = model.forward(inputs[i]);
    const auto h = out.h_f.values();
    p.ids[i] = inputs[i].id;
    p.labels[i] = inputs[i].grade;
    p.thresholds[i].assign(h.begin(), h.end());
    p.predicted[i] = ordinal_decode(h);
    p.scores[i] = expected_grade_score(h);
  });
  return p;
}

inline double accuracy_of(const Predictions& p) {
  if (p.labels.empty()) return 0.0;
  std::size_t c = 0;
  for (std::size_t i = 0; i < p.labels.size(); ++i) c += p.labels[i] == p.predicted[i];
  return static_cast<double>(c) / static_cast<double>(p.labels.size());
}

inline double tau_of(const Predictions& p) {
  if (p.labels.size() < 2) return 0.0;
  const auto t = kendall_tau_b(std::span<const int>(p.labels), std::span<const int>(p.predicted));
  return t ? *t : 0.0;
}

// ---- batching and augmentation -------------------------------------------------

// Seeded permutation cut into batches; a short tail that would fall below the
// minimum size is merged into the previous batch.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::size_t min_batch,
                                                          std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "batches", epoch));
  seeded_shuffle(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
  if (out.size() > 1 && out.back().size() < min_batch) {
    auto tail = std::move(out.back());
    out.pop_back();
    out.back().insert(out.back().end(), tail.begin(), tail.end());
  }
  return out;
}

// Random axis flips and a global intensity scale, drawn from `rng`.
inline Tensor augment_volume(const Tensor& vol, bool flips, double jitter, Rng& rng) {
  std::array<bool, 3> flip{false, false, false};
  if (flips)
    for (auto& f : flip) f = rng.uniform() < 0.5;
  const double gain = jitter > 0.0 ? 1.0 + jitter * rng.normal() : 1.0;
  const std::size_t c = vol.dim(0), X = vol.dim(1), Y = vol.dim(2), Z = vol.dim(3);
  const auto src = vol.values();
  std::vector<double> out(src.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t x = 0; x < X; ++x)
      for (std::size_t y = 0; y < Y; ++y)
        for (std::size_t z = 0; z < Z; ++z) {
          const std::size_t sx = flip[0] ? X - 1 - x : x, sy = flip[1] ? Y - 1 - y : y, sz = flip[2] ? Z - 1 - z : z;
          out[((ch * X + x) * Y + y) * Z + z] = gain * src[((ch * X + sx) * Y + sy) * Z + sz];
        }
  return Tensor::from(vol.shape(), std::move(out));
}

// ---- training ------------------------------------------------------------------

struct LogRow {
  std::size_t epoch = 0;
  double lr = 0, overall = 0, ordinal = 0;
  std::optional<double> dcca_l, dcca_s;
  std::optional<double> val_acc, val_tau;
};

inline const char* kTrainLogHeader = "epoch,lr,overall,ordinal,dcca_l,dcca_s,val_acc,val_tau";

inline std::string log_csv_row(const LogRow& r) {
  auto f = [](const std::optional<double>& v) -> std::string {
    if (!v) return "";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", *v);
    return buf;
  };
  return std::to_string(r.epoch) + "," + f(r.lr) + "," + f(r.overall) + "," + f(r.ordinal) + "," + f(r.dcca_l) + "," +
         f(r.dcca_s) + "," + f(r.val_acc) + "," + f(r.val_tau);
}

inline std::string training_log_csv(const std::vector<LogRow>& rows) {
  std::string out = std::string(kTrainLogHeader) + "\n";
  for (const auto& r : rows) out += log_csv_row(r) + "\n";
  return out;
}

struct StepLosses {
  OverallLoss parts;
  Tensor ordinal;  // ordinal loss of the fused thresholds, whatever the task loss is
};

// The objective for one batch. Without DCCA the task loss is used as is.
inline StepLosses batch_objective(const MoonModel& model, const ModelOutput& out, std::span<const int> grades,
                                  double lambda) {
  const auto& cfg = model.config();
  StepLosses s;
  s.ordinal = ordinal_loss(out.h_f, grades);
  Tensor task;
  switch (cfg.loss) {
    case LossKind::ordinal: task = s.ordinal; break;
    case LossKind::ce: task = cross_entropy_loss(out.ce_logits, grades); break;
    case LossKind::hybrid: task = hybrid_loss(out.h_f, out.ce_logits, grades, cfg.ce_weight); break;
  }
  if (cfg.dcca_active()) {
    const auto proj = model.projections();
    s.parts = combine_overall(task, dcca_loss(out.h_e, out.h_l, proj.eso_for_liver, proj.liver),
                              dcca_loss(out.h_e, out.h_s, proj.eso_for_spleen, proj.spleen), lambda);
  } else {
    s.parts = OverallLoss{task, task, Tensor{}, Tensor{}};
  }
  return s;
}

struct TrainResult {
  std::vector<LogRow> log;
  std::size_t best_epoch = 0;
  double best_val_acc = 0.0, best_val_tau = 0.0;
  double initial_train_ordinal = 0.0;  // mean over the training set before the first step
  double final_train_ordinal = 0.0;    // mean over the last epoch's batches
};

using EpochCallback = std::function<void(const LogRow&)>;

// Trains `model` in place; on return it holds the best-validation weights
// (or the last epoch's weights when there is no validation split).
inline TrainResult train(MoonModel& model, const Dataset& data, const TrainConfig& tc, const EpochCallback& on_epoch = {}) {
  const auto& mcfg = model.config();
  tc.validate(mcfg);
  const auto& train_set = data.train;
  const std::size_t min_batch = mcfg.dcca_active() ? 4 : 1;
  if (train_set.size() < min_batch)
    throw ConfigError("train: need at least " + std::to_string(min_batch) + " training subjects, got " +
                      std::to_string(train_set.size()));

  TrainResult res;
  {
    const auto p = predict(model, train_set);
    double total = 0.0;
    for (std::size_t i = 0; i < p.labels.size(); ++i) {
      const auto enc = ordinal_encode(p.labels[i], mcfg.grades);
      for (std::size_t j = 0; j < enc.size(); ++j) total += (p.thresholds[i][j] - enc[j]) * (p.thresholds[i][j] - enc[j]);
    }
    res.initial_train_ordinal = total / static_cast<double>(p.labels.size());
  }

  auto params = model.params().tensors();
  AdamState adam;
  std::vector<std::vector<double>> best;
  bool have_best = false;
  const bool augment = tc.augment_flips || tc.intensity_jitter > 0.0;

  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    LogRow row;
    row.epoch = epoch + 1;
    row.lr = lr_schedule(epoch, tc.learning_rate, tc.decay_every);
    double sum_overall = 0, sum_ord = 0, sum_dl = 0, sum_ds = 0;
    std::size_t seen = 0;
    const auto batches = epoch_batches(train_set.size(), tc.batch_size, min_batch, tc.seed, epoch);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      std::vector<ModelInput> augmented;
      std::vector<const ModelInput*> batch;
      std::vector<int> grades;
      if (augment) augmented.reserve(batches[b].size());
      for (auto i : batches[b]) {
        grades.push_back(train_set[i].grade);
        if (augment) {
          Rng rng(derive_seed(tc.seed, "augment", epoch * train_set.size() + i));
          ModelInput a = train_set[i];
          for (auto& v : a.volumes) v = augment_volume(v, tc.augment_flips, tc.intensity_jitter, rng);
          augmented.push_back(std::move(a));
          batch.push_back(&augmented.back());
        } else {
          batch.push_back(&train_set[i]);
        }
      }

      reset_nonfinite_tracking();
      const auto out = model.forward_batch(batch);
      const auto losses = batch_objective(model, out, grades, tc.lambda);
      const double total = losses.parts.total.item();
      if (!std::isfinite(total)) {
        const auto& op = first_nonfinite_op();
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(b + 1) +
                           "; first non-finite op: " + (op.empty() ? "unknown" : op));
      }
      model.params().zero_grad();
      losses.parts.total.backward();
      for (const auto& e : model.params().entries()) {
        if (!e.tensor.has_grad()) continue;
        for (double g : e.tensor.grad())
          if (!std::isfinite(g))
            throw NumericError("non-finite gradient for parameter '" + e.name + "' at epoch " + std::to_string(epoch + 1));
      }
      adam_step(params, adam, row.lr);

      const double w = static_cast<double>(grades.size());
      sum_overall += total * w;
      sum_ord += losses.ordinal.item() * w;
      if (losses.parts.dcca_liver.defined()) {
        sum_dl += losses.parts.dcca_liver.item() * w;
        sum_ds += losses.parts.dcca_spleen.item() * w;
      }
      seen += grades.size();
    }
    const double n = static_cast<double>(seen);
    row.overall = sum_overall / n;
    row.ordinal = sum_ord / n;
    if (mcfg.dcca_active()) {
      row.dcca_l = sum_dl / n;
      row.dcca_s = sum_ds / n;
    }
    res.final_train_ordinal = row.ordinal;

    if (!data.val.empty()) {
      const auto p = predict(model, data.val);
      row.val_acc = accuracy_of(p);
      row.val_tau = tau_of(p);
      const bool better = !have_best || *row.val_acc > res.best_val_acc ||
                          (*row.val_acc == res.best_val_acc && *row.val_tau > res.best_val_tau);
      if (better) {
        have_best = true;
        res.best_epoch = row.epoch;
        res.best_val_acc = *row.val_acc;
        res.best_val_tau = *row.val_tau;
        best.clear();
        for (const auto& t : params) best.emplace_back(t.values().begin(), t.values().end());
      }
    }
    res.log.push_back(row);
    if (on_epoch) on_epoch(row);
  }

  if (have_best) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto v = params[i].mutable_values();
      std::copy(best[i].begin(), best[i].end(), v.begin());
    }
  } else {
    res.best_epoch = tc.epochs;
  }
  model.params().zero_grad();
  return res;
}

}  // namespace moon
