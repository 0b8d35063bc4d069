// Command implementations behind tools/moon. Each returns the process exit
// code; errors propagate as exceptions and are mapped by run_command.
#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moon/checkpoint.hpp"
#include "moon/cohort.hpp"
#include "moon/config.hpp"
#include "moon/dataset.hpp"
#include "moon/gradcheck_suite.hpp"
#include "moon/metrics.hpp"
#include "moon/priors.hpp"
#include "moon/trainer.hpp"

#ifndef MOON_VERSION
#define MOON_VERSION "dev"
#endif

namespace moon::cli {

namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

// Runs `fn`, printing any error to `err` and mapping it to an exit code.
inline int run_command(const std::function<int()>& fn, std::ostream& err = std::cerr) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

// ---- run manifest ------------------------------------------------------------

// manifest.json lists every emitted file with its size and FNV-1a hash, plus
// the effective configuration. Wall-clock timings go to timings.json so that
// the manifest itself is reproducible.
class RunRecord {
 public:
  RunRecord(std::string command, fs::path root) : command_(std::move(command)), root_(std::move(root)) {
    start_ = std::chrono::steady_clock::now();
  }

  void set_config(const FlatConfig& c) { config_ = c; }
  void set_seed(std::uint64_t s) { seed_ = s; }
  void add_artifact(const fs::path& p) { artifacts_.push_back(p); }
  void add_artifacts_under(const fs::path& dir) {
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.is_regular_file()) artifacts_.push_back(e.path());
  }
  void time(const std::string& phase, double seconds) { timings_.emplace_back(phase, seconds); }

  // Times `fn` under `phase`.
  template <class F>
  auto timed(const std::string& phase, F&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      time(phase, since(t0));
    } else {
      auto r = fn();
      time(phase, since(t0));
      return r;
    }
  }

  nlohmann::ordered_json manifest_json() const {
    nlohmann::ordered_json j;
    j["tool"] = "moon";
    j["version"] = MOON_VERSION;
    j["command"] = command_;
    if (seed_) j["seed"] = *seed_;
    nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
    for (const auto& [k, v] : config_.entries()) cfg[k] = v;
    j["config"] = cfg;
    std::vector<std::string> rel;
    for (const auto& p : artifacts_) rel.push_back(fs::relative(p, root_).generic_string());
    std::sort(rel.begin(), rel.end());
    rel.erase(std::unique(rel.begin(), rel.end()), rel.end());
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : rel) {
      const auto bytes = detail::read_file((root_ / r).string());
      char hash[17];
      std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a(bytes)));
      arr.push_back({{"path", r}, {"bytes", bytes.size()}, {"fnv1a64", hash}});
    }
    j["artifacts"] = arr;
    return j;
  }

  // Writes manifest.json and timings.json under `root` with the given file stem.
  void write(const std::string& stem = "") const {
    const std::string m = stem.empty() ? "manifest.json" : stem + ".manifest.json";
    const std::string t = stem.empty() ? "timings.json" : stem + ".timings.json";
    detail::write_file((root_ / m).string(), manifest_json().dump(2) + "\n");
    nlohmann::ordered_json tj;
    tj["command"] = command_;
    for (const auto& [k, v] : timings_) tj["seconds"][k] = v;
    tj["seconds"]["total"] = since(start_);
    detail::write_file((root_ / t).string(), tj.dump(2) + "\n");
  }

 private:
  static double since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  std::string command_;
  fs::path root_;
  FlatConfig config_;
  std::optional<std::uint64_t> seed_;
  std::vector<fs::path> artifacts_;
  std::vector<std::pair<std::string, double>> timings_;
  std::chrono::steady_clock::time_point start_;
};

inline void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string() + (ec ? ": " + ec.message() : ""));
}

inline FlatConfig load_configs(const std::vector<std::string>& paths) {
  FlatConfig c;
  for (const auto& p : paths) c.merge(FlatConfig::load(p));
  return c;
}

// ---- synth -------------------------------------------------------------------

struct SynthArgs {
  std::vector<std::string> configs;
  std::string out;
  std::optional<std::uint64_t> seed;
};

inline int cmd_synth(const SynthArgs& a, std::ostream& log = std::cerr) {
  FlatConfig fc = load_configs(a.configs);
  if (a.seed) fc.set("cohort.seed", std::to_string(*a.seed));
  const auto cfg = CohortConfig::from_config(fc);
  const fs::path out(a.out);
  make_dir(out);
  RunRecord rec("synth", out);
  rec.set_config(fc);
  rec.set_seed(cfg.seed);
  const auto rows = rec.timed("synthesize", [&] { return write_cohort(out.string(), cfg); });
  detail::write_file((out / "config.cfg").string(), fc.to_text());
  rec.add_artifacts_under(out / "subjects");
  rec.add_artifact(out / "manifest.csv");
  rec.add_artifact(out / "config.cfg");
  rec.write();
  log << "synth: " << rows.size() << " subjects written to " << out.string() << "\n";
  return kOk;
}

// ---- priors ------------------------------------------------------------------

struct PriorsArgs {
  std::string cohort;
  std::string out;  // CSV path
  int connectivity = 26;
  double max_skip_fraction = 0.05;
};

inline int cmd_priors(const PriorsArgs& a, std::ostream& log = std::cerr) {
  const fs::path dir(a.cohort);
  const auto rows = read_manifest((dir / "manifest.csv").string());
  const fs::path out(a.out);
  if (out.has_parent_path()) make_dir(out.parent_path());
  RunRecord rec("priors", out.has_parent_path() ? out.parent_path() : fs::path("."));
  FlatConfig fc;
  fc.set("priors.cohort", a.cohort);
  fc.set("priors.connectivity", std::to_string(a.connectivity));
  rec.set_config(fc);

  std::vector<std::optional<std::string>> lines(rows.size());
  std::vector<std::string> warnings(rows.size());
  rec.timed("extract", [&] {
    parallel_for(rows.size(), [&](std::size_t i) {
      std::array<Mask, kOrgans> masks;
      for (int o = 0; o < kOrgans; ++o) {
        const auto p = dir / rows[i].mask_paths[o];
        if (!fs::exists(p)) {
          warnings[i] = "warning: " + rows[i].id + ": missing mask " + p.string() + ", row skipped";
          return;
        }
        masks[o] = read_mvol<std::uint8_t>(p.string());
      }
      lines[i] = prior_csv_row(rows[i].id, extract_priors(masks[0], masks[1], masks[2], a.connectivity));
    });
  });
  std::string csv = std::string(kPriorCsvHeader) + "\n";
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (lines[i]) {
      csv += *lines[i] + "\n";
    } else {
      ++skipped;
      log << warnings[i] << "\n";
    }
  }
  detail::write_file(out.string(), csv);
  rec.add_artifact(out);
  rec.write(out.stem().string());
  log << "priors: " << rows.size() - skipped << " rows written to " << out.string() << "\n";
  if (!rows.empty() && static_cast<double>(skipped) > a.max_skip_fraction * static_cast<double>(rows.size()))
    throw IoError(std::to_string(skipped) + " of " + std::to_string(rows.size()) +
                  " subjects skipped for missing masks (more than 5%)");
  return kOk;
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  std::string cohort;
  std::vector<std::string> configs;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy, prior, loss;
  std::optional<double> lambda;
};

inline FlatConfig train_overrides(FlatConfig fc, const TrainArgs& a) {
  if (a.seed) fc.set("train.seed", std::to_string(*a.seed));
  if (a.strategy) fc.set("model.ori.strategy", *a.strategy);
  if (a.prior) fc.set("model.prior", *a.prior);
  if (a.loss) fc.set("model.loss", *a.loss);
  if (a.lambda) fc.set("train.lambda", detail::fmt_double(*a.lambda));
  return fc;
}

inline int cmd_train(const TrainArgs& a, std::ostream& log = std::cerr) {
  const FlatConfig fc = train_overrides(load_configs(a.configs), a);
  const auto mcfg = ModelConfig::from_config(fc);
  const auto tcfg = TrainConfig::from_config(fc);
  tcfg.validate(mcfg);
  const fs::path out(a.out);
  make_dir(out);
  RunRecord rec("train", out);
  rec.set_config(fc);
  rec.set_seed(tcfg.seed);

  const auto data = rec.timed("load", [&] { return load_dataset(a.cohort, mcfg, {Split::train, Split::val}); });
  if (data.train.empty()) throw ConfigError("train: cohort has no training subjects");
  log << "train: " << data.train.size() << " train / " << data.val.size() << " val subjects, "
      << parameter_count(mcfg) << " parameters\n";
  MoonModel model(mcfg, tcfg.seed);
  const auto res = rec.timed("train", [&] {
    return train(model, data, tcfg, [&](const LogRow& r) { log << "  " << log_csv_row(r) << "\n"; });
  });

  save_checkpoint((out / "checkpoint").string(), model);
  detail::write_file((out / "train_log.csv").string(), training_log_csv(res.log));
  detail::write_file((out / "config.cfg").string(), fc.to_text());
  nlohmann::ordered_json summary;
  summary["best_epoch"] = res.best_epoch;
  summary["best_val_acc"] = res.best_val_acc;
  summary["best_val_tau"] = res.best_val_tau;
  summary["initial_train_ordinal"] = res.initial_train_ordinal;
  summary["final_train_ordinal"] = res.final_train_ordinal;
  summary["parameters"] = parameter_count(mcfg);
  detail::write_file((out / "summary.json").string(), summary.dump(2) + "\n");
  rec.add_artifacts_under(out / "checkpoint");
  for (const char* f : {"train_log.csv", "config.cfg", "summary.json"}) rec.add_artifact(out / f);
  rec.write();
  log << "train: best epoch " << res.best_epoch << ", val accuracy " << res.best_val_acc << "\n";
  return kOk;
}

// ---- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string cohort;
  std::string split = "test";
  std::string out;
  std::uint64_t seed = 1;
  std::size_t replicates = kBootstrapReplicates;
};

inline std::string predictions_csv(const Predictions& p) {
  std::string out = "subject_id,grade,predicted,score";
  if (!p.thresholds.empty())
    for (std::size_t j = 0; j < p.thresholds[0].size(); ++j) out += ",h" + std::to_string(j + 1);
  out += "\n";
  for (std::size_t i = 0; i < p.ids.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9f", p.scores[i]);
    out += p.ids[i] + "," + std::to_string(p.labels[i]) + "," + std::to_string(p.predicted[i]) + "," + buf;
    for (double h : p.thresholds[i]) {
      std::snprintf(buf, sizeof buf, ",%.9f", h);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

inline int cmd_eval(const EvalArgs& a, std::ostream& log = std::cerr) {
  const Split split = parse_split(a.split);
  const auto model = load_checkpoint(a.checkpoint);
  const auto& mcfg = model.config();
  const fs::path out(a.out);
  make_dir(out);
  RunRecord rec("eval", out);
  FlatConfig fc = mcfg.to_config();
  fc.set("eval.checkpoint", a.checkpoint);
  fc.set("eval.cohort", a.cohort);
  fc.set("eval.split", a.split);
  fc.set("eval.seed", std::to_string(a.seed));
  fc.set("eval.replicates", std::to_string(a.replicates));
  rec.set_config(fc);
  rec.set_seed(a.seed);

  const auto data = rec.timed("load", [&] { return load_dataset(a.cohort, mcfg, {split}); });
  const auto& inputs = data.part(split);
  if (inputs.empty()) throw ConfigError("eval: split '" + a.split + "' is empty");
  const auto pred = rec.timed("predict", [&] { return predict(model, inputs); });
  const auto report = rec.timed("metrics", [&] {
    return evaluate(pred.labels, pred.predicted, pred.scores, mcfg.grades, a.seed, a.replicates);
  });

  detail::write_file((out / "report.csv").string(), report_csv(report));
  detail::write_file((out / "report.json").string(), report_json(report));
  detail::write_file((out / "confusion.csv").string(), confusion_csv(report.confusion));
  detail::write_file((out / "predictions.csv").string(), predictions_csv(pred));
  for (int t = 1; t < mcfg.grades; ++t) {
    const auto name = "roc_" + threshold_label(t, mcfg.grades) + ".csv";
    detail::write_file((out / name).string(), roc_csv(report.roc[static_cast<std::size_t>(t - 1)]));
    rec.add_artifact(out / name);
  }
  for (const char* f : {"report.csv", "report.json", "confusion.csv", "predictions.csv"}) rec.add_artifact(out / f);
  rec.write();
  const auto& acc = report.get("multiclass_acc");
  const auto& tau = report.get("kendall_tau_b");
  log << "eval: " << inputs.size() << " subjects, accuracy " << acc.value.value_or(0.0) << ", tau "
      << tau.value.value_or(0.0) << "\n";
  return kOk;
}

// ---- gradcheck ---------------------------------------------------------------

struct GradcheckArgs {
  std::string scope = "all";
  std::size_t trials = 100;
  std::uint64_t seed = 2024;
  std::string corrupt;  // test hook: op whose backward is deliberately wrong
  std::string out;      // optional directory for gradcheck.txt + manifest
};

inline int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out = std::cout) {
  std::vector<std::string> scopes;
  if (a.scope == "all") scopes = gradcheck_scopes();
  else scopes = {a.scope};
  for (const auto& s : scopes) gradcheck_cases(s);  // validate names before running anything
  std::optional<RunRecord> rec;
  if (!a.out.empty()) {
    make_dir(a.out);
    rec.emplace("gradcheck", a.out);
    FlatConfig fc;
    fc.set("gradcheck.scope", a.scope);
    fc.set("gradcheck.trials", std::to_string(a.trials));
    if (!a.corrupt.empty()) fc.set("gradcheck.corrupt", a.corrupt);
    rec->set_config(fc);
    rec->set_seed(a.seed);
  }
  set_corrupt_backward_op(a.corrupt);
  std::vector<GradCaseResult> rows;
  for (const auto& s : scopes) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = run_gradcheck(s, a.trials, a.seed);
    if (rec) rec->time(s, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    rows.insert(rows.end(), r.begin(), r.end());
  }
  set_corrupt_backward_op("");
  const auto failed = std::count_if(rows.begin(), rows.end(), [](const auto& r) { return !r.passed; });
  const std::string text =
      gradcheck_table(rows) + (failed ? std::to_string(failed) + " case(s) failed\n" : "all cases passed\n");
  out << text;
  if (rec) {
    const auto path = fs::path(a.out) / "gradcheck.txt";
    detail::write_file(path.string(), text);
    rec->add_artifact(path);
    rec->write();
  }
  return failed ? kNumeric : kOk;
}

}  // namespace moon::cli
