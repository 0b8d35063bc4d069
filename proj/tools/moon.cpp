#include <iostream>

#include "CLI11.hpp"
#include "moon/cli.hpp"

using namespace moon::cli;

int main(int argc, char** argv) {
  CLI::App app{"Varices grading toolkit: synthetic cohorts, priors, training, evaluation"};
  app.set_version_flag("--version", std::string(MOON_VERSION));
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "write a synthetic cohort (volumes + manifest.csv)");
  s->add_option("--config", synth.configs, "cohort config file(s), later ones override")->check(CLI::ExistingFile);
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_option("--seed", synth.seed, "override cohort.seed");

  PriorsArgs priors;
  auto* p = app.add_subcommand("priors", "extract clinical priors from cohort masks");
  p->add_option("--cohort", priors.cohort, "cohort directory")->required()->check(CLI::ExistingDirectory);
  p->add_option("--out", priors.out, "output CSV path")->required();
  p->add_option("--connectivity", priors.connectivity, "component connectivity")->check(CLI::IsMember({6, 26}));

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a model and write a checkpoint");
  t->add_option("--cohort", train.cohort, "cohort directory")->required()->check(CLI::ExistingDirectory);
  t->add_option("--config", train.configs, "model/train config file(s)")->check(CLI::ExistingFile);
  t->add_option("--out", train.out, "run directory")->required();
  t->add_option("--seed", train.seed, "override train.seed");
  t->add_option("--strategy", train.strategy, "override model.ori.strategy");
  t->add_option("--lambda", train.lambda, "override train.lambda");
  t->add_option("--prior", train.prior, "override model.prior (none|onehot)");
  t->add_option("--loss", train.loss, "override model.loss (ordinal|ce|hybrid)");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a cohort split");
  e->add_option("--checkpoint", eval.checkpoint, "checkpoint directory")->required();
  e->add_option("--cohort", eval.cohort, "cohort directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--split", eval.split, "train|val|test")->check(CLI::IsMember({"train", "val", "test"}));
  e->add_option("--out", eval.out, "report directory")->required();
  e->add_option("--seed", eval.seed, "bootstrap seed");
  e->add_option("--replicates", eval.replicates, "bootstrap replicates")->check(CLI::PositiveNumber);

  GradcheckArgs grad;
  auto* g = app.add_subcommand("gradcheck", "compare analytic gradients with central differences");
  g->add_option("--scope", grad.scope, "primitives|losses|ori|full|all");
  g->add_option("--trials", grad.trials, "random trials per case")->check(CLI::PositiveNumber);
  g->add_option("--seed", grad.seed, "trial seed");
  g->add_option("--out", grad.out, "also write gradcheck.txt and a manifest here");
  g->add_option("--corrupt", grad.corrupt)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& ok) {
    return app.exit(ok);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kConfig;
  }

  if (*s) return run_command([&] { return cmd_synth(synth); });
  if (*p) return run_command([&] { return cmd_priors(priors); });
  if (*t) return run_command([&] { return cmd_train(train); });
  if (*e) return run_command([&] { return cmd_eval(eval); });
  return run_command([&] {
    const auto t0 = std::chrono::steady_clock::now();
    const int rc = cmd_gradcheck(grad);
    std::cerr << "gradcheck: "
              << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
    return rc;
  });
}
