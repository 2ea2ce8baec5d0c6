// Command-line front end: train / eval / oracle-check / plot-data.
//
// Exit codes: 0 success, 1 configuration or validation error (including
// refused enumeration budgets), 2 oracle-check failure, 3 I/O failure.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "binac/config.hpp"
#include "binac/oracle.hpp"
#include "binac/runner.hpp"

namespace {

int cmd_train(const std::string& config_path) {
  const binac::ExperimentConfig cfg = binac::ExperimentConfig::load(config_path);
  const binac::TrainArtifacts art = binac::run_train(cfg);
  const binac::RunRecord& last = art.history.records.back();
  std::printf("trained %s on %s for %lld iterations (seed %llu)\n", cfg.trainer.mode.c_str(),
              cfg.task.name.c_str(), static_cast<long long>(cfg.trainer.iterations),
              static_cast<unsigned long long>(cfg.trainer.seed));
  std::printf("  final batch reward   %.4f +/- %.4f\n", last.objective.u_hat, last.objective.u_se);
  if (last.oracle_reward)
    std::printf("  final oracle reward  %.6f\n", *last.oracle_reward);
  std::printf("  run log              %s\n", art.run_log.string().c_str());
  std::printf("  snapshots            %s\n", art.actor_snapshot.parent_path().string().c_str());
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& snapshots,
             std::optional<int> turns) {
  const binac::ExperimentConfig cfg = binac::ExperimentConfig::load(config_path);
  const binac::EvalReport rep = binac::run_eval(cfg, snapshots, turns);
  for (std::size_t t = 0; t < rep.accuracy.size(); ++t) {
    std::printf("turn %zu accuracy  %.4f", t + 1, rep.accuracy[t]);
    if (t < rep.exact_accuracy.size()) std::printf("   (exact %.6f)", rep.exact_accuracy[t]);
    std::printf("\n");
  }
  if (rep.compatibility) {
    std::printf("delta_acc %.4f   i->c %.4f   c->i %.4f\n", rep.compatibility->delta_acc,
                rep.compatibility->p_incorrect_to_correct,
                rep.compatibility->p_correct_to_incorrect);
  }
  std::printf("feedback usefulness %.4f +/- %.4f", rep.probe.difference.mean,
              rep.probe.difference.se);
  if (rep.exact_usefulness) std::printf("   (exact %.6f)", *rep.exact_usefulness);
  std::printf("\nwrote %s\n", rep.csv.string().c_str());
  return 0;
}

int cmd_oracle_check(const std::string& config_path, const std::string& sabotage) {
  const binac::ExperimentConfig cfg = binac::ExperimentConfig::load(config_path);
  const binac::OracleCheckReport rep = binac::run_oracle_check(cfg, sabotage);
  for (const binac::CheckLine& l : rep.lines)
    std::printf("%-24s %12.6g  (threshold %g)  %s\n", l.name.c_str(), l.value, l.threshold,
                l.pass ? "ok" : "FAIL");
  if (!rep.pass) {
    std::fprintf(stderr, "oracle-check: FAILED\n");
    return 2;
  }
  std::printf("oracle-check: all estimators agree with enumeration\n");
  return 0;
}

int cmd_plotdata(const std::vector<std::string>& logs, const std::string& out_dir) {
  std::vector<std::filesystem::path> paths(logs.begin(), logs.end());
  const std::filesystem::path csv = binac::run_plotdata(paths, out_dir);
  std::printf("wrote %s\n", csv.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale laboratory for bilevel natural-language actor-critic training"};
  app.require_subcommand(1);

  std::string config_path, snapshots, out_dir;
  std::string sabotage = "none";
  int turns = -1;
  std::vector<std::string> logs;

  CLI::App* train = app.add_subcommand("train", "train a policy from a config");
  train->add_option("config", config_path, "experiment config (JSON)")->required();

  CLI::App* eval = app.add_subcommand("eval", "evaluate saved snapshots over multiple turns");
  eval->add_option("config", config_path, "experiment config (JSON)")->required();
  eval->add_option("--snapshots", snapshots, "directory with actor.policy/critic.policy")
      ->required();
  eval->add_option("--turns", turns, "override the config's eval.turns");

  CLI::App* check = app.add_subcommand("oracle-check",
                                       "compare sampled estimators against enumeration oracles");
  check->add_option("config", config_path, "experiment config (JSON)")->required();
  check
      ->add_option("--sabotage", sabotage,
                   "flip the sign of one sampled estimate (actor|critic|grpo) to demonstrate "
                   "the failure path")
      ->check(CLI::IsMember({"none", "actor", "critic", "grpo"}));

  CLI::App* plot = app.add_subcommand("plot-data", "export run logs as tidy CSV");
  plot->add_option("logs", logs, "run.jsonl files")->required();
  plot->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) return cmd_train(config_path);
    if (*eval) return cmd_eval(config_path, snapshots,
                               turns > 0 ? std::optional<int>(turns) : std::nullopt);
    if (*check) return cmd_oracle_check(config_path, sabotage);
    if (*plot) return cmd_plotdata(logs, out_dir);
  } catch (const binac::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const binac::oracle::BudgetExceeded& e) {
    std::fprintf(stderr, "refused: %s\n", e.what());
    return 1;
  } catch (const binac::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const binac::ContractViolation& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
