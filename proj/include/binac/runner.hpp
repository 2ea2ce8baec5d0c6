#pragma once

/**
 * Experiment runner: the shared implementation behind the CLI subcommands.
 *
 * run_train writes, under the resolved output directory:
 *   config.resolved.json   the fully-materialised config that produced the run
 *   run.jsonl              one record per iteration (see diagnostics.hpp)
 *   snapshots/actor.policy, snapshots/critic.policy
 *
 * Relative output directories resolve against $BINAC_OUTPUT_ROOT when set,
 * else against the working directory. Nothing written here depends on time
 * or machine, so rerunning a config overwrites with identical bytes.
 */

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "binac/config.hpp"
#include "binac/diagnostics.hpp"
#include "binac/oracle.hpp"
#include "binac/policy_io.hpp"
#include "binac/trainers.hpp"

namespace binac {

inline std::filesystem::path resolve_output_dir(const std::string& output_dir) {
  std::filesystem::path p(output_dir);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("BINAC_OUTPUT_ROOT"); root && *root)
    return std::filesystem::path(root) / p;
  return p;
}

// ---------------------------------------------------------------------------
// train

struct TrainArtifacts {
  std::filesystem::path dir;
  std::filesystem::path run_log;
  std::filesystem::path actor_snapshot;
  std::filesystem::path critic_snapshot;
  RunHistory history;
};

inline TrainArtifacts run_train(const ExperimentConfig& cfg) {
  cfg.validate();
  TrainArtifacts art;
  art.dir = resolve_output_dir(cfg.output_dir);
  std::error_code ec;
  std::filesystem::create_directories(art.dir / "snapshots", ec);
  if (ec) throw IoError("train: cannot create " + (art.dir / "snapshots").string());

  {
    std::ofstream out(art.dir / "config.resolved.json", std::ios::binary);
    if (!out) throw IoError("train: cannot write resolved config");
    out << cfg.to_json().dump(2) << "\n";
  }

  const auto task = cfg.make_task_instance();
  PolicyPair pair = cfg.make_policies();

  art.run_log = art.dir / "run.jsonl";
  json header = {{"mode", cfg.trainer.mode},
                 {"task", cfg.task.name},
                 {"seed", cfg.trainer.seed},
                 {"iterations", cfg.trainer.iterations},
                 {"uniform_policy_reward", task->uniform_policy_reward()}};
  RunLogWriter log(art.run_log, header);

  RunOptions opts;
  opts.oracle_eval.enabled = cfg.oracle.enabled;
  opts.oracle_eval.every = cfg.oracle.every;
  opts.oracle_eval.budget.max_trajectories = cfg.oracle.max_trajectories;
  opts.sink = [&log](const RunRecord& r) { log.record(r); };

  if (cfg.trainer.mode == "grpo")
    art.history = train_grpo(cfg.trainer, *pair.actor, *task, opts);
  else
    art.history = train_binac(cfg.trainer, pair, *task, opts);
  log.flush();

  art.actor_snapshot = art.dir / "snapshots" / "actor.policy";
  art.critic_snapshot = art.dir / "snapshots" / "critic.policy";
  save_policy(*pair.actor, art.actor_snapshot);
  save_policy(*pair.critic, art.critic_snapshot);
  return art;
}

// ---------------------------------------------------------------------------
// eval

struct EvalReport {
  std::vector<double> accuracy;                      // sampled, per turn
  std::vector<double> exact_accuracy;                // enumerated, per turn (may be empty)
  std::optional<CompatibilityStats> compatibility;   // turns >= 2
  FeedbackProbe probe;                               // sampled usefulness
  std::optional<double> exact_usefulness;            // enumerated (may be absent)
  std::filesystem::path csv;                         // written summary
};

namespace detail {

inline FeedbackSource eval_feedback_source(const ExperimentConfig& cfg,
                                           const PolicyParams& critic) {
  if (mode_uses_fixed_feedback(cfg.trainer.mode)) {
    return FeedbackSource::constant(TokenSeq(
        Role::feedback,
        Tokens(static_cast<std::size_t>(cfg.policy.feedback_len), *cfg.trainer.fixed_feedback_token)));
  }
  return FeedbackSource::from_critic(critic);
}

inline void check_snapshot_matches(const PolicyParams& loaded, const PolicySpec& expected,
                                   const char* which) {
  if (!(loaded.spec() == expected))
    throw ConfigError(std::string("eval: ") + which +
                      " snapshot does not match the config's policy shape");
}

}  // namespace detail

inline EvalReport run_eval(const ExperimentConfig& cfg, const std::filesystem::path& snapshots,
                           std::optional<int> turns_override = std::nullopt) {
  cfg.validate();
  const int turns = turns_override.value_or(cfg.eval.turns);
  if (turns < 1) throw ConfigError("eval: turns must be >= 1");

  const PolicyParams actor = load_policy(snapshots / "actor.policy");
  const PolicyParams critic = load_policy(snapshots / "critic.policy");
  detail::check_snapshot_matches(actor, cfg.actor_spec(), "actor");
  detail::check_snapshot_matches(critic, cfg.critic_spec(), "critic");

  const auto task = cfg.make_task_instance();
  const FeedbackSource fb = detail::eval_feedback_source(cfg, critic);

  EvalReport rep;
  const std::uint64_t seed = derive_seed(cfg.trainer.seed, "eval");
  const EvalResult ev = evaluate(actor, fb, *task, turns, cfg.eval.n_prompts, seed,
                                 cfg.policy.decode_temperature);
  rep.accuracy = ev.accuracy;
  if (turns >= 2) rep.compatibility = compatibility_stats(ev.flags[0], ev.flags[1]);
  rep.probe = feedback_usefulness(actor, fb, *task, cfg.eval.n_prompts,
                                  derive_seed(cfg.trainer.seed, "probe"));
  try {
    oracle::EnumerationBudget budget{cfg.oracle.max_trajectories};
    rep.exact_accuracy = oracle::exact_turn_rewards(actor, fb, *task, turns, budget);
    rep.exact_usefulness = oracle::exact_feedback_usefulness(actor, fb, *task, budget);
  } catch (const oracle::BudgetExceeded&) {
    // sampled numbers stand alone
  }

  rep.csv = resolve_output_dir(cfg.output_dir) / "eval.csv";
  std::error_code ec;
  std::filesystem::create_directories(rep.csv.parent_path(), ec);
  if (ec) throw IoError("eval: cannot create " + rep.csv.parent_path().string());
  std::ofstream out(rep.csv, std::ios::binary);
  if (!out) throw IoError("eval: cannot write " + rep.csv.string());
  out << "metric,turn,value,se\n";
  auto fmt = [](double v) { return detail::format_double(v); };
  for (int t = 0; t < turns; ++t)
    out << "accuracy," << (t + 1) << "," << fmt(rep.accuracy[static_cast<std::size_t>(t)]) << ",\n";
  for (std::size_t t = 0; t < rep.exact_accuracy.size(); ++t)
    out << "exact_accuracy," << (t + 1) << "," << fmt(rep.exact_accuracy[t]) << ",\n";
  if (rep.compatibility) {
    const CompatibilityStats& cs = *rep.compatibility;
    out << "delta_acc,," << fmt(cs.delta_acc) << ",\n";
    out << "p_incorrect_to_correct,," << fmt(cs.p_incorrect_to_correct) << ",\n";
    out << "p_correct_to_incorrect,," << fmt(cs.p_correct_to_incorrect) << ",\n";
  }
  out << "feedback_usefulness,," << fmt(rep.probe.difference.mean) << ","
      << fmt(rep.probe.difference.se) << "\n";
  if (rep.exact_usefulness) out << "exact_feedback_usefulness,," << fmt(*rep.exact_usefulness) << ",\n";
  out.flush();
  if (!out) throw IoError("eval: write failed for " + rep.csv.string());
  return rep;
}

// ---------------------------------------------------------------------------
// oracle-check
//
// Compares every sampled estimator against its enumeration oracle on the
// configured instance, and the exact gradients against central differences.
// The optional sabotage hook flips the sign of one sampled estimate so the
// check's failure path can be demonstrated end to end.

struct CheckLine {
  std::string name;
  double value = 0.0;      // measured deviation
  double threshold = 0.0;  // pass iff value <= threshold
  bool pass = false;
};

struct OracleCheckReport {
  std::vector<CheckLine> lines;
  bool pass = true;

  void add(std::string name, double value, double threshold) {
    CheckLine l{std::move(name), value, threshold, value <= threshold};
    pass = pass && l.pass;
    lines.push_back(std::move(l));
  }
};

namespace detail {

// Deviation between a sampled table and its oracle, as a multiple of the
// per-component SE (with an absolute floor so zero-SE components compare
// exactly).
inline double se_units(const GradientEstimate& mc, const GradientTable& exact, double floor) {
  double worst = 0.0;
  const std::vector<double> zero(static_cast<std::size_t>(mc.grad.vocab_size), 0.0);
  auto scan = [&](const GradientTable& a) {
    for (const auto& [key, row] : a.rows) {
      for (std::size_t i = 0; i < row.size(); ++i) {
        auto mit = mc.grad.rows.find(key);
        const double m = mit == mc.grad.rows.end() ? 0.0 : mit->second[i];
        auto eit = exact.rows.find(key);
        const double e = eit == exact.rows.end() ? 0.0 : eit->second[i];
        auto sit = mc.se.rows.find(key);
        const double s = sit == mc.se.rows.end() ? 0.0 : sit->second[i];
        const double dev = std::abs(m - e) / (s + floor);
        worst = std::max(worst, dev);
      }
    }
  };
  scan(mc.grad);
  scan(exact);
  return worst;
}

}  // namespace detail

inline OracleCheckReport run_oracle_check(const ExperimentConfig& cfg,
                                          const std::string& sabotage = "none",
                                          long long mc_samples = 20000) {
  cfg.validate();
  if (sabotage != "none" && sabotage != "actor" && sabotage != "critic" && sabotage != "grpo")
    throw ConfigError("oracle-check: sabotage must be none|actor|critic|grpo");

  const auto task = cfg.make_task_instance();
  PolicyPair pair = cfg.make_policies();
  const PolicyParams& actor = *pair.actor;
  const PolicyParams& critic = *pair.critic;

  // A deliberately different actor stands in for the lagged checkpoint.
  PolicySpec ck_spec = actor.spec();
  ck_spec.init_logit_scale = std::max(0.3, ck_spec.init_logit_scale);
  ck_spec.init_seed = derive_seed(ck_spec.init_seed, "oracle-check-checkpoint");
  const PolicyParams checkpoint(ck_spec);

  const double lambda = cfg.trainer.lambda;
  const oracle::EnumerationBudget budget{cfg.oracle.max_trajectories};
  const std::uint64_t seed = derive_seed(cfg.trainer.seed, "oracle-check");
  const EstimatorOptions eopt{cfg.trainer.threads, true};
  const FeedbackSource fb = FeedbackSource::from_critic(critic);
  OracleCheckReport rep;
  const double se_floor = 1e-12;
  const double se_threshold = 3.0;

  // Expected reward: sampled mean vs enumeration.
  {
    const double exact = oracle::exact_expected_reward(actor, fb, *task, budget);
    std::vector<double> rs(static_cast<std::size_t>(mc_samples));
    for (long long i = 0; i < mc_samples; ++i) {
      Rng rng(derive_seed(seed, "reward-traj", static_cast<std::uint64_t>(i)));
      rs[static_cast<std::size_t>(i)] = rollout(actor, fb, *task, rng).reward;
    }
    const MeanSe m = mean_se(rs);
    rep.add("expected_reward", std::abs(m.mean - exact) / (m.se + se_floor), se_threshold);
  }

  // Actor gradient.
  {
    GradientEstimate mc =
        actor_gradient(actor, fb, *task, lambda, mc_samples, derive_seed(seed, "actor"), eopt);
    if (sabotage == "actor") mc.grad.scale(-1.0);
    const GradientTable exact = oracle::exact_actor_gradient(actor, fb, *task, lambda, budget);
    rep.add("actor_gradient", detail::se_units(mc, exact, se_floor), se_threshold);
  }

  // Critic gradient (bilevel, lagged checkpoint).
  {
    GradientEstimate mc = critic_gradient(actor, critic, checkpoint, *task, lambda, mc_samples,
                                          derive_seed(seed, "critic"), eopt);
    if (sabotage == "critic") mc.grad.scale(-1.0);
    const GradientTable exact =
        oracle::exact_critic_gradient(actor, critic, checkpoint, *task, lambda, budget);
    rep.add("critic_gradient", detail::se_units(mc, exact, se_floor), se_threshold);
  }

  // GRPO gradient.
  {
    const int n_groups = static_cast<int>(std::max<long long>(2, mc_samples / cfg.trainer.group_size));
    GradientEstimate mc = grpo_gradient(actor, *task, cfg.trainer.group_size,
                                        cfg.trainer.advantage_epsilon, n_groups,
                                        derive_seed(seed, "grpo"), eopt);
    if (sabotage == "grpo") mc.grad.scale(-1.0);
    const GradientTable exact = oracle::exact_grpo_gradient(
        actor, *task, cfg.trainer.group_size, cfg.trainer.advantage_epsilon, budget);
    rep.add("grpo_gradient", detail::se_units(mc, exact, se_floor), se_threshold);
  }

  // Finite differences against the exact gradients.
  {
    const double step = 1e-5, fd_threshold = 1e-6;
    const GradientTable ga = oracle::exact_actor_gradient(actor, fb, *task, lambda, budget);
    const double fd_a = oracle::fd_check(
        [&](const PolicyParams& p) {
          return (1.0 + lambda) * oracle::exact_expected_reward(p, fb, *task, budget);
        },
        actor, ga, step);
    rep.add("fd_actor_gradient", fd_a, fd_threshold);

    const GradientTable gc =
        oracle::exact_critic_gradient(actor, critic, checkpoint, *task, lambda, budget);
    const double fd_c = oracle::fd_check(
        [&](const PolicyParams& phi) {
          const double l_cur =
              oracle::exact_expected_reward(actor, FeedbackSource::from_critic(phi), *task, budget);
          const double l_ck = oracle::exact_expected_reward(
              checkpoint, FeedbackSource::from_critic(phi), *task, budget);
          return (1.0 + lambda) * l_cur - lambda * l_ck;
        },
        critic, gc, step);
    rep.add("fd_critic_gradient", fd_c, fd_threshold);
  }

  // Score-function expectation vanishes.
  {
    const TokenSeq x = task->prompt_at(0);
    const TokenSeq ctx[] = {x};
    const GradientTable zero = oracle::exact_score_expectation(actor, ctx, Role::first_response);
    rep.add("score_expectation_zero", zero.max_abs(), 1e-10);
  }

  return rep;
}

// ---------------------------------------------------------------------------
// plot-data

inline std::filesystem::path run_plotdata(const std::vector<std::filesystem::path>& logs,
                                          const std::filesystem::path& out_dir) {
  if (logs.empty()) throw ConfigError("plot-data: no input logs");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("plot-data: cannot create " + out_dir.string());
  const std::filesystem::path csv = out_dir / "runs.csv";
  std::ofstream out(csv, std::ios::binary);
  if (!out) throw IoError("plot-data: cannot write " + csv.string());
  auto fmt = [](double v) { return detail::format_double(v); };
  out << "run,iteration,mode,seed,u_hat,u_se,l_hat,l_se,lagrangian_hat,lagrangian_se,"
         "groups,advantage_collapse_freq,reward_all_zero_freq,"
         "cumulative_advantage_collapse_freq,cumulative_reward_all_zero_freq,"
         "grad_norm_actor,grad_norm_critic,oracle_reward,surrogate_iteration,"
         "trajectories_cumulative\n";
  for (const auto& path : logs) {
    const RunLog log = read_run_log(path);
    const std::string run = path.stem().string() == "run" && path.has_parent_path()
                                ? path.parent_path().filename().string()
                                : path.stem().string();
    for (const RunRecord& r : log.records) {
      out << run << "," << r.iteration << "," << r.mode << "," << r.seed << ","
          << fmt(r.objective.u_hat) << "," << fmt(r.objective.u_se) << ","
          << fmt(r.objective.l_hat) << "," << fmt(r.objective.l_se) << ","
          << fmt(r.objective.lagrangian_hat) << "," << fmt(r.objective.lagrangian_se) << ","
          << r.collapse.groups << "," << fmt(r.collapse.advantage_collapse_freq()) << ","
          << fmt(r.collapse.reward_all_zero_freq()) << ","
          << fmt(r.collapse_cumulative.advantage_collapse_freq()) << ","
          << fmt(r.collapse_cumulative.reward_all_zero_freq()) << "," << fmt(r.grad_norm_actor)
          << "," << fmt(r.grad_norm_critic) << ","
          << (r.oracle_reward ? fmt(*r.oracle_reward) : std::string()) << ","
          << r.surrogate_iteration << "," << r.trajectories_cumulative << "\n";
    }
  }
  out.flush();
  if (!out) throw IoError("plot-data: write failed for " + csv.string());
  return csv;
}

}  // namespace binac
