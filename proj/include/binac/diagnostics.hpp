#pragma once

/**
 * Training diagnostics and run logging.
 *
 * Collapse statistics count the degenerate GRPO groups (zero reward variance)
 * that produce exactly-zero advantages; the feedback-usefulness probe
 * measures how much matched feedback beats feedback shuffled across prompts;
 * compatibility statistics track promotion/demotion between the first and
 * refined answers of an evaluation batch.
 *
 * Run logs are JSON Lines: a schema-versioned header line followed by one
 * record per iteration. Records hold nothing wall-clock dependent, so a rerun
 * of the same config is byte-identical.
 */

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "binac/estimators.hpp"
#include "binac/policy.hpp"
#include "binac/tasks.hpp"
#include "binac/tokens.hpp"

namespace binac {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Collapse accounting.

struct CollapseStats {
  long long groups = 0;
  long long advantage_collapsed = 0;  // zero reward variance -> all-zero advantages
  long long reward_all_zero = 0;
  long long reward_all_one = 0;

  double advantage_collapse_freq() const {
    return groups ? static_cast<double>(advantage_collapsed) / static_cast<double>(groups) : 0.0;
  }
  double reward_all_zero_freq() const {
    return groups ? static_cast<double>(reward_all_zero) / static_cast<double>(groups) : 0.0;
  }

  void add(const CollapseStats& o) {
    groups += o.groups;
    advantage_collapsed += o.advantage_collapsed;
    reward_all_zero += o.reward_all_zero;
    reward_all_one += o.reward_all_one;
  }
};

inline CollapseStats collapse_stats(std::span<const GroupStats> groups) {
  CollapseStats c;
  for (const GroupStats& g : groups) {
    ++c.groups;
    if (g.stddev == 0.0) {
      ++c.advantage_collapsed;
      if (!g.rewards.empty() && g.rewards.front() == 0)
        ++c.reward_all_zero;
      else
        ++c.reward_all_one;
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Turn-1 vs turn-2 compatibility.

struct CompatibilityStats {
  long long n = 0;
  double acc_first = 0.0;
  double acc_refined = 0.0;
  double delta_acc = 0.0;
  long long incorrect_to_correct = 0;
  long long correct_to_incorrect = 0;
  // Rates conditioned on the turn-1 outcome.
  double p_incorrect_to_correct = 0.0;
  double p_correct_to_incorrect = 0.0;
};

inline CompatibilityStats compatibility_stats(std::span<const int> first,
                                              std::span<const int> refined) {
  if (first.size() != refined.size() || first.empty())
    throw ContractViolation("compatibility_stats: flag vectors must be equal-length, non-empty");
  CompatibilityStats s;
  s.n = static_cast<long long>(first.size());
  long long first_correct = 0, refined_correct = 0;
  for (std::size_t i = 0; i < first.size(); ++i) {
    first_correct += first[i] ? 1 : 0;
    refined_correct += refined[i] ? 1 : 0;
    if (!first[i] && refined[i]) ++s.incorrect_to_correct;
    if (first[i] && !refined[i]) ++s.correct_to_incorrect;
  }
  const double n = static_cast<double>(s.n);
  s.acc_first = static_cast<double>(first_correct) / n;
  s.acc_refined = static_cast<double>(refined_correct) / n;
  s.delta_acc = s.acc_refined - s.acc_first;
  const long long first_incorrect = s.n - first_correct;
  s.p_incorrect_to_correct =
      first_incorrect ? static_cast<double>(s.incorrect_to_correct) / static_cast<double>(first_incorrect)
                      : 0.0;
  s.p_correct_to_incorrect =
      first_correct ? static_cast<double>(s.correct_to_incorrect) / static_cast<double>(first_correct)
                    : 0.0;
  return s;
}

// ---------------------------------------------------------------------------
// Feedback-usefulness probe (sampled).
//
// Draw n exchanges, then refine each prompt twice: once with its own
// feedback, once with the feedback of the next exchange in the batch (a
// draw from the marginal, independent of this prompt). The paired mean
// difference estimates how much the feedback channel is actually worth.

struct FeedbackProbe {
  double matched_acc = 0.0;
  double shuffled_acc = 0.0;
  MeanSe difference;  // per-pair matched - shuffled
};

inline FeedbackProbe feedback_usefulness(const PolicyParams& actor, const FeedbackSource& fb,
                                         const Task& task, int n, std::uint64_t seed) {
  fb.validate();
  if (n < 2) throw ContractViolation("feedback_usefulness: n must be >= 2");
  struct Draw {
    TokenSeq x, y0, z;
  };
  std::vector<Draw> draws;
  draws.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "probe-draw", static_cast<std::uint64_t>(i)));
    Draw d;
    d.x = task.sample_prompt(rng);
    const TokenSeq ctx0[] = {d.x};
    d.y0 = sample(actor, ctx0, Role::first_response, rng);
    if (fb.critic) {
      const TokenSeq ctx1[] = {d.x, d.y0};
      d.z = sample(*fb.critic, ctx1, Role::feedback, rng);
    } else {
      d.z = *fb.fixed;
    }
    draws.push_back(std::move(d));
  }
  std::vector<double> diff(static_cast<std::size_t>(n));
  double matched = 0.0, shuffled = 0.0;
  for (int i = 0; i < n; ++i) {
    // Common random numbers: both refinements replay the same draw stream, so
    // the comparison is paired and identical feedback gives a difference of
    // exactly zero.
    Rng rng_m(derive_seed(seed, "probe-refine", static_cast<std::uint64_t>(i)));
    Rng rng_s(derive_seed(seed, "probe-refine", static_cast<std::uint64_t>(i)));
    const Draw& d = draws[static_cast<std::size_t>(i)];
    const Draw& other = draws[static_cast<std::size_t>((i + 1) % n)];
    const TokenSeq ctx_m[] = {d.x, d.y0, d.z};
    const int r_m = task.verify(d.x, sample(actor, ctx_m, Role::refined_response, rng_m));
    const TokenSeq ctx_s[] = {d.x, d.y0, other.z};
    const int r_s = task.verify(d.x, sample(actor, ctx_s, Role::refined_response, rng_s));
    matched += r_m;
    shuffled += r_s;
    diff[static_cast<std::size_t>(i)] = static_cast<double>(r_m - r_s);
  }
  FeedbackProbe p;
  p.matched_acc = matched / static_cast<double>(n);
  p.shuffled_acc = shuffled / static_cast<double>(n);
  p.difference = mean_se(diff);
  return p;
}

// ---------------------------------------------------------------------------
// Run records.

struct ObjectiveEstimate {
  double u_hat = 0.0;  // upper objective: two-turn expected reward
  double u_se = 0.0;
  double l_hat = 0.0;  // lower objective: same functional, same batch here
  double l_se = 0.0;
  double lagrangian_hat = 0.0;
  double lagrangian_se = 0.0;
  bool exact = false;
};

struct RunRecord {
  long long iteration = 0;
  std::string mode;
  std::uint64_t seed = 0;
  ObjectiveEstimate objective;
  CollapseStats collapse;             // this iteration's groups
  CollapseStats collapse_cumulative;  // all groups so far
  double grad_norm_actor = 0.0;
  double grad_norm_critic = 0.0;
  std::optional<double> oracle_reward;  // exact two-turn expected reward, when enumerable
  long long surrogate_iteration = -1;   // which iterate the lagged checkpoint came from
  long long trajectories_cumulative = 0;
};

inline constexpr int kRunLogSchemaVersion = 1;

inline json to_json(const RunRecord& r) {
  json collapse = {{"groups", r.collapse.groups},
                   {"advantage_collapsed", r.collapse.advantage_collapsed},
                   {"reward_all_zero", r.collapse.reward_all_zero},
                   {"reward_all_one", r.collapse.reward_all_one},
                   {"advantage_collapse_freq", r.collapse.advantage_collapse_freq()},
                   {"reward_all_zero_freq", r.collapse.reward_all_zero_freq()}};
  json cumulative = {{"groups", r.collapse_cumulative.groups},
                     {"advantage_collapsed", r.collapse_cumulative.advantage_collapsed},
                     {"reward_all_zero", r.collapse_cumulative.reward_all_zero},
                     {"reward_all_one", r.collapse_cumulative.reward_all_one},
                     {"advantage_collapse_freq", r.collapse_cumulative.advantage_collapse_freq()},
                     {"reward_all_zero_freq", r.collapse_cumulative.reward_all_zero_freq()}};
  json rec = {{"iteration", r.iteration},
              {"mode", r.mode},
              {"seed", r.seed},
              {"objective",
               {{"u_hat", r.objective.u_hat},
                {"u_se", r.objective.u_se},
                {"l_hat", r.objective.l_hat},
                {"l_se", r.objective.l_se},
                {"lagrangian_hat", r.objective.lagrangian_hat},
                {"lagrangian_se", r.objective.lagrangian_se},
                {"exact", r.objective.exact}}},
              {"collapse", collapse},
              {"collapse_cumulative", cumulative},
              {"grad_norm_actor", r.grad_norm_actor},
              {"grad_norm_critic", r.grad_norm_critic},
              {"surrogate_iteration", r.surrogate_iteration},
              {"trajectories_cumulative", r.trajectories_cumulative}};
  rec["oracle_reward"] = r.oracle_reward ? json(*r.oracle_reward) : json(nullptr);
  return rec;
}

inline RunRecord run_record_from_json(const json& j) {
  RunRecord r;
  r.iteration = j.at("iteration").get<long long>();
  r.mode = j.at("mode").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  const json& o = j.at("objective");
  r.objective.u_hat = o.at("u_hat").get<double>();
  r.objective.u_se = o.at("u_se").get<double>();
  r.objective.l_hat = o.at("l_hat").get<double>();
  r.objective.l_se = o.at("l_se").get<double>();
  r.objective.lagrangian_hat = o.at("lagrangian_hat").get<double>();
  r.objective.lagrangian_se = o.at("lagrangian_se").get<double>();
  r.objective.exact = o.at("exact").get<bool>();
  auto load_collapse = [](const json& c, CollapseStats& s) {
    s.groups = c.at("groups").get<long long>();
    s.advantage_collapsed = c.at("advantage_collapsed").get<long long>();
    s.reward_all_zero = c.at("reward_all_zero").get<long long>();
    s.reward_all_one = c.at("reward_all_one").get<long long>();
  };
  load_collapse(j.at("collapse"), r.collapse);
  load_collapse(j.at("collapse_cumulative"), r.collapse_cumulative);
  r.grad_norm_actor = j.at("grad_norm_actor").get<double>();
  r.grad_norm_critic = j.at("grad_norm_critic").get<double>();
  if (!j.at("oracle_reward").is_null()) r.oracle_reward = j.at("oracle_reward").get<double>();
  r.surrogate_iteration = j.at("surrogate_iteration").get<long long>();
  r.trajectories_cumulative = j.at("trajectories_cumulative").get<long long>();
  return r;
}

// ---------------------------------------------------------------------------
// JSON Lines run log.

class RunLogWriter {
 public:
  RunLogWriter(const std::filesystem::path& path, json header) : out_(path, std::ios::binary) {
    if (!out_) throw IoError("RunLogWriter: cannot open " + path.string());
    header["format"] = "binac-runlog";
    header["schema_version"] = kRunLogSchemaVersion;
    out_ << header.dump() << "\n";
    check(path);
    path_ = path;
  }

  void record(const RunRecord& r) {
    out_ << to_json(r).dump() << "\n";
    check(path_);
  }

  void flush() {
    out_.flush();
    check(path_);
  }

 private:
  void check(const std::filesystem::path& p) {
    if (!out_) throw IoError("RunLogWriter: write failed for " + p.string());
  }

  std::ofstream out_;
  std::filesystem::path path_;
};

struct RunLog {
  json header;
  std::vector<RunRecord> records;
};

inline RunLog read_run_log(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_run_log: cannot open " + path.string());
  RunLog log;
  std::string line;
  if (!std::getline(in, line)) throw IoError("read_run_log: empty log " + path.string());
  log.header = json::parse(line, nullptr, /*allow_exceptions=*/true);
  if (log.header.value("format", "") != "binac-runlog")
    throw ConfigError("read_run_log: not a run log: " + path.string());
  if (log.header.value("schema_version", -1) != kRunLogSchemaVersion)
    throw ConfigError("read_run_log: unsupported schema_version in " + path.string() +
                      " (expected " + std::to_string(kRunLogSchemaVersion) + ")");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    log.records.push_back(run_record_from_json(json::parse(line)));
  }
  return log;
}

}  // namespace binac
