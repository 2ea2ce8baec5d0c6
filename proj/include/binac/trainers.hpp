#pragma once

/**
 * Training loops.
 *
 * train_grpo: single-turn group-relative ascent (the flat-feedback baseline).
 * train_binac: two-turn bilevel actor-critic ascent. Each iteration updates
 * the actor on (1+lambda) * R * (score(y0) + score(y1)), then the critic on
 * the two-expectation feedback gradient, with the lower-level surrogate
 * theta* played by a checkpoint of the actor lagged `checkpoint_lag`
 * iterations. Ablation modes freeze either side, drop the bilevel correction
 * term, or replace the critic with a constant feedback token.
 *
 * Both trainers emit one RunRecord per iteration with an identical schema,
 * and both are deterministic functions of their config (timing never enters
 * any artifact).
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "binac/diagnostics.hpp"
#include "binac/estimators.hpp"
#include "binac/oracle.hpp"
#include "binac/policy.hpp"
#include "binac/tasks.hpp"
#include "binac/tokens.hpp"

namespace binac {

// ---------------------------------------------------------------------------
// Modes.

inline const std::vector<std::string>& trainer_modes() {
  static const std::vector<std::string> m = {"grpo",         "binac",       "binac_no_bilevel",
                                             "frozen_critic", "frozen_actor", "both_frozen",
                                             "fixed_feedback"};
  return m;
}

inline bool mode_trains_actor(const std::string& mode) {
  return mode == "binac" || mode == "binac_no_bilevel" || mode == "frozen_critic" ||
         mode == "fixed_feedback";
}

inline bool mode_trains_critic(const std::string& mode) {
  return mode == "binac" || mode == "binac_no_bilevel" || mode == "frozen_actor";
}

inline bool mode_uses_fixed_feedback(const std::string& mode) { return mode == "fixed_feedback"; }

// ---------------------------------------------------------------------------
// Configuration.

struct TrainerConfig {
  std::string mode = "binac";
  double lambda = 0.5;
  double lr_actor = 0.1;
  double lr_critic = 0.1;
  int group_size = 8;           // grpo responses per prompt
  int groups_per_step = 8;      // grpo groups per gradient step
  long long rollouts_per_step = 128;  // binac-family trajectories per gradient step
  int actor_steps_per_iter = 1;
  int critic_steps_per_iter = 1;
  int checkpoint_lag = 10;  // iterations between theta and theta*
  long long iterations = 100;
  std::optional<Token> fixed_feedback_token;
  double advantage_epsilon = 1e-8;
  std::string optimizer = "sgd";  // "sgd" | "adam" (adam is opt-in, plain ascent is the default)
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const {
    const auto& modes = trainer_modes();
    if (std::find(modes.begin(), modes.end(), mode) == modes.end())
      throw ContractViolation("TrainerConfig: unknown mode '" + mode + "'");
    if (lambda < 0.0) throw ContractViolation("TrainerConfig: lambda must be >= 0");
    if (lr_actor <= 0.0 || lr_critic <= 0.0)
      throw ContractViolation("TrainerConfig: learning rates must be > 0");
    if (group_size < 2) throw ContractViolation("TrainerConfig: group_size must be >= 2");
    if (groups_per_step < 1) throw ContractViolation("TrainerConfig: groups_per_step must be >= 1");
    if (rollouts_per_step < 1)
      throw ContractViolation("TrainerConfig: rollouts_per_step must be >= 1");
    if (actor_steps_per_iter < 1 || critic_steps_per_iter < 1)
      throw ContractViolation("TrainerConfig: steps per iteration must be >= 1");
    if (checkpoint_lag < 1) throw ContractViolation("TrainerConfig: checkpoint_lag must be >= 1");
    if (iterations < 1) throw ContractViolation("TrainerConfig: iterations must be >= 1");
    if (advantage_epsilon < 0.0)
      throw ContractViolation("TrainerConfig: advantage_epsilon must be >= 0");
    if (optimizer != "sgd" && optimizer != "adam")
      throw ContractViolation("TrainerConfig: optimizer must be 'sgd' or 'adam'");
    if (mode_uses_fixed_feedback(mode) && !fixed_feedback_token)
      throw ContractViolation("TrainerConfig: fixed_feedback mode needs fixed_feedback_token");
    if (threads < 1) throw ContractViolation("TrainerConfig: threads must be >= 1");
  }
};

// Oracle evaluation cadence during training. Disabled or over-budget
// instances simply leave oracle_reward null in the records.
struct OracleEvalOptions {
  bool enabled = true;
  long long every = 1;
  oracle::EnumerationBudget budget;
};

struct RunOptions {
  OracleEvalOptions oracle_eval;
  std::function<void(const RunRecord&)> sink;  // streamed per-iteration records
};

struct RunHistory {
  std::vector<RunRecord> records;
};

// ---------------------------------------------------------------------------
// Parameter updates (gradient ascent).

inline void apply_update(PolicyParams& params, const GradientTable& grad, double lr) {
  if (grad.vocab_size != params.spec().vocab.size)
    throw ContractViolation("apply_update: vocab size mismatch");
  for (const auto& [key, row] : grad.rows) {
    auto& dst = params.row_mut(key);
    for (std::size_t i = 0; i < row.size(); ++i) dst[i] += lr * row[i];
  }
}

struct AdamState {
  GradientTable m, v;
  long long t = 0;
};

// Sparse Adam ascent: moments exist only for rows a gradient has touched, and
// rows absent from this step's gradient still decay (deterministic order).
inline void apply_update_adam(PolicyParams& params, const GradientTable& grad, double lr,
                              AdamState& state, double beta1, double beta2, double eps) {
  if (grad.vocab_size != params.spec().vocab.size)
    throw ContractViolation("apply_update_adam: vocab size mismatch");
  if (state.m.vocab_size == 0) {
    state.m = GradientTable(grad.vocab_size);
    state.v = GradientTable(grad.vocab_size);
  }
  ++state.t;
  for (const auto& [key, row] : grad.rows) {
    state.m.row(key);  // ensure rows exist so the decay loop below sees them
    state.v.row(key);
  }
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  const std::vector<double> zero(static_cast<std::size_t>(grad.vocab_size), 0.0);
  for (auto& [key, mrow] : state.m.rows) {
    auto& vrow = state.v.rows.at(key);
    auto git = grad.rows.find(key);
    const std::vector<double>& g = git == grad.rows.end() ? zero : git->second;
    auto& dst = params.row_mut(key);
    for (std::size_t i = 0; i < mrow.size(); ++i) {
      mrow[i] = beta1 * mrow[i] + (1.0 - beta1) * g[i];
      vrow[i] = beta2 * vrow[i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = mrow[i] / bc1;
      const double vhat = vrow[i] / bc2;
      dst[i] += lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// Per-policy optimizer dispatch.
class Optimizer {
 public:
  Optimizer(const TrainerConfig& cfg, double lr) : cfg_(&cfg), lr_(lr) {}

  void step(PolicyParams& params, const GradientTable& grad) {
    if (cfg_->optimizer == "adam")
      apply_update_adam(params, grad, lr_, state_, cfg_->adam_beta1, cfg_->adam_beta2,
                        cfg_->adam_epsilon);
    else
      apply_update(params, grad, lr_);
  }

 private:
  const TrainerConfig* cfg_;
  double lr_;
  AdamState state_;
};

// ---------------------------------------------------------------------------
// Lagged actor checkpoints for the lower-level surrogate theta*.

class CheckpointStore {
 public:
  // Holds the initial parameters as iteration 0.
  CheckpointStore(int lag, const PolicyParams& initial) : lag_(lag) {
    if (lag < 1) throw ContractViolation("CheckpointStore: lag must be >= 1");
    buf_.emplace_back(0, initial);
  }

  // Record theta_i after iteration i completes.
  void push(long long iteration, const PolicyParams& params) {
    buf_.emplace_back(iteration, params);
    while (buf_.size() > static_cast<std::size_t>(lag_) + 1) buf_.pop_front();
  }

  // Surrogate for use during iteration i: theta_{max(0, i - lag)}.
  const PolicyParams& surrogate(long long iteration, long long* surrogate_iteration = nullptr) const {
    const long long want = std::max<long long>(0, iteration - lag_);
    for (const auto& [it, params] : buf_) {
      if (it == want) {
        if (surrogate_iteration) *surrogate_iteration = it;
        return params;
      }
    }
    throw ContractViolation("CheckpointStore: missing snapshot " + std::to_string(want));
  }

  std::size_t size() const { return buf_.size(); }

 private:
  int lag_;
  std::deque<std::pair<long long, PolicyParams>> buf_;
};

// ---------------------------------------------------------------------------
// Shared trainer plumbing.

namespace detail {

inline ObjectiveEstimate objective_from_rewards(std::span<const int> rewards, double lambda,
                                                std::span<const int> rewards_checkpoint) {
  std::vector<double> r(rewards.begin(), rewards.end());
  const MeanSe u = mean_se(r);
  ObjectiveEstimate o;
  o.u_hat = u.mean;
  o.u_se = u.se;
  o.l_hat = u.mean;  // same functional, same batch
  o.l_se = u.se;
  if (lambda > 0.0 && !rewards_checkpoint.empty()) {
    std::vector<double> rc(rewards_checkpoint.begin(), rewards_checkpoint.end());
    const MeanSe lstar = mean_se(rc);
    o.lagrangian_hat = u.mean + lambda * (u.mean - lstar.mean);
    o.lagrangian_se =
        std::sqrt((1.0 + lambda) * (1.0 + lambda) * u.se * u.se + lambda * lambda * lstar.se * lstar.se);
  } else {
    o.lagrangian_hat = u.mean;
    o.lagrangian_se = u.se;
  }
  return o;
}

// Batch-level collapse accounting for non-grouped trainers: consecutive
// chunks of `group_size` rewards stand in for groups.
inline CollapseStats chunked_collapse(std::span<const int> rewards, int group_size,
                                      double epsilon) {
  std::vector<GroupStats> groups;
  for (std::size_t lo = 0; lo + static_cast<std::size_t>(group_size) <= rewards.size();
       lo += static_cast<std::size_t>(group_size)) {
    std::vector<int> chunk(rewards.begin() + static_cast<std::ptrdiff_t>(lo),
                           rewards.begin() + static_cast<std::ptrdiff_t>(lo) + group_size);
    groups.push_back(grpo_advantages(chunk, epsilon));
  }
  return collapse_stats(groups);
}

inline std::optional<double> try_oracle_reward(const PolicyParams& actor, const FeedbackSource& fb,
                                               const Task& task, bool two_turn,
                                               const OracleEvalOptions& opt, bool& available) {
  if (!opt.enabled || !available) return std::nullopt;
  try {
    if (two_turn) return oracle::exact_expected_reward(actor, fb, task, opt.budget);
    return oracle::exact_turn_rewards(actor, fb, task, 1, opt.budget).front();
  } catch (const oracle::BudgetExceeded&) {
    available = false;  // instance too large; stop trying
    return std::nullopt;
  }
}

inline void emit(RunHistory& hist, const RunOptions& opts, RunRecord rec) {
  if (opts.sink) opts.sink(rec);
  hist.records.push_back(std::move(rec));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// GRPO trainer (single-turn).

inline RunHistory train_grpo(const TrainerConfig& cfg, PolicyParams& actor, const Task& task,
                             const RunOptions& opts = {}) {
  cfg.validate();
  if (cfg.mode != "grpo") throw ContractViolation("train_grpo: config mode must be 'grpo'");
  RunHistory hist;
  Optimizer opt_actor(cfg, cfg.lr_actor);
  const EstimatorOptions eopt{cfg.threads, true};
  CollapseStats cumulative;
  long long traj_total = 0;
  bool oracle_ok = true;
  // GRPO never generates feedback; its oracle objective is the single-turn
  // expected reward, evaluated with a throwaway constant source.
  const FeedbackSource fb_none =
      FeedbackSource::constant(TokenSeq(Role::feedback, Tokens(
          static_cast<std::size_t>(actor.spec().lengths.feedback), 0)));

  for (long long iter = 1; iter <= cfg.iterations; ++iter) {
    CollapseStats window;
    std::vector<int> rewards;
    double grad_norm = 0.0;
    for (int s = 0; s < cfg.actor_steps_per_iter; ++s) {
      const std::uint64_t seed =
          derive_seed(cfg.seed, "grpo-step", static_cast<std::uint64_t>(iter),
                      static_cast<std::uint64_t>(s));
      GrpoBatch batch = grpo_batch(actor, task, cfg.group_size, cfg.advantage_epsilon,
                                   cfg.groups_per_step, seed, eopt);
      window.add(collapse_stats(batch.groups));
      for (const GroupStats& g : batch.groups)
        rewards.insert(rewards.end(), g.rewards.begin(), g.rewards.end());
      grad_norm = batch.estimate.grad.l2_norm();
      opt_actor.step(actor, batch.estimate.grad);
      traj_total += static_cast<long long>(cfg.groups_per_step) * cfg.group_size;
    }
    cumulative.add(window);

    const long long every = std::max<long long>(1, opts.oracle_eval.every);
    RunRecord rec;
    rec.iteration = iter;
    rec.mode = cfg.mode;
    rec.seed = cfg.seed;
    rec.objective = detail::objective_from_rewards(rewards, 0.0, {});
    rec.collapse = window;
    rec.collapse_cumulative = cumulative;
    rec.grad_norm_actor = grad_norm;
    rec.grad_norm_critic = 0.0;
    if (iter == 1 || iter == cfg.iterations || iter % every == 0)
      rec.oracle_reward = detail::try_oracle_reward(actor, fb_none, task, /*two_turn=*/false,
                                                    opts.oracle_eval, oracle_ok);
    rec.surrogate_iteration = -1;
    rec.trajectories_cumulative = traj_total;
    detail::emit(hist, opts, std::move(rec));
  }
  return hist;
}

// ---------------------------------------------------------------------------
// Bilevel actor-critic trainer (two-turn) and its ablations.

inline RunHistory train_binac(const TrainerConfig& cfg, PolicyPair& pair, const Task& task,
                              const RunOptions& opts = {}) {
  cfg.validate();
  if (cfg.mode == "grpo") throw ContractViolation("train_binac: use train_grpo for mode 'grpo'");
  if (!pair.actor || !pair.critic) throw ContractViolation("train_binac: null policy handles");
  PolicyParams& actor = *pair.actor;
  PolicyParams& critic = *pair.critic;

  const bool trains_actor = mode_trains_actor(cfg.mode);
  const bool trains_critic = mode_trains_critic(cfg.mode);
  const double lambda_critic = cfg.mode == "binac_no_bilevel" ? 0.0 : cfg.lambda;

  FeedbackSource fb;
  if (mode_uses_fixed_feedback(cfg.mode)) {
    const Token t = *cfg.fixed_feedback_token;
    if (!actor.spec().vocab.is_regular(t))
      throw ContractViolation("train_binac: fixed_feedback_token outside vocabulary");
    fb = FeedbackSource::constant(
        TokenSeq(Role::feedback, Tokens(static_cast<std::size_t>(actor.spec().lengths.feedback), t)));
  } else {
    fb = FeedbackSource::from_critic(critic);
  }

  RunHistory hist;
  Optimizer opt_actor(cfg, cfg.lr_actor);
  Optimizer opt_critic(cfg, cfg.lr_critic);
  const EstimatorOptions eopt{cfg.threads, true};
  CheckpointStore store(cfg.checkpoint_lag, actor);
  CollapseStats cumulative;
  long long traj_total = 0;
  bool oracle_ok = true;

  for (long long iter = 1; iter <= cfg.iterations; ++iter) {
    std::vector<int> rewards;
    std::vector<int> rewards_checkpoint;
    double grad_norm_actor = 0.0, grad_norm_critic = 0.0;

    if (trains_actor) {
      for (int s = 0; s < cfg.actor_steps_per_iter; ++s) {
        const std::uint64_t seed =
            derive_seed(cfg.seed, "actor-step", static_cast<std::uint64_t>(iter),
                        static_cast<std::uint64_t>(s));
        ActorBatch batch =
            actor_batch(actor, fb, task, cfg.lambda, cfg.rollouts_per_step, seed, eopt);
        rewards.insert(rewards.end(), batch.rewards.begin(), batch.rewards.end());
        grad_norm_actor = batch.estimate.grad.l2_norm();
        opt_actor.step(actor, batch.estimate.grad);
        traj_total += cfg.rollouts_per_step;
      }
    }

    long long surrogate_iter = -1;
    if (trains_critic) {
      for (int s = 0; s < cfg.critic_steps_per_iter; ++s) {
        const std::uint64_t seed =
            derive_seed(cfg.seed, "critic-step", static_cast<std::uint64_t>(iter),
                        static_cast<std::uint64_t>(s));
        const PolicyParams& surrogate = store.surrogate(iter, &surrogate_iter);
        CriticBatch batch = critic_batch(actor, critic, surrogate, task, lambda_critic,
                                         cfg.rollouts_per_step, seed, eopt);
        rewards.insert(rewards.end(), batch.rewards_current.begin(), batch.rewards_current.end());
        rewards_checkpoint.insert(rewards_checkpoint.end(), batch.rewards_checkpoint.begin(),
                                  batch.rewards_checkpoint.end());
        grad_norm_critic = batch.estimate.grad.l2_norm();
        opt_critic.step(critic, batch.estimate.grad);
        traj_total += lambda_critic > 0.0 ? 2 * cfg.rollouts_per_step : cfg.rollouts_per_step;
      }
    }

    if (rewards.empty()) {
      // Fully frozen: draw a metrics-only batch so records stay comparable.
      const std::uint64_t seed = derive_seed(cfg.seed, "metrics", static_cast<std::uint64_t>(iter));
      for (long long i = 0; i < cfg.rollouts_per_step; ++i) {
        Rng rng(derive_seed(seed, "traj", static_cast<std::uint64_t>(i)));
        rewards.push_back(rollout(actor, fb, task, rng).reward);
      }
      traj_total += cfg.rollouts_per_step;
    }

    store.push(iter, actor);

    const CollapseStats window =
        detail::chunked_collapse(rewards, cfg.group_size, cfg.advantage_epsilon);
    cumulative.add(window);

    const long long every = std::max<long long>(1, opts.oracle_eval.every);
    RunRecord rec;
    rec.iteration = iter;
    rec.mode = cfg.mode;
    rec.seed = cfg.seed;
    rec.objective = detail::objective_from_rewards(rewards, lambda_critic, rewards_checkpoint);
    rec.collapse = window;
    rec.collapse_cumulative = cumulative;
    rec.grad_norm_actor = grad_norm_actor;
    rec.grad_norm_critic = grad_norm_critic;
    if (iter == 1 || iter == cfg.iterations || iter % every == 0)
      rec.oracle_reward = detail::try_oracle_reward(actor, fb, task, /*two_turn=*/true,
                                                    opts.oracle_eval, oracle_ok);
    rec.surrogate_iteration = surrogate_iter;
    rec.trajectories_cumulative = traj_total;
    detail::emit(hist, opts, std::move(rec));
  }
  return hist;
}

// ---------------------------------------------------------------------------
// Multi-turn evaluation: turn 1 answers the prompt; each later turn runs the
// previous answer through the feedback source and the refinement step. The
// per-prompt flags let compatibility_stats pair turn outcomes.

struct EvalResult {
  std::vector<std::vector<int>> flags;  // [turn][prompt]
  std::vector<double> accuracy;         // per turn
};

inline EvalResult evaluate(const PolicyParams& actor, const FeedbackSource& fb, const Task& task,
                           int turns, int n_prompts, std::uint64_t seed,
                           double temperature = 1.0) {
  fb.validate();
  if (turns < 1) throw ContractViolation("evaluate: turns must be >= 1");
  if (n_prompts < 1) throw ContractViolation("evaluate: n_prompts must be >= 1");
  EvalResult res;
  res.flags.assign(static_cast<std::size_t>(turns),
                   std::vector<int>(static_cast<std::size_t>(n_prompts), 0));
  for (int p = 0; p < n_prompts; ++p) {
    Rng rng(derive_seed(seed, "eval-prompt", static_cast<std::uint64_t>(p)));
    const TokenSeq x = task.sample_prompt(rng);
    const TokenSeq ctx0[] = {x};
    TokenSeq y = sample(actor, ctx0, Role::first_response, rng, temperature);
    res.flags[0][static_cast<std::size_t>(p)] = task.verify(x, y);
    for (int t = 1; t < turns; ++t) {
      const TokenSeq prev(Role::first_response, y.tokens);
      TokenSeq z;
      if (fb.critic) {
        const TokenSeq ctx1[] = {x, prev};
        z = sample(*fb.critic, ctx1, Role::feedback, rng, temperature);
      } else {
        z = *fb.fixed;
      }
      const TokenSeq ctx2[] = {x, prev, z};
      y = sample(actor, ctx2, Role::refined_response, rng, temperature);
      res.flags[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)] = task.verify(x, y);
    }
  }
  for (int t = 0; t < turns; ++t) {
    long long c = 0;
    for (int f : res.flags[static_cast<std::size_t>(t)]) c += f;
    res.accuracy.push_back(static_cast<double>(c) / static_cast<double>(n_prompts));
  }
  return res;
}

}  // namespace binac
