#pragma once

/**
 * Sampled gradient estimators.
 *
 * Every estimator is a pure function of (parameters, task, seed): trajectory
 * i draws from its own RNG stream derived as derive_seed(seed, tag, i), so
 * the sampled set is identical for any thread count and any unrelated code
 * change. Threading only re-groups the reduction, which moves results by
 * floating-point dust (tests bound it at 1e-9).
 *
 * Estimates carry per-component standard errors so unbiasedness checks can
 * compare against enumeration oracles in SE units rather than guessed
 * tolerances.
 */

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <thread>
#include <vector>

#include "binac/policy.hpp"
#include "binac/rng.hpp"
#include "binac/tasks.hpp"
#include "binac/tokens.hpp"

namespace binac {

// ---------------------------------------------------------------------------
// Group-relative advantages.

struct GroupStats {
  std::vector<int> rewards;
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation
  double epsilon = 0.0;
  std::vector<double> advantages;
};

// A_i = (R_i - mean) / (stddev + epsilon); when the group's rewards are all
// equal the advantages are exactly zero (no division is attempted), which is
// the degenerate case the collapse diagnostics count.
inline GroupStats grpo_advantages(const std::vector<int>& rewards, double epsilon) {
  if (rewards.empty()) throw ContractViolation("grpo_advantages: empty group");
  if (epsilon < 0.0) throw ContractViolation("grpo_advantages: epsilon must be >= 0");
  GroupStats gs;
  gs.rewards = rewards;
  gs.epsilon = epsilon;
  const double n = static_cast<double>(rewards.size());
  double sum = 0.0;
  for (int r : rewards) {
    if (r != 0 && r != 1) throw ContractViolation("grpo_advantages: rewards must be binary");
    sum += static_cast<double>(r);
  }
  gs.mean = sum / n;
  double ss = 0.0;
  for (int r : rewards) {
    const double d = static_cast<double>(r) - gs.mean;
    ss += d * d;
  }
  gs.stddev = std::sqrt(ss / n);
  gs.advantages.assign(rewards.size(), 0.0);
  if (gs.stddev > 0.0) {
    for (std::size_t i = 0; i < rewards.size(); ++i)
      gs.advantages[i] = (static_cast<double>(rewards[i]) - gs.mean) / (gs.stddev + epsilon);
  }
  return gs;
}

// ---------------------------------------------------------------------------
// Trajectories.

// Where feedback comes from: a critic policy, or a constant sequence (the
// fixed-feedback baseline). Exactly one source is active.
struct FeedbackSource {
  const PolicyParams* critic = nullptr;
  std::optional<TokenSeq> fixed;

  static FeedbackSource from_critic(const PolicyParams& c) { return {&c, std::nullopt}; }
  static FeedbackSource constant(TokenSeq z) { return {nullptr, std::move(z)}; }

  void validate() const {
    if ((critic != nullptr) == fixed.has_value())
      throw ContractViolation("FeedbackSource: exactly one of critic/fixed must be set");
    if (fixed && fixed->role != Role::feedback)
      throw ContractViolation("FeedbackSource: fixed sequence must have feedback role");
  }
};

// One two-turn exchange: prompt, first response, feedback, refined response,
// with the verifier's reward and the log-probabilities under the generating
// parameters (logp_z is 0 for constant feedback, which no policy generated).
struct Trajectory {
  TokenSeq x, y0, z, y1;
  int reward = 0;
  double logp_y0 = 0.0;
  double logp_z = 0.0;
  double logp_y1 = 0.0;
};

inline Trajectory rollout(const PolicyParams& actor, const FeedbackSource& fb, const Task& task,
                          Rng& rng) {
  fb.validate();
  Trajectory t;
  t.x = task.sample_prompt(rng);
  {
    const TokenSeq ctx[] = {t.x};
    t.y0 = sample(actor, ctx, Role::first_response, rng);
    t.logp_y0 = log_prob(actor, ctx, t.y0);
  }
  {
    const TokenSeq ctx[] = {t.x, t.y0};
    if (fb.critic) {
      t.z = sample(*fb.critic, ctx, Role::feedback, rng);
      t.logp_z = log_prob(*fb.critic, ctx, t.z);
    } else {
      t.z = *fb.fixed;
    }
  }
  {
    const TokenSeq ctx[] = {t.x, t.y0, t.z};
    t.y1 = sample(actor, ctx, Role::refined_response, rng);
    t.logp_y1 = log_prob(actor, ctx, t.y1);
  }
  t.reward = task.verify(t.x, t.y1);
  return t;
}

inline Trajectory rollout(const PolicyParams& actor, const PolicyParams& critic, const Task& task,
                          Rng& rng) {
  return rollout(actor, FeedbackSource::from_critic(critic), task, rng);
}

// ---------------------------------------------------------------------------
// Estimates with uncertainty.

struct GradientEstimate {
  GradientTable grad;
  GradientTable se;  // per-component standard error of `grad`
  long long samples = 0;
};

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
  long long n = 0;
};

inline MeanSe mean_se(std::span<const double> xs) {
  MeanSe m;
  m.n = static_cast<long long>(xs.size());
  if (m.n == 0) return m;
  double sum = 0.0;
  for (double x : xs) sum += x;
  m.mean = sum / static_cast<double>(m.n);
  if (m.n < 2) return m;
  double ss = 0.0;
  for (double x : xs) {
    const double d = x - m.mean;
    ss += d * d;
  }
  const double var = ss / static_cast<double>(m.n - 1);
  m.se = std::sqrt(var / static_cast<double>(m.n));
  return m;
}

namespace detail {

// Streaming first/second moments over sparse contribution tables. Components
// a contribution never touches count as exact zeros toward every moment.
class TableMoments {
 public:
  explicit TableMoments(int vocab_size) : sum_(vocab_size), sumsq_(vocab_size) {}

  void add(const GradientTable& c) {
    ++n_;
    for (const auto& [key, row] : c.rows) {
      auto& s = sum_.row(key);
      auto& q = sumsq_.row(key);
      for (std::size_t i = 0; i < row.size(); ++i) {
        s[i] += row[i];
        q[i] += row[i] * row[i];
      }
    }
  }

  // Merge another accumulator (deterministic shard reduction).
  void merge(const TableMoments& o) {
    n_ += o.n_;
    sum_.axpy(1.0, o.sum_);
    sumsq_.axpy(1.0, o.sumsq_);
  }

  // Mean and SE of the per-sample contribution, both scaled by `scale`.
  GradientEstimate finalize(double scale) const {
    GradientEstimate est;
    est.samples = n_;
    est.grad = GradientTable(sum_.vocab_size);
    est.se = GradientTable(sum_.vocab_size);
    if (n_ == 0) return est;
    const double n = static_cast<double>(n_);
    for (const auto& [key, srow] : sum_.rows) {
      const auto& qrow = sumsq_.rows.at(key);
      auto& g = est.grad.row(key);
      auto& e = est.se.row(key);
      for (std::size_t i = 0; i < srow.size(); ++i) {
        const double mean = srow[i] / n;
        g[i] = scale * mean;
        if (n_ >= 2) {
          const double var = std::max(0.0, (qrow[i] - srow[i] * srow[i] / n) / (n - 1.0));
          e[i] = std::abs(scale) * std::sqrt(var / n);
        }
      }
    }
    return est;
  }

  long long count() const { return n_; }

 private:
  GradientTable sum_, sumsq_;
  long long n_ = 0;
};

// Run `body(i, moments)` for i in [0, n) sharded over `threads` workers and
// reduce shard accumulators in shard order. Per-index work must not depend
// on shared mutable state; determinism then holds for any fixed `threads`.
template <typename Body>
TableMoments sharded_moments(long long n, int vocab_size, int threads, Body body) {
  if (threads < 1) throw ContractViolation("estimators: threads must be >= 1");
  const int shards = static_cast<int>(std::min<long long>(threads, std::max<long long>(n, 1)));
  std::vector<TableMoments> partial(static_cast<std::size_t>(shards), TableMoments(vocab_size));
  auto run_shard = [&](int s) {
    const long long lo = n * s / shards;
    const long long hi = n * (s + 1) / shards;
    for (long long i = lo; i < hi; ++i) body(i, partial[static_cast<std::size_t>(s)]);
  };
  if (shards == 1) {
    run_shard(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(shards));
    for (int s = 0; s < shards; ++s) pool.emplace_back(run_shard, s);
    for (auto& th : pool) th.join();
  }
  TableMoments total(vocab_size);
  for (const auto& p : partial) total.merge(p);
  return total;
}

}  // namespace detail

struct EstimatorOptions {
  int threads = 1;
  // Couple the two critic-gradient expectations (and runs at different
  // lambda) through shared per-trajectory seeds.
  bool common_random_numbers = true;
};

// ---------------------------------------------------------------------------
// GRPO gradient.
//
// Per group: one prompt, `group_size` independent first responses, advantages
// from grpo_advantages, contribution (1/G) sum_i A_i * score(y0_i | x). The
// estimate averages over `n_groups` groups; SE is across groups.

struct GrpoBatch {
  GradientEstimate estimate;
  std::vector<GroupStats> groups;  // in group-index order
};

inline GrpoBatch grpo_batch(const PolicyParams& actor, const Task& task, int group_size,
                            double epsilon, int n_groups, std::uint64_t seed,
                            const EstimatorOptions& opt = {}) {
  if (group_size < 2) throw ContractViolation("grpo_batch: group_size must be >= 2");
  if (n_groups < 1) throw ContractViolation("grpo_batch: n_groups must be >= 1");
  const int V = actor.spec().vocab.size;
  GrpoBatch batch;
  batch.groups.resize(static_cast<std::size_t>(n_groups));
  auto body = [&](long long g, detail::TableMoments& acc) {
    Rng rng(derive_seed(seed, "grpo-group", static_cast<std::uint64_t>(g)));
    const TokenSeq x = task.sample_prompt(rng);
    const TokenSeq ctx[] = {x};
    std::vector<TokenSeq> ys;
    std::vector<int> rewards;
    ys.reserve(static_cast<std::size_t>(group_size));
    for (int i = 0; i < group_size; ++i) {
      ys.push_back(sample(actor, ctx, Role::first_response, rng));
      rewards.push_back(task.verify(x, ys.back()));
    }
    GroupStats gs = grpo_advantages(rewards, epsilon);
    GradientTable c(V);
    for (int i = 0; i < group_size; ++i) {
      const double w = gs.advantages[static_cast<std::size_t>(i)] / static_cast<double>(group_size);
      if (w != 0.0) accumulate_score_gradient(actor, ctx, ys[static_cast<std::size_t>(i)], c, w);
    }
    acc.add(c);
    batch.groups[static_cast<std::size_t>(g)] = std::move(gs);
  };
  batch.estimate = detail::sharded_moments(n_groups, V, opt.threads, body).finalize(1.0);
  return batch;
}

inline GradientEstimate grpo_gradient(const PolicyParams& actor, const Task& task, int group_size,
                                      double epsilon, int n_groups, std::uint64_t seed,
                                      const EstimatorOptions& opt = {}) {
  return grpo_batch(actor, task, group_size, epsilon, n_groups, seed, opt).estimate;
}

// ---------------------------------------------------------------------------
// Actor gradient for the two-turn objective:
//
//   (1+lambda) * E[ (score(y0|x) + score(y1|x,y0,z)) * R(x,y1) ]
//
// The per-trajectory mean is scaled by (1+lambda) only at the end, so runs
// at different lambda under the same seed differ exactly by that factor.

struct ActorBatch {
  GradientEstimate estimate;
  std::vector<int> rewards;  // per trajectory, in sample order
};

inline ActorBatch actor_batch(const PolicyParams& actor, const FeedbackSource& fb,
                              const Task& task, double lambda, long long n_samples,
                              std::uint64_t seed, const EstimatorOptions& opt = {}) {
  fb.validate();
  if (n_samples < 1) throw ContractViolation("actor_batch: n_samples must be >= 1");
  if (lambda < 0.0) throw ContractViolation("actor_batch: lambda must be >= 0");
  const int V = actor.spec().vocab.size;
  ActorBatch batch;
  batch.rewards.resize(static_cast<std::size_t>(n_samples));
  auto body = [&](long long i, detail::TableMoments& acc) {
    Rng rng(derive_seed(seed, "actor-traj", static_cast<std::uint64_t>(i)));
    const Trajectory t = rollout(actor, fb, task, rng);
    GradientTable c(V);
    if (t.reward != 0) {
      const TokenSeq ctx0[] = {t.x};
      accumulate_score_gradient(actor, ctx0, t.y0, c, static_cast<double>(t.reward));
      const TokenSeq ctx1[] = {t.x, t.y0, t.z};
      accumulate_score_gradient(actor, ctx1, t.y1, c, static_cast<double>(t.reward));
    }
    acc.add(c);
    batch.rewards[static_cast<std::size_t>(i)] = t.reward;
  };
  batch.estimate = detail::sharded_moments(n_samples, V, opt.threads, body).finalize(1.0 + lambda);
  return batch;
}

inline GradientEstimate actor_gradient(const PolicyParams& actor, const FeedbackSource& fb,
                                       const Task& task, double lambda, long long n_samples,
                                       std::uint64_t seed, const EstimatorOptions& opt = {}) {
  return actor_batch(actor, fb, task, lambda, n_samples, seed, opt).estimate;
}

inline GradientEstimate actor_gradient(const PolicyParams& actor, const PolicyParams& critic,
                                       const Task& task, double lambda, long long n_samples,
                                       std::uint64_t seed, const EstimatorOptions& opt = {}) {
  return actor_gradient(actor, FeedbackSource::from_critic(critic), task, lambda, n_samples, seed,
                        opt);
}

// ---------------------------------------------------------------------------
// Critic gradient:
//
//   (1+lambda) * E_theta [ score(z|x,y0)  * R(x,y1)  ]
//     - lambda * E_theta*[ score(z|x,y0*) * R(x,y1*) ]
//
// where the second expectation draws BOTH turns (y0*, y1*) from the lagged
// checkpoint actor while feedback still comes from the current critic. The
// per-trajectory combination is c1 + lambda*(c1 - c2): with the checkpoint
// equal to the actor the difference vanishes identically and the estimate
// reduces bitwise to the single-expectation gradient; with lambda = 0 the
// second expectation is never sampled at all.
//
// Under common random numbers both expectations replay the same per-index
// seed (same prompt, same draws), pairing the two terms sample by sample.

struct CriticBatch {
  GradientEstimate estimate;
  std::vector<int> rewards_current;     // R(x, y1) along the current-actor expectation
  std::vector<int> rewards_checkpoint;  // R(x, y1*) along the checkpoint expectation (lambda > 0)
};

inline CriticBatch critic_batch(const PolicyParams& actor, const PolicyParams& critic,
                                const PolicyParams& checkpoint_actor, const Task& task,
                                double lambda, long long n_samples, std::uint64_t seed,
                                const EstimatorOptions& opt = {}) {
  if (n_samples < 1) throw ContractViolation("critic_batch: n_samples must be >= 1");
  if (lambda < 0.0) throw ContractViolation("critic_batch: lambda must be >= 0");
  const int V = critic.spec().vocab.size;
  const FeedbackSource fb = FeedbackSource::from_critic(critic);
  CriticBatch batch;
  batch.rewards_current.resize(static_cast<std::size_t>(n_samples));
  if (lambda > 0.0) batch.rewards_checkpoint.resize(static_cast<std::size_t>(n_samples));
  auto contribution = [&](const PolicyParams& which_actor, Rng& rng, int& reward_out) {
    const Trajectory t = rollout(which_actor, fb, task, rng);
    reward_out = t.reward;
    GradientTable c(V);
    if (t.reward != 0) {
      const TokenSeq ctx[] = {t.x, t.y0};
      accumulate_score_gradient(critic, ctx, t.z, c, static_cast<double>(t.reward));
    }
    return c;
  };
  auto body = [&](long long i, detail::TableMoments& acc) {
    const std::uint64_t idx = static_cast<std::uint64_t>(i);
    Rng rng1(derive_seed(seed, "critic-traj", idx, 0));
    GradientTable c = contribution(actor, rng1, batch.rewards_current[static_cast<std::size_t>(i)]);
    if (lambda > 0.0) {
      Rng rng2(derive_seed(seed, "critic-traj", idx, opt.common_random_numbers ? 0 : 1));
      const GradientTable c2 =
          contribution(checkpoint_actor, rng2, batch.rewards_checkpoint[static_cast<std::size_t>(i)]);
      GradientTable diff = c;
      diff.axpy(-1.0, c2);
      c.axpy(lambda, diff);
    }
    acc.add(c);
  };
  batch.estimate = detail::sharded_moments(n_samples, V, opt.threads, body).finalize(1.0);
  return batch;
}

inline GradientEstimate critic_gradient(const PolicyParams& actor, const PolicyParams& critic,
                                        const PolicyParams& checkpoint_actor, const Task& task,
                                        double lambda, long long n_samples, std::uint64_t seed,
                                        const EstimatorOptions& opt = {}) {
  return critic_batch(actor, critic, checkpoint_actor, task, lambda, n_samples, seed, opt).estimate;
}

}  // namespace binac
