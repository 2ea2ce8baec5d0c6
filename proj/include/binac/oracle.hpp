#pragma once

/**
 * Exact enumeration oracles.
 *
 * Instances small enough to enumerate get exact expected rewards and exact
 * policy gradients, computed in one fixed lexicographic order (prompt index,
 * then each generated segment in token order) so results are bitwise
 * reproducible run to run. Every estimator in estimators.hpp has its oracle
 * here; the finite-difference harness closes the loop by differentiating the
 * exact expected reward numerically.
 *
 * Enumeration cost is checked against an explicit trajectory budget before
 * any work happens; instances over budget are refused, never approximated.
 */

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "binac/estimators.hpp"
#include "binac/policy.hpp"
#include "binac/tasks.hpp"
#include "binac/tokens.hpp"

namespace binac::oracle {

struct BudgetExceeded : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EnumerationBudget {
  std::uint64_t max_trajectories = 1'000'000;
};

namespace detail {

inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  if (a != 0 && b > UINT64_MAX / a) throw BudgetExceeded("enumeration size overflows");
  return a * b;
}

inline std::uint64_t pow_u64(std::uint64_t base, int exp) {
  std::uint64_t r = 1;
  for (int i = 0; i < exp; ++i) r = checked_mul(r, base);
  return r;
}

inline void require_budget(std::uint64_t need, const EnumerationBudget& budget, const char* what) {
  if (need > budget.max_trajectories)
    throw BudgetExceeded(std::string(what) + ": instance needs " + std::to_string(need) +
                         " trajectories, budget is " + std::to_string(budget.max_trajectories));
}

}  // namespace detail

// All outputs of one generated segment with their exact probabilities, in
// lexicographic token order. One softmax per tree node, shared across the
// subtree below it.
inline std::vector<std::pair<TokenSeq, double>> enumerate_outputs(const PolicyParams& params,
                                                                  std::span<const TokenSeq> ctx,
                                                                  Role role) {
  const PolicySpec& spec = params.spec();
  Tokens stream = build_stream(ctx, role, spec);
  const int len = spec.lengths.of(role);
  std::vector<std::pair<TokenSeq, double>> out;
  out.reserve(static_cast<std::size_t>(detail::pow_u64(
      static_cast<std::uint64_t>(spec.vocab.size), len)));
  Tokens current;
  std::vector<double> scratch, probs;
  std::function<void(int, double)> walk = [&](int pos, double p) {
    if (pos == len) {
      out.emplace_back(TokenSeq(role, current), p);
      return;
    }
    const ContextKey key = context_key(stream, spec.window, spec.vocab);
    softmax_into(params.row_values(key, scratch), probs);
    const std::vector<double> local = probs;  // softmax_into reuses buffers across levels
    for (Token t = 0; t < spec.vocab.size; ++t) {
      current.push_back(t);
      stream.push_back(t);
      walk(pos + 1, p * local[static_cast<std::size_t>(t)]);
      stream.pop_back();
      current.pop_back();
    }
  };
  walk(0, 1.0);
  return out;
}

// Feedback outputs with probabilities: a critic enumerates its distribution,
// a constant source is a point mass.
inline std::vector<std::pair<TokenSeq, double>> enumerate_feedback(const FeedbackSource& fb,
                                                                   std::span<const TokenSeq> ctx) {
  fb.validate();
  if (fb.critic) return enumerate_outputs(*fb.critic, ctx, Role::feedback);
  return {{*fb.fixed, 1.0}};
}

namespace detail {

inline std::uint64_t seq_space(const PolicyParams& p, Role r) {
  return pow_u64(static_cast<std::uint64_t>(p.spec().vocab.size), p.spec().lengths.of(r));
}

inline std::uint64_t feedback_space(const PolicyParams& actor, const FeedbackSource& fb) {
  if (!fb.critic) return 1;
  return pow_u64(static_cast<std::uint64_t>(fb.critic->spec().vocab.size),
                 actor.spec().lengths.feedback);
}

inline std::uint64_t two_turn_space(const PolicyParams& actor, const FeedbackSource& fb,
                                    const Task& task) {
  std::uint64_t n = task.prompt_space_size();
  n = checked_mul(n, seq_space(actor, Role::first_response));
  n = checked_mul(n, feedback_space(actor, fb));
  n = checked_mul(n, seq_space(actor, Role::refined_response));
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Exact expected two-turn reward  E[R(x, y1)].

inline double exact_expected_reward(const PolicyParams& actor, const FeedbackSource& fb,
                                    const Task& task,
                                    const EnumerationBudget& budget = {}) {
  detail::require_budget(detail::two_turn_space(actor, fb, task), budget,
                         "exact_expected_reward");
  double acc = 0.0;
  for (std::uint64_t xi = 0; xi < task.prompt_space_size(); ++xi) {
    const TokenSeq x = task.prompt_at(xi);
    const double px = task.prompt_prob(x);
    const TokenSeq ctx0[] = {x};
    for (const auto& [y0, p0] : enumerate_outputs(actor, ctx0, Role::first_response)) {
      const TokenSeq ctx1[] = {x, y0};
      for (const auto& [z, pz] : enumerate_feedback(fb, ctx1)) {
        const TokenSeq ctx2[] = {x, y0, z};
        for (const auto& [y1, p1] : enumerate_outputs(actor, ctx2, Role::refined_response)) {
          if (task.verify(x, y1)) acc += px * p0 * pz * p1;
        }
      }
    }
  }
  return acc;
}

inline double exact_expected_reward(const PolicyParams& actor, const PolicyParams& critic,
                                    const Task& task,
                                    const EnumerationBudget& budget = {}) {
  return exact_expected_reward(actor, FeedbackSource::from_critic(critic), task, budget);
}

// ---------------------------------------------------------------------------
// Exact actor gradient of the two-turn objective, scaled by (1+lambda) as the
// bilevel actor ascent direction. Matches actor_gradient in expectation.

inline GradientTable exact_actor_gradient(const PolicyParams& actor, const FeedbackSource& fb,
                                          const Task& task, double lambda,
                                          const EnumerationBudget& budget = {}) {
  if (lambda < 0.0) throw ContractViolation("exact_actor_gradient: lambda must be >= 0");
  detail::require_budget(detail::two_turn_space(actor, fb, task), budget,
                         "exact_actor_gradient");
  GradientTable g(actor.spec().vocab.size);
  for (std::uint64_t xi = 0; xi < task.prompt_space_size(); ++xi) {
    const TokenSeq x = task.prompt_at(xi);
    const double px = task.prompt_prob(x);
    const TokenSeq ctx0[] = {x};
    for (const auto& [y0, p0] : enumerate_outputs(actor, ctx0, Role::first_response)) {
      const TokenSeq ctx1[] = {x, y0};
      for (const auto& [z, pz] : enumerate_feedback(fb, ctx1)) {
        const TokenSeq ctx2[] = {x, y0, z};
        for (const auto& [y1, p1] : enumerate_outputs(actor, ctx2, Role::refined_response)) {
          if (!task.verify(x, y1)) continue;
          const double w = px * p0 * pz * p1;
          accumulate_score_gradient(actor, ctx0, y0, g, w);
          accumulate_score_gradient(actor, ctx2, y1, g, w);
        }
      }
    }
  }
  g.scale(1.0 + lambda);
  return g;
}

// ---------------------------------------------------------------------------
// Exact critic gradient
//
//   (1+lambda) E_theta[...] - lambda E_theta*[...],
//
// accumulated per trajectory with weight p + lambda*(p - p*). The two
// expectations range over the same trajectory tuples, so this grouping is
// algebraically identical and makes the degenerate cases exact: lambda = 0
// never evaluates the checkpoint, and checkpoint == actor gives p* == p and
// so reduces bitwise to the single-expectation gradient.

inline GradientTable exact_critic_gradient(const PolicyParams& actor, const PolicyParams& critic,
                                           const PolicyParams& checkpoint_actor, const Task& task,
                                           double lambda,
                                           const EnumerationBudget& budget = {}) {
  if (lambda < 0.0) throw ContractViolation("exact_critic_gradient: lambda must be >= 0");
  const FeedbackSource fb = FeedbackSource::from_critic(critic);
  detail::require_budget(detail::two_turn_space(actor, fb, task), budget,
                         "exact_critic_gradient");
  GradientTable g(critic.spec().vocab.size);
  const bool bilevel = lambda > 0.0;
  for (std::uint64_t xi = 0; xi < task.prompt_space_size(); ++xi) {
    const TokenSeq x = task.prompt_at(xi);
    const double px = task.prompt_prob(x);
    const TokenSeq ctx0[] = {x};
    const auto y0s = enumerate_outputs(actor, ctx0, Role::first_response);
    const auto y0s_ck =
        bilevel ? enumerate_outputs(checkpoint_actor, ctx0, Role::first_response) : y0s;
    for (std::size_t i0 = 0; i0 < y0s.size(); ++i0) {
      const TokenSeq& y0 = y0s[i0].first;
      const double p0 = y0s[i0].second;
      const double p0_ck = y0s_ck[i0].second;
      const TokenSeq ctx1[] = {x, y0};
      for (const auto& [z, pz] : enumerate_feedback(fb, ctx1)) {
        const TokenSeq ctx2[] = {x, y0, z};
        const auto y1s = enumerate_outputs(actor, ctx2, Role::refined_response);
        const auto y1s_ck =
            bilevel ? enumerate_outputs(checkpoint_actor, ctx2, Role::refined_response) : y1s;
        for (std::size_t i1 = 0; i1 < y1s.size(); ++i1) {
          const TokenSeq& y1 = y1s[i1].first;
          if (!task.verify(x, y1)) continue;
          const double p = px * p0 * pz * y1s[i1].second;
          double m = p;
          if (bilevel) {
            const double p_ck = px * p0_ck * pz * y1s_ck[i1].second;
            m += lambda * (p - p_ck);
          }
          if (m != 0.0) accumulate_score_gradient(critic, ctx1, z, g, m);
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Exact GRPO gradient: expectation over the prompt and over all ordered
// G-tuples of responses of (1/G) sum_i A_i(tuple) * score(y_i | x).

inline GradientTable exact_grpo_gradient(const PolicyParams& actor, const Task& task,
                                         int group_size, double epsilon,
                                         const EnumerationBudget& budget = {}) {
  if (group_size < 2) throw ContractViolation("exact_grpo_gradient: group_size must be >= 2");
  const std::uint64_t y_space = detail::seq_space(actor, Role::first_response);
  detail::require_budget(
      detail::checked_mul(task.prompt_space_size(), detail::pow_u64(y_space, group_size)), budget,
      "exact_grpo_gradient");
  GradientTable g(actor.spec().vocab.size);
  for (std::uint64_t xi = 0; xi < task.prompt_space_size(); ++xi) {
    const TokenSeq x = task.prompt_at(xi);
    const double px = task.prompt_prob(x);
    const TokenSeq ctx[] = {x};
    const auto ys = enumerate_outputs(actor, ctx, Role::first_response);
    std::vector<int> reward(ys.size());
    std::vector<GradientTable> score(ys.size());
    for (std::size_t i = 0; i < ys.size(); ++i) {
      reward[i] = task.verify(x, ys[i].first);
      score[i] = score_gradient(actor, ctx, ys[i].first);
    }
    // Odometer over ordered tuples (i_1, ..., i_G).
    std::vector<std::size_t> idx(static_cast<std::size_t>(group_size), 0);
    std::vector<int> rewards(static_cast<std::size_t>(group_size));
    for (;;) {
      double ptuple = px;
      for (std::size_t k = 0; k < idx.size(); ++k) {
        ptuple *= ys[idx[k]].second;
        rewards[k] = reward[idx[k]];
      }
      const GroupStats gs = grpo_advantages(rewards, epsilon);
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const double w = ptuple * gs.advantages[k] / static_cast<double>(group_size);
        if (w != 0.0) g.axpy(w, score[idx[k]]);
      }
      std::size_t pos = idx.size();
      while (pos > 0) {
        --pos;
        if (++idx[pos] < ys.size()) break;
        idx[pos] = 0;
        if (pos == 0) goto next_prompt;
      }
    }
  next_prompt:;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Exact per-turn expected rewards when the exchange is iterated: turn 1 is
// the first response; each later turn feeds the previous response through the
// feedback source and the refinement step. Returned vector has one entry per
// turn.

inline std::vector<double> exact_turn_rewards(const PolicyParams& actor, const FeedbackSource& fb,
                                              const Task& task, int turns,
                                              const EnumerationBudget& budget = {}) {
  if (turns < 1) throw ContractViolation("exact_turn_rewards: turns must be >= 1");
  const std::uint64_t y_space = detail::seq_space(actor, Role::first_response);
  std::uint64_t need = detail::checked_mul(task.prompt_space_size(), y_space);
  if (turns > 1) {
    const std::uint64_t per_step = detail::checked_mul(
        detail::checked_mul(y_space, detail::feedback_space(actor, fb)), y_space);
    need = detail::checked_mul(task.prompt_space_size(),
                               detail::checked_mul(per_step, static_cast<std::uint64_t>(turns - 1)));
  }
  detail::require_budget(need, budget, "exact_turn_rewards");

  std::vector<double> acc(static_cast<std::size_t>(turns), 0.0);
  for (std::uint64_t xi = 0; xi < task.prompt_space_size(); ++xi) {
    const TokenSeq x = task.prompt_at(xi);
    const double px = task.prompt_prob(x);
    const TokenSeq ctx0[] = {x};
    const auto ys = enumerate_outputs(actor, ctx0, Role::first_response);
    std::vector<double> dist(ys.size());
    for (std::size_t i = 0; i < ys.size(); ++i) dist[i] = ys[i].second;
    std::vector<int> reward(ys.size());
    for (std::size_t i = 0; i < ys.size(); ++i) reward[i] = task.verify(x, ys[i].first);

    for (int t = 0; t < turns; ++t) {
      if (t > 0) {
        std::vector<double> next(ys.size(), 0.0);
        for (std::size_t i = 0; i < ys.size(); ++i) {
          if (dist[i] == 0.0) continue;
          // The previous turn's answer plays the first-response role.
          const TokenSeq prev(Role::first_response, ys[i].first.tokens);
          const TokenSeq ctx1[] = {x, prev};
          for (const auto& [z, pz] : enumerate_feedback(fb, ctx1)) {
            const TokenSeq ctx2[] = {x, prev, z};
            const auto y1s = enumerate_outputs(actor, ctx2, Role::refined_response);
            for (std::size_t j = 0; j < y1s.size(); ++j)
              next[j] += dist[i] * pz * y1s[j].second;
          }
        }
        dist = std::move(next);
      }
      double r = 0.0;
      for (std::size_t i = 0; i < ys.size(); ++i)
        if (reward[i]) r += dist[i];
      acc[static_cast<std::size_t>(t)] += px * r;
    }
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Exact expectation of the score gradient over a segment's outputs; zero up
// to accumulated rounding, which the policy tests pin down.

inline GradientTable exact_score_expectation(const PolicyParams& params,
                                             std::span<const TokenSeq> ctx, Role role) {
  GradientTable g(params.spec().vocab.size);
  for (const auto& [out, p] : enumerate_outputs(params, ctx, role))
    accumulate_score_gradient(params, ctx, out, g, p);
  return g;
}

// ---------------------------------------------------------------------------
// Exact feedback usefulness: expected reward with matched feedback minus
// expected reward when feedback is replaced by an independent draw from its
// marginal over (x, y0). Constant feedback has a point-mass marginal, so the
// two passes run identical arithmetic and the difference is exactly zero.

inline double exact_feedback_usefulness(const PolicyParams& actor, const FeedbackSource& fb,
                                        const Task& task,
                                        const EnumerationBudget& budget = {}) {
  fb.validate();
  detail::require_budget(
      detail::checked_mul(detail::two_turn_space(actor, fb, task), 2), budget,
      "exact_feedback_usefulness");

  // Pass 1: marginal feedback distribution, indexed by lexicographic z.
  const std::uint64_t z_space = detail::feedback_space(actor, fb);
  std::vector<double> marginal(static_cast<std::size_t>(z_space), 0.0);
  for (std::uint64_t xi = 0; xi < task.prompt_space_size(); ++xi) {
    const TokenSeq x = task.prompt_at(xi);
    const double px = task.prompt_prob(x);
    const TokenSeq ctx0[] = {x};
    for (const auto& [y0, p0] : enumerate_outputs(actor, ctx0, Role::first_response)) {
      const TokenSeq ctx1[] = {x, y0};
      const auto zs = enumerate_feedback(fb, ctx1);
      for (std::size_t zi = 0; zi < zs.size(); ++zi)
        marginal[zi] += px * p0 * zs[zi].second;
    }
  }
  double norm = 0.0;
  for (double m : marginal) norm += m;
  for (double& m : marginal) m /= norm;

  // Pass 2: matched and shuffled expected rewards in one sweep, with the
  // same multiplication order so equal feedback weights give equal sums.
  double matched = 0.0, shuffled = 0.0;
  for (std::uint64_t xi = 0; xi < task.prompt_space_size(); ++xi) {
    const TokenSeq x = task.prompt_at(xi);
    const double px = task.prompt_prob(x);
    const TokenSeq ctx0[] = {x};
    for (const auto& [y0, p0] : enumerate_outputs(actor, ctx0, Role::first_response)) {
      const TokenSeq ctx1[] = {x, y0};
      const auto zs = enumerate_feedback(fb, ctx1);
      for (std::size_t zi = 0; zi < zs.size(); ++zi) {
        const TokenSeq& z = zs[zi].first;
        const TokenSeq ctx2[] = {x, y0, z};
        double inner = 0.0;
        for (const auto& [y1, p1] : enumerate_outputs(actor, ctx2, Role::refined_response))
          if (task.verify(x, y1)) inner += p1;
        matched += px * p0 * zs[zi].second * inner;
        shuffled += px * p0 * marginal[zi] * inner;
      }
    }
  }
  return matched - shuffled;
}

// ---------------------------------------------------------------------------
// Finite-difference harness. `field` maps parameters to a scalar; every
// component present in `analytic` is perturbed by +/-step and the central
// difference is compared with relative error |fd - g| / max(|fd|, |g|, 1).

template <typename Field>
double fd_check(Field&& field, const PolicyParams& at, const GradientTable& analytic,
                double step) {
  if (step <= 0.0) throw ContractViolation("fd_check: step must be > 0");
  double worst = 0.0;
  for (const auto& [key, row] : analytic.rows) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      PolicyParams plus = at;
      plus.row_mut(key)[j] += step;
      PolicyParams minus = at;
      minus.row_mut(key)[j] -= step;
      const double fd = (field(plus) - field(minus)) / (2.0 * step);
      const double g = row[j];
      const double rel = std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1.0});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace binac::oracle
