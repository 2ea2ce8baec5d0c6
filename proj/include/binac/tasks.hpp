#pragma once

/**
 * Synthetic verifiable-reward tasks.
 *
 * A task defines a prompt distribution (iid uniform tokens here) and a binary
 * verifier over (prompt, answer). Built-ins:
 *
 *   mod_sum          y[0] == sum(x) mod V
 *   composition_key  y[0] == (x[0]*x[1] + x[0]) mod V; solvable in one turn
 *                    only with the whole prompt in view, so a feedback channel
 *                    that sees the prompt can route the answer to an actor
 *                    that cannot
 *   needle_sparse    y[0] == fixed hidden token; the prompt is uninformative,
 *                    so reward is flat until the needle is found
 *
 * Additional tasks can be registered by name at runtime.
 */

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "binac/rng.hpp"
#include "binac/tokens.hpp"

namespace binac {

struct TaskParams {
  int vocab_size = 10;
  int prompt_len = 2;
  int answer_len = 1;
  std::optional<Token> needle_token;  // needle_sparse only
};

// Descriptive record of how sparse a task's reward is for an uninformed
// policy: the exact expected reward of answering uniformly at random.
struct SparsityProfile {
  double uniform_expected_reward = 0.0;
};

class Task {
 public:
  virtual ~Task() = default;

  const std::string& name() const { return name_; }
  const Vocab& vocab() const { return vocab_; }
  int prompt_len() const { return params_.prompt_len; }
  int answer_len() const { return params_.answer_len; }

  // Binary verifier. `y` may be a first or refined response.
  int verify(const TokenSeq& x, const TokenSeq& y) const {
    check_prompt(x);
    if ((y.role != Role::first_response && y.role != Role::refined_response) ||
        y.length() != params_.answer_len)
      throw ContractViolation("Task::verify: answer has wrong role or length");
    y.validate(vocab_);
    return verify_impl(x.tokens, y.tokens) ? 1 : 0;
  }

  // Prompts are iid uniform over regular tokens.
  TokenSeq sample_prompt(Rng& rng) const {
    Tokens t(static_cast<std::size_t>(params_.prompt_len));
    std::vector<double> uniform(static_cast<std::size_t>(vocab_.size),
                                1.0 / static_cast<double>(vocab_.size));
    for (auto& tok : t) tok = rng.categorical(uniform);
    return TokenSeq(Role::prompt, std::move(t));
  }

  // Enumeration interface: prompts in lexicographic order, each with its
  // probability under the prompt distribution.
  std::uint64_t prompt_space_size() const {
    std::uint64_t n = 1;
    for (int i = 0; i < params_.prompt_len; ++i) n *= static_cast<std::uint64_t>(vocab_.size);
    return n;
  }

  TokenSeq prompt_at(std::uint64_t index) const {
    if (index >= prompt_space_size())
      throw ContractViolation("Task::prompt_at: index out of range");
    Tokens t(static_cast<std::size_t>(params_.prompt_len));
    for (int i = params_.prompt_len - 1; i >= 0; --i) {
      t[static_cast<std::size_t>(i)] = static_cast<Token>(index % vocab_.size);
      index /= static_cast<std::uint64_t>(vocab_.size);
    }
    return TokenSeq(Role::prompt, std::move(t));
  }

  double prompt_prob(const TokenSeq& x) const {
    check_prompt(x);
    return 1.0 / static_cast<double>(prompt_space_size());
  }

  // Exact expected reward of a uniform-random answer, by enumeration over the
  // prompt distribution and the answer space.
  double uniform_policy_reward() const {
    std::uint64_t answers = 1;
    for (int i = 0; i < params_.answer_len; ++i) answers *= static_cast<std::uint64_t>(vocab_.size);
    double total = 0.0;
    for (std::uint64_t pi = 0; pi < prompt_space_size(); ++pi) {
      const TokenSeq x = prompt_at(pi);
      std::uint64_t hits = 0;
      Tokens y(static_cast<std::size_t>(params_.answer_len), 0);
      for (std::uint64_t ai = 0; ai < answers; ++ai) {
        std::uint64_t v = ai;
        for (int i = params_.answer_len - 1; i >= 0; --i) {
          y[static_cast<std::size_t>(i)] = static_cast<Token>(v % vocab_.size);
          v /= static_cast<std::uint64_t>(vocab_.size);
        }
        hits += verify_impl(x.tokens, y) ? 1 : 0;
      }
      total += prompt_prob(x) * static_cast<double>(hits) / static_cast<double>(answers);
    }
    return total;
  }

  SparsityProfile sparsity_profile() const { return {uniform_policy_reward()}; }

 protected:
  Task(std::string name, TaskParams params)
      : name_(std::move(name)), params_(params), vocab_(params.vocab_size) {
    if (params_.prompt_len < 1 || params_.answer_len < 1)
      throw ContractViolation("Task: prompt_len and answer_len must be >= 1");
  }

  virtual bool verify_impl(const Tokens& x, const Tokens& y) const = 0;

  const TaskParams& params() const { return params_; }

 private:
  void check_prompt(const TokenSeq& x) const {
    if (x.role != Role::prompt || x.length() != params_.prompt_len)
      throw ContractViolation("Task: prompt has wrong role or length");
    x.validate(vocab_);
  }

  std::string name_;
  TaskParams params_;
  Vocab vocab_;
};

// ---------------------------------------------------------------------------
// Built-ins.

class ModSumTask final : public Task {
 public:
  explicit ModSumTask(TaskParams p) : Task("mod_sum", p) {}

 private:
  bool verify_impl(const Tokens& x, const Tokens& y) const override {
    const long long sum = std::accumulate(x.begin(), x.end(), 0LL);
    return y[0] == static_cast<Token>(sum % vocab().size);
  }
};

// Requires prompt_len == 2: the target mixes both prompt tokens
// multiplicatively, so no single token determines it.
class CompositionKeyTask final : public Task {
 public:
  explicit CompositionKeyTask(TaskParams p) : Task("composition_key", p) {
    if (prompt_len() != 2)
      throw ContractViolation("composition_key requires prompt_len == 2");
  }

 private:
  bool verify_impl(const Tokens& x, const Tokens& y) const override {
    const long long a = x[0], b = x[1], v = vocab().size;
    return y[0] == static_cast<Token>((a * b + a) % v);
  }
};

class NeedleSparseTask final : public Task {
 public:
  explicit NeedleSparseTask(TaskParams p) : Task("needle_sparse", p) {
    if (!p.needle_token || !vocab().is_regular(*p.needle_token))
      throw ContractViolation("needle_sparse requires a regular needle_token");
    needle_ = *p.needle_token;
  }

 private:
  bool verify_impl(const Tokens&, const Tokens& y) const override { return y[0] == needle_; }

  Token needle_;
};

// ---------------------------------------------------------------------------
// Registry.

using TaskFactory = std::function<std::unique_ptr<Task>(const TaskParams&)>;

inline std::map<std::string, TaskFactory>& task_registry() {
  static std::map<std::string, TaskFactory> reg = {
      {"mod_sum", [](const TaskParams& p) { return std::make_unique<ModSumTask>(p); }},
      {"composition_key",
       [](const TaskParams& p) { return std::make_unique<CompositionKeyTask>(p); }},
      {"needle_sparse",
       [](const TaskParams& p) { return std::make_unique<NeedleSparseTask>(p); }},
  };
  return reg;
}

inline void register_task(const std::string& name, TaskFactory factory) {
  task_registry()[name] = std::move(factory);
}

inline std::unique_ptr<Task> make_task(const std::string& name, const TaskParams& params) {
  auto& reg = task_registry();
  auto it = reg.find(name);
  if (it == reg.end()) throw ContractViolation("make_task: unknown task '" + name + "'");
  return it->second(params);
}

}  // namespace binac
