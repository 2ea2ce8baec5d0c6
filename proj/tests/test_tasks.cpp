#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <memory>
#include <set>
#include <vector>

#include "binac/rng.hpp"
#include "binac/tasks.hpp"
#include "helpers.hpp"

using namespace binac;

namespace {

TaskParams params(int vocab, int prompt_len, int answer_len,
                  std::optional<Token> needle = std::nullopt) {
  TaskParams p;
  p.vocab_size = vocab;
  p.prompt_len = prompt_len;
  p.answer_len = answer_len;
  p.needle_token = needle;
  return p;
}

TokenSeq prompt(Tokens t) { return TokenSeq(Role::prompt, std::move(t)); }
TokenSeq answer(Tokens t) { return TokenSeq(Role::refined_response, std::move(t)); }

}  // namespace

TEST_CASE("mod_sum rewards the modular sum of the prompt") {
  auto task = make_task("mod_sum", params(10, 2, 1));
  REQUIRE(task->verify(prompt({3, 4}), answer({7})) == 1);
  REQUIRE(task->verify(prompt({3, 4}), answer({6})) == 0);
  REQUIRE(task->verify(prompt({7, 8}), answer({5})) == 1);  // 15 mod 10
  REQUIRE(task->verify(prompt({0, 0}), answer({0})) == 1);

  auto longer = make_task("mod_sum", params(5, 3, 1));
  REQUIRE(longer->verify(prompt({4, 4, 4}), answer({2})) == 1);  // 12 mod 5
}

TEST_CASE("composition_key rewards a*b + a mod V and requires pairs") {
  auto task = make_task("composition_key", params(10, 2, 1));
  REQUIRE(task->verify(prompt({3, 4}), answer({5})) == 1);  // 3*4 + 3 = 15
  REQUIRE(task->verify(prompt({3, 4}), answer({7})) == 0);
  REQUIRE(task->verify(prompt({9, 9}), answer({0})) == 1);  // 90 mod 10
  REQUIRE_THROWS_AS(make_task("composition_key", params(10, 3, 1)), ContractViolation);
}

TEST_CASE("needle_sparse rewards only the needle token") {
  auto task = make_task("needle_sparse", params(20, 2, 1, Token{13}));
  REQUIRE(task->verify(prompt({5, 6}), answer({13})) == 1);
  REQUIRE(task->verify(prompt({5, 6}), answer({12})) == 0);
  REQUIRE(task->verify(prompt({0, 0}), answer({13})) == 1);
  REQUIRE_THROWS_AS(make_task("needle_sparse", params(20, 2, 1)), ContractViolation);
  REQUIRE_THROWS_AS(make_task("needle_sparse", params(20, 2, 1, Token{20})), ContractViolation);
}

TEST_CASE("verify enforces roles, lengths, and vocabulary") {
  auto task = make_task("mod_sum", params(4, 2, 1));
  REQUIRE_THROWS_AS(task->verify(prompt({1}), answer({0})), ContractViolation);
  REQUIRE_THROWS_AS(task->verify(prompt({1, 2}), answer({0, 1})), ContractViolation);
  REQUIRE_THROWS_AS(task->verify(prompt({1, 4}), answer({0})), ContractViolation);
  REQUIRE_THROWS_AS(task->verify(answer({1, 2}), answer({0})), ContractViolation);
  // A first_response is accepted as the graded answer (turn-1 grading).
  REQUIRE_NOTHROW(task->verify(prompt({1, 2}), TokenSeq(Role::first_response, {3})));
}

TEST_CASE("prompt enumeration covers the space exactly once, uniformly") {
  auto task = make_task("mod_sum", params(3, 2, 1));
  REQUIRE(task->prompt_space_size() == 9);
  std::set<Tokens> seen;
  for (std::uint64_t i = 0; i < task->prompt_space_size(); ++i) {
    const TokenSeq x = task->prompt_at(i);
    REQUIRE(x.role == Role::prompt);
    REQUIRE(x.length() == 2);
    REQUIRE(seen.insert(x.tokens).second);
    REQUIRE_THAT(task->prompt_prob(x), Catch::Matchers::WithinAbs(1.0 / 9.0, 1e-15));
  }
  REQUIRE(task->prompt_at(0).tokens == Tokens{0, 0});
  REQUIRE(task->prompt_at(8).tokens == Tokens{2, 2});
  REQUIRE_THROWS_AS(task->prompt_at(9), ContractViolation);
}

TEST_CASE("sampled prompts match the uniform enumeration distribution") {
  auto task = make_task("mod_sum", params(5, 1, 1));
  Rng rng(404);
  std::vector<int> counts(5, 0);
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const TokenSeq x = task->sample_prompt(rng);
    counts[static_cast<std::size_t>(x.tokens[0])]++;
  }
  // Each cell: mean 4000, sd ~ sqrt(n * 0.2 * 0.8) = 56.6; allow 5 sigma.
  for (int c : counts) REQUIRE(std::abs(c - 4000) < 283);
}

TEST_CASE("every prompt has exactly one verifying answer on the dense tasks") {
  for (const char* name : {"mod_sum", "composition_key"}) {
    auto task = make_task(name, params(6, 2, 1));
    for (std::uint64_t i = 0; i < task->prompt_space_size(); ++i) {
      const TokenSeq x = task->prompt_at(i);
      int hits = 0;
      for (Token a = 0; a < 6; ++a) hits += task->verify(x, answer({a}));
      REQUIRE(hits == 1);
    }
  }
}

TEST_CASE("uniform-policy expected reward is 1/V on single-answer tasks") {
  auto mod = make_task("mod_sum", params(7, 2, 1));
  REQUIRE_THAT(mod->uniform_policy_reward(), Catch::Matchers::WithinAbs(1.0 / 7.0, 1e-12));
  auto comp = make_task("composition_key", params(10, 2, 1));
  REQUIRE_THAT(comp->uniform_policy_reward(), Catch::Matchers::WithinAbs(0.1, 1e-12));
  auto needle = make_task("needle_sparse", params(20, 2, 1, Token{3}));
  REQUIRE_THAT(needle->uniform_policy_reward(), Catch::Matchers::WithinAbs(0.05, 1e-12));
}

TEST_CASE("multi-token answers are graded on the modular sum task") {
  // answer_len 2 with vocab 3: correct answer is the digit pair whose sum
  // matches the prompt sum mod 3... the task grades the final token stream.
  auto task = make_task("mod_sum", params(3, 2, 2));
  const TokenSeq x = prompt({2, 2});
  int hits = 0;
  for (Token a = 0; a < 3; ++a)
    for (Token b = 0; b < 3; ++b) hits += task->verify(x, answer({a, b}));
  REQUIRE(hits >= 1);
  const double u = task->uniform_policy_reward();
  REQUIRE(u > 0.0);
  REQUIRE(u < 1.0);
  // Uniform reward equals (verifying answers) / (answer space) averaged
  // over prompts; recompute it independently.
  double acc = 0.0;
  for (std::uint64_t i = 0; i < task->prompt_space_size(); ++i) {
    const TokenSeq p = task->prompt_at(i);
    int h = 0;
    for (Token a = 0; a < 3; ++a)
      for (Token b = 0; b < 3; ++b) h += task->verify(p, answer({a, b}));
    acc += task->prompt_prob(p) * h / 9.0;
  }
  REQUIRE_THAT(u, Catch::Matchers::WithinAbs(acc, 1e-12));
}

TEST_CASE("task registry rejects unknown names and accepts extensions") {
  REQUIRE_THROWS_AS(make_task("no_such_task", params(4, 1, 1)), ContractViolation);
  struct AlwaysRight final : Task {
    explicit AlwaysRight(const TaskParams& p) : Task("always_right", p) {}
    bool verify_impl(const Tokens&, const Tokens&) const override { return true; }
  };
  register_task("always_right",
                [](const TaskParams& p) { return std::make_unique<AlwaysRight>(p); });
  auto task = make_task("always_right", params(4, 1, 1));
  REQUIRE(task->verify(prompt({2}), answer({0})) == 1);
  REQUIRE_THAT(task->uniform_policy_reward(), Catch::Matchers::WithinAbs(1.0, 1e-15));
}
