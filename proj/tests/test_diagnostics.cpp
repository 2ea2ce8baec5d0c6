#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "binac/diagnostics.hpp"
#include "binac/estimators.hpp"
#include "binac/runner.hpp"
#include "helpers.hpp"

using namespace binac;

TEST_CASE("collapse statistics classify degenerate reward groups") {
  std::vector<GroupStats> groups;
  groups.push_back(grpo_advantages({1, 1, 1}, 0.0));  // all correct
  groups.push_back(grpo_advantages({0, 0, 0}, 0.0));  // all wrong
  groups.push_back(grpo_advantages({1, 0, 1}, 0.0));  // informative
  const CollapseStats cs = collapse_stats(groups);
  REQUIRE(cs.groups == 3);
  REQUIRE(cs.advantage_collapsed == 2);
  REQUIRE(cs.reward_all_zero == 1);
  REQUIRE(cs.reward_all_one == 1);
  REQUIRE_THAT(cs.advantage_collapse_freq(), Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-15));

  CollapseStats acc;
  acc.add(cs);
  acc.add(cs);
  REQUIRE(acc.groups == 6);
  REQUIRE(acc.advantage_collapsed == 4);
}

TEST_CASE("untrained uniform policy collapse rate matches the closed form") {
  // One-token answers over vocab 20, groups of 4: a uniform policy answers
  // correctly with probability 1/20, so a group is uninformative with
  // probability (19/20)^4 + (1/20)^4 = 0.814513 (all wrong or all right).
  PolicyParams actor(testutil::make_spec(20, 3, 2, 1, 1));
  TaskParams tp;
  tp.vocab_size = 20;
  tp.prompt_len = 2;
  tp.answer_len = 1;
  tp.needle_token = 7;
  auto task = make_task("needle_sparse", tp);
  const int n_groups = 10000;
  const GrpoBatch batch = grpo_batch(actor, *task, 4, 1e-8, n_groups, 2024);
  const CollapseStats cs = collapse_stats(batch.groups);
  const double analytic = std::pow(19.0 / 20.0, 4) + std::pow(1.0 / 20.0, 4);
  const double sigma = std::sqrt(analytic * (1.0 - analytic) / n_groups);
  REQUIRE(std::abs(cs.advantage_collapse_freq() - analytic) < 3.0 * sigma);
}

TEST_CASE("compatibility statistics track promotion and demotion rates") {
  const std::vector<int> first{1, 0, 0, 1, 0};
  const std::vector<int> refined{1, 1, 0, 0, 0};
  const CompatibilityStats cs = compatibility_stats(first, refined);
  REQUIRE_THAT(cs.acc_first, Catch::Matchers::WithinAbs(0.4, 1e-15));
  REQUIRE_THAT(cs.acc_refined, Catch::Matchers::WithinAbs(0.4, 1e-15));
  REQUIRE_THAT(cs.delta_acc, Catch::Matchers::WithinAbs(0.0, 1e-15));
  // One of three incorrect prompts was promoted; one of two correct demoted.
  REQUIRE(cs.incorrect_to_correct == 1);
  REQUIRE(cs.correct_to_incorrect == 1);
  REQUIRE_THAT(cs.p_incorrect_to_correct, Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-15));
  REQUIRE_THAT(cs.p_correct_to_incorrect, Catch::Matchers::WithinAbs(0.5, 1e-15));
  REQUIRE_THROWS_AS(compatibility_stats(std::vector<int>{1}, std::vector<int>{}),
                    ContractViolation);
}

TEST_CASE("sampled usefulness probe is exactly zero for constant feedback") {
  auto tiny = testutil::tiny_instance();
  PolicyParams actor(tiny.actor_spec);
  const FeedbackSource fixed = FeedbackSource::constant(TokenSeq(Role::feedback, {1}));
  const FeedbackProbe p = feedback_usefulness(actor, fixed, *tiny.task, 300, 5);
  REQUIRE(p.matched_acc == p.shuffled_acc);
  REQUIRE(p.difference.mean == 0.0);
  REQUIRE(p.difference.se == 0.0);
}

TEST_CASE("sampled usefulness probe detects an informative critic") {
  // Same hand-built signaling solution as the exact-probe test: the critic
  // announces the answer, the actor repeats it.
  const PolicySpec aspec = testutil::make_spec(3, 2, 1, 1, 1);
  const PolicySpec cspec = testutil::make_spec(3, 5, 1, 1, 1);
  PolicyParams actor(aspec), critic(cspec);
  auto task = testutil::make_mod_sum(3, 1, 1);
  for (Token x = 0; x < 3; ++x) {
    const TokenSeq xs(Role::prompt, {x});
    for (Token y0 = 0; y0 < 3; ++y0) {
      const TokenSeq y0s(Role::first_response, {y0});
      const TokenSeq ctx1[] = {xs, y0s};
      const Tokens cstream = build_stream(ctx1, Role::feedback, cspec);
      critic.row_mut(context_key(cstream, cspec.window, cspec.vocab))[x] = 8.0;
    }
  }
  for (Token z = 0; z < 3; ++z) {
    const TokenSeq xs(Role::prompt, {0});
    const TokenSeq y0s(Role::first_response, {0});
    const TokenSeq zs(Role::feedback, {z});
    const TokenSeq ctx2[] = {xs, y0s, zs};
    const Tokens astream = build_stream(ctx2, Role::refined_response, aspec);
    actor.row_mut(context_key(astream, aspec.window, aspec.vocab))[z] = 8.0;
  }
  const FeedbackSource fb = FeedbackSource::from_critic(critic);
  const FeedbackProbe p = feedback_usefulness(actor, fb, *task, 600, 6);
  REQUIRE(p.difference.mean > 0.3);
  REQUIRE(p.difference.mean > 3.0 * p.difference.se);
}

TEST_CASE("run records survive a JSON round trip, including null fields") {
  RunRecord r;
  r.iteration = 17;
  r.mode = "binac";
  r.seed = 42;
  r.objective.u_hat = 0.25;
  r.objective.u_se = 0.01;
  r.objective.l_hat = 0.25;
  r.objective.l_se = 0.01;
  r.objective.lagrangian_hat = 0.3;
  r.objective.lagrangian_se = 0.02;
  r.collapse.groups = 16;
  r.collapse.advantage_collapsed = 9;
  r.collapse.reward_all_zero = 8;
  r.collapse.reward_all_one = 1;
  r.collapse_cumulative = r.collapse;
  r.grad_norm_actor = 1.25;
  r.grad_norm_critic = 0.5;
  r.surrogate_iteration = 7;
  r.trajectories_cumulative = 4096;

  SECTION("oracle value present") {
    r.oracle_reward = 0.375;
    const RunRecord back = run_record_from_json(to_json(r));
    REQUIRE(to_json(back) == to_json(r));
    REQUIRE(back.oracle_reward.has_value());
    REQUIRE(*back.oracle_reward == 0.375);
  }
  SECTION("oracle value absent") {
    const RunRecord back = run_record_from_json(to_json(r));
    REQUIRE_FALSE(back.oracle_reward.has_value());
    REQUIRE(to_json(back) == to_json(r));
  }
}

TEST_CASE("run logs append records under a header and read back verbatim") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "binac_test_runlog";
  fs::create_directories(dir);
  const fs::path log = dir / "run.jsonl";
  {
    RunLogWriter w(log, {{"mode", "grpo"}, {"task", "mod_sum"}});
    for (int i = 1; i <= 3; ++i) {
      RunRecord r;
      r.iteration = i;
      r.mode = "grpo";
      r.objective.u_hat = 0.1 * i;
      r.trajectories_cumulative = 64 * i;
      w.record(r);
    }
  }
  const RunLog back = read_run_log(log);
  REQUIRE(back.header.at("format") == "binac-runlog");
  REQUIRE(back.header.at("schema_version") == kRunLogSchemaVersion);
  REQUIRE(back.header.at("mode") == "grpo");
  REQUIRE(back.records.size() == 3);
  REQUIRE(back.records[2].iteration == 3);
  REQUIRE_THAT(back.records[1].objective.u_hat, Catch::Matchers::WithinAbs(0.2, 1e-15));

  // A wrong schema version is a configuration error, not an I/O error.
  {
    std::ofstream bad(dir / "bad.jsonl", std::ios::binary);
    bad << R"({"format":"binac-runlog","schema_version":999})" << "\n";
  }
  REQUIRE_THROWS_AS(read_run_log(dir / "bad.jsonl"), ConfigError);
  {
    std::ofstream bad(dir / "notalog.jsonl", std::ios::binary);
    bad << R"({"format":"something-else","schema_version":1})" << "\n";
  }
  REQUIRE_THROWS_AS(read_run_log(dir / "notalog.jsonl"), ConfigError);
  REQUIRE_THROWS_AS(read_run_log(dir / "missing.jsonl"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("plot-data flattens run logs into one CSV table") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "binac_test_plotdata";
  fs::remove_all(dir);
  fs::create_directories(dir / "runA");
  {
    RunLogWriter w(dir / "runA" / "run.jsonl", {{"mode", "binac"}});
    for (int i = 1; i <= 4; ++i) {
      RunRecord r;
      r.iteration = i;
      r.mode = "binac";
      r.seed = 9;
      r.objective.u_hat = 0.2;
      if (i % 2 == 0) r.oracle_reward = 0.5;
      r.trajectories_cumulative = 128 * i;
      w.record(r);
    }
  }
  const fs::path csv = run_plotdata({dir / "runA" / "run.jsonl"}, dir / "out");
  REQUIRE(fs::exists(csv));
  std::ifstream in(csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 5);  // header + 4 records
  REQUIRE(lines[0].rfind("run,iteration,mode,seed,", 0) == 0);
  REQUIRE(lines[1].rfind("runA,1,binac,9,", 0) == 0);
  // Absent oracle values are empty cells, present ones are numbers.
  REQUIRE(lines[1].find(",,") != std::string::npos);
  REQUIRE(lines[2].find("0.5") != std::string::npos);
  fs::remove_all(dir);
}
