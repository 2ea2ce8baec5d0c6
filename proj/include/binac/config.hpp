#pragma once

/**
 * Experiment configuration.
 *
 * One JSON document fully determines a run: task, policy shapes, trainer
 * hyperparameters, evaluation and oracle settings, and the output directory.
 * Parsing is strict - unknown keys anywhere are errors naming their JSON
 * path, so a typo can never silently fall back to a default. The resolved
 * config (every field materialised) is what gets written next to a run's
 * artifacts.
 */

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <memory>
#include <optional>
#include <string>

#include <json.hpp>

#include "binac/policy.hpp"
#include "binac/tasks.hpp"
#include "binac/tokens.hpp"
#include "binac/trainers.hpp"

namespace binac {

inline constexpr int kConfigSchemaVersion = 1;

namespace detail {

inline void check_keys(const json& j, const std::string& path,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config: " + path + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("config: unknown key '" + path + "." + key + "'");
  }
}

template <typename T>
T get_or(const json& j, const char* key, const std::string& path, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: bad value type at '" + path + "." + key + "'");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------

struct TaskSection {
  std::string name = "mod_sum";
  int vocab_size = 10;
  int prompt_len = 2;
  int answer_len = 1;
  std::optional<Token> needle_token;
};

struct PolicySection {
  int actor_window = 3;
  int critic_window = 3;
  int feedback_len = 1;
  bool shared_params = false;
  double init_logit_scale = 0.0;
  std::uint64_t init_seed = 0;
  double decode_temperature = 1.0;  // evaluation-time decoding only
};

struct EvalSection {
  int turns = 2;
  int n_prompts = 512;
};

struct OracleSection {
  bool enabled = true;
  long long every = 1;
  std::uint64_t max_trajectories = 1'000'000;
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  TaskSection task;
  PolicySection policy;
  TrainerConfig trainer;
  EvalSection eval;
  OracleSection oracle;
  std::string output_dir = "run";

  // -------------------------------------------------------------------------

  RoleLengths role_lengths() const {
    RoleLengths l;
    l.prompt = task.prompt_len;
    l.first_response = task.answer_len;
    l.feedback = policy.feedback_len;
    l.refined_response = task.answer_len;
    return l;
  }

  PolicySpec actor_spec() const {
    PolicySpec s;
    s.vocab = Vocab(task.vocab_size);
    s.window = policy.actor_window;
    s.lengths = role_lengths();
    s.init_logit_scale = policy.init_logit_scale;
    s.init_seed = policy.init_seed;
    return s;
  }

  PolicySpec critic_spec() const {
    PolicySpec s = actor_spec();
    s.window = policy.critic_window;
    return s;
  }

  std::unique_ptr<Task> make_task_instance() const {
    TaskParams p;
    p.vocab_size = task.vocab_size;
    p.prompt_len = task.prompt_len;
    p.answer_len = task.answer_len;
    p.needle_token = task.needle_token;
    return make_task(task.name, p);
  }

  PolicyPair make_policies() const {
    return make_policy_pair(actor_spec(), critic_spec(), policy.shared_params);
  }

  void validate() const {
    if (schema_version != kConfigSchemaVersion)
      throw ConfigError("config: schema_version must be " + std::to_string(kConfigSchemaVersion));
    if (output_dir.empty()) throw ConfigError("config: output_dir must be non-empty");
    if (policy.actor_window < 1 || policy.critic_window < 1)
      throw ConfigError("config: policy windows must be >= 1");
    if (policy.feedback_len < 1) throw ConfigError("config: policy.feedback_len must be >= 1");
    if (policy.init_logit_scale < 0.0)
      throw ConfigError("config: policy.init_logit_scale must be >= 0");
    if (policy.decode_temperature <= 0.0)
      throw ConfigError("config: policy.decode_temperature must be > 0");
    if (policy.shared_params && policy.actor_window != policy.critic_window)
      throw ConfigError("config: shared_params requires actor_window == critic_window");
    if (eval.turns < 1) throw ConfigError("config: eval.turns must be >= 1");
    if (eval.n_prompts < 2) throw ConfigError("config: eval.n_prompts must be >= 2");
    if (oracle.every < 1) throw ConfigError("config: oracle.every must be >= 1");
    if (oracle.max_trajectories < 1)
      throw ConfigError("config: oracle.max_trajectories must be >= 1");
    try {
      trainer.validate();
    } catch (const ContractViolation& e) {
      throw ConfigError(std::string("config: trainer: ") + e.what());
    }
    if (trainer.fixed_feedback_token &&
        (*trainer.fixed_feedback_token < 0 || *trainer.fixed_feedback_token >= task.vocab_size))
      throw ConfigError("config: trainer.fixed_feedback_token outside task vocabulary");
    try {
      (void)make_task_instance();
      (void)actor_spec().validate();
      (void)critic_spec().validate();
    } catch (const ContractViolation& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }

  // -------------------------------------------------------------------------

  json to_json() const {
    json j;
    j["schema_version"] = schema_version;
    j["output_dir"] = output_dir;
    j["task"] = {{"name", task.name},
                 {"vocab_size", task.vocab_size},
                 {"prompt_len", task.prompt_len},
                 {"answer_len", task.answer_len},
                 {"needle_token", task.needle_token ? json(*task.needle_token) : json(nullptr)}};
    j["policy"] = {{"actor_window", policy.actor_window},
                   {"critic_window", policy.critic_window},
                   {"feedback_len", policy.feedback_len},
                   {"shared_params", policy.shared_params},
                   {"init_logit_scale", policy.init_logit_scale},
                   {"init_seed", policy.init_seed},
                   {"decode_temperature", policy.decode_temperature}};
    j["trainer"] = {{"mode", trainer.mode},
                    {"lambda", trainer.lambda},
                    {"lr_actor", trainer.lr_actor},
                    {"lr_critic", trainer.lr_critic},
                    {"group_size", trainer.group_size},
                    {"groups_per_step", trainer.groups_per_step},
                    {"rollouts_per_step", trainer.rollouts_per_step},
                    {"actor_steps_per_iter", trainer.actor_steps_per_iter},
                    {"critic_steps_per_iter", trainer.critic_steps_per_iter},
                    {"checkpoint_lag", trainer.checkpoint_lag},
                    {"iterations", trainer.iterations},
                    {"fixed_feedback_token",
                     trainer.fixed_feedback_token ? json(*trainer.fixed_feedback_token) : json(nullptr)},
                    {"advantage_epsilon", trainer.advantage_epsilon},
                    {"optimizer", trainer.optimizer},
                    {"adam_beta1", trainer.adam_beta1},
                    {"adam_beta2", trainer.adam_beta2},
                    {"adam_epsilon", trainer.adam_epsilon},
                    {"seed", trainer.seed},
                    {"threads", trainer.threads}};
    j["eval"] = {{"turns", eval.turns}, {"n_prompts", eval.n_prompts}};
    j["oracle"] = {{"enabled", oracle.enabled},
                   {"every", oracle.every},
                   {"max_trajectories", oracle.max_trajectories}};
    return j;
  }

  static ExperimentConfig from_json(const json& j) {
    using detail::check_keys;
    using detail::get_or;
    ExperimentConfig c;
    check_keys(j, "$", {"schema_version", "task", "policy", "trainer", "eval", "oracle",
                        "output_dir"});
    c.schema_version = get_or(j, "schema_version", "$", c.schema_version);
    c.output_dir = get_or<std::string>(j, "output_dir", "$", c.output_dir);

    if (j.contains("task")) {
      const json& t = j.at("task");
      check_keys(t, "$.task", {"name", "vocab_size", "prompt_len", "answer_len", "needle_token"});
      c.task.name = get_or<std::string>(t, "name", "$.task", c.task.name);
      c.task.vocab_size = get_or(t, "vocab_size", "$.task", c.task.vocab_size);
      c.task.prompt_len = get_or(t, "prompt_len", "$.task", c.task.prompt_len);
      c.task.answer_len = get_or(t, "answer_len", "$.task", c.task.answer_len);
      if (t.contains("needle_token") && !t.at("needle_token").is_null())
        c.task.needle_token = get_or<Token>(t, "needle_token", "$.task", 0);
    }
    if (j.contains("policy")) {
      const json& p = j.at("policy");
      check_keys(p, "$.policy",
                 {"actor_window", "critic_window", "feedback_len", "shared_params",
                  "init_logit_scale", "init_seed", "decode_temperature"});
      c.policy.actor_window = get_or(p, "actor_window", "$.policy", c.policy.actor_window);
      c.policy.critic_window = get_or(p, "critic_window", "$.policy", c.policy.critic_window);
      c.policy.feedback_len = get_or(p, "feedback_len", "$.policy", c.policy.feedback_len);
      c.policy.shared_params = get_or(p, "shared_params", "$.policy", c.policy.shared_params);
      c.policy.init_logit_scale =
          get_or(p, "init_logit_scale", "$.policy", c.policy.init_logit_scale);
      c.policy.init_seed = get_or(p, "init_seed", "$.policy", c.policy.init_seed);
      c.policy.decode_temperature =
          get_or(p, "decode_temperature", "$.policy", c.policy.decode_temperature);
    }
    if (j.contains("trainer")) {
      const json& t = j.at("trainer");
      check_keys(t, "$.trainer",
                 {"mode", "lambda", "lr_actor", "lr_critic", "group_size", "groups_per_step",
                  "rollouts_per_step", "actor_steps_per_iter", "critic_steps_per_iter",
                  "checkpoint_lag", "iterations", "fixed_feedback_token", "advantage_epsilon",
                  "optimizer", "adam_beta1", "adam_beta2", "adam_epsilon", "seed", "threads"});
      TrainerConfig& tc = c.trainer;
      tc.mode = get_or<std::string>(t, "mode", "$.trainer", tc.mode);
      tc.lambda = get_or(t, "lambda", "$.trainer", tc.lambda);
      tc.lr_actor = get_or(t, "lr_actor", "$.trainer", tc.lr_actor);
      tc.lr_critic = get_or(t, "lr_critic", "$.trainer", tc.lr_critic);
      tc.group_size = get_or(t, "group_size", "$.trainer", tc.group_size);
      tc.groups_per_step = get_or(t, "groups_per_step", "$.trainer", tc.groups_per_step);
      tc.rollouts_per_step = get_or(t, "rollouts_per_step", "$.trainer", tc.rollouts_per_step);
      tc.actor_steps_per_iter =
          get_or(t, "actor_steps_per_iter", "$.trainer", tc.actor_steps_per_iter);
      tc.critic_steps_per_iter =
          get_or(t, "critic_steps_per_iter", "$.trainer", tc.critic_steps_per_iter);
      tc.checkpoint_lag = get_or(t, "checkpoint_lag", "$.trainer", tc.checkpoint_lag);
      tc.iterations = get_or(t, "iterations", "$.trainer", tc.iterations);
      if (t.contains("fixed_feedback_token") && !t.at("fixed_feedback_token").is_null())
        tc.fixed_feedback_token = get_or<Token>(t, "fixed_feedback_token", "$.trainer", 0);
      tc.advantage_epsilon = get_or(t, "advantage_epsilon", "$.trainer", tc.advantage_epsilon);
      tc.optimizer = get_or<std::string>(t, "optimizer", "$.trainer", tc.optimizer);
      tc.adam_beta1 = get_or(t, "adam_beta1", "$.trainer", tc.adam_beta1);
      tc.adam_beta2 = get_or(t, "adam_beta2", "$.trainer", tc.adam_beta2);
      tc.adam_epsilon = get_or(t, "adam_epsilon", "$.trainer", tc.adam_epsilon);
      tc.seed = get_or(t, "seed", "$.trainer", tc.seed);
      tc.threads = get_or(t, "threads", "$.trainer", tc.threads);
    }
    if (j.contains("eval")) {
      const json& e = j.at("eval");
      check_keys(e, "$.eval", {"turns", "n_prompts"});
      c.eval.turns = get_or(e, "turns", "$.eval", c.eval.turns);
      c.eval.n_prompts = get_or(e, "n_prompts", "$.eval", c.eval.n_prompts);
    }
    if (j.contains("oracle")) {
      const json& o = j.at("oracle");
      check_keys(o, "$.oracle", {"enabled", "every", "max_trajectories"});
      c.oracle.enabled = get_or(o, "enabled", "$.oracle", c.oracle.enabled);
      c.oracle.every = get_or(o, "every", "$.oracle", c.oracle.every);
      c.oracle.max_trajectories =
          get_or(o, "max_trajectories", "$.oracle", c.oracle.max_trajectories);
    }
    c.validate();
    return c;
  }

  static ExperimentConfig load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("config: cannot open " + path.string());
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config: " + path.string() + ": " + e.what());
    }
    return from_json(j);
  }
};

}  // namespace binac
