// Shared construction helpers for the test suites.
#pragma once

#include <memory>
#include <string>

#include "binac/config.hpp"
#include "binac/policy.hpp"
#include "binac/tasks.hpp"

namespace testutil {

inline binac::PolicySpec make_spec(int vocab, int window, int prompt_len, int answer_len,
                                   int feedback_len, double init_scale = 0.0,
                                   std::uint64_t init_seed = 0) {
  binac::PolicySpec spec;
  spec.vocab = binac::Vocab{vocab};
  spec.window = window;
  spec.lengths = binac::RoleLengths{prompt_len, answer_len, feedback_len, answer_len};
  spec.init_logit_scale = init_scale;
  spec.init_seed = init_seed;
  spec.validate();
  return spec;
}

inline std::unique_ptr<binac::Task> make_mod_sum(int vocab, int prompt_len, int answer_len) {
  binac::TaskParams p;
  p.vocab_size = vocab;
  p.prompt_len = prompt_len;
  p.answer_len = answer_len;
  return binac::make_task("mod_sum", p);
}

// The smallest fully enumerable instance: vocab 2, every role one token long.
// Trajectory space: 2 prompts x 2 first responses x 2 feedback x 2 refined = 16.
struct TinyInstance {
  binac::PolicySpec actor_spec;
  binac::PolicySpec critic_spec;
  std::unique_ptr<binac::Task> task;
};

inline TinyInstance tiny_instance(double init_scale = 0.7, std::uint64_t init_seed = 11) {
  TinyInstance t;
  t.actor_spec = make_spec(2, 3, 1, 1, 1, init_scale, init_seed);
  t.critic_spec = make_spec(2, 3, 1, 1, 1, init_scale, init_seed + 1);
  t.task = make_mod_sum(2, 1, 1);
  return t;
}

}  // namespace testutil
