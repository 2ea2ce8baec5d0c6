#pragma once

/**
 * Tabular categorical sequence policy.
 *
 * A policy is a table of logit rows keyed by the trailing `window` tokens of
 * the flattened exchange stream. The stream interleaves generated segments
 * with reserved marker tokens:
 *
 *   [x...] M1 [y0...] M2 [z...] M3 [y1...]
 *
 * so a context key encodes both recent content and the role boundary it sits
 * behind. Rows not present in the table behave as freshly initialised rows
 * (all-zero logits, i.e. uniform, unless an init noise scale is configured);
 * they materialise lazily on first update, which bounds memory to visited
 * contexts.
 *
 * Emission support is always the regular vocabulary: markers delimit, they
 * are never emitted.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "binac/rng.hpp"
#include "binac/tokens.hpp"

namespace binac {

using ContextKey = std::uint64_t;

// ---------------------------------------------------------------------------
// Specification of a policy's shape.

struct PolicySpec {
  Vocab vocab{2};
  int window = 3;  // context tokens (markers included) per key
  RoleLengths lengths;
  // Standard deviation-like scale for fresh-row logit noise; 0 keeps fresh
  // rows exactly uniform. Nonzero values give each context key deterministic
  // pseudo-random logits derived from init_seed, which breaks the symmetry
  // of otherwise indistinguishable rows.
  double init_logit_scale = 0.0;
  std::uint64_t init_seed = 0;

  void validate() const {
    lengths.validate();
    if (window < 1) throw ContractViolation("PolicySpec: window must be >= 1");
    if (init_logit_scale < 0.0)
      throw ContractViolation("PolicySpec: init_logit_scale must be >= 0");
    // Keys must fit in 64 bits: sentinel-prefixed base-B digits, B = alphabet.
    const std::uint64_t base = static_cast<std::uint64_t>(vocab.alphabet_size());
    std::uint64_t cap = 1;
    for (int i = 0; i < window; ++i) {
      if (cap > (std::uint64_t{1} << 62) / base)
        throw ContractViolation("PolicySpec: alphabet^window overflows the key space");
      cap *= base;
    }
  }

  friend bool operator==(const PolicySpec&, const PolicySpec&) = default;
};

// ---------------------------------------------------------------------------
// Context-key encoding.
//
// A key is the sentinel digit 1 followed by the window's tokens as base-B
// digits, B = alphabet size. The sentinel makes keys of different lengths
// (short streams near the start of an exchange) distinct.

inline ContextKey encode_context(std::span<const Token> window_tokens, const Vocab& v) {
  const std::uint64_t base = static_cast<std::uint64_t>(v.alphabet_size());
  ContextKey key = 1;
  for (Token t : window_tokens) {
    if (t < 0 || t >= v.alphabet_size())
      throw ContractViolation("encode_context: token outside alphabet");
    key = key * base + static_cast<std::uint64_t>(t);
  }
  return key;
}

// Inverse of encode_context, for debugging and table dumps.
inline Tokens decode_context(ContextKey key, const Vocab& v) {
  const std::uint64_t base = static_cast<std::uint64_t>(v.alphabet_size());
  Tokens out;
  while (key > 1) {
    out.push_back(static_cast<Token>(key % base));
    key /= base;
  }
  if (key != 1) throw ContractViolation("decode_context: malformed key");
  std::reverse(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Softmax helpers (max-subtracted for stability under extreme logits).

inline void softmax_into(std::span<const double> logits, std::vector<double>& probs) {
  probs.resize(logits.size());
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - m);
    sum += probs[i];
  }
  for (double& p : probs) p /= sum;
}

inline double log_softmax_at(std::span<const double> logits, int idx) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - m);
  return logits[idx] - m - std::log(sum);
}

// ---------------------------------------------------------------------------
// Sparse gradient accumulator: context key -> per-token partials. Ordered so
// that iteration (and thus parameter updates) has one deterministic order.

struct GradientTable {
  int vocab_size = 0;
  std::map<ContextKey, std::vector<double>> rows;

  GradientTable() = default;
  explicit GradientTable(int vocab_size_) : vocab_size(vocab_size_) {}

  std::vector<double>& row(ContextKey key) {
    auto [it, fresh] = rows.try_emplace(key);
    if (fresh) it->second.assign(static_cast<std::size_t>(vocab_size), 0.0);
    return it->second;
  }

  // this += a * g
  void axpy(double a, const GradientTable& g) {
    if (vocab_size == 0) vocab_size = g.vocab_size;
    if (g.vocab_size != vocab_size)
      throw ContractViolation("GradientTable::axpy: vocab size mismatch");
    for (const auto& [key, src] : g.rows) {
      auto& dst = row(key);
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] += a * src[i];
    }
  }

  void scale(double a) {
    for (auto& [key, r] : rows)
      for (double& v : r) v *= a;
  }

  double max_abs() const {
    double m = 0.0;
    for (const auto& [key, r] : rows)
      for (double v : r) m = std::max(m, std::abs(v));
    return m;
  }

  double l2_norm() const {
    double s = 0.0;
    for (const auto& [key, r] : rows)
      for (double v : r) s += v * v;
    return std::sqrt(s);
  }

  // Largest absolute componentwise difference over the union of rows.
  double max_abs_diff(const GradientTable& other) const {
    if (other.vocab_size != vocab_size)
      throw ContractViolation("GradientTable::max_abs_diff: vocab size mismatch");
    double m = 0.0;
    const std::vector<double> zero(static_cast<std::size_t>(vocab_size), 0.0);
    auto half = [&](const GradientTable& a, const GradientTable& b) {
      for (const auto& [key, ra] : a.rows) {
        auto it = b.rows.find(key);
        const std::vector<double>& rb = it == b.rows.end() ? zero : it->second;
        for (std::size_t i = 0; i < ra.size(); ++i)
          m = std::max(m, std::abs(ra[i] - rb[i]));
      }
    };
    half(*this, other);
    half(other, *this);
    return m;
  }
};

// ---------------------------------------------------------------------------
// Parameter table.

class PolicyParams {
 public:
  PolicyParams() = default;
  explicit PolicyParams(PolicySpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  const PolicySpec& spec() const { return spec_; }
  const Vocab& vocab() const { return spec_.vocab; }

  // Logits a fresh (never-updated) row starts from.
  void fresh_row(ContextKey key, std::vector<double>& out) const {
    out.assign(static_cast<std::size_t>(spec_.vocab.size), 0.0);
    if (spec_.init_logit_scale == 0.0) return;
    for (std::size_t j = 0; j < out.size(); ++j) {
      const std::uint64_t h = derive_seed(spec_.init_seed, "row-init", key, j);
      const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
      out[j] = spec_.init_logit_scale * (2.0 * u - 1.0);
    }
  }

  // Read access; `scratch` backs the result when the row is not materialised.
  const std::vector<double>& row_values(ContextKey key, std::vector<double>& scratch) const {
    auto it = rows_.find(key);
    if (it != rows_.end()) return it->second;
    fresh_row(key, scratch);
    return scratch;
  }

  // Write access; materialises the row with its fresh-init values first.
  std::vector<double>& row_mut(ContextKey key) {
    auto it = rows_.find(key);
    if (it != rows_.end()) return it->second;
    std::vector<double> fresh;
    fresh_row(key, fresh);
    return rows_.emplace(key, std::move(fresh)).first->second;
  }

  const std::unordered_map<ContextKey, std::vector<double>>& rows() const { return rows_; }
  std::unordered_map<ContextKey, std::vector<double>>& rows_mut() { return rows_; }
  std::size_t materialized_rows() const { return rows_.size(); }

 private:
  PolicySpec spec_;
  std::unordered_map<ContextKey, std::vector<double>> rows_;
};

// ---------------------------------------------------------------------------
// Context streams.

namespace detail {

// Expected context chain for generating each role.
inline void check_context_chain(std::span<const TokenSeq> ctx, Role target) {
  static constexpr Role chain[3] = {Role::prompt, Role::first_response, Role::feedback};
  std::size_t need = 0;
  switch (target) {
    case Role::first_response: need = 1; break;
    case Role::feedback: need = 2; break;
    case Role::refined_response: need = 3; break;
    case Role::prompt:
      throw ContractViolation("policy: prompts are sampled by tasks, not generated");
  }
  if (ctx.size() != need)
    throw ContractViolation(std::string("policy: generating ") + role_name(target) +
                            " requires " + std::to_string(need) + " context segment(s)");
  for (std::size_t i = 0; i < need; ++i) {
    if (ctx[i].role != chain[i])
      throw ContractViolation(std::string("policy: context segment ") + std::to_string(i) +
                              " must have role " + role_name(chain[i]));
  }
}

}  // namespace detail

// Flatten context segments (with their markers) plus the marker that opens
// the target segment. Generation appends emitted tokens to this stream.
inline Tokens build_stream(std::span<const TokenSeq> ctx, Role target, const PolicySpec& spec) {
  detail::check_context_chain(ctx, target);
  Tokens stream;
  for (const TokenSeq& seg : ctx) {
    seg.validate(spec.vocab);
    if (seg.length() != spec.lengths.of(seg.role))
      throw ContractViolation(std::string("policy: segment length mismatch for role ") +
                              role_name(seg.role));
    if (seg.role != Role::prompt) stream.push_back(spec.vocab.marker(seg.role));
    stream.insert(stream.end(), seg.tokens.begin(), seg.tokens.end());
  }
  stream.push_back(spec.vocab.marker(target));
  return stream;
}

inline ContextKey context_key(std::span<const Token> stream, int window, const Vocab& v) {
  const std::size_t w = std::min<std::size_t>(stream.size(), static_cast<std::size_t>(window));
  return encode_context(stream.subspan(stream.size() - w, w), v);
}

// ---------------------------------------------------------------------------
// Core policy operations. All three walk the same stream in the same order,
// so cached log-probabilities, sampled sequences and score gradients always
// refer to identical context keys.

/**
 * Exact log-probability of emitting `out` after `ctx`. Pure read: unseen
 * context keys evaluate at their fresh-row logits without materialising.
 */
inline double log_prob(const PolicyParams& params, std::span<const TokenSeq> ctx,
                       const TokenSeq& out) {
  const PolicySpec& spec = params.spec();
  if (out.length() != spec.lengths.of(out.role))
    throw ContractViolation("log_prob: output length mismatch");
  out.validate(spec.vocab);
  Tokens stream = build_stream(ctx, out.role, spec);
  std::vector<double> scratch;
  double lp = 0.0;
  for (Token t : out.tokens) {
    const ContextKey key = context_key(stream, spec.window, spec.vocab);
    lp += log_softmax_at(params.row_values(key, scratch), t);
    stream.push_back(t);
  }
  return lp;
}

/**
 * Draw one output sequence. `temperature` rescales logits at decode time
 * only (training code always samples at 1.0, matching the densities the
 * estimators differentiate).
 */
inline TokenSeq sample(const PolicyParams& params, std::span<const TokenSeq> ctx, Role target,
                       Rng& rng, double temperature = 1.0) {
  const PolicySpec& spec = params.spec();
  if (temperature <= 0.0) throw ContractViolation("sample: temperature must be > 0");
  Tokens stream = build_stream(ctx, target, spec);
  std::vector<double> scratch, probs, scaled;
  TokenSeq out(target, {});
  const int len = spec.lengths.of(target);
  out.tokens.reserve(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) {
    const ContextKey key = context_key(stream, spec.window, spec.vocab);
    const std::vector<double>& logits = params.row_values(key, scratch);
    if (temperature == 1.0) {
      softmax_into(logits, probs);
    } else {
      scaled.resize(logits.size());
      for (std::size_t j = 0; j < logits.size(); ++j) scaled[j] = logits[j] / temperature;
      softmax_into(scaled, probs);
    }
    const Token t = rng.categorical(probs);
    out.tokens.push_back(t);
    stream.push_back(t);
  }
  return out;
}

/**
 * Score function d log pi(out | ctx) / d logits, accumulated into `grad`.
 * Each visited key receives onehot(emitted) - softmax(row); revisited keys
 * accumulate. The expectation of this table over out ~ pi is zero, which the
 * enumeration oracle verifies directly.
 */
inline void accumulate_score_gradient(const PolicyParams& params, std::span<const TokenSeq> ctx,
                                      const TokenSeq& out, GradientTable& grad,
                                      double weight = 1.0) {
  const PolicySpec& spec = params.spec();
  if (grad.vocab_size == 0) grad.vocab_size = spec.vocab.size;
  if (grad.vocab_size != spec.vocab.size)
    throw ContractViolation("accumulate_score_gradient: vocab size mismatch");
  if (out.length() != spec.lengths.of(out.role))
    throw ContractViolation("accumulate_score_gradient: output length mismatch");
  out.validate(spec.vocab);
  Tokens stream = build_stream(ctx, out.role, spec);
  std::vector<double> scratch, probs;
  for (Token t : out.tokens) {
    const ContextKey key = context_key(stream, spec.window, spec.vocab);
    softmax_into(params.row_values(key, scratch), probs);
    std::vector<double>& r = grad.row(key);
    for (std::size_t j = 0; j < probs.size(); ++j) r[j] -= weight * probs[j];
    r[static_cast<std::size_t>(t)] += weight;
    stream.push_back(t);
  }
}

inline GradientTable score_gradient(const PolicyParams& params, std::span<const TokenSeq> ctx,
                                    const TokenSeq& out) {
  GradientTable g(params.spec().vocab.size);
  accumulate_score_gradient(params, ctx, out, g);
  return g;
}

// ---------------------------------------------------------------------------
// Actor/critic pairing.

// Handles to the actor and critic parameter tables. In two-model mode the
// tables are distinct; in shared mode both handles alias one table, so an
// update through either is immediately visible through the other. Role
// markers inside context keys keep the roles' rows from colliding unless
// windows are small enough that raw content overlaps.
struct PolicyPair {
  std::shared_ptr<PolicyParams> actor;
  std::shared_ptr<PolicyParams> critic;
  bool shared = false;
};

inline PolicyPair make_policy_pair(const PolicySpec& actor_spec, const PolicySpec& critic_spec,
                                   bool shared) {
  if (shared) {
    if (!(actor_spec == critic_spec))
      throw ContractViolation("make_policy_pair: shared mode requires identical specs");
    auto p = std::make_shared<PolicyParams>(actor_spec);
    return PolicyPair{p, p, true};
  }
  return PolicyPair{std::make_shared<PolicyParams>(actor_spec),
                    std::make_shared<PolicyParams>(critic_spec), false};
}

// Alias an existing table as both actor and critic.
inline PolicyPair shared_view(std::shared_ptr<PolicyParams> params) {
  return PolicyPair{params, std::move(params), true};
}

}  // namespace binac
