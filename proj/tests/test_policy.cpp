#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "binac/policy.hpp"
#include "binac/policy_io.hpp"
#include "binac/rng.hpp"
#include "helpers.hpp"

using namespace binac;
using testutil::make_spec;

TEST_CASE("context keys are injective over window contents and length") {
  const Vocab v{5};  // alphabet 8: tokens 0..4, markers 5..7
  std::set<ContextKey> seen;
  // All windows of length 0..2 over the full alphabet must map to distinct keys.
  std::vector<Tokens> windows;
  windows.push_back({});
  for (Token a = 0; a < v.alphabet_size(); ++a) {
    windows.push_back({a});
    for (Token b = 0; b < v.alphabet_size(); ++b) windows.push_back({a, b});
  }
  for (const Tokens& w : windows) {
    const ContextKey k = encode_context(w, v);
    REQUIRE(seen.insert(k).second);
    REQUIRE(decode_context(k, v) == w);
  }
}

TEST_CASE("context key uses only the trailing window of the stream") {
  const Vocab v{4};
  const Tokens stream{0, 1, 2, 3, 2, 1};
  const ContextKey k = context_key(stream, 3, v);
  REQUIRE(decode_context(k, v) == Tokens{3, 2, 1});
  // A short stream is used whole.
  const Tokens shorter{2, 1};
  REQUIRE(decode_context(context_key(shorter, 3, v), v) == shorter);
}

TEST_CASE("spec validation rejects degenerate shapes") {
  REQUIRE_THROWS_AS(make_spec(1, 3, 1, 1, 1), ContractViolation);  // vocab too small
  REQUIRE_THROWS_AS(make_spec(4, 0, 1, 1, 1), ContractViolation);  // window < 1
  REQUIRE_THROWS_AS(make_spec(4, 3, 0, 1, 1), ContractViolation);  // empty prompt
  // Key space must fit in 64 bits: alphabet 1003, window 8 overflows the
  // sentinel-prefixed encoding (1003^8 > 2^62).
  REQUIRE_THROWS_AS(make_spec(1000, 8, 1, 1, 1), ContractViolation);
}

TEST_CASE("fresh rows are zero by default and deterministic noise when scaled") {
  const PolicySpec plain = make_spec(3, 2, 1, 1, 1);
  PolicyParams p(plain);
  std::vector<double> scratch;
  const auto& row = p.row_values(42, scratch);
  REQUIRE(row == std::vector<double>{0.0, 0.0, 0.0});

  const PolicySpec noisy = make_spec(3, 2, 1, 1, 1, 0.5, 99);
  PolicyParams a(noisy), b(noisy);
  std::vector<double> sa, sb;
  const auto ra = a.row_values(7, sa);
  REQUIRE(ra == b.row_values(7, sb));               // same seed, same noise
  REQUIRE(ra == a.row_mut(7));                      // materializing keeps the values
  for (double x : ra) REQUIRE(std::abs(x) <= 0.5);  // bounded by the scale
  bool all_zero = true;
  for (double x : ra) all_zero &= (x == 0.0);
  REQUIRE_FALSE(all_zero);

  PolicyParams other(make_spec(3, 2, 1, 1, 1, 0.5, 100));
  std::vector<double> so;
  REQUIRE(other.row_values(7, so) != ra);  // different init seed, different noise
}

TEST_CASE("uniform policy assigns (1/V)^len to every output") {
  const PolicySpec spec = make_spec(4, 3, 2, 2, 1);
  PolicyParams p(spec);
  const TokenSeq x(Role::prompt, {1, 3});
  const TokenSeq ctx[] = {x};
  const TokenSeq y(Role::first_response, {0, 2});
  REQUIRE_THAT(log_prob(p, ctx, y), Catch::Matchers::WithinAbs(2.0 * std::log(0.25), 1e-12));
}

TEST_CASE("sampling is deterministic, in-vocabulary, and replayable by log_prob") {
  const PolicySpec spec = make_spec(6, 3, 2, 3, 2, 1.3, 5);
  PolicyParams p(spec);
  const TokenSeq x(Role::prompt, {4, 1});
  const TokenSeq ctx[] = {x};
  Rng r1(123), r2(123);
  const TokenSeq a = sample(p, ctx, Role::first_response, r1);
  const TokenSeq b = sample(p, ctx, Role::first_response, r2);
  REQUIRE(a.tokens == b.tokens);
  REQUIRE(a.length() == 3);
  for (Token t : a.tokens) {
    REQUIRE(t >= 0);
    REQUIRE(t < 6);  // markers are never emitted
  }
  REQUIRE(std::isfinite(log_prob(p, ctx, a)));
  REQUIRE(log_prob(p, ctx, a) <= 0.0);
}

TEST_CASE("an extreme logit pins the sampled token") {
  const PolicySpec spec = make_spec(5, 2, 1, 1, 1);
  PolicyParams p(spec);
  const TokenSeq x(Role::prompt, {2});
  const TokenSeq ctx[] = {x};
  // Key for the first response token: trailing window of [x..., M1].
  const Tokens stream = build_stream(ctx, Role::first_response, spec);
  const ContextKey key = context_key(stream, spec.window, spec.vocab);
  p.row_mut(key)[3] = 1e6;
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    const TokenSeq y = sample(p, ctx, Role::first_response, rng);
    REQUIRE(y.tokens[0] == 3);
  }
  REQUIRE_THAT(log_prob(p, ctx, TokenSeq(Role::first_response, {3})),
               Catch::Matchers::WithinAbs(0.0, 1e-9));
}

TEST_CASE("score gradient of a one-step output is onehot minus softmax") {
  const PolicySpec spec = make_spec(3, 3, 1, 1, 1);
  PolicyParams p(spec);
  const TokenSeq x(Role::prompt, {1});
  const TokenSeq ctx[] = {x};
  const TokenSeq y(Role::first_response, {2});
  const GradientTable g = score_gradient(p, ctx, y);
  REQUIRE(g.rows.size() == 1);
  const auto& row = g.rows.begin()->second;
  const double third = 1.0 / 3.0;
  REQUIRE_THAT(row[0], Catch::Matchers::WithinAbs(-third, 1e-15));
  REQUIRE_THAT(row[1], Catch::Matchers::WithinAbs(-third, 1e-15));
  REQUIRE_THAT(row[2], Catch::Matchers::WithinAbs(1.0 - third, 1e-15));
  // Ascending along the score gradient raises the output's probability.
  const double before = log_prob(p, ctx, y);
  for (const auto& [key, grow] : g.rows) {
    auto& prow = p.row_mut(key);
    for (std::size_t j = 0; j < grow.size(); ++j) prow[j] += 0.5 * grow[j];
  }
  REQUIRE(log_prob(p, ctx, y) > before);
}

TEST_CASE("temperature sharpens or flattens decoding") {
  const PolicySpec spec = make_spec(4, 2, 1, 1, 1);
  PolicyParams p(spec);
  const TokenSeq x(Role::prompt, {0});
  const TokenSeq ctx[] = {x};
  const Tokens stream = build_stream(ctx, Role::first_response, spec);
  p.row_mut(context_key(stream, spec.window, spec.vocab)) = {2.0, 0.0, 0.0, 0.0};
  auto hit_rate = [&](double temp) {
    Rng rng(3);
    int hits = 0;
    for (int i = 0; i < 4000; ++i) hits += sample(p, ctx, Role::first_response, rng, temp).tokens[0] == 0;
    return hits / 4000.0;
  };
  const double cold = hit_rate(0.25);
  const double warm = hit_rate(4.0);
  REQUIRE(cold > 0.95);        // softmax(8,0,0,0) ~ 0.999
  REQUIRE(warm < cold - 0.3);  // softmax(0.5,0,0,0) ~ 0.29
}

TEST_CASE("context chain validation rejects out-of-order roles") {
  const PolicySpec spec = make_spec(3, 3, 1, 1, 1);
  PolicyParams p(spec);
  const TokenSeq x(Role::prompt, {0});
  const TokenSeq z(Role::feedback, {1});
  const TokenSeq bad[] = {x, z};  // refinement needs (prompt, first, feedback)
  Rng rng(1);
  REQUIRE_THROWS_AS(sample(p, bad, Role::refined_response, rng), ContractViolation);
  const TokenSeq wrong_len(Role::first_response, {0, 1});
  const TokenSeq ctx[] = {x};
  REQUIRE_THROWS_AS(log_prob(p, ctx, wrong_len), ContractViolation);
}

TEST_CASE("shared view aliases one parameter table across both handles") {
  const PolicySpec spec = make_spec(3, 3, 1, 1, 1);
  PolicyPair pair = make_policy_pair(spec, spec, /*shared=*/true);
  REQUIRE(pair.shared);
  REQUIRE(pair.actor == pair.critic);
  const TokenSeq x(Role::prompt, {2});
  const TokenSeq y0(Role::first_response, {1});
  const TokenSeq ctx1[] = {x, y0};
  const TokenSeq z(Role::feedback, {0});
  const double before = log_prob(*pair.critic, ctx1, z);
  // Push the feedback row through the actor handle; the critic must see it.
  const Tokens stream = build_stream(ctx1, Role::feedback, spec);
  pair.actor->row_mut(context_key(stream, spec.window, spec.vocab))[0] += 2.0;
  REQUIRE(log_prob(*pair.critic, ctx1, z) > before);

  PolicyPair split = make_policy_pair(spec, spec, /*shared=*/false);
  REQUIRE_FALSE(split.shared);
  REQUIRE(split.actor != split.critic);
}

TEST_CASE("snapshots round-trip bit-exactly and reject corruption") {
  const PolicySpec spec = make_spec(5, 4, 2, 2, 1, 0.9, 21);
  PolicyParams p(spec);
  // Touch some rows, including awkward values.
  p.row_mut(17)[0] = 1.0 / 3.0;
  p.row_mut(17)[4] = -0.1;
  p.row_mut(99993)[2] = 6.02214076e23;
  p.row_mut(5)[1] = 5e-324;  // subnormal survives the round trip

  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "binac_test_policy_io";
  fs::create_directories(dir);
  const fs::path file = dir / "a.policy";
  save_policy(p, file);

  const PolicyParams q = load_policy(file);
  REQUIRE(q.spec() == p.spec());
  REQUIRE(q.rows().size() == p.rows().size());
  for (const auto& [key, row] : p.rows()) {
    REQUIRE(q.rows().count(key) == 1);
    REQUIRE(q.rows().at(key) == row);
  }

  // Saving the loaded copy reproduces the file byte for byte.
  const fs::path file2 = dir / "b.policy";
  save_policy(q, file2);
  std::ifstream f1(file, std::ios::binary), f2(file2, std::ios::binary);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  REQUIRE(s1.str() == s2.str());
  REQUIRE(s1.str().find("binac-policy v1") == 0);

  // Corruption and truncation are rejected, missing files are I/O errors.
  std::ofstream bad(dir / "bad.policy", std::ios::binary);
  bad << "binac-policy v1\nvocab 5\nwindow 4\nnot-a-field 3\n";
  bad.close();
  REQUIRE_THROWS_AS(load_policy(dir / "bad.policy"), IoError);
  REQUIRE_THROWS_AS(load_policy(dir / "missing.policy"), IoError);
  fs::remove_all(dir);
}
