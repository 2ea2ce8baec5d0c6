#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace binac {

// Deterministic RNG used everywhere. std::mt19937_64 is fully specified by
// the standard, so sequences are stable across platforms and compilers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform double in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // Inverse-CDF draw from a probability vector. `probs` must sum to ~1;
  // accumulated rounding is absorbed by the final bucket.
  int categorical(std::span<const double> probs) {
    const double u = next_unit();
    double cum = 0.0;
    for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
      cum += probs[i];
      if (u < cum) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

 private:
  std::mt19937_64 gen_;
};

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}
}  // namespace detail

// Seed-splitting rule: every component stream is derived from the one root
// seed by hashing a role tag plus up to two indices. Streams with different
// tags or indices are independent, so adding a consumer never perturbs the
// draws seen by existing ones.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t h = detail::splitmix64(root ^ detail::fnv1a(tag));
  h = detail::splitmix64(h ^ a);
  h = detail::splitmix64(h ^ b);
  return h;
}

}  // namespace binac
