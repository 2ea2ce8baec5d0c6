#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace binac {

// Raised when a caller violates a documented interface contract.
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

// Raised when a file cannot be read, written, or parsed.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when user-supplied configuration or input data fails validation.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Token = int;
using Tokens = std::vector<Token>;

// Segments of a two-turn exchange, in stream order.
enum class Role { prompt, first_response, feedback, refined_response };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::prompt: return "prompt";
    case Role::first_response: return "first_response";
    case Role::feedback: return "feedback";
    case Role::refined_response: return "refined_response";
  }
  return "?";
}

// Token alphabet: ids 0..size-1 are regular (emittable) tokens; three
// reserved marker ids directly above delimit the segments of the rollout
// stream. Markers are never emitted by a policy and never legal inside a
// TokenSeq.
struct Vocab {
  int size = 0;

  explicit Vocab(int size_) : size(size_) {
    if (size < 2) throw ContractViolation("Vocab: size must be >= 2");
  }

  // Marker inserted before the given generated segment.
  Token marker(Role r) const {
    switch (r) {
      case Role::first_response: return size;
      case Role::feedback: return size + 1;
      case Role::refined_response: return size + 2;
      case Role::prompt: break;
    }
    throw ContractViolation("Vocab::marker: prompt has no marker");
  }

  // Total alphabet including markers.
  int alphabet_size() const { return size + 3; }

  bool is_marker(Token t) const { return t >= size && t < size + 3; }
  bool is_regular(Token t) const { return t >= 0 && t < size; }

  friend bool operator==(const Vocab&, const Vocab&) = default;
};

// A role-tagged token sequence. Tokens are always regular vocabulary ids;
// markers live only in the flattened context stream.
struct TokenSeq {
  Role role = Role::prompt;
  Tokens tokens;

  TokenSeq() = default;
  TokenSeq(Role role_, Tokens tokens_) : role(role_), tokens(std::move(tokens_)) {}

  int length() const { return static_cast<int>(tokens.size()); }

  void validate(const Vocab& v) const {
    for (Token t : tokens) {
      if (!v.is_regular(t))
        throw ContractViolation(std::string("TokenSeq: token out of range for role ") +
                                role_name(role));
    }
  }

  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

// Fixed segment lengths for one experiment. First and refined responses share
// a length so a refined answer can stand in as the previous response when an
// exchange is iterated for multiple turns.
struct RoleLengths {
  int prompt = 2;
  int first_response = 1;
  int feedback = 1;
  int refined_response = 1;

  int of(Role r) const {
    switch (r) {
      case Role::prompt: return prompt;
      case Role::first_response: return first_response;
      case Role::feedback: return feedback;
      case Role::refined_response: return refined_response;
    }
    return 0;
  }

  void validate() const {
    if (prompt < 1 || first_response < 1 || feedback < 1 || refined_response < 1)
      throw ContractViolation("RoleLengths: all segment lengths must be >= 1");
    if (first_response != refined_response)
      throw ContractViolation(
          "RoleLengths: first and refined responses must have equal length");
  }

  friend bool operator==(const RoleLengths&, const RoleLengths&) = default;
};

}  // namespace binac
