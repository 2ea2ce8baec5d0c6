#pragma once

/**
 * Policy snapshot serialisation.
 *
 * Text format, one row per line, keys sorted ascending. Doubles are written
 * with std::to_chars shortest round-trip form, so save -> load -> save is
 * byte-identical and values survive exactly. Context keys are written as
 * their integer encoding (see encode_context); `binac-policy dump` style
 * decoding is available via decode_context.
 *
 *   binac-policy v1
 *   vocab <size>
 *   window <w>
 *   lengths <prompt> <first_response> <feedback> <refined_response>
 *   init <logit_scale> <seed>
 *   rows <count>
 *   <key> <logit_0> ... <logit_{size-1}>
 */

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "binac/policy.hpp"
#include "binac/tokens.hpp"

namespace binac {

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const char* what) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw IoError(std::string("policy snapshot: bad double in ") + what + ": '" + s + "'");
  return v;
}

template <typename Int>
inline Int parse_int(const std::string& s, const char* what) {
  Int v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw IoError(std::string("policy snapshot: bad integer in ") + what + ": '" + s + "'");
  return v;
}

}  // namespace detail

inline void save_policy(const PolicyParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);  // binary: no newline translation
  if (!out) throw IoError("save_policy: cannot open " + path.string());
  const PolicySpec& s = params.spec();
  out << "binac-policy v1\n";
  out << "vocab " << s.vocab.size << "\n";
  out << "window " << s.window << "\n";
  out << "lengths " << s.lengths.prompt << " " << s.lengths.first_response << " "
      << s.lengths.feedback << " " << s.lengths.refined_response << "\n";
  out << "init " << detail::format_double(s.init_logit_scale) << " " << s.init_seed << "\n";
  std::map<ContextKey, const std::vector<double>*> sorted;
  for (const auto& [key, row] : params.rows()) sorted.emplace(key, &row);
  out << "rows " << sorted.size() << "\n";
  for (const auto& [key, row] : sorted) {
    out << key;
    for (double v : *row) out << " " << detail::format_double(v);
    out << "\n";
  }
  out.flush();
  if (!out) throw IoError("save_policy: write failed for " + path.string());
}

inline PolicyParams load_policy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_policy: cannot open " + path.string());
  std::string line;
  auto next_line = [&](const char* what) {
    if (!std::getline(in, line))
      throw IoError(std::string("load_policy: truncated snapshot, expected ") + what);
    return line;
  };
  if (next_line("header") != "binac-policy v1")
    throw IoError("load_policy: unrecognised header '" + line + "' in " + path.string());

  auto fields = [&](const char* what, const char* tag) {
    std::istringstream ss(next_line(what));
    std::string head;
    ss >> head;
    if (head != tag) throw IoError(std::string("load_policy: expected '") + tag + "' line");
    std::vector<std::string> rest;
    std::string tok;
    while (ss >> tok) rest.push_back(tok);
    return rest;
  };

  auto vocab_f = fields("vocab", "vocab");
  auto window_f = fields("window", "window");
  auto lengths_f = fields("lengths", "lengths");
  auto init_f = fields("init", "init");
  auto rows_f = fields("rows", "rows");
  if (vocab_f.size() != 1 || window_f.size() != 1 || lengths_f.size() != 4 ||
      init_f.size() != 2 || rows_f.size() != 1)
    throw IoError("load_policy: malformed header section in " + path.string());

  PolicySpec spec;
  spec.vocab = Vocab(detail::parse_int<int>(vocab_f[0], "vocab"));
  spec.window = detail::parse_int<int>(window_f[0], "window");
  spec.lengths.prompt = detail::parse_int<int>(lengths_f[0], "lengths");
  spec.lengths.first_response = detail::parse_int<int>(lengths_f[1], "lengths");
  spec.lengths.feedback = detail::parse_int<int>(lengths_f[2], "lengths");
  spec.lengths.refined_response = detail::parse_int<int>(lengths_f[3], "lengths");
  spec.init_logit_scale = detail::parse_double(init_f[0], "init");
  spec.init_seed = detail::parse_int<std::uint64_t>(init_f[1], "init");

  PolicyParams params(spec);
  const std::size_t n_rows = detail::parse_int<std::size_t>(rows_f[0], "rows");
  for (std::size_t i = 0; i < n_rows; ++i) {
    std::istringstream ss(next_line("row"));
    std::string tok;
    if (!(ss >> tok)) throw IoError("load_policy: empty row line");
    const ContextKey key = detail::parse_int<ContextKey>(tok, "row key");
    std::vector<double> row;
    row.reserve(static_cast<std::size_t>(spec.vocab.size));
    while (ss >> tok) row.push_back(detail::parse_double(tok, "row value"));
    if (row.size() != static_cast<std::size_t>(spec.vocab.size))
      throw IoError("load_policy: row width mismatch at key " + std::to_string(key));
    params.rows_mut().emplace(key, std::move(row));
  }
  if (std::getline(in, line) && !line.empty())
    throw IoError("load_policy: trailing content after declared rows");
  return params;
}

}  // namespace binac
