#pragma once

#include "lgar/rational.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace lgar {

/// Outcome of one judging run for one paper: up to one initial attempt and
/// three parse retries.
struct Judgment {
  std::string paper_id;
  std::optional<int> score;  // present iff !used_fallback
  std::vector<std::string> raw_responses;
  int attempts = 0;
  bool used_fallback = false;
  std::optional<Rational> fallback_value;  // filled by resolve_fallbacks
  std::vector<double> temperature_trace;

  /// The value this run contributes to ranking, once fallbacks are resolved.
  std::optional<Rational> effective_score() const {
    if (score) return Rational(*score);
    return fallback_value;
  }
  bool operator==(const Judgment&) const = default;
};

/// All runs for one paper (one run, or n for self-consistency).
struct Verdict {
  std::string paper_id;
  std::vector<Judgment> runs;

  bool any_fallback() const {
    for (const auto& r : runs)
      if (r.used_fallback) return true;
    return false;
  }
  /// Mean of the run scores; empty while any fallback is unresolved.
  std::optional<Rational> score() const {
    if (runs.empty()) return std::nullopt;
    Rational sum = 0;
    for (const auto& r : runs) {
      auto s = r.effective_score();
      if (!s) return std::nullopt;
      sum += *s;
    }
    return sum / static_cast<std::int64_t>(runs.size());
  }
  bool operator==(const Verdict&) const = default;
};

inline nlohmann::json to_json(const Judgment& j) {
  nlohmann::json out = {{"paper_id", j.paper_id},
                        {"score", j.score ? nlohmann::json(*j.score) : nlohmann::json(nullptr)},
                        {"raw_responses", j.raw_responses},
                        {"attempts", j.attempts},
                        {"used_fallback", j.used_fallback},
                        {"temperature_trace", j.temperature_trace}};
  out["fallback_value"] = j.fallback_value ? nlohmann::json(to_fraction(*j.fallback_value)) : nlohmann::json(nullptr);
  return out;
}

inline Judgment judgment_from_json(const nlohmann::json& in) {
  Judgment j;
  j.paper_id = in.at("paper_id").get<std::string>();
  if (!in.at("score").is_null()) j.score = in.at("score").get<int>();
  j.raw_responses = in.at("raw_responses").get<std::vector<std::string>>();
  j.attempts = in.at("attempts").get<int>();
  j.used_fallback = in.at("used_fallback").get<bool>();
  j.temperature_trace = in.at("temperature_trace").get<std::vector<double>>();
  if (in.contains("fallback_value") && !in.at("fallback_value").is_null())
    j.fallback_value = parse_rational(in.at("fallback_value").get<std::string>());
  return j;
}

}  // namespace lgar
