#pragma once

#include "lgar/corpus.hpp"
#include "lgar/hashing.hpp"
#include "lgar/judgment.hpp"

#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lgar {

/// Likert scale 0..upper used for graded judgments.
class RelevanceScale {
 public:
  explicit RelevanceScale(int upper = 19) : upper_(upper) {
    if (upper < 1) throw std::invalid_argument("relevance scale upper bound must be >= 1");
  }
  static constexpr int lower() { return 0; }
  int upper() const { return upper_; }
  bool contains(long long v) const { return v >= 0 && v <= upper_; }
  std::string str() const { return "0-" + std::to_string(upper_); }

  /// Parses "0-k".
  static RelevanceScale parse(const std::string& text) {
    auto dash = text.find('-');
    if (dash == std::string::npos || text.substr(0, dash) != "0")
      throw std::invalid_argument("scale must look like '0-k', got '" + text + "'");
    const std::string upper = text.substr(dash + 1);
    if (upper.empty() || upper.find_first_not_of("0123456789") != std::string::npos)
      throw std::invalid_argument("scale must look like '0-k', got '" + text + "'");
    return RelevanceScale(std::stoi(upper));
  }
  bool operator==(const RelevanceScale&) const = default;
  auto operator<=>(const RelevanceScale&) const = default;

 private:
  int upper_;
};

struct PromptVariant {
  enum class Kind { zero_shot, cot, cot_self_consistency, two_shot, two_shot_cot, two_shot_cot_self_consistency };
  Kind kind = Kind::zero_shot;
  int n = 1;  // self-consistency runs

  static PromptVariant zero_shot() { return {Kind::zero_shot, 1}; }
  static PromptVariant cot() { return {Kind::cot, 1}; }
  static PromptVariant cot_sc(int n = 3) { return checked({Kind::cot_self_consistency, n}); }
  static PromptVariant two_shot() { return {Kind::two_shot, 1}; }
  static PromptVariant two_shot_cot() { return {Kind::two_shot_cot, 1}; }
  static PromptVariant two_shot_cot_sc(int n = 3) { return checked({Kind::two_shot_cot_self_consistency, n}); }

  bool uses_cot() const { return kind != Kind::zero_shot && kind != Kind::two_shot; }
  bool is_two_shot() const {
    return kind == Kind::two_shot || kind == Kind::two_shot_cot || kind == Kind::two_shot_cot_self_consistency;
  }
  bool is_self_consistent() const {
    return kind == Kind::cot_self_consistency || kind == Kind::two_shot_cot_self_consistency;
  }
  int runs() const { return is_self_consistent() ? n : 1; }

  /// Single-run zero-shot prompt family whose judgments supply few-shot exemplars.
  PromptVariant exemplar_source() const { return uses_cot() ? cot() : zero_shot(); }

  std::string name() const {
    switch (kind) {
      case Kind::zero_shot: return "zero-shot";
      case Kind::cot: return "cot";
      case Kind::cot_self_consistency: return "cot-sc" + std::to_string(n);
      case Kind::two_shot: return "two-shot";
      case Kind::two_shot_cot: return "two-shot-cot";
      case Kind::two_shot_cot_self_consistency: return "two-shot-cot-sc" + std::to_string(n);
    }
    return "?";
  }

  /// Accepts the names produced by name(); "cot-sc"/"two-shot-cot-sc" default to n = 3.
  static PromptVariant parse(const std::string& text) {
    if (text == "zero-shot") return zero_shot();
    if (text == "cot") return cot();
    if (text == "two-shot") return two_shot();
    if (text == "two-shot-cot") return two_shot_cot();
    auto with_n = [&](const std::string& prefix) -> std::optional<int> {
      if (text.rfind(prefix, 0) != 0) return std::nullopt;
      std::string rest = text.substr(prefix.size());
      if (rest.empty()) return 3;
      if (rest.front() == ':') rest.erase(0, 1);
      if (rest.empty() || rest.find_first_not_of("0123456789") != std::string::npos)
        throw std::invalid_argument("bad self-consistency count in '" + text + "'");
      return std::stoi(rest);
    };
    if (auto n = with_n("two-shot-cot-sc")) return two_shot_cot_sc(*n);
    if (auto n = with_n("cot-sc")) return cot_sc(*n);
    throw std::invalid_argument("unknown prompt variant '" + text + "'");
  }
  bool operator==(const PromptVariant&) const = default;

 private:
  static PromptVariant checked(PromptVariant v) {
    if (v.n < 2) throw std::invalid_argument("self-consistency needs n >= 2");
    return v;
  }
};

struct ChatMessage {
  std::string role;
  std::string content;
  bool operator==(const ChatMessage&) const = default;
};

struct ExemplarTurn {
  std::string user;
  std::string assistant;
  bool operator==(const ExemplarTurn&) const = default;
};

struct MessagePair {
  std::string system;
  std::string user;
  std::vector<ExemplarTurn> exemplars;  // positive first, then negative

  /// Conversation order: system, exemplar turns, query turn.
  std::vector<ChatMessage> conversation() const {
    std::vector<ChatMessage> out{{"system", system}};
    for (const auto& e : exemplars) {
      out.push_back({"user", e.user});
      out.push_back({"assistant", e.assistant});
    }
    out.push_back({"user", user});
    return out;
  }
  bool operator==(const MessagePair&) const = default;
};

struct FewShotExemplar {
  PaperRecord paper;
  int assigned_score = 0;
  int gold_label = 0;
};

struct FewShotSelection {
  FewShotExemplar positive;
  FewShotExemplar negative;
  std::vector<PaperRecord> reduced_pool;
};

class NoExemplarAvailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Prompt text assets. The zero-shot user message is user_task followed by
/// answer_format; CoT prompts insert cot_instruction and a newline between
/// them. Files in an override directory replace the matching asset.
struct PromptTemplates {
  std::string system;
  std::string user_task;
  std::string answer_format;
  std::string cot_instruction;

  static PromptTemplates defaults() {
    PromptTemplates t;
    t.system =
        "You are a researcher conducting a systematic literature review (SLR) with the title '{title}'. "
        "The review aims to answer the following research questions: '{research_questions}'  "
        "Your task is to decide how relevant the provided paper is to the review, given a list of criteria. "
        "A paper is relevant if all inclusion criteria but none of the exclusion criteria are met.";
    t.user_task =
        "Task: You will be presented with a paper's title and abstract. Your task is to decide how relevant "
        "the given paper is to the review. Return a number for your decision ranging from "
        "'{relevance_lower_value}' to '{relevance_upper_value}', where '{relevance_lower_value}' means that "
        "you are absolutely sure that the paper should be excluded, where '{relevance_upper_value}' means "
        "that you are absolutely sure that the paper should be included, and where an intermediate value "
        "means that you are unsure. Please read the title and the abstract carefully and then make your "
        "decision based on the provided inclusion and exclusion criteria.\n"
        "Title: '{title_paper}' Abstract: '{abstract}'\n"
        "Inclusion criteria: '{inclusion_criteria}'\n"
        "Exclusion criteria: '{exclusion_criteria}'\n";
    t.answer_format =
        "Give your answer in the following format: \n"
        "```Decision: {relevance_lower_value} - {relevance_upper_value}```";
    t.cot_instruction = "Let's think step by step.";
    return t;
  }

  static PromptTemplates load(const fs::path& dir) {
    PromptTemplates t = defaults();
    auto read = [&](const char* file, std::string& slot) {
      const fs::path p = dir / file;
      if (!fs::exists(p)) return;
      std::ifstream in(p, std::ios::binary);
      if (!in) throw std::runtime_error("cannot read prompt asset " + p.string());
      std::ostringstream ss;
      ss << in.rdbuf();
      slot = ss.str();
    };
    read("system.txt", t.system);
    read("user_task.txt", t.user_task);
    read("answer_format.txt", t.answer_format);
    read("cot_instruction.txt", t.cot_instruction);
    return t;
  }

  std::string fingerprint() const {
    return sha256_hex(system + '\0' + user_task + '\0' + answer_format + '\0' + cot_instruction);
  }
  bool operator==(const PromptTemplates&) const = default;
};

using PlaceholderValues = std::map<std::string, std::string>;

/// Single-pass substitution of {name} placeholders; substituted values are
/// never rescanned. An unknown identifier-shaped placeholder is an error.
inline std::string render_template(const std::string& tmpl, const PlaceholderValues& values) {
  std::string out;
  out.reserve(tmpl.size() + 256);
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      std::size_t close = tmpl.find('}', i + 1);
      if (close != std::string::npos) {
        std::string name = tmpl.substr(i + 1, close - i - 1);
        bool ident = !name.empty();
        for (char c : name) ident = ident && (std::islower(static_cast<unsigned char>(c)) || c == '_');
        if (ident) {
          auto it = values.find(name);
          if (it == values.end()) throw std::invalid_argument("unknown placeholder {" + name + "}");
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out.push_back(tmpl[i++]);
  }
  return out;
}

inline std::string join(const std::vector<std::string>& items, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

inline std::string render_bullets(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += '\n';
    out += "- " + items[i];
  }
  return out;
}

inline PlaceholderValues placeholder_values(const SlrSpec& slr, const PaperRecord& paper, const RelevanceScale& scale) {
  return {{"title", slr.title},
          {"research_questions", join(slr.research_questions, "; ")},
          {"title_paper", paper.title},
          {"abstract", paper.abstract},
          {"inclusion_criteria", render_bullets(slr.inclusion_criteria)},
          {"exclusion_criteria", render_bullets(slr.exclusion_criteria)},
          {"relevance_lower_value", std::to_string(RelevanceScale::lower())},
          {"relevance_upper_value", std::to_string(scale.upper())}};
}

inline std::string render_user(const PromptTemplates& t, const PlaceholderValues& values, bool cot) {
  std::string tmpl = t.user_task;
  if (cot) tmpl += t.cot_instruction + "\n";
  tmpl += t.answer_format;
  return render_template(tmpl, values);
}

inline std::string decision_line(int score) { return "Decision: " + std::to_string(score); }

/// Builds the system/user messages for judging `paper` against `slr`.
/// Two-shot variants require exemplars; other variants reject them.
inline MessagePair build_messages(const SlrSpec& slr, const PaperRecord& paper, const RelevanceScale& scale,
                                  const PromptVariant& variant,
                                  const std::optional<std::pair<FewShotExemplar, FewShotExemplar>>& exemplars = std::nullopt,
                                  const PromptTemplates& templates = PromptTemplates::defaults()) {
  if (slr.title.empty()) throw std::invalid_argument("SLR '" + slr.slr_id + "' has an empty title");
  if (variant.is_two_shot() && !exemplars)
    throw std::invalid_argument("two-shot prompt requested without exemplars");
  if (!variant.is_two_shot() && exemplars)
    throw std::invalid_argument("exemplars supplied to a non-few-shot prompt variant");

  MessagePair m;
  const auto values = placeholder_values(slr, paper, scale);
  m.system = render_template(templates.system, values);
  m.user = render_user(templates, values, variant.uses_cot());
  if (exemplars) {
    const auto& [pos, neg] = *exemplars;
    if (pos.gold_label != 1 || pos.assigned_score != scale.upper() || neg.gold_label != 0 || neg.assigned_score != 0)
      throw std::invalid_argument("exemplars must be (relevant, scored k) then (irrelevant, scored 0)");
    for (const FewShotExemplar* ex : {&pos, &neg}) {
      m.exemplars.push_back({render_user(templates, placeholder_values(slr, ex->paper, scale), variant.uses_cot()),
                             decision_line(ex->assigned_score)});
    }
  }
  return m;
}

/// Picks one positive (gold 1, parsed score k) and one negative (gold 0,
/// parsed score 0) exemplar uniformly at random and removes both from the pool.
inline FewShotSelection select_few_shot(const std::vector<Judgment>& judgments, const std::vector<PaperRecord>& pool,
                                        const RelevanceScale& scale, std::uint64_t seed) {
  std::map<std::string, const Judgment*> by_id;
  for (const auto& j : judgments) by_id[j.paper_id] = &j;
  std::vector<std::size_t> positives, negatives;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    auto it = by_id.find(pool[i].paper_id);
    if (it == by_id.end() || it->second->used_fallback || !it->second->score) continue;
    const int s = *it->second->score;
    if (pool[i].label == 1 && s == scale.upper()) positives.push_back(i);
    if (pool[i].label == 0 && s == 0) negatives.push_back(i);
  }
  if (positives.empty()) throw NoExemplarAvailable("no exemplar available: no relevant paper scored " + std::to_string(scale.upper()));
  if (negatives.empty()) throw NoExemplarAvailable("no exemplar available: no irrelevant paper scored 0");

  std::mt19937_64 rng(seed);
  auto pick = [&](const std::vector<std::size_t>& from) {
    return from[std::uniform_int_distribution<std::size_t>(0, from.size() - 1)(rng)];
  };
  const std::size_t pos = pick(positives);
  const std::size_t neg = pick(negatives);

  FewShotSelection sel;
  sel.positive = {pool[pos], scale.upper(), 1};
  sel.negative = {pool[neg], 0, 0};
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (i != pos && i != neg) sel.reduced_pool.push_back(pool[i]);
  return sel;
}

}  // namespace lgar
