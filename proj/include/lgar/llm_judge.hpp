#pragma once

#include "lgar/hashing.hpp"
#include "lgar/judgment.hpp"
#include "lgar/prompting.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <regex>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

namespace lgar {

// ---------------------------------------------------------------------------
// Output parsing
// ---------------------------------------------------------------------------

struct ScaleParse {
  enum class Failure { none, no_match, out_of_range, multiple_conflicting };
  std::optional<int> extracted;
  Failure failure = Failure::none;

  bool ok() const { return extracted.has_value(); }
};

inline const char* to_string(ScaleParse::Failure f) {
  switch (f) {
    case ScaleParse::Failure::none: return "none";
    case ScaleParse::Failure::no_match: return "no_match";
    case ScaleParse::Failure::out_of_range: return "out_of_range";
    case ScaleParse::Failure::multiple_conflicting: return "multiple_conflicting";
  }
  return "?";
}

/// Extracts the integer after the last "Decision:" marker. Markdown emphasis,
/// code fences and brackets around the marker or value are tolerated. A value
/// followed by "- m" (the model echoing the format range) is conflicting.
inline ScaleParse parse_score(const std::string& response, const RelevanceScale& scale) {
  static const std::regex marker(
      R"(decision[\s*_`]*:[\s*_`'"\[\(]*(-?\d+(?:\.\d+)?)(\s*(?:-|–|to)\s*-?\d+)?)",
      std::regex::ECMAScript | std::regex::icase);
  std::smatch last;
  bool found = false;
  for (auto it = std::sregex_iterator(response.begin(), response.end(), marker); it != std::sregex_iterator(); ++it) {
    last = *it;
    found = true;
  }
  ScaleParse out;
  if (!found) {
    out.failure = ScaleParse::Failure::no_match;
    return out;
  }
  if (last[2].matched) {
    out.failure = ScaleParse::Failure::multiple_conflicting;
    return out;
  }
  const std::string value = last[1].str();
  if (value.find('.') != std::string::npos || value.size() > 9) {
    out.failure = ScaleParse::Failure::out_of_range;
    return out;
  }
  const long long v = std::stoll(value);
  if (!scale.contains(v)) {
    out.failure = ScaleParse::Failure::out_of_range;
    return out;
  }
  out.extracted = static_cast<int>(v);
  return out;
}

// ---------------------------------------------------------------------------
// Transport
// ---------------------------------------------------------------------------

struct LlmEndpointConfig {
  std::string base_url;    // e.g. http://localhost:8000/v1
  std::string model_name;
  std::string api_key_ref;  // environment variable holding the key; may be empty
  int max_tokens = 1024;
  std::chrono::milliseconds request_timeout{120000};
  int max_parallel = 4;

  void validate() const {
    if (base_url.empty()) throw std::invalid_argument("LLM endpoint base_url not configured");
    if (model_name.empty()) throw std::invalid_argument("LLM model name not configured");
    if (max_parallel < 1) throw std::invalid_argument("max_parallel must be >= 1");
    if (request_timeout.count() <= 0) throw std::invalid_argument("request timeout must be > 0");
    if (max_tokens < 1) throw std::invalid_argument("max_tokens must be >= 1");
  }
};

struct ChatRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_tokens = 1024;

  nlohmann::json to_json() const {
    nlohmann::json msgs = nlohmann::json::array();
    for (const auto& m : messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
    return {{"model", model}, {"messages", msgs}, {"temperature", temperature}, {"max_tokens", max_tokens}};
  }
};

class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Chat-completion service. Implementations throw TransportError on any
/// network, HTTP or protocol failure.
class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual std::string complete(const ChatRequest& request) = 0;
};

struct ParsedUrl {
  std::string scheme_host_port;
  std::string path;  // without trailing slash
};

inline ParsedUrl parse_url(const std::string& url) {
  auto scheme = url.find("://");
  if (scheme == std::string::npos) throw std::invalid_argument("URL without scheme: '" + url + "'");
  auto slash = url.find('/', scheme + 3);
  ParsedUrl out;
  out.scheme_host_port = url.substr(0, slash);
  out.path = slash == std::string::npos ? "" : url.substr(slash);
  while (!out.path.empty() && out.path.back() == '/') out.path.pop_back();
  return out;
}

/// OpenAI-compatible client: POST {base_url}/chat/completions.
class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(LlmEndpointConfig config) : config_(std::move(config)), url_(parse_url(config_.base_url)) {
    if (!config_.api_key_ref.empty()) {
      if (const char* key = std::getenv(config_.api_key_ref.c_str())) api_key_ = key;
    }
  }

  std::string complete(const ChatRequest& request) override {
    httplib::Client client(url_.scheme_host_port);
    const auto timeout = std::chrono::duration_cast<std::chrono::seconds>(config_.request_timeout);
    const auto secs = std::max<long long>(1, timeout.count());
    client.set_connection_timeout(static_cast<time_t>(std::min<long long>(secs, 10)), 0);
    client.set_read_timeout(static_cast<time_t>(secs), 0);
    client.set_write_timeout(static_cast<time_t>(secs), 0);
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    auto res = client.Post(url_.path + "/chat/completions", headers, request.to_json().dump(), "application/json");
    if (!res) throw TransportError("LLM request to " + config_.base_url + " failed: " + httplib::to_string(res.error()));
    if (res->status != 200)
      throw TransportError("LLM service returned HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
    try {
      auto body = nlohmann::json::parse(res->body);
      return body.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw TransportError(std::string("malformed chat-completion response: ") + e.what());
    }
  }

 private:
  LlmEndpointConfig config_;
  ParsedUrl url_;
  std::string api_key_;
};

/// Bounded exponential backoff for network faults; independent of the
/// parse-retry budget.
struct TransportPolicy {
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{250};
  std::chrono::milliseconds max_backoff{4000};
};

template <typename Fn>
auto with_transport_retry(const TransportPolicy& policy, Fn&& fn) -> decltype(fn()) {
  auto backoff = policy.initial_backoff;
  for (int attempt = 0;; ++attempt) {
    try {
      return fn();
    } catch (const TransportError&) {
      if (attempt >= policy.max_retries) throw;
    }
    std::this_thread::sleep_for(backoff);
    backoff = std::min(policy.max_backoff, backoff * 2);
  }
}

// ---------------------------------------------------------------------------
// Judgment cache
// ---------------------------------------------------------------------------

/// Append-only JSONL store of judgments keyed by a content hash of everything
/// that determines the model's output.
class JudgmentCache {
 public:
  explicit JudgmentCache(fs::path dir) : path_(std::move(dir) / "judgments.jsonl") {
    fs::create_directories(path_.parent_path());
    std::ifstream in(path_);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        auto rec = nlohmann::json::parse(line);
        entries_[rec.at("key").get<std::string>()] = judgment_from_json(rec.at("judgment"));
      } catch (const std::exception& e) {
        // A torn final line from an interrupted run is expected; skip it.
        std::cerr << "warning: " << path_.string() << ":" << line_no << ": skipping cache record (" << e.what() << ")\n";
      }
    }
  }

  std::optional<Judgment> get(const std::string& key) {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void put(const std::string& key, const Judgment& j) {
    std::lock_guard lock(mutex_);
    entries_[key] = j;
    std::ofstream out(path_, std::ios::app | std::ios::binary);
    nlohmann::json rec = {{"key", key}, {"judgment", to_json(j)}, {"created_at", static_cast<long long>(std::time(nullptr))}};
    out << rec.dump() << "\n";
    out.flush();
    if (!out) throw std::runtime_error("failed to append to judgment cache " + path_.string());
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  mutable std::mutex mutex_;
  std::unordered_map<std::string, Judgment> entries_;
};

// ---------------------------------------------------------------------------
// Judging
// ---------------------------------------------------------------------------

struct AttemptPolicy {
  int parse_retries = 3;
  double initial_temperature = 0.0;
  double retry_temperature = 0.5;
};

struct JudgeStats {
  std::atomic<std::size_t> live_calls{0};
  std::atomic<std::size_t> cache_hits{0};
  std::atomic<std::size_t> cache_misses{0};
};

inline std::string judgment_cache_key(const std::string& model, const MessagePair& messages, const RelevanceScale& scale,
                                      const std::string& variant, const AttemptPolicy& policy, int run_index,
                                      int max_tokens) {
  nlohmann::json msgs = nlohmann::json::array();
  for (const auto& m : messages.conversation()) msgs.push_back({m.role, m.content});
  nlohmann::json key = {{"model", model},
                        {"messages", msgs},
                        {"scale", scale.str()},
                        {"variant", variant},
                        {"policy", {policy.parse_retries, policy.initial_temperature, policy.retry_temperature}},
                        {"run", run_index},
                        {"max_tokens", max_tokens}};
  return sha256_hex(key.dump());
}

class Judge {
 public:
  Judge(ChatClient& client, LlmEndpointConfig endpoint, JudgmentCache* cache = nullptr, AttemptPolicy attempts = {},
        TransportPolicy transport = {})
      : client_(client), endpoint_(std::move(endpoint)), cache_(cache), attempts_(attempts), transport_(transport) {}

  /// One judging run: a first attempt, then up to parse_retries fresh
  /// conversations at the retry temperature. Run 0 starts at the initial
  /// temperature; later self-consistency runs sample at the retry temperature
  /// throughout. Throws TransportError once transport retries are exhausted.
  Judgment judge_paper(const MessagePair& messages, const RelevanceScale& scale, const std::string& paper_id,
                       const std::string& variant_name = "zero-shot", int run_index = 0) {
    std::string key;
    if (cache_) {
      key = judgment_cache_key(endpoint_.model_name, messages, scale, variant_name, attempts_, run_index,
                               endpoint_.max_tokens);
      if (auto hit = cache_->get(key)) {
        ++stats_.cache_hits;
        hit->paper_id = paper_id;
        return *hit;
      }
      ++stats_.cache_misses;
    }

    Judgment j;
    j.paper_id = paper_id;
    ChatRequest request{endpoint_.model_name, messages.conversation(), 0.0, endpoint_.max_tokens};
    for (int attempt = 0; attempt <= attempts_.parse_retries; ++attempt) {
      request.temperature = (attempt == 0 && run_index == 0) ? attempts_.initial_temperature : attempts_.retry_temperature;
      std::string response = with_transport_retry(transport_, [&] {
        ++stats_.live_calls;
        return client_.complete(request);
      });
      j.attempts = attempt + 1;
      j.temperature_trace.push_back(request.temperature);
      j.raw_responses.push_back(response);
      auto parsed = parse_score(response, scale);
      if (parsed.ok()) {
        j.score = parsed.extracted;
        break;
      }
    }
    j.used_fallback = !j.score.has_value();
    if (cache_) cache_->put(key, j);
    return j;
  }

  /// n independent runs; the paper's score is their mean once any fallback
  /// runs are resolved.
  Verdict self_consistent_judge(const MessagePair& messages, const RelevanceScale& scale, const std::string& paper_id,
                                int n, const std::string& variant_name = "cot-sc") {
    if (n < 2) throw std::invalid_argument("self-consistency needs n >= 2");
    Verdict v{paper_id, {}};
    for (int run = 0; run < n; ++run) v.runs.push_back(judge_paper(messages, scale, paper_id, variant_name, run));
    return v;
  }

  Verdict judge(const MessagePair& messages, const RelevanceScale& scale, const std::string& paper_id,
                const PromptVariant& variant) {
    if (variant.is_self_consistent()) return self_consistent_judge(messages, scale, paper_id, variant.n, variant.name());
    return Verdict{paper_id, {judge_paper(messages, scale, paper_id, variant.name(), 0)}};
  }

  const JudgeStats& stats() const { return stats_; }
  const LlmEndpointConfig& endpoint() const { return endpoint_; }

 private:
  ChatClient& client_;
  LlmEndpointConfig endpoint_;
  JudgmentCache* cache_;
  AttemptPolicy attempts_;
  TransportPolicy transport_;
  JudgeStats stats_;
};

/// Fills fallback_value on every fallback run with the mean of all parsed run
/// scores of the SLR, or k/2 when nothing parsed. Parsed scores are never
/// touched. Returns the number of fallback runs.
inline std::size_t resolve_fallbacks(std::vector<Verdict>& verdicts, const RelevanceScale& scale) {
  Rational sum = 0;
  std::int64_t parsed = 0;
  std::size_t fallbacks = 0;
  for (const auto& v : verdicts)
    for (const auto& r : v.runs) {
      if (r.score) {
        sum += *r.score;
        ++parsed;
      } else {
        ++fallbacks;
      }
    }
  const Rational value = parsed > 0 ? sum / parsed : Rational(scale.upper(), 2);
  for (auto& v : verdicts)
    for (auto& r : v.runs)
      if (r.used_fallback) r.fallback_value = value;
  return fallbacks;
}

inline std::size_t resolve_fallbacks(std::vector<Judgment>& judgments, const RelevanceScale& scale) {
  std::vector<Verdict> verdicts;
  verdicts.reserve(judgments.size());
  for (auto& j : judgments) verdicts.push_back({j.paper_id, {std::move(j)}});
  const std::size_t n = resolve_fallbacks(verdicts, scale);
  for (std::size_t i = 0; i < judgments.size(); ++i) judgments[i] = std::move(verdicts[i].runs.front());
  return n;
}

}  // namespace lgar
