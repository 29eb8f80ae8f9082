#pragma once

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <atomic>
#include <functional>
#include <mutex>
#include <regex>
#include <string>
#include <thread>
#include <vector>

namespace lgar::testing {

/// Local HTTP server on an ephemeral port, served from a background thread.
class MockServer {
 public:
  MockServer() = default;
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;
  ~MockServer() { stop(); }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

 protected:
  void start() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }
  httplib::Server server_;

 private:
  int port_ = 0;
  std::thread thread_;
};

struct LlmReply {
  int status = 200;
  std::string content;
};

/// OpenAI-style chat-completion endpoint at /v1/chat/completions driven by a
/// script over the decoded request.
class MockLlmServer : public MockServer {
 public:
  using Script = std::function<LlmReply(const nlohmann::json& request)>;

  explicit MockLlmServer(Script script) : script_(std::move(script)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      auto body = nlohmann::json::parse(req.body);
      {
        std::lock_guard lock(mutex_);
        requests_.push_back(body);
      }
      ++calls_;
      LlmReply reply = script_(body);
      res.status = reply.status;
      nlohmann::json out = {{"choices", {{{"message", {{"role", "assistant"}, {"content", reply.content}}}}}}};
      res.set_content(out.dump(), "application/json");
    });
    start();
  }

  ~MockLlmServer() { stop(); }

  std::string base_url() const { return url() + "/v1"; }
  std::size_t calls() const { return calls_; }
  std::vector<nlohmann::json> requests() const {
    std::lock_guard lock(mutex_);
    return requests_;
  }

 private:
  Script script_;
  std::atomic<std::size_t> calls_{0};
  mutable std::mutex mutex_;
  std::vector<nlohmann::json> requests_;
};

/// Rerank endpoint at /rerank: {query, documents:[{id,text}]} -> {scores:[{id,score}]}.
class MockRerankServer : public MockServer {
 public:
  using Script = std::function<nlohmann::json(const nlohmann::json& request)>;

  explicit MockRerankServer(Script script) : script_(std::move(script)) {
    server_.Post("/rerank", [this](const httplib::Request& req, httplib::Response& res) {
      ++calls_;
      auto body = nlohmann::json::parse(req.body);
      res.set_content(script_(body).dump(), "application/json");
    });
    start();
  }

  /// Scores each document with a fixed per-id table (0 for unknown ids).
  static Script constant_scores(std::map<std::string, double> table) {
    return [table = std::move(table)](const nlohmann::json& req) {
      nlohmann::json scores = nlohmann::json::array();
      for (const auto& d : req.at("documents")) {
        const auto id = d.at("id").get<std::string>();
        auto it = table.find(id);
        scores.push_back({{"id", id}, {"score", it == table.end() ? 0.0 : it->second}});
      }
      return nlohmann::json{{"scores", scores}, {"model_id", "mock"}, {"truncated_count", 0}};
    };
  }

  ~MockRerankServer() { stop(); }

  std::string rerank_url() const { return url() + "/rerank"; }
  std::size_t calls() const { return calls_; }

 private:
  Script script_;
  std::atomic<std::size_t> calls_{0};
};

/// Paper title of the query turn (the last user message) of a chat request.
inline std::string query_paper_title(const nlohmann::json& request) {
  const auto& msgs = request.at("messages");
  const std::string user = msgs.back().at("content").get<std::string>();
  static const std::regex title(R"(Title: '([^']*)' Abstract:)");
  std::smatch m;
  if (std::regex_search(user, m, title)) return m[1].str();
  return {};
}

inline std::string system_message(const nlohmann::json& request) {
  return request.at("messages").front().at("content").get<std::string>();
}

}  // namespace lgar::testing
