#pragma once

#include "lgar/corpus.hpp"
#include "lgar/llm_judge.hpp"
#include "lgar/parallel.hpp"
#include "lgar/prompting.hpp"
#include "lgar/text.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace lgar {

enum class QueryMode { title_only, title_plus_rq };

inline QueryMode parse_query_mode(const std::string& s) {
  if (s == "T") return QueryMode::title_only;
  if (s == "T+R") return QueryMode::title_plus_rq;
  throw std::invalid_argument("query mode must be 'T' or 'T+R', got '" + s + "'");
}
inline std::string to_string(QueryMode m) { return m == QueryMode::title_only ? "T" : "T+R"; }

struct RerankQuery {
  QueryMode mode = QueryMode::title_only;
  std::string text;
};

struct RerankDocument {
  std::string paper_id;
  std::string text;
};

inline RerankQuery build_query(const SlrSpec& slr, QueryMode mode) {
  if (mode == QueryMode::title_only) return {mode, slr.title};
  if (slr.research_questions.empty())
    throw std::invalid_argument("query mode T+R needs research questions; SLR '" + slr.slr_id + "' has none");
  return {mode, slr.title + " " + join(slr.research_questions, " ")};
}

inline RerankDocument make_document(const PaperRecord& p) { return {p.paper_id, p.title + " " + p.abstract}; }

inline std::vector<RerankDocument> make_documents(const std::vector<PaperRecord>& pool) {
  std::vector<RerankDocument> docs;
  docs.reserve(pool.size());
  for (const auto& p : pool) docs.push_back(make_document(p));
  return docs;
}

struct RerankScoreSet {
  std::string scorer_id;
  std::map<std::string, double> scores;

  double at(const std::string& paper_id) const {
    auto it = scores.find(paper_id);
    if (it == scores.end()) throw std::out_of_range("no rerank score for paper '" + paper_id + "'");
    return it->second;
  }
  /// Ids by descending score, ties by ascending paper_id.
  std::vector<std::string> ordered_ids() const {
    std::vector<std::pair<std::string, double>> v(scores.begin(), scores.end());
    std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> ids;
    ids.reserve(v.size());
    for (auto& [id, _] : v) ids.push_back(id);
    return ids;
  }
};

class RerankError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Second-stage scorer: one score per submitted document.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::string id() const = 0;
  virtual RerankScoreSet score(const RerankQuery& query, const std::vector<RerankDocument>& documents) = 0;
};

// ---------------------------------------------------------------------------
// Okapi BM25 over the SLR's own pool
// ---------------------------------------------------------------------------

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
};

inline double bm25_idf(std::size_t n_docs, std::size_t df) {
  const double n = static_cast<double>(n_docs), d = static_cast<double>(df);
  return std::log(1.0 + (n - d + 0.5) / (d + 0.5));
}

/// Scores each distinct query term once per document.
inline RerankScoreSet bm25_scores(const RerankQuery& query, const std::vector<RerankDocument>& documents,
                                  const Bm25Params& params = {}) {
  RerankScoreSet out;
  out.scorer_id = "bm25(k1=" + std::to_string(params.k1) + ",b=" + std::to_string(params.b) + ")";
  std::vector<std::unordered_map<std::string, std::size_t>> tf(documents.size());
  std::vector<std::size_t> length(documents.size());
  std::unordered_map<std::string, std::size_t> df;
  std::size_t total = 0;
  for (std::size_t i = 0; i < documents.size(); ++i) {
    for (auto& tok : text::tokenize(documents[i].text)) ++tf[i][tok];
    length[i] = 0;
    for (const auto& [term, count] : tf[i]) {
      length[i] += count;
      ++df[term];
    }
    total += length[i];
  }
  const double avgdl = documents.empty() ? 0.0 : static_cast<double>(total) / static_cast<double>(documents.size());
  auto terms_vec = text::tokenize(query.text);
  const std::set<std::string> terms(terms_vec.begin(), terms_vec.end());

  for (std::size_t i = 0; i < documents.size(); ++i) {
    double s = 0.0;
    const double norm = avgdl > 0 ? (1.0 - params.b + params.b * static_cast<double>(length[i]) / avgdl) : 1.0;
    for (const auto& term : terms) {
      auto it = tf[i].find(term);
      if (it == tf[i].end()) continue;
      const double f = static_cast<double>(it->second);
      s += bm25_idf(documents.size(), df[term]) * f * (params.k1 + 1.0) / (f + params.k1 * norm);
    }
    out.scores[documents[i].paper_id] = s;
  }
  return out;
}

class Bm25Scorer : public Scorer {
 public:
  explicit Bm25Scorer(Bm25Params params = {}) : params_(params) {}
  std::string id() const override { return "bm25"; }
  RerankScoreSet score(const RerankQuery& q, const std::vector<RerankDocument>& docs) override {
    return bm25_scores(q, docs, params_);
  }

 private:
  Bm25Params params_;
};

// ---------------------------------------------------------------------------
// Seeded random scores
// ---------------------------------------------------------------------------

/// Uniform scores in [0, 1), drawn in paper_id order so the result does not
/// depend on submission order.
inline RerankScoreSet random_scores(const std::vector<RerankDocument>& documents, std::uint64_t seed) {
  std::vector<std::string> ids;
  ids.reserve(documents.size());
  for (const auto& d : documents) ids.push_back(d.paper_id);
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  RerankScoreSet out;
  out.scorer_id = "random(seed=" + std::to_string(seed) + ")";
  for (const auto& id : ids) out.scores[id] = uniform(rng);
  return out;
}

class RandomScorer : public Scorer {
 public:
  explicit RandomScorer(std::uint64_t seed) : seed_(seed) {}
  std::string id() const override { return "random"; }
  RerankScoreSet score(const RerankQuery&, const std::vector<RerankDocument>& docs) override {
    return random_scores(docs, seed_);
  }

 private:
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Remote cross-encoder service
// ---------------------------------------------------------------------------

struct RemoteRerankConfig {
  std::string url;  // POST target; "/rerank" is appended when the URL has no path
  std::size_t batch_size = 32;
  std::chrono::milliseconds request_timeout{300000};
  std::size_t max_parallel = 2;
  TransportPolicy transport{};

  void validate() const {
    if (url.empty()) throw std::invalid_argument("rerank service URL not configured");
    if (batch_size < 1) throw std::invalid_argument("rerank batch size must be >= 1");
    if (max_parallel < 1) throw std::invalid_argument("rerank max_parallel must be >= 1");
  }
};

/// Sends one batch and validates cardinality and the id set.
inline std::vector<double> post_rerank_batch(const RemoteRerankConfig& config, const std::string& query,
                                             const std::vector<RerankDocument>& batch) {
  auto url = parse_url(config.url);
  if (url.path.empty()) url.path = "/rerank";
  nlohmann::json docs = nlohmann::json::array();
  for (const auto& d : batch) docs.push_back({{"id", d.paper_id}, {"text", d.text}});
  const std::string body = nlohmann::json{{"query", query}, {"documents", docs}}.dump();

  const std::string response = with_transport_retry(config.transport, [&] {
    httplib::Client client(url.scheme_host_port);
    const auto secs = std::max<long long>(1, std::chrono::duration_cast<std::chrono::seconds>(config.request_timeout).count());
    client.set_read_timeout(static_cast<time_t>(secs), 0);
    client.set_write_timeout(static_cast<time_t>(secs), 0);
    auto res = client.Post(url.path, body, "application/json");
    if (!res) throw TransportError("rerank request to " + config.url + " failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw TransportError("rerank service returned HTTP " + std::to_string(res->status));
    return res->body;
  });

  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(response);
  } catch (const nlohmann::json::parse_error& e) {
    throw RerankError(std::string("malformed rerank response: ") + e.what());
  }
  if (!parsed.contains("scores") || !parsed["scores"].is_array()) throw RerankError("malformed rerank response: no scores");
  const auto& scores = parsed["scores"];
  if (scores.size() != batch.size())
    throw RerankError("rerank count mismatch: sent " + std::to_string(batch.size()) + " documents, got " +
                      std::to_string(scores.size()) + " scores");
  std::unordered_map<std::string, double> by_id;
  for (const auto& s : scores) {
    if (!s.contains("id") || !s["id"].is_string() || !s.contains("score") || !s["score"].is_number())
      throw RerankError("malformed rerank response entry");
    const double v = s["score"].get<double>();
    if (!std::isfinite(v)) throw RerankError("non-finite rerank score");
    by_id[s["id"].get<std::string>()] = v;
  }
  std::vector<double> out;
  out.reserve(batch.size());
  for (const auto& d : batch) {
    auto it = by_id.find(d.paper_id);
    if (it == by_id.end()) throw RerankError("rerank response is missing id '" + d.paper_id + "'");
    out.push_back(it->second);
  }
  return out;
}

/// Scores a batch; on failure, halves it and retries each half, down to
/// single documents, whose failure is final.
inline std::vector<double> score_with_split(const RemoteRerankConfig& config, const std::string& query,
                                            const std::vector<RerankDocument>& batch) {
  try {
    return post_rerank_batch(config, query, batch);
  } catch (const std::runtime_error&) {
    if (batch.size() <= 1) throw;
  }
  const auto mid = batch.begin() + static_cast<std::ptrdiff_t>(batch.size() / 2);
  auto left = score_with_split(config, query, {batch.begin(), mid});
  auto right = score_with_split(config, query, {mid, batch.end()});
  left.insert(left.end(), right.begin(), right.end());
  return left;
}

inline RerankScoreSet remote_scores(const RerankQuery& query, const std::vector<RerankDocument>& documents,
                                    const RemoteRerankConfig& config) {
  config.validate();
  std::vector<std::vector<RerankDocument>> batches;
  for (std::size_t i = 0; i < documents.size(); i += config.batch_size)
    batches.emplace_back(documents.begin() + static_cast<std::ptrdiff_t>(i),
                         documents.begin() + static_cast<std::ptrdiff_t>(std::min(documents.size(), i + config.batch_size)));
  std::vector<std::vector<double>> results(batches.size());
  parallel_for(batches.size(), config.max_parallel,
               [&](std::size_t b) { results[b] = score_with_split(config, query.text, batches[b]); });
  RerankScoreSet out;
  out.scorer_id = "remote(" + config.url + ")";
  for (std::size_t b = 0; b < batches.size(); ++b)
    for (std::size_t i = 0; i < batches[b].size(); ++i) out.scores[batches[b][i].paper_id] = results[b][i];
  return out;
}

class RemoteScorer : public Scorer {
 public:
  explicit RemoteScorer(RemoteRerankConfig config) : config_(std::move(config)) { config_.validate(); }
  std::string id() const override { return "remote"; }
  RerankScoreSet score(const RerankQuery& q, const std::vector<RerankDocument>& docs) override {
    return remote_scores(q, docs, config_);
  }

 private:
  RemoteRerankConfig config_;
};

}  // namespace lgar
