// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include "lgar/cli.hpp"
#include "lgar/pipeline.hpp"
#include "support/fixtures.hpp"
#include "support/metric_oracle.hpp"
#include "support/mock_services.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <regex>
#include <sstream>

using namespace lgar;
namespace lt = lgar::testing;

namespace {

/// Collects failure messages for one criterion.
struct Check {
  std::vector<std::string> failures;
  void expect(bool ok, const std::string& what) {
    if (!ok && failures.size() < 10) failures.push_back(what);
  }
};

struct Criterion {
  int number;
  std::string title;
  double time_limit_s;  // 0 = no limit
  std::function<void(Check&)> body;
};

std::vector<std::vector<int>> seeded_rankings(std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t n = 1 + rng() % 50;
    const std::size_t p = 1 + rng() % n;
    out.push_back(lt::random_labels(rng, n, p));
  }
  return out;
}

std::vector<int> relevant_at(std::size_t n, std::initializer_list<std::size_t> ranks) {
  std::vector<int> labels(n, 0);
  for (auto r : ranks) labels[r - 1] = 1;
  return labels;
}

LlmEndpointConfig endpoint(const std::string& url) {
  LlmEndpointConfig c;
  c.base_url = url;
  c.model_name = "mock-model";
  c.request_timeout = std::chrono::milliseconds(5000);
  return c;
}

int upper_from_prompt(const nlohmann::json& req) {
  static const std::regex upper(R"(Decision: 0 - (\d+))");
  const std::string user = req.at("messages").back().at("content").get<std::string>();
  std::smatch m;
  return std::regex_search(user, m, upper) ? std::stoi(m[1]) : -1;
}

std::map<std::string, int> title_labels(const Dataset& ds) {
  std::map<std::string, int> labels;
  for (const auto& s : ds.slrs)
    for (const auto& p : s.pool) labels[p.title] = p.label;
  return labels;
}

// --------------------------------------------------------------------------

void metric_oracle_equivalence(Check& c) {
  for (const auto& labels : seeded_rankings(200, 20240601)) {
    LabeledRanking r{labels};
    auto near = [&](double a, double b, const char* what) {
      c.expect(std::fabs(a - b) <= 1e-9, std::string(what) + " differs from oracle: " + std::to_string(a) + " vs " +
                                             std::to_string(b));
    };
    near(to_double(average_precision(r)), oracle::average_precision(labels), "AP");
    for (int k : kRecallPercents) near(to_double(recall_at_percent(r, k)), oracle::recall_at_percent(labels, k), "R@k%");
    for (int t : {95, 100}) {
      near(to_double(wss_at_recall(r, Rational(t, 100))), oracle::wss(labels, t), "WSS");
      near(to_double(tnr_at_recall(r, Rational(t, 100)).value), oracle::tnr(labels, t), "TNR");
    }
  }
}

void nwss_identity(Check& c) {
  for (const auto& labels : seeded_rankings(200, 20240601)) {
    LabeledRanking r{labels};
    for (int t : {95, 100}) {
      const Rational target(t, 100);
      c.expect(normalized_wss(r, target) == tnr_at_recall(r, target).value, "nWSS != TNR");
    }
  }
}

void worked_values(Check& c) {
  const Rational r95(95, 100);
  LabeledRanking a{relevant_at(10, {1, 2})}, b{relevant_at(10, {1, 4})};
  c.expect(wss_at_recall(a, r95) == Rational(3, 4), "{1,2}: WSS@95% != 0.75");
  c.expect(tnr_at_recall(a, r95).value == Rational(1), "{1,2}: TNR@95% != 1");
  c.expect(wss_at_recall(b, r95) == Rational(55, 100), "{1,4}: WSS@95% != 0.55");
  c.expect(tnr_at_recall(b, r95).value == Rational(3, 4), "{1,4}: TNR@95% != 0.75");

  std::vector<int> one(10, 0);
  one[0] = 1;
  std::vector<int> hundred(1000, 0);
  for (int i = 0; i < 50; ++i) hundred[i] = hundred[100 + i] = 1;
  auto rep = aggregate({compute_slr_metrics("A", LabeledRanking{one}), compute_slr_metrics("B", LabeledRanking{hundred})},
                       Averaging::micro);
  c.expect(rep.macro.at("R@10%") == Rational(3, 4), "macro R@10% != 0.75");
  c.expect(rep.micro && rep.micro->at("R@10%") == Rational(51, 101), "micro R@10% != 51/101");
}

void end_to_end_mock(Check& c) {
  auto ds = lt::make_dataset({lt::make_slr("S1", 24, 4), lt::make_slr("S2", 15, 3), lt::make_slr("S3", 9, 1)});
  const auto labels = title_labels(ds);
  lt::MockLlmServer oracle_llm([&](const nlohmann::json& req) {
    const int k = upper_from_prompt(req);
    return lt::LlmReply{200, "Decision: " + std::to_string(labels.at(lt::query_paper_title(req)) ? k : 0)};
  });
  lt::MockLlmServer flat_llm([](const nlohmann::json& req) {
    return lt::LlmReply{200, "Some reasoning.\nDecision: " + std::to_string(upper_from_prompt(req) / 2)};
  });
  // Remote scores that disagree with the labels so the tie-breaking is visible.
  std::map<std::string, double> remote_table;
  std::mt19937_64 rng(99);
  for (const auto& s : ds.slrs)
    for (const auto& p : s.pool) remote_table[p.paper_id] = static_cast<double>(rng() % 1000) / 1000.0;
  lt::MockRerankServer rerank(lt::MockRerankServer::constant_scores(remote_table));

  for (ScorerKind kind : {ScorerKind::bm25, ScorerKind::random, ScorerKind::remote}) {
    RunConfig cfg;
    cfg.dataset_name = ds.name;
    cfg.scorer = kind;
    cfg.seed = 11;
    cfg.rerank.url = rerank.rerank_url();
    cfg.rerank.batch_size = 8;
    std::unique_ptr<Scorer> scorer;
    if (kind == ScorerKind::bm25) scorer = std::make_unique<Bm25Scorer>();
    if (kind == ScorerKind::random) scorer = std::make_unique<RandomScorer>(cfg.seed);
    if (kind == ScorerKind::remote) scorer = std::make_unique<RemoteScorer>(cfg.rerank);
    const std::string name = to_string(kind);

    cfg.llm = endpoint(oracle_llm.base_url());
    HttpChatClient client(cfg.llm);
    Judge judge(client, cfg.llm);
    Services svc{&judge, scorer.get()};
    auto res = run_dataset(ds, cfg, svc);
    c.expect(res.failures.empty() && res.outcomes.size() == 3, name + ": run incomplete");
    LoadedRun run;
    for (const auto& o : res.outcomes) {
      for (const auto& e : o.list.entries)
        run.lines.push_back({o.list.slr_id, e.paper_id, e.rank, to_decimal(e.llm_score), e.rerank_score, res.fingerprint});
    }
    auto rep = evaluate_run(ds, run);
    c.expect(rep.macro.at("MAP") == Rational(1), name + ": MAP != 1");
    c.expect(rep.macro.at("TNR@95%") == Rational(1), name + ": TNR@95% != 1");
    for (const auto& m : rep.per_slr)
      c.expect(m.values.at("MAP") == Rational(1), name + ": " + m.slr_id + " relevant papers not first");

    cfg.llm = endpoint(flat_llm.base_url());
    HttpChatClient flat_client(cfg.llm);
    Judge flat_judge(flat_client, cfg.llm);
    Services flat_svc{&flat_judge, scorer.get()};
    auto flat = run_dataset(ds, cfg, flat_svc);
    for (const auto& o : flat.outcomes) {
      const SlrEntry* slr = ds.find(o.list.slr_id);
      const auto expected = scorer->score(build_query(slr->spec, cfg.query_mode), make_documents(slr->pool)).ordered_ids();
      std::vector<std::string> got;
      for (const auto& e : o.list.entries) got.push_back(e.paper_id);
      c.expect(got == expected, name + ": shared-score order differs from re-ranker order for " + o.list.slr_id);
    }
  }
}

void retry_fallback_policy(Check& c) {
  // Per-title response scripts, consumed one response per request.
  std::map<std::string, std::deque<std::string>> script{
      {"S-p00", {"I am not sure.", "The paper seems fine", "Decision: 12"}},
      {"S-p01", {"Decision: 3"}},
      {"S-p02", {"Decision: 7"}},
      {"S-p03", {"garbage", "more garbage", "still garbage", "no decision"}},
  };
  std::mutex m;
  lt::MockLlmServer llm([&](const nlohmann::json& req) {
    std::lock_guard lock(m);
    auto& q = script.at(lt::query_paper_title(req));
    std::string r = q.empty() ? "exhausted" : q.front();
    if (!q.empty()) q.pop_front();
    return lt::LlmReply{200, r};
  });
  auto ds = lt::make_dataset({lt::make_slr("S", 4, 1)});
  RunConfig cfg;
  cfg.dataset_name = ds.name;
  cfg.llm = endpoint(llm.base_url());
  HttpChatClient client(cfg.llm);
  Judge judge(client, cfg.llm);
  Bm25Scorer bm25;
  Services svc{&judge, &bm25};
  auto res = run_dataset(ds, cfg, svc);
  c.expect(res.outcomes.size() == 1, "run failed");
  if (res.outcomes.empty()) return;
  std::map<std::string, Judgment> by_id;
  for (const auto& e : res.outcomes[0].list.entries) by_id[e.paper_id] = e.provenance->runs.front();

  const auto& j12 = by_id.at("S-p00");
  c.expect(j12.score == 12, "third attempt score != 12");
  c.expect(j12.temperature_trace == std::vector<double>{0.0, 0.5, 0.5}, "temperature trace != [0, 0.5, 0.5]");
  c.expect(!j12.used_fallback && j12.attempts == 3, "attempt count != 3");

  const auto& jf = by_id.at("S-p03");
  c.expect(jf.used_fallback, "four unparseable responses did not fall back");
  c.expect(jf.attempts == 4, "fallback judgment attempts != 4");
  c.expect(jf.temperature_trace == std::vector<double>{0.0, 0.5, 0.5, 0.5}, "fallback trace != [0, 0.5, 0.5, 0.5]");
  // Hand computation: parsed scores in the SLR are 12, 3, 7.
  c.expect(jf.fallback_value == Rational(22, 3), "fallback value != (12 + 3 + 7) / 3");
  c.expect(llm.calls() == 3 + 1 + 1 + 4, "unexpected number of LLM calls");
}

void two_stage_invariants(Check& c) {
  std::mt19937_64 rng(424242);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 30);
    const int levels = 1 + static_cast<int>(rng() % 6);
    std::vector<std::pair<std::string, Rational>> llm;
    std::map<std::string, double> rr, rr2;
    for (int i = 0; i < n; ++i) {
      const std::string id = "d" + std::to_string(i);
      llm.emplace_back(id, Rational(static_cast<long long>(rng() % levels), 1 + static_cast<long long>(rng() % 3)));
      rr[id] = static_cast<double>(rng() % 10);
      rr2[id] = static_cast<double>(rng() % 10);
    }
    auto a = two_stage_order(llm, RerankScoreSet{"a", rr});
    auto b = two_stage_order(llm, RerankScoreSet{"b", rr2});
    for (std::size_t i = 0; i + 1 < a.size(); ++i) {
      c.expect(a[i].llm_score >= a[i + 1].llm_score, "dominance violated");
      if (a[i].llm_score == a[i + 1].llm_score)
        c.expect(a[i].rerank_score > a[i + 1].rerank_score ||
                     (a[i].rerank_score == a[i + 1].rerank_score && a[i].paper_id < a[i + 1].paper_id),
                 "within-group order is not re-ranker order");
    }
    // Locality: different re-ranker scores only permute papers inside their LLM group.
    std::map<Rational, std::set<std::string>> ga, gb;
    for (std::size_t i = 0; i < a.size(); ++i) {
      c.expect(a[i].llm_score == b[i].llm_score, "group boundaries moved with re-ranker scores");
      ga[a[i].llm_score].insert(a[i].paper_id);
      gb[b[i].llm_score].insert(b[i].paper_id);
    }
    c.expect(ga == gb, "group membership changed with re-ranker scores");
  }
}

void scale_sweep_statistics(Check& c) {
  const std::size_t n = 20;
  auto ds = lt::make_dataset({lt::make_slr("S", n, 5)});
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < n; ++i) index[ds.slrs[0].pool[i].title] = i;
  // Oracle with m distinct outputs: paper i gets level (i % m), spread over 0..k.
  for (int m : {1, 2, 4, 5, 10, 20}) {
    lt::MockLlmServer llm([&, m](const nlohmann::json& req) {
      const int k = upper_from_prompt(req);
      const int level = static_cast<int>(index.at(lt::query_paper_title(req)) % m);
      const int score = m == 1 ? 0 : level * k / (m - 1);
      return lt::LlmReply{200, "Decision: " + std::to_string(score)};
    });
    RunConfig cfg;
    cfg.dataset_name = ds.name;
    cfg.llm = endpoint(llm.base_url());
    HttpChatClient client(cfg.llm);
    Judge judge(client, cfg.llm);
    Bm25Scorer bm25;
    Services svc{&judge, &bm25};
    std::vector<RelevanceScale> scales;
    for (int k : {1, 4, 9, 19})
      if (k + 1 >= m) scales.emplace_back(k);
    for (const auto& sr : ablation_sweep(ds, cfg, scales, svc)) {
      const std::string tag = "m=" + std::to_string(m) + " scale " + sr.scale.str();
      c.expect(sr.mean_distinct_scores == Rational(m), tag + ": distinct scores != m");
      c.expect(sr.mean_group_size == Rational(static_cast<long long>(n), m), tag + ": group size != N/m");
    }
  }
}

void bm25_sanity(Check& c) {
  // Five equal-length documents containing 0..4 distinct query terms.
  const std::vector<std::string> terms{"alpha", "beta", "gamma", "delta"};
  std::vector<RerankDocument> docs;
  for (int i = 0; i < 5; ++i) {
    std::string text;
    for (int t = 0; t < 4; ++t) text += (t < i ? terms[t] : "filler" + std::to_string(t)) + " ";
    docs.push_back({"doc" + std::to_string(i), text + "common words"});
  }
  auto s = bm25_scores({QueryMode::title_only, "alpha beta gamma delta"}, docs);
  for (int i = 0; i + 1 < 5; ++i)
    c.expect(s.at("doc" + std::to_string(i + 1)) > s.at("doc" + std::to_string(i)),
             "doc with more query terms does not rank strictly higher");
  c.expect(s.ordered_ids() == std::vector<std::string>{"doc4", "doc3", "doc2", "doc1", "doc0"}, "BM25 order wrong");
  c.expect(std::fabs(bm25_idf(2, 1) - std::log(2.0)) <= 1e-12, "idf(N=2, df=1) != ln 2");
}

void determinism(Check& c) {
  lt::TempDir tmp;
  auto ds = lt::make_dataset({lt::make_slr("S1", 14, 3), lt::make_slr("S2", 10, 2)});
  write_dataset(ds, tmp / "mock");
  // Deterministic but non-trivial answers: a hash of title and temperature.
  lt::MockLlmServer llm([](const nlohmann::json& req) {
    const std::string key = lt::query_paper_title(req) + std::to_string(req.at("temperature").get<double>());
    const int k = upper_from_prompt(req);
    const int score = static_cast<int>(std::stoull(sha256_hex(key).substr(0, 8), nullptr, 16) % (k + 1));
    return lt::LlmReply{200, "Decision: " + std::to_string(score)};
  });
  auto run_once = [&](const std::string& name) {
    const std::string out = (tmp / name).string();
    std::vector<std::string> args{"lgar",           "rank",        "--dataset", (tmp / "mock").string(), "--out", out,
                                  "--llm-url",      llm.base_url(), "--llm-model", "mock-model",       "--variant",
                                  "two-shot-cot-sc:3", "--reranker", "random",      "--seed",          "5"};
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream o, e;
    const int rank_code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), o, e);
    std::vector<std::string> ev{"lgar", "evaluate", "--dataset", (tmp / "mock").string(), "--runs", out, "--out", out + "/eval"};
    std::vector<const char*> eargv;
    for (const auto& a : ev) eargv.push_back(a.c_str());
    const int eval_code = cli::run_cli(static_cast<int>(eargv.size()), eargv.data(), o, e);
    c.expect(rank_code == 0 && eval_code == 0, name + ": cli failed: " + e.str());
  };
  run_once("first");
  run_once("second");
  for (const char* f : {"runs/S1.run", "runs/S2.run", "eval/report.csv", "eval/report.json", "eval/map_distribution.csv"}) {
    const auto a = lt::read_all(tmp / "first" / f), b = lt::read_all(tmp / "second" / f);
    c.expect(!a.empty() && a == b, std::string(f) + " differs between runs");
  }
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "metric oracle equivalence on 200 rankings", 10.0, metric_oracle_equivalence},
      {2, "nWSS equals TNR exactly", 0, nwss_identity},
      {3, "worked WSS/TNR values and macro vs micro", 0, worked_values},
      {4, "end-to-end mock pipeline for every re-ranker", 30.0, end_to_end_mock},
      {5, "retry and fallback policy", 0, retry_fallback_policy},
      {6, "two-stage dominance and locality on 1000 instances", 0, two_stage_invariants},
      {7, "scale-sweep distinct scores and group size", 0, scale_sweep_statistics},
      {8, "BM25 sanity and idf spot value", 0, bm25_sanity},
      {9, "byte-identical repeated runs", 0, determinism},
  };
  int failed = 0;
  for (const auto& cr : criteria) {
    Check check;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cr.body(check);
    } catch (const std::exception& e) {
      check.failures.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (cr.time_limit_s > 0 && secs >= cr.time_limit_s)
      check.failures.push_back("runtime " + std::to_string(secs) + " s exceeds " + std::to_string(cr.time_limit_s) + " s");
    const bool pass = check.failures.empty();
    if (!pass) ++failed;
    std::printf("[%s] criterion %d: %s (%.3f s)\n", pass ? "PASS" : "FAIL", cr.number, cr.title.c_str(), secs);
    for (const auto& f : check.failures) std::printf("       %s\n", f.c_str());
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
