#pragma once

#include "lgar/corpus.hpp"
#include "lgar/llm_judge.hpp"
#include "lgar/metrics.hpp"
#include "lgar/pipeline.hpp"
#include "lgar/prompting.hpp"
#include "lgar/rerankers.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace lgar::cli {

enum ExitCode : int { kSuccess = 0, kValidationError = 1, kRuntimeFailure = 2, kPartial = 3 };

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raw option values. Each setting resolves as flag > config file > environment > default.
struct Options {
  std::string dataset;
  std::vector<std::string> slrs;
  std::string scale = "0-19";
  std::string scales;
  std::string variant = "zero-shot";
  std::string reranker = "bm25";
  std::string query_mode = "T";
  std::size_t concurrency = 4;
  std::size_t slr_concurrency = 1;
  std::uint64_t seed = 0;
  std::string cache_dir;
  std::string out;
  std::string config_file;
  std::string prompts_dir;
  std::string averaging = "macro";
  std::string runs;
  std::string qrels;
  std::vector<std::string> inputs;
  bool skip_on_transport_error = false;
  std::string llm_url;
  std::string llm_model;
  std::string llm_key_env = "LGAR_LLM_API_KEY";
  int llm_max_tokens = 1024;
  long long llm_timeout_ms = 120000;
  std::string rerank_url;
  std::size_t rerank_batch = 32;
  double bm25_k1 = 1.2;
  double bm25_b = 0.75;
  int transport_retries = 3;
  long long backoff_ms = 250;
};

namespace detail {

/// Applies config-file and environment values to options whose flag was not given.
class Layering {
 public:
  Layering(CLI::App& app, nlohmann::json config) : app_(app), config_(std::move(config)) {}

  template <typename T>
  void resolve(const std::string& flag, T& value, const std::string& config_path, const char* env = nullptr) {
    if (given(flag)) return;
    if (auto from_config = lookup(config_path)) {
      try {
        value = from_config->get<T>();
      } catch (const nlohmann::json::exception&) {
        throw UsageError("config key '" + config_path + "' has the wrong type");
      }
      return;
    }
    if (env) {
      if (const char* v = std::getenv(env)) {
        std::istringstream ss(v);
        if constexpr (std::is_same_v<T, std::string>) value = v;
        else if (!(ss >> value)) throw UsageError(std::string("environment variable ") + env + " is malformed");
      }
    }
  }

 private:
  bool given(const std::string& flag) const {
    for (const auto* sub : app_.get_subcommands()) {
      try {
        if (sub->get_option(flag)->count() > 0) return true;
      } catch (const CLI::OptionNotFound&) {
      }
    }
    return false;
  }
  std::optional<nlohmann::json> lookup(const std::string& path) const {
    const nlohmann::json* node = &config_;
    std::istringstream ss(path);
    std::string part;
    while (std::getline(ss, part, '.')) {
      if (!node->is_object() || !node->contains(part)) return std::nullopt;
      node = &(*node)[part];
    }
    return std::optional<nlohmann::json>(std::in_place, *node);
  }
  CLI::App& app_;
  nlohmann::json config_;
};

inline std::vector<RelevanceScale> parse_scale_list(const std::string& text, std::ostream& err) {
  std::vector<RelevanceScale> out;
  std::set<int> seen;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    auto s = RelevanceScale::parse(item);
    if (!seen.insert(s.upper()).second) {
      err << "warning: duplicate scale " << s.str() << " ignored\n";
      continue;
    }
    out.push_back(s);
  }
  if (out.empty()) throw UsageError("--scales needs at least one scale, e.g. 0-1,0-19");
  return out;
}

inline Dataset load_dataset_arg(const std::string& path) {
  if (path.empty()) throw UsageError("--dataset is required");
  fs::path p(path);
  std::string name = fs::absolute(p).lexically_normal().filename().string();
  if (name.empty()) name = fs::absolute(p).lexically_normal().parent_path().filename().string();
  return load_dataset(p, name);
}

inline void write_text(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << content;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace detail

/// Entry point shared by the lgar executable and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Two-stage LLM + re-ranker abstract screening: rank, evaluate, ablate."};
  app.require_subcommand(1);
  Options o;

  auto add_dataset = [&](CLI::App* s) { s->add_option("--dataset", o.dataset, "Dataset directory (slrs/, papers/)"); };
  auto add_out = [&](CLI::App* s) { s->add_option("--out", o.out, "Output directory"); };
  auto add_ranking = [&](CLI::App* s, bool llm) {
    add_dataset(s);
    add_out(s);
    s->add_option("--config", o.config_file, "JSON config file (flags take precedence)");
    s->add_option("--slr", o.slrs, "Restrict to these SLR ids");
    s->add_option("--reranker", o.reranker, "bm25 | remote | random");
    s->add_option("--query-mode", o.query_mode, "T | T+R");
    s->add_option("--seed", o.seed, "Seed for random re-ranking and exemplar selection");
    s->add_option("--concurrency", o.concurrency, "In-flight LLM requests");
    s->add_option("--slr-concurrency", o.slr_concurrency, "SLRs ranked concurrently");
    s->add_option("--rerank-url", o.rerank_url, "Remote re-rank service URL");
    s->add_option("--rerank-batch", o.rerank_batch, "Documents per re-rank request");
    s->add_option("--bm25-k1", o.bm25_k1);
    s->add_option("--bm25-b", o.bm25_b);
    s->add_option("--transport-retries", o.transport_retries, "Network retries per request");
    s->add_option("--backoff-ms", o.backoff_ms, "Initial network retry backoff");
    s->add_flag("--skip-on-transport-error", o.skip_on_transport_error, "Record failed SLRs instead of aborting");
    if (!llm) return;
    s->add_option("--variant", o.variant, "zero-shot | cot | cot-sc[:n] | two-shot | two-shot-cot | two-shot-cot-sc[:n]");
    s->add_option("--cache-dir", o.cache_dir, "Judgment cache directory (default <out>/cache)");
    s->add_option("--prompts", o.prompts_dir, "Directory of prompt asset overrides");
    s->add_option("--llm-url", o.llm_url, "Chat-completion base URL, e.g. http://host:8000/v1");
    s->add_option("--llm-model", o.llm_model, "Model name sent to the service");
    s->add_option("--llm-key-env", o.llm_key_env, "Environment variable holding the API key");
    s->add_option("--llm-max-tokens", o.llm_max_tokens);
    s->add_option("--llm-timeout-ms", o.llm_timeout_ms);
  };

  auto* rank = app.add_subcommand("rank", "Rank every SLR with the two-stage method");
  add_ranking(rank, true);
  rank->add_option("--scale", o.scale, "Relevance scale 0-k");

  auto* sweep = app.add_subcommand("sweep-scales", "Rank and evaluate once per relevance scale");
  add_ranking(sweep, true);
  sweep->add_option("--scales", o.scales, "Comma-separated scales, e.g. 0-1,0-4,0-19");

  auto* baseline = app.add_subcommand("baseline", "Rank by the second-stage scorer alone");
  add_ranking(baseline, false);

  auto* evaluate = app.add_subcommand("evaluate", "Compute screening metrics for a run directory");
  add_dataset(evaluate);
  add_out(evaluate);
  evaluate->add_option("--runs", o.runs, "Run directory (as written by rank/baseline)");
  evaluate->add_option("--qrels", o.qrels, "TREC qrels overriding dataset labels");
  evaluate->add_option("--averaging", o.averaging, "macro | micro");

  auto* report = app.add_subcommand("report", "Combine report.json files into summary and plot-data tables");
  report->add_option("--input", o.inputs, "[label=]path to report.json or evaluation directory");
  add_out(report);

  auto* validate = app.add_subcommand("validate-dataset", "Load and validate a dataset directory");
  add_dataset(validate);
  validate->add_option("--query-mode", o.query_mode, "Also require research questions when T+R");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kValidationError;
  }

  // ---- validation phase: nothing is written and nothing is contacted ----
  Dataset ds;
  RunConfig cfg;
  std::vector<RelevanceScale> scales;
  PromptTemplates templates = PromptTemplates::defaults();
  TransportPolicy transport;
  try {
    nlohmann::json config = nlohmann::json::object();
    if (!o.config_file.empty()) {
      std::ifstream in(o.config_file);
      if (!in) throw UsageError("cannot read config file " + o.config_file);
      try {
        config = nlohmann::json::parse(in);
      } catch (const nlohmann::json::parse_error& e) {
        throw UsageError("malformed config file: " + std::string(e.what()));
      }
    }
    detail::Layering layer(app, config);
    layer.resolve("--scale", o.scale, "scale", "LGAR_SCALE");
    layer.resolve("--variant", o.variant, "variant", "LGAR_VARIANT");
    layer.resolve("--reranker", o.reranker, "reranker", "LGAR_RERANKER");
    layer.resolve("--query-mode", o.query_mode, "query_mode", "LGAR_QUERY_MODE");
    layer.resolve("--concurrency", o.concurrency, "concurrency", "LGAR_CONCURRENCY");
    layer.resolve("--seed", o.seed, "seed", "LGAR_SEED");
    layer.resolve("--cache-dir", o.cache_dir, "cache_dir", "LGAR_CACHE_DIR");
    layer.resolve("--prompts", o.prompts_dir, "prompts_dir", "LGAR_PROMPTS_DIR");
    layer.resolve("--llm-url", o.llm_url, "llm.base_url", "LGAR_LLM_URL");
    layer.resolve("--llm-model", o.llm_model, "llm.model", "LGAR_LLM_MODEL");
    layer.resolve("--llm-key-env", o.llm_key_env, "llm.api_key_env", "LGAR_LLM_API_KEY_ENV");
    layer.resolve("--llm-max-tokens", o.llm_max_tokens, "llm.max_tokens");
    layer.resolve("--llm-timeout-ms", o.llm_timeout_ms, "llm.timeout_ms");
    layer.resolve("--rerank-url", o.rerank_url, "rerank.url", "LGAR_RERANK_URL");
    layer.resolve("--rerank-batch", o.rerank_batch, "rerank.batch_size");
    layer.resolve("--bm25-k1", o.bm25_k1, "bm25.k1");
    layer.resolve("--bm25-b", o.bm25_b, "bm25.b");

    if (*validate) {
      ds = detail::load_dataset_arg(o.dataset);
      const QueryMode mode = parse_query_mode(o.query_mode);
      bool bad = false;
      out << "dataset " << ds.name << ": " << ds.slrs.size() << " SLRs\n";
      for (const auto& slr : ds.slrs) {
        out << "  " << slr.spec.slr_id << ": " << slr.pool.size() << " papers, inclusion rate "
            << to_decimal(inclusion_rate(slr), 4) << (slr.no_relevant ? " (no relevant papers; excluded from metrics)" : "")
            << "\n";
        if (mode == QueryMode::title_plus_rq && slr.spec.research_questions.empty()) {
          err << "error: SLR '" << slr.spec.slr_id << "' has no research questions (required for T+R)\n";
          bad = true;
        }
      }
      return bad ? kValidationError : kSuccess;
    }

    if (*report) {
      if (o.inputs.empty()) throw UsageError("--input is required");
      if (o.out.empty()) throw UsageError("--out is required");
      std::vector<std::pair<std::string, nlohmann::json>> reports;
      for (const auto& item : o.inputs) {
        std::string label, path = item;
        if (auto eq = item.find('='); eq != std::string::npos) {
          label = item.substr(0, eq);
          path = item.substr(eq + 1);
        }
        fs::path p(path);
        if (fs::is_directory(p)) p /= "report.json";
        if (label.empty()) label = fs::absolute(p).parent_path().filename().string();
        std::ifstream in(p);
        if (!in) throw UsageError("cannot read report " + p.string());
        reports.emplace_back(label, nlohmann::json::parse(in));
      }
      std::ostringstream summary, boxes;
      summary << "label";
      for (const auto& c : metric_columns()) summary << "," << c;
      summary << "\n";
      boxes << "label,slr_id,MAP\n";
      char buf[32];
      for (const auto& [label, rep] : reports) {
        summary << label;
        for (const auto& c : metric_columns()) {
          std::snprintf(buf, sizeof buf, "%.6f", rep.at("macro").value(c, 0.0));
          summary << "," << buf;
        }
        summary << "\n";
        for (const auto& s : rep.at("per_slr")) {
          std::snprintf(buf, sizeof buf, "%.6f", s.at("metrics").at("MAP").get<double>());
          boxes << label << "," << s.at("slr_id").get<std::string>() << "," << buf << "\n";
        }
      }
      detail::write_text(fs::path(o.out) / "summary.csv", summary.str());
      detail::write_text(fs::path(o.out) / "map_distribution.csv", boxes.str());
      out << "wrote " << (fs::path(o.out) / "summary.csv").string() << "\n";
      return kSuccess;
    }

    if (*evaluate) {
      if (o.runs.empty()) throw UsageError("--runs is required");
      if (o.out.empty()) throw UsageError("--out is required");
      ds = detail::load_dataset_arg(o.dataset);
      if (!o.qrels.empty()) apply_qrels(ds, read_qrels(o.qrels));
      const Averaging mode = parse_averaging(o.averaging);
      auto rep = evaluate_run(ds, load_run_dir(o.runs), mode);
      write_report_files(rep, o.out);
      out << "MAP " << to_decimal(rep.macro.at("MAP"), 4) << "  TNR@95% " << to_decimal(rep.macro.at("TNR@95%"), 4);
      if (rep.micro) out << "  micro R@10% " << to_decimal(rep.micro->at("R@10%"), 4);
      out << "\n";
      return kSuccess;
    }

    // rank / sweep-scales / baseline
    if (o.out.empty()) throw UsageError("--out is required");
    ds = detail::load_dataset_arg(o.dataset);
    cfg.dataset_name = ds.name;
    cfg.slr_filter = o.slrs;
    cfg.use_llm = !*baseline;
    cfg.scale = RelevanceScale::parse(o.scale);
    cfg.variant = PromptVariant::parse(o.variant);
    cfg.query_mode = parse_query_mode(o.query_mode);
    cfg.scorer = parse_scorer_kind(o.reranker);
    cfg.bm25 = {o.bm25_k1, o.bm25_b};
    cfg.seed = o.seed;
    cfg.max_parallel = o.concurrency;
    cfg.slr_parallel = o.slr_concurrency;
    cfg.skip_on_transport_error = o.skip_on_transport_error;
    cfg.output_dir = o.out;
    cfg.cache_dir = o.cache_dir.empty() ? fs::path(o.out) / "cache" : fs::path(o.cache_dir);
    cfg.llm.base_url = o.llm_url;
    cfg.llm.model_name = o.llm_model;
    cfg.llm.api_key_ref = o.llm_key_env;
    cfg.llm.max_tokens = o.llm_max_tokens;
    cfg.llm.request_timeout = std::chrono::milliseconds(o.llm_timeout_ms);
    cfg.llm.max_parallel = static_cast<int>(o.concurrency);
    if (o.transport_retries < 0 || o.backoff_ms < 0) throw UsageError("retry settings must be non-negative");
    transport.max_retries = o.transport_retries;
    transport.initial_backoff = std::chrono::milliseconds(o.backoff_ms);
    transport.max_backoff = std::max(transport.max_backoff, transport.initial_backoff);
    cfg.rerank.url = o.rerank_url;
    cfg.rerank.batch_size = o.rerank_batch;
    cfg.rerank.transport = transport;
    if (!o.prompts_dir.empty()) templates = PromptTemplates::load(o.prompts_dir);
    cfg.templates_fingerprint = templates.fingerprint();
    if (*sweep) scales = detail::parse_scale_list(o.scales, err);
    cfg.validate(ds);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kValidationError;
  } catch (const std::invalid_argument& e) {
    err << "validation error: " << e.what() << "\n";
    return kValidationError;
  } catch (const DatasetError& e) {
    err << "dataset error: " << e.what() << "\n";
    return kValidationError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kValidationError;
  }

  // ---- execution phase ----
  try {
    std::unique_ptr<Scorer> scorer;
    switch (cfg.scorer) {
      case ScorerKind::bm25: scorer = std::make_unique<Bm25Scorer>(cfg.bm25); break;
      case ScorerKind::random: scorer = std::make_unique<RandomScorer>(cfg.seed); break;
      case ScorerKind::remote: scorer = std::make_unique<RemoteScorer>(cfg.rerank); break;
    }
    std::unique_ptr<HttpChatClient> client;
    std::unique_ptr<JudgmentCache> cache;
    std::unique_ptr<Judge> judge;
    if (cfg.use_llm) {
      client = std::make_unique<HttpChatClient>(cfg.llm);
      cache = std::make_unique<JudgmentCache>(cfg.cache_dir);
      judge = std::make_unique<Judge>(*client, cfg.llm, cache.get(), cfg.attempts, transport);
    }
    Services svc{judge.get(), scorer.get(), templates};

    auto summarize = [&](const RunResult& r) {
      for (const auto& f : r.failures) err << "failed: " << f.message << "\n";
      out << "ranked " << r.outcomes.size() << " SLRs (fingerprint " << r.fingerprint << ")";
      if (r.manifest.contains("judge") && !r.manifest["judge"].is_null())
        out << ", live LLM calls " << r.manifest["judge"]["live_calls"].get<std::size_t>() << ", cache hits "
            << r.manifest["judge"]["cache_hits"].get<std::size_t>();
      out << "\n";
    };

    if (*sweep) {
      auto runs = ablation_sweep(ds, cfg, scales, svc);
      std::ostringstream curve, groups;
      curve << "scale";
      for (const auto& c : metric_columns()) curve << "," << c;
      curve << "\n";
      groups << "scale,mean_distinct_scores,mean_group_size\n";
      bool partial = false;
      for (const auto& sr : runs) {
        summarize(sr.run);
        partial = partial || !sr.run.failures.empty();
        groups << sr.scale.str() << "," << to_decimal(sr.mean_distinct_scores) << "," << to_decimal(sr.mean_group_size)
               << "\n";
        if (sr.run.outcomes.empty()) continue;
        const fs::path dir = cfg.output_dir / scale_dir_name(sr.scale);
        auto rep = evaluate_run(ds, load_run_dir(dir), Averaging::macro);
        write_report_files(rep, dir);
        curve << sr.scale.str();
        for (const auto& c : metric_columns()) curve << "," << to_decimal(rep.macro.at(c));
        curve << "\n";
      }
      detail::write_text(cfg.output_dir / "scale_sweep.csv", curve.str());
      detail::write_text(cfg.output_dir / "group_stats.csv", groups.str());
      return partial ? kPartial : kSuccess;
    }

    auto result = run_dataset(ds, cfg, svc);
    summarize(result);
    return result.failures.empty() ? kSuccess : kPartial;
  } catch (const PipelineError& e) {
    err << "error: " << e.what() << "\n";
    if (e.transport())
      err << "hint: check that the service behind --llm-url/--rerank-url is reachable, or pass "
             "--skip-on-transport-error to record failed SLRs and continue\n";
    return kRuntimeFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
}

}  // namespace lgar::cli
