#pragma once

#include "lgar/corpus.hpp"
#include "lgar/hashing.hpp"
#include "lgar/llm_judge.hpp"
#include "lgar/metrics.hpp"
#include "lgar/parallel.hpp"
#include "lgar/prompting.hpp"
#include "lgar/rerankers.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lgar {

enum class ScorerKind { bm25, remote, random };

inline ScorerKind parse_scorer_kind(const std::string& s) {
  if (s == "bm25") return ScorerKind::bm25;
  if (s == "remote") return ScorerKind::remote;
  if (s == "random") return ScorerKind::random;
  throw std::invalid_argument("reranker must be bm25, remote or random, got '" + s + "'");
}
inline std::string to_string(ScorerKind k) {
  switch (k) {
    case ScorerKind::bm25: return "bm25";
    case ScorerKind::remote: return "remote";
    case ScorerKind::random: return "random";
  }
  return "?";
}

inline constexpr const char* kTieBreakRule = "llm_score desc, rerank_score desc, paper_id asc";

struct RunConfig {
  std::string dataset_name;
  std::vector<std::string> slr_filter;  // empty = all SLRs
  RelevanceScale scale{19};
  PromptVariant variant = PromptVariant::zero_shot();
  QueryMode query_mode = QueryMode::title_only;
  ScorerKind scorer = ScorerKind::bm25;
  Bm25Params bm25{};
  LlmEndpointConfig llm{};
  AttemptPolicy attempts{};
  RemoteRerankConfig rerank{};
  fs::path cache_dir;
  fs::path output_dir;
  std::size_t max_parallel = 4;  // in-flight LLM requests per SLR
  std::size_t slr_parallel = 1;  // SLRs ranked concurrently
  std::uint64_t seed = 0;
  bool use_llm = true;  // false: scorer-only baseline
  bool skip_on_transport_error = false;
  std::string templates_fingerprint = PromptTemplates::defaults().fingerprint();

  /// Everything that determines the ranking, and nothing else.
  nlohmann::json ranking_identity() const {
    nlohmann::json id = {{"dataset", dataset_name},
                         {"use_llm", use_llm},
                         {"query_mode", to_string(query_mode)},
                         {"reranker", to_string(scorer)},
                         {"seed", seed}};
    if (use_llm) {
      id["scale"] = scale.str();
      id["variant"] = variant.name();
      id["model"] = llm.model_name;
      id["max_tokens"] = llm.max_tokens;
      id["attempts"] = {attempts.parse_retries, attempts.initial_temperature, attempts.retry_temperature};
      id["templates"] = templates_fingerprint;
    }
    if (scorer == ScorerKind::bm25) id["bm25"] = {bm25.k1, bm25.b};
    if (scorer == ScorerKind::remote) id["rerank_url"] = rerank.url;
    return id;
  }

  std::string fingerprint() const { return sha256_hex(ranking_identity().dump()).substr(0, 16); }

  nlohmann::json echo() const {
    nlohmann::json e = ranking_identity();
    e["slr_filter"] = slr_filter;
    e["llm_base_url"] = llm.base_url;
    e["llm_api_key_env"] = llm.api_key_ref;
    e["max_parallel"] = max_parallel;
    e["slr_parallel"] = slr_parallel;
    e["cache_dir"] = cache_dir.string();
    e["output_dir"] = output_dir.string();
    e["skip_on_transport_error"] = skip_on_transport_error;
    if (scorer == ScorerKind::remote) e["rerank_batch_size"] = rerank.batch_size;
    return e;
  }

  void validate(const Dataset& ds) const {
    if (max_parallel < 1 || slr_parallel < 1) throw std::invalid_argument("concurrency must be >= 1");
    if (use_llm) llm.validate();
    if (scorer == ScorerKind::remote) rerank.validate();
    for (const auto& id : slr_filter)
      if (!ds.find(id)) throw std::invalid_argument("unknown SLR '" + id + "' in --slr filter");
    if (query_mode == QueryMode::title_plus_rq)
      for (const auto& slr : ds.slrs)
        if ((slr_filter.empty() || std::count(slr_filter.begin(), slr_filter.end(), slr.spec.slr_id)) &&
            slr.spec.research_questions.empty())
          throw std::invalid_argument("query mode T+R needs research questions; SLR '" + slr.spec.slr_id + "' has none");
  }
};

struct RankedEntry {
  std::string paper_id;
  Rational llm_score;
  double rerank_score = 0.0;
  std::size_t rank = 0;
  std::optional<Verdict> provenance;
};

struct RankedList {
  std::string slr_id;
  std::vector<RankedEntry> entries;
  std::string fingerprint;
  std::vector<std::string> removed_exemplars;  // positive, negative
};

struct GroupStats {
  std::size_t distinct_scores = 0;
  Rational mean_group_size = 0;
};

struct SlrOutcome {
  RankedList list;
  std::size_t fallback_runs = 0;
  bool few_shot_skipped = false;
  std::string few_shot_note;
  GroupStats groups;
};

class PipelineError : public std::runtime_error {
 public:
  PipelineError(std::string slr_id, const std::string& message, bool transport)
      : std::runtime_error("SLR '" + slr_id + "': " + message), slr_id_(std::move(slr_id)), transport_(transport) {}
  const std::string& slr_id() const { return slr_id_; }
  bool transport() const { return transport_; }

 private:
  std::string slr_id_;
  bool transport_;
};

/// Sorts by (llm_score desc, rerank_score desc, paper_id asc) and assigns
/// ranks 1..N.
inline void order_entries(std::vector<RankedEntry>& entries) {
  std::sort(entries.begin(), entries.end(), [](const RankedEntry& a, const RankedEntry& b) {
    if (a.llm_score != b.llm_score) return a.llm_score > b.llm_score;
    if (a.rerank_score != b.rerank_score) return a.rerank_score > b.rerank_score;
    return a.paper_id < b.paper_id;
  });
  for (std::size_t i = 0; i < entries.size(); ++i) entries[i].rank = i + 1;
}

/// Second stage: rerank scores only order papers inside a group of equal
/// first-stage scores.
inline std::vector<RankedEntry> two_stage_order(const std::vector<std::pair<std::string, Rational>>& llm_scores,
                                                const RerankScoreSet& rerank) {
  std::vector<RankedEntry> entries;
  entries.reserve(llm_scores.size());
  for (const auto& [id, s] : llm_scores) entries.push_back({id, s, rerank.at(id), 0, std::nullopt});
  order_entries(entries);
  return entries;
}

inline GroupStats group_stats(const std::vector<RankedEntry>& entries) {
  std::set<Rational> distinct;
  for (const auto& e : entries) distinct.insert(e.llm_score);
  GroupStats g;
  g.distinct_scores = distinct.size();
  if (!distinct.empty()) g.mean_group_size = Rational(static_cast<long long>(entries.size()), static_cast<long long>(distinct.size()));
  return g;
}

/// Per-SLR seed derived from the run seed, independent of SLR order.
inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& slr_id) {
  const std::string h = sha256_hex(std::to_string(seed) + ":" + slr_id);
  return std::stoull(h.substr(0, 16), nullptr, 16);
}

struct Services {
  Judge* judge = nullptr;    // required when the config uses the LLM stage
  Scorer* scorer = nullptr;  // always required
  PromptTemplates templates = PromptTemplates::defaults();
};

namespace detail {

inline std::vector<Verdict> judge_pool(const SlrSpec& spec, const std::vector<PaperRecord>& pool, const RunConfig& cfg,
                                       Services& svc, const PromptVariant& variant,
                                       const std::optional<std::pair<FewShotExemplar, FewShotExemplar>>& exemplars) {
  std::vector<Verdict> verdicts(pool.size());
  parallel_for(pool.size(), cfg.max_parallel, [&](std::size_t i) {
    auto messages = build_messages(spec, pool[i], cfg.scale, variant, exemplars, svc.templates);
    verdicts[i] = svc.judge->judge(messages, cfg.scale, pool[i].paper_id, variant);
  });
  return verdicts;
}

}  // namespace detail

/// Ranks one SLR's pool: judge every paper, resolve fallbacks, score the
/// whole pool once with the second-stage scorer, then order within LLM groups.
inline SlrOutcome rank_slr(const SlrEntry& slr, const RunConfig& cfg, Services& svc) {
  const std::string& slr_id = slr.spec.slr_id;
  if (!svc.scorer) throw std::invalid_argument("no second-stage scorer configured");
  if (cfg.use_llm && !svc.judge) throw std::invalid_argument("no LLM judge configured");
  SlrOutcome out;
  out.list.slr_id = slr_id;
  out.list.fingerprint = cfg.fingerprint();
  std::vector<PaperRecord> pool = slr.pool;
  std::vector<Verdict> verdicts;

  try {
    if (cfg.use_llm) {
      PromptVariant variant = cfg.variant;
      if (variant.is_two_shot()) {
        const PromptVariant base = variant.exemplar_source();
        auto base_verdicts = detail::judge_pool(slr.spec, pool, cfg, svc, base, std::nullopt);
        std::vector<Judgment> base_runs;
        for (const auto& v : base_verdicts) base_runs.push_back(v.runs.front());
        try {
          auto sel = select_few_shot(base_runs, pool, cfg.scale, derive_seed(cfg.seed, slr_id));
          out.list.removed_exemplars = {sel.positive.paper.paper_id, sel.negative.paper.paper_id};
          pool = std::move(sel.reduced_pool);
          verdicts = detail::judge_pool(slr.spec, pool, cfg, svc, variant, std::make_pair(sel.positive, sel.negative));
        } catch (const NoExemplarAvailable& e) {
          out.few_shot_skipped = true;
          out.few_shot_note = std::string(e.what()) + "; ranked with " + base.name();
          verdicts = std::move(base_verdicts);
        }
      } else {
        verdicts = detail::judge_pool(slr.spec, pool, cfg, svc, variant, std::nullopt);
      }
      out.fallback_runs = resolve_fallbacks(verdicts, cfg.scale);
    }

    const auto docs = make_documents(pool);
    RerankScoreSet rerank = svc.scorer->score(build_query(slr.spec, cfg.query_mode), docs);
    if (rerank.scores.size() != docs.size())
      throw RerankError("scorer returned " + std::to_string(rerank.scores.size()) + " scores for " +
                        std::to_string(docs.size()) + " documents");

    std::vector<RankedEntry> entries;
    entries.reserve(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
      RankedEntry e{pool[i].paper_id, Rational(0), rerank.at(pool[i].paper_id), 0, std::nullopt};
      if (cfg.use_llm) {
        e.llm_score = *verdicts[i].score();
        e.provenance = verdicts[i];
      }
      entries.push_back(std::move(e));
    }
    order_entries(entries);
    out.groups = group_stats(entries);
    out.list.entries = std::move(entries);
  } catch (const TransportError& e) {
    throw PipelineError(slr_id, e.what(), true);
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError(slr_id, e.what(), false);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run files
// ---------------------------------------------------------------------------

struct RunLine {
  std::string slr_id;
  std::string paper_id;
  std::size_t rank = 0;
  std::string llm_score;
  double rerank_score = 0.0;
  std::string fingerprint;
};

/// "slr_id paper_id rank llm_score rerank_score config_fingerprint"
inline void write_run_file(const RankedList& list, std::ostream& out) {
  char buf[64];
  for (const auto& e : list.entries) {
    std::snprintf(buf, sizeof buf, "%.17g", e.rerank_score);
    out << list.slr_id << ' ' << e.paper_id << ' ' << e.rank << ' ' << to_decimal(e.llm_score, 6) << ' ' << buf << ' '
        << list.fingerprint << '\n';
  }
}

inline std::vector<RunLine> read_run_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError(path, 0, "cannot open run file");
  std::vector<RunLine> lines;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    RunLine r;
    if (!(ss >> r.slr_id >> r.paper_id >> r.rank >> r.llm_score >> r.rerank_score >> r.fingerprint))
      throw DatasetError(path, line_no, "expected 'slr_id paper_id rank llm_score rerank_score fingerprint'");
    lines.push_back(std::move(r));
  }
  return lines;
}

inline constexpr const char* kRunsDir = "runs";
inline constexpr const char* kManifestFile = "manifest.json";

struct SlrFailure {
  std::string slr_id;
  std::string message;
};

struct RunResult {
  std::vector<SlrOutcome> outcomes;  // slr_id order
  std::vector<SlrFailure> failures;
  nlohmann::json manifest;
  std::string fingerprint;
};

inline nlohmann::json outcome_json(const SlrOutcome& o) {
  nlohmann::json j = {{"slr_id", o.list.slr_id},
                      {"papers_ranked", o.list.entries.size()},
                      {"fallback_runs", o.fallback_runs},
                      {"distinct_llm_scores", o.groups.distinct_scores},
                      {"mean_group_size", to_double(o.groups.mean_group_size)},
                      {"few_shot_skipped", o.few_shot_skipped}};
  if (!o.list.removed_exemplars.empty())
    j["exemplars"] = {{"positive", o.list.removed_exemplars[0]}, {"negative", o.list.removed_exemplars[1]}};
  if (!o.few_shot_note.empty()) j["few_shot_note"] = o.few_shot_note;
  return j;
}

/// Ranks every selected SLR. Failed SLRs abort the run unless
/// skip_on_transport_error is set, in which case they are recorded.
/// Writes runs/<slr_id>.run and manifest.json when output_dir is set.
inline RunResult run_dataset(const Dataset& ds, const RunConfig& cfg, Services& svc) {
  cfg.validate(ds);
  const auto started = std::chrono::steady_clock::now();
  std::size_t calls0 = 0, hits0 = 0, misses0 = 0;
  if (svc.judge) {
    calls0 = svc.judge->stats().live_calls;
    hits0 = svc.judge->stats().cache_hits;
    misses0 = svc.judge->stats().cache_misses;
  }

  std::vector<const SlrEntry*> selected;
  for (const auto& slr : ds.slrs)
    if (cfg.slr_filter.empty() || std::count(cfg.slr_filter.begin(), cfg.slr_filter.end(), slr.spec.slr_id))
      selected.push_back(&slr);

  std::vector<std::optional<SlrOutcome>> outcomes(selected.size());
  std::vector<std::optional<SlrFailure>> failures(selected.size());
  parallel_for(selected.size(), cfg.slr_parallel, [&](std::size_t i) {
    try {
      outcomes[i] = rank_slr(*selected[i], cfg, svc);
    } catch (const PipelineError& e) {
      if (!cfg.skip_on_transport_error) throw;
      failures[i] = SlrFailure{e.slr_id(), e.what()};
    }
  });

  RunResult result;
  result.fingerprint = cfg.fingerprint();
  for (auto& o : outcomes)
    if (o) result.outcomes.push_back(std::move(*o));
  for (auto& f : failures)
    if (f) result.failures.push_back(std::move(*f));

  nlohmann::json slrs = nlohmann::json::array();
  std::size_t fallback_total = 0;
  for (const auto& o : result.outcomes) {
    slrs.push_back(outcome_json(o));
    fallback_total += o.fallback_runs;
  }
  nlohmann::json failed = nlohmann::json::array();
  for (const auto& f : result.failures) failed.push_back({{"slr_id", f.slr_id}, {"error", f.message}});
  nlohmann::json judge_stats = nullptr;
  if (svc.judge && cfg.use_llm) {
    const std::size_t hits = svc.judge->stats().cache_hits - hits0;
    const std::size_t misses = svc.judge->stats().cache_misses - misses0;
    judge_stats = {{"live_calls", svc.judge->stats().live_calls - calls0},
                   {"cache_hits", hits},
                   {"cache_misses", misses},
                   {"cache_hit_rate", hits + misses ? static_cast<double>(hits) / static_cast<double>(hits + misses) : 0.0}};
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  result.manifest = {{"fingerprint", result.fingerprint},
                     {"config", cfg.echo()},
                     {"tie_break", kTieBreakRule},
                     {"slrs", slrs},
                     {"fallback_runs_total", fallback_total},
                     {"failures", failed},
                     {"judge", judge_stats},
                     {"wall_time_seconds", wall}};

  if (!cfg.output_dir.empty()) {
    fs::create_directories(cfg.output_dir / kRunsDir);
    for (const auto& o : result.outcomes) {
      std::ofstream out(cfg.output_dir / kRunsDir / (o.list.slr_id + ".run"), std::ios::binary);
      write_run_file(o.list, out);
      if (!out) throw std::runtime_error("failed to write run file for " + o.list.slr_id);
    }
    std::ofstream m(cfg.output_dir / kManifestFile, std::ios::binary);
    m << result.manifest.dump(2) << "\n";
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation of run files
// ---------------------------------------------------------------------------

/// Reads every *.run file of a run directory (its runs/ subdirectory when
/// present) together with the exemplar exclusions listed in its manifest.
struct LoadedRun {
  std::vector<RunLine> lines;
  std::map<std::string, std::set<std::string>> excluded;  // slr_id -> removed exemplars
};

inline LoadedRun load_run_dir(const fs::path& dir) {
  LoadedRun run;
  fs::path runs = fs::is_directory(dir / kRunsDir) ? dir / kRunsDir : dir;
  if (!fs::is_directory(runs)) throw DatasetError(dir, 0, "run directory not found");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(runs))
    if (e.is_regular_file() && e.path().extension() == ".run") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DatasetError(runs, 0, "no .run files");
  for (const auto& f : files) {
    auto lines = read_run_file(f);
    run.lines.insert(run.lines.end(), lines.begin(), lines.end());
  }
  const fs::path manifest = dir / kManifestFile;
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    auto m = nlohmann::json::parse(in);
    for (const auto& s : m.value("slrs", nlohmann::json::array()))
      if (s.contains("exemplars"))
        run.excluded[s.at("slr_id").get<std::string>()] = {s["exemplars"].at("positive").get<std::string>(),
                                                          s["exemplars"].at("negative").get<std::string>()};
  }
  return run;
}

/// Validates run lines against the dataset and builds labelled rankings.
/// Every ranked SLR must cover its pool exactly, minus recorded exemplars.
inline std::map<std::string, LabeledRanking> labeled_rankings(const Dataset& ds, const LoadedRun& run) {
  std::map<std::string, std::vector<const RunLine*>> by_slr;
  for (const auto& l : run.lines) by_slr[l.slr_id].push_back(&l);
  std::map<std::string, LabeledRanking> out;
  for (auto& [slr_id, lines] : by_slr) {
    const SlrEntry* slr = ds.find(slr_id);
    if (!slr) throw std::invalid_argument("run references unknown SLR '" + slr_id + "'");
    std::map<std::string, int> labels;
    for (const auto& p : slr->pool) labels[p.paper_id] = p.label;
    std::set<std::string> excluded;
    if (auto it = run.excluded.find(slr_id); it != run.excluded.end()) excluded = it->second;
    std::stable_sort(lines.begin(), lines.end(), [](const RunLine* a, const RunLine* b) { return a->rank < b->rank; });
    std::set<std::string> seen;
    LabeledRanking r;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      const RunLine& l = *lines[i];
      auto lab = labels.find(l.paper_id);
      if (lab == labels.end()) throw std::invalid_argument("unknown paper_id '" + l.paper_id + "' in run for '" + slr_id + "'");
      if (excluded.count(l.paper_id))
        throw std::invalid_argument("few-shot exemplar '" + l.paper_id + "' appears in run for '" + slr_id + "'");
      if (!seen.insert(l.paper_id).second)
        throw std::invalid_argument("paper '" + l.paper_id + "' ranked twice for '" + slr_id + "'");
      if (l.rank != i + 1) throw std::invalid_argument("ranks for '" + slr_id + "' are not 1..N");
      r.labels.push_back(lab->second);
    }
    if (seen.size() + excluded.size() != slr->pool.size())
      throw std::invalid_argument("incomplete ranking for '" + slr_id + "': " + std::to_string(seen.size()) + " of " +
                                  std::to_string(slr->pool.size() - excluded.size()) + " papers");
    out[slr_id] = std::move(r);
  }
  return out;
}

inline MetricReport evaluate_run(const Dataset& ds, const LoadedRun& run, Averaging mode = Averaging::macro) {
  std::vector<SlrMetrics> per;
  std::vector<std::string> excluded;
  for (const auto& [slr_id, ranking] : labeled_rankings(ds, run)) {
    if (ranking.relevant() == 0) {
      excluded.push_back(slr_id);
      continue;
    }
    per.push_back(compute_slr_metrics(slr_id, ranking));
  }
  return aggregate(std::move(per), mode, std::move(excluded));
}

inline void write_report_files(const MetricReport& rep, const fs::path& dir) {
  fs::create_directories(dir);
  {
    std::ofstream csv(dir / "report.csv", std::ios::binary);
    write_report_csv(rep, csv);
  }
  {
    std::ofstream js(dir / "report.json", std::ios::binary);
    js << to_json(rep).dump(2) << "\n";
  }
  std::ofstream box(dir / "map_distribution.csv", std::ios::binary);
  box << "slr_id,MAP\n";
  for (const auto& m : rep.per_slr) box << m.slr_id << "," << to_decimal(m.values.at("MAP")) << "\n";
}

// ---------------------------------------------------------------------------
// Scale sweep
// ---------------------------------------------------------------------------

struct ScaleRun {
  RelevanceScale scale;
  RunResult run;
  Rational mean_distinct_scores = 0;  // over SLRs
  Rational mean_group_size = 0;       // over SLRs
};

inline std::string scale_dir_name(const RelevanceScale& s) { return "scale_" + s.str(); }

/// One full run per scale; output of each goes to <output_dir>/scale_0-k/.
inline std::vector<ScaleRun> ablation_sweep(const Dataset& ds, const RunConfig& base,
                                            const std::vector<RelevanceScale>& scales, Services& svc) {
  if (scales.empty()) throw std::invalid_argument("scale sweep needs at least one scale");
  if (!base.use_llm) throw std::invalid_argument("scale sweep needs the LLM stage");
  std::vector<ScaleRun> out;
  for (const auto& scale : scales) {
    RunConfig cfg = base;
    cfg.scale = scale;
    if (!base.output_dir.empty()) cfg.output_dir = base.output_dir / scale_dir_name(scale);
    ScaleRun sr{scale, run_dataset(ds, cfg, svc)};
    if (!sr.run.outcomes.empty()) {
      Rational distinct = 0, size = 0;
      for (const auto& o : sr.run.outcomes) {
        distinct += static_cast<long long>(o.groups.distinct_scores);
        size += o.groups.mean_group_size;
      }
      const auto n = static_cast<long long>(sr.run.outcomes.size());
      sr.mean_distinct_scores = distinct / n;
      sr.mean_group_size = size / n;
    }
    out.push_back(std::move(sr));
  }
  return out;
}

}  // namespace lgar
