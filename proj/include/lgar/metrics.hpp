#pragma once

#include "lgar/rational.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lgar {

/// Gold labels in ranked order (rank 1 first).
struct LabeledRanking {
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t relevant() const {
    std::size_t p = 0;
    for (int l : labels) p += (l != 0);
    return p;
  }
};

struct CutoffConfusion {
  std::size_t n = 0;  // screened prefix length
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

class NoRelevantPapers : public std::invalid_argument {
 public:
  NoRelevantPapers() : std::invalid_argument("no relevant papers in ranking") {}
};

namespace detail {
inline void require_relevant(const LabeledRanking& r) {
  if (r.relevant() == 0) throw NoRelevantPapers();
}
inline Rational frac(std::size_t num, std::size_t den) {
  return Rational(static_cast<long long>(num), static_cast<long long>(den));
}
}  // namespace detail

// Cutoff rounding lives here and only here: both the screened fraction and
// the number of relevant papers a recall target demands round up.

/// Prefix length for screening k percent of N papers: ceil(k * N / 100).
inline std::size_t screened_prefix(std::size_t n_papers, const Rational& percent) {
  if (percent <= 0 || percent > 100) throw std::invalid_argument("percent must be in (0, 100]");
  Rational exact = percent * static_cast<long long>(n_papers) / 100;
  auto q = boost::multiprecision::numerator(exact) / boost::multiprecision::denominator(exact);
  if (Rational(q) < exact) q += 1;
  return q.convert_to<std::size_t>();
}

/// Relevant papers needed to reach `target` recall: ceil(target * P).
inline std::size_t needed_relevant(std::size_t n_relevant, const Rational& target) {
  if (target <= 0 || target > 1) throw std::invalid_argument("recall target must be in (0, 1]");
  Rational exact = target * static_cast<long long>(n_relevant);
  auto q = boost::multiprecision::numerator(exact) / boost::multiprecision::denominator(exact);
  if (Rational(q) < exact) q += 1;
  return q.convert_to<std::size_t>();
}

inline std::size_t relevant_in_prefix(const LabeledRanking& r, std::size_t n) {
  std::size_t c = 0;
  for (std::size_t i = 0; i < std::min(n, r.size()); ++i) c += (r.labels[i] != 0);
  return c;
}

inline Rational average_precision(const LabeledRanking& r) {
  detail::require_relevant(r);
  Rational sum = 0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (!r.labels[i]) continue;
    ++hits;
    sum += detail::frac(hits, i + 1);
  }
  return sum / static_cast<long long>(hits);
}

/// Recall after screening the top ceil(k% * N) papers.
inline Rational recall_at_percent(const LabeledRanking& r, const Rational& percent) {
  detail::require_relevant(r);
  return detail::frac(relevant_in_prefix(r, screened_prefix(r.size(), percent)), r.relevant());
}

/// Confusion at the shortest prefix that contains ceil(target * P) relevant papers.
inline CutoffConfusion confusion_at_recall(const LabeledRanking& r, const Rational& target) {
  detail::require_relevant(r);
  const std::size_t n_rel = r.relevant();
  const std::size_t needed = needed_relevant(n_rel, target);
  CutoffConfusion c;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    hits += (r.labels[i] != 0);
    if (hits >= needed) {
      c.n = i + 1;
      break;
    }
  }
  c.tp = hits;
  c.fp = c.n - c.tp;
  c.fn = n_rel - c.tp;
  c.tn = r.size() - c.n - c.fn;
  return c;
}

/// Work saved over sampling: (TN + FN) / N - (1 - target).
inline Rational wss_at_recall(const LabeledRanking& r, const Rational& target) {
  const auto c = confusion_at_recall(r, target);
  return detail::frac(c.tn + c.fn, r.size()) - (Rational(1) - target);
}

struct TnrValue {
  Rational value;
  bool degenerate = false;  // no negatives in the pool; value fixed at 1
};

/// True negative rate TN / (TN + FP) at the recall-target cutoff.
inline TnrValue tnr_at_recall(const LabeledRanking& r, const Rational& target) {
  const auto c = confusion_at_recall(r, target);
  if (c.tn + c.fp == 0) return {Rational(1), true};
  return {detail::frac(c.tn, c.tn + c.fp), false};
}

/// WSS min-max normalized over all rankings that reach the same confusion
/// TP/FN split; equals the TNR.
inline Rational normalized_wss(const LabeledRanking& r, const Rational& target) {
  const auto c = confusion_at_recall(r, target);
  const std::size_t n = r.size();
  const std::size_t negatives = n - r.relevant();
  const Rational wss = detail::frac(c.tn + c.fn, n) - (Rational(1) - target);
  const Rational lo = detail::frac(c.fn, n) - (Rational(1) - target);
  const Rational hi = detail::frac(negatives + c.fn, n) - (Rational(1) - target);
  if (hi == lo) return Rational(1);
  return (wss - lo) / (hi - lo);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline constexpr std::array<int, 5> kRecallPercents{1, 5, 10, 20, 50};

/// Column order of the report table (TNR@100% is appended to the usual set).
inline const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols{"MAP",    "TNR@95%", "R@1%",     "R@5%",      "R@10%",
                                             "R@20%",  "R@50%",   "WSS@95%",  "WSS@100%",  "TNR@100%"};
  return cols;
}

struct SlrMetrics {
  std::string slr_id;
  std::size_t n = 0, p = 0;
  std::map<std::string, Rational> values;
  std::map<int, std::size_t> recall_tp;  // relevant found at each R@k% cutoff
  bool tnr_degenerate = false;
};

inline SlrMetrics compute_slr_metrics(const std::string& slr_id, const LabeledRanking& r) {
  detail::require_relevant(r);
  SlrMetrics m;
  m.slr_id = slr_id;
  m.n = r.size();
  m.p = r.relevant();
  m.values["MAP"] = average_precision(r);
  for (int k : kRecallPercents) {
    m.recall_tp[k] = relevant_in_prefix(r, screened_prefix(r.size(), k));
    m.values["R@" + std::to_string(k) + "%"] = recall_at_percent(r, k);
  }
  const Rational r95(95, 100), r100(1);
  m.values["WSS@95%"] = wss_at_recall(r, r95);
  m.values["WSS@100%"] = wss_at_recall(r, r100);
  auto t95 = tnr_at_recall(r, r95), t100 = tnr_at_recall(r, r100);
  m.values["TNR@95%"] = t95.value;
  m.values["TNR@100%"] = t100.value;
  m.tnr_degenerate = t95.degenerate || t100.degenerate;
  return m;
}

enum class Averaging { macro, micro };

inline Averaging parse_averaging(const std::string& s) {
  if (s == "macro") return Averaging::macro;
  if (s == "micro") return Averaging::micro;
  throw std::invalid_argument("averaging must be 'macro' or 'micro', got '" + s + "'");
}

using AggregateRow = std::map<std::string, Rational>;

struct MetricReport {
  std::vector<SlrMetrics> per_slr;
  std::vector<std::string> excluded;  // SLRs without relevant papers
  AggregateRow macro;
  std::optional<AggregateRow> micro;  // recall columns only
  Averaging mode = Averaging::macro;
};

/// Macro: unweighted mean of every metric over the SLRs. Micro (recall only):
/// pooled found-relevant over pooled relevant at each k%.
inline MetricReport aggregate(std::vector<SlrMetrics> per_slr, Averaging mode = Averaging::macro,
                              std::vector<std::string> excluded = {}) {
  if (per_slr.empty()) throw std::invalid_argument("aggregate over zero SLRs with relevant papers");
  std::sort(per_slr.begin(), per_slr.end(), [](const SlrMetrics& a, const SlrMetrics& b) { return a.slr_id < b.slr_id; });
  MetricReport rep;
  rep.mode = mode;
  rep.excluded = std::move(excluded);
  for (const auto& col : metric_columns()) {
    Rational sum = 0;
    for (const auto& m : per_slr) sum += m.values.at(col);
    rep.macro[col] = sum / static_cast<long long>(per_slr.size());
  }
  if (mode == Averaging::micro) {
    AggregateRow micro;
    for (int k : kRecallPercents) {
      std::size_t tp = 0, p = 0;
      for (const auto& m : per_slr) {
        tp += m.recall_tp.at(k);
        p += m.p;
      }
      micro["R@" + std::to_string(k) + "%"] = detail::frac(tp, p);
    }
    rep.micro = std::move(micro);
  }
  rep.per_slr = std::move(per_slr);
  return rep;
}

inline void write_report_csv(const MetricReport& rep, std::ostream& out, int digits = 6) {
  out << "slr_id,N,P";
  for (const auto& c : metric_columns()) out << "," << c;
  out << "\n";
  for (const auto& m : rep.per_slr) {
    out << m.slr_id << "," << m.n << "," << m.p;
    for (const auto& c : metric_columns()) out << "," << to_decimal(m.values.at(c), digits);
    out << "\n";
  }
  auto row = [&](const char* name, const AggregateRow& agg) {
    out << name << ",,";
    for (const auto& c : metric_columns()) {
      out << ",";
      if (auto it = agg.find(c); it != agg.end()) out << to_decimal(it->second, digits);
    }
    out << "\n";
  };
  row("macro", rep.macro);
  if (rep.micro) row("micro", *rep.micro);
}

inline nlohmann::json to_json(const MetricReport& rep) {
  auto values = [](const std::map<std::string, Rational>& v) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& c : metric_columns())
      if (auto it = v.find(c); it != v.end()) out[c] = to_double(it->second);
    return out;
  };
  nlohmann::json per = nlohmann::json::array();
  for (const auto& m : rep.per_slr)
    per.push_back({{"slr_id", m.slr_id}, {"N", m.n}, {"P", m.p}, {"tnr_degenerate", m.tnr_degenerate},
                   {"metrics", values(m.values)}});
  nlohmann::json out = {{"averaging", rep.mode == Averaging::macro ? "macro" : "micro"},
                        {"per_slr", per},
                        {"excluded_no_relevant", rep.excluded},
                        {"macro", values(rep.macro)}};
  if (rep.micro) out["micro"] = values(*rep.micro);
  return out;
}

}  // namespace lgar
