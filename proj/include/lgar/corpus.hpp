#pragma once

#include "lgar/rational.hpp"
#include "lgar/text.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace lgar {

namespace fs = std::filesystem;

/// One review's information need.
struct SlrSpec {
  std::string slr_id;
  std::string title;
  std::vector<std::string> research_questions;
  std::vector<std::string> inclusion_criteria;
  std::vector<std::string> exclusion_criteria;

  bool operator==(const SlrSpec&) const = default;
};

/// One candidate paper with its gold screening label.
struct PaperRecord {
  std::string paper_id;
  std::string title;
  std::string abstract;
  int label = 0;

  bool operator==(const PaperRecord&) const = default;
};

struct SlrEntry {
  SlrSpec spec;
  std::vector<PaperRecord> pool;
  /// Set when no paper in the pool is labelled relevant; such SLRs are kept
  /// but excluded from metric aggregation.
  bool no_relevant = false;

  bool operator==(const SlrEntry&) const = default;
};

struct Dataset {
  std::string name;
  std::vector<SlrEntry> slrs;  // sorted by slr_id

  const SlrEntry* find(const std::string& slr_id) const {
    auto it = std::find_if(slrs.begin(), slrs.end(),
                           [&](const SlrEntry& e) { return e.spec.slr_id == slr_id; });
    return it == slrs.end() ? nullptr : &*it;
  }
  bool operator==(const Dataset&) const = default;
};

/// Every load failure carries the offending file and, when applicable, the
/// 1-based line number.
class DatasetError : public std::runtime_error {
 public:
  DatasetError(fs::path file, std::size_t line, const std::string& message)
      : std::runtime_error(format(file, line, message)), file_(std::move(file)), line_(line) {}

  const fs::path& file() const noexcept { return file_; }
  std::size_t line() const noexcept { return line_; }

 private:
  static std::string format(const fs::path& file, std::size_t line, const std::string& message) {
    std::string out = file.string();
    if (line > 0) out += ":" + std::to_string(line);
    return out + ": " + message;
  }
  fs::path file_;
  std::size_t line_;
};

/// (# relevant) / (pool size). Throws on an empty pool.
inline Rational inclusion_rate(const SlrEntry& slr) {
  if (slr.pool.empty()) throw std::invalid_argument("inclusion rate of empty pool: " + slr.spec.slr_id);
  std::int64_t relevant = 0;
  for (const auto& p : slr.pool) relevant += p.label;
  return Rational(relevant, static_cast<std::int64_t>(slr.pool.size()));
}

/// On-disk layout:
///   <root>/slrs/<slr_id>.json     one SLR spec document
///   <root>/papers/<slr_id>.jsonl  one paper record per line
inline constexpr const char* kSpecDir = "slrs";
inline constexpr const char* kPapersDir = "papers";

namespace detail {

inline std::string required_string(const nlohmann::json& obj, const char* key, const fs::path& file,
                                   std::size_t line, bool allow_empty) {
  auto it = obj.find(key);
  if (it == obj.end()) throw DatasetError(file, line, std::string("missing field '") + key + "'");
  if (!it->is_string()) throw DatasetError(file, line, std::string("field '") + key + "' must be a string");
  std::string value;
  try {
    value = text::normalize_nfc(it->get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw DatasetError(file, line, std::string("field '") + key + "': " + e.what());
  }
  if (!allow_empty && value.empty()) throw DatasetError(file, line, std::string("field '") + key + "' is empty");
  return value;
}

inline std::vector<std::string> string_list(const nlohmann::json& obj, const char* key, const fs::path& file) {
  auto it = obj.find(key);
  if (it == obj.end()) throw DatasetError(file, 0, std::string("missing field '") + key + "'");
  if (!it->is_array()) throw DatasetError(file, 0, std::string("field '") + key + "' must be a list");
  std::vector<std::string> out;
  for (const auto& item : *it) {
    if (!item.is_string()) throw DatasetError(file, 0, std::string("'") + key + "' entries must be strings");
    std::string value = text::normalize_nfc(item.get<std::string>());
    if (value.empty()) throw DatasetError(file, 0, std::string("'") + key + "' contains an empty entry");
    out.push_back(std::move(value));
  }
  return out;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError(path, 0, "cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

inline SlrSpec parse_slr_spec(const std::string& content, const fs::path& file) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(content);
  } catch (const nlohmann::json::parse_error& e) {
    throw DatasetError(file, 0, std::string("malformed spec document: ") + e.what());
  }
  if (!doc.is_object()) throw DatasetError(file, 0, "spec document must be an object");
  SlrSpec spec;
  spec.slr_id = detail::required_string(doc, "slr_id", file, 0, false);
  spec.title = detail::required_string(doc, "title", file, 0, false);
  spec.research_questions = detail::string_list(doc, "research_questions", file);
  spec.inclusion_criteria = detail::string_list(doc, "inclusion_criteria", file);
  spec.exclusion_criteria = detail::string_list(doc, "exclusion_criteria", file);
  return spec;
}

inline std::vector<PaperRecord> parse_papers(std::istream& in, const fs::path& file) {
  std::vector<PaperRecord> papers;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DatasetError(file, line_no, std::string("malformed record: ") + e.what());
    }
    if (!rec.is_object()) throw DatasetError(file, line_no, "record must be an object");
    PaperRecord p;
    p.paper_id = detail::required_string(rec, "paper_id", file, line_no, false);
    p.title = detail::required_string(rec, "title", file, line_no, true);
    p.abstract = detail::required_string(rec, "abstract", file, line_no, true);
    auto label = rec.find("label");
    if (label == rec.end()) throw DatasetError(file, line_no, "missing field 'label'");
    if (!label->is_number_integer() || (label->get<int>() != 0 && label->get<int>() != 1))
      throw DatasetError(file, line_no, "label must be 0 or 1");
    p.label = label->get<int>();
    if (!seen.insert(p.paper_id).second)
      throw DatasetError(file, line_no, "duplicate paper_id '" + p.paper_id + "'");
    papers.push_back(std::move(p));
  }
  return papers;
}

/// Loads and validates a dataset directory. SLRs are ordered by slr_id,
/// papers keep file order. Any defect aborts the whole load.
inline Dataset load_dataset(const fs::path& root, std::string name) {
  if (!fs::is_directory(root)) throw DatasetError(root, 0, "dataset directory not found");
  const fs::path spec_dir = root / kSpecDir;
  const fs::path papers_dir = root / kPapersDir;
  if (!fs::is_directory(spec_dir)) throw DatasetError(spec_dir, 0, "missing spec directory");
  if (!fs::is_directory(papers_dir)) throw DatasetError(papers_dir, 0, "missing papers directory");

  std::map<std::string, fs::path> spec_files, paper_files;
  for (const auto& e : fs::directory_iterator(spec_dir))
    if (e.is_regular_file() && e.path().extension() == ".json") spec_files[e.path().stem().string()] = e.path();
  for (const auto& e : fs::directory_iterator(papers_dir))
    if (e.is_regular_file() && e.path().extension() == ".jsonl") paper_files[e.path().stem().string()] = e.path();

  for (const auto& [id, path] : paper_files)
    if (!spec_files.count(id)) throw DatasetError(path, 0, "paper pool references slr_id '" + id + "' with no spec file");

  Dataset ds;
  ds.name = std::move(name);
  std::set<std::string> ids;
  for (const auto& [stem, path] : spec_files) {
    SlrEntry entry;
    entry.spec = parse_slr_spec(detail::read_file(path), path);
    if (entry.spec.slr_id != text::normalize_nfc(stem))
      throw DatasetError(path, 0, "slr_id '" + entry.spec.slr_id + "' does not match file name");
    if (!ids.insert(entry.spec.slr_id).second)
      throw DatasetError(path, 0, "duplicate slr_id '" + entry.spec.slr_id + "'");
    auto pf = paper_files.find(stem);
    if (pf == paper_files.end()) throw DatasetError(path, 0, "no paper pool for slr_id '" + entry.spec.slr_id + "'");
    std::ifstream in(pf->second, std::ios::binary);
    if (!in) throw DatasetError(pf->second, 0, "cannot open file");
    entry.pool = parse_papers(in, pf->second);
    if (entry.pool.empty()) throw DatasetError(pf->second, 0, "empty paper pool");
    entry.no_relevant = std::none_of(entry.pool.begin(), entry.pool.end(),
                                     [](const PaperRecord& p) { return p.label == 1; });
    ds.slrs.push_back(std::move(entry));
  }
  std::sort(ds.slrs.begin(), ds.slrs.end(),
            [](const SlrEntry& a, const SlrEntry& b) { return a.spec.slr_id < b.spec.slr_id; });
  return ds;
}

inline nlohmann::json to_json(const SlrSpec& s) {
  return {{"slr_id", s.slr_id},
          {"title", s.title},
          {"research_questions", s.research_questions},
          {"inclusion_criteria", s.inclusion_criteria},
          {"exclusion_criteria", s.exclusion_criteria}};
}

inline nlohmann::json to_json(const PaperRecord& p) {
  return {{"paper_id", p.paper_id}, {"title", p.title}, {"abstract", p.abstract}, {"label", p.label}};
}

inline void write_dataset(const Dataset& ds, const fs::path& root) {
  fs::create_directories(root / kSpecDir);
  fs::create_directories(root / kPapersDir);
  for (const auto& slr : ds.slrs) {
    std::ofstream spec(root / kSpecDir / (slr.spec.slr_id + ".json"), std::ios::binary);
    spec << to_json(slr.spec).dump(2) << "\n";
    std::ofstream papers(root / kPapersDir / (slr.spec.slr_id + ".jsonl"), std::ios::binary);
    for (const auto& p : slr.pool) papers << to_json(p).dump() << "\n";
    if (!spec || !papers) throw DatasetError(root, 0, "failed writing SLR '" + slr.spec.slr_id + "'");
  }
}

/// TREC-style qrels: "<topic> <iteration> <doc> <rel>" per line.
struct QrelsEntry {
  std::string paper_id;
  int relevance = 0;
};
using Qrels = std::map<std::string, std::vector<QrelsEntry>>;

inline Qrels read_qrels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError(path, 0, "cannot open qrels file");
  Qrels qrels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string topic, iteration, doc;
    int rel = 0;
    if (!(ss >> topic)) continue;
    if (!(ss >> iteration >> doc >> rel))
      throw DatasetError(path, line_no, "expected '<topic> <iteration> <doc> <rel>'");
    qrels[text::normalize_nfc(topic)].push_back({text::normalize_nfc(doc), rel});
  }
  return qrels;
}

/// Overrides pool labels from qrels (rel > 0 means relevant). Every paper of
/// a covered SLR must appear in the qrels and vice versa.
inline void apply_qrels(Dataset& ds, const Qrels& qrels) {
  for (const auto& [topic, _] : qrels)
    if (!ds.find(topic)) throw DatasetError(fs::path("qrels"), 0, "qrels topic '" + topic + "' has no SLR spec");
  for (auto& slr : ds.slrs) {
    auto it = qrels.find(slr.spec.slr_id);
    if (it == qrels.end()) continue;
    std::map<std::string, int> rel;
    for (const auto& e : it->second) rel[e.paper_id] = e.relevance > 0 ? 1 : 0;
    for (auto& p : slr.pool) {
      auto r = rel.find(p.paper_id);
      if (r == rel.end())
        throw DatasetError(fs::path("qrels"), 0, "paper '" + p.paper_id + "' of '" + slr.spec.slr_id + "' missing from qrels");
      p.label = r->second;
      rel.erase(r);
    }
    if (!rel.empty())
      throw DatasetError(fs::path("qrels"), 0, "qrels doc '" + rel.begin()->first + "' not in pool of '" + slr.spec.slr_id + "'");
    slr.no_relevant = std::none_of(slr.pool.begin(), slr.pool.end(), [](const PaperRecord& p) { return p.label == 1; });
  }
}

}  // namespace lgar
