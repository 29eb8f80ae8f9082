#pragma once

#include "lgar/corpus.hpp"

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace lgar::testing {

/// Unique scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("lgar_test_" + std::to_string(stamp) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

 private:
  std::filesystem::path path_;
};

inline SlrSpec make_spec(const std::string& id, const std::string& title = "",
                         std::vector<std::string> rqs = {"Does it work?"}) {
  return {id, title.empty() ? "Review of " + id : title, std::move(rqs), {"Randomized trial", "Adults"},
          {"Animal study"}};
}

inline PaperRecord make_paper(const std::string& id, int label, const std::string& title = "",
                              const std::string& abstract = "") {
  return {id, title.empty() ? "Paper " + id : title, abstract.empty() ? "Abstract of " + id : abstract, label};
}

/// Pool of n papers where the first `relevant` are labelled 1. Titles are
/// "<slr>-<i>" so mock services can recognise papers.
inline SlrEntry make_slr(const std::string& id, std::size_t n, std::size_t relevant) {
  SlrEntry e;
  e.spec = make_spec(id);
  for (std::size_t i = 0; i < n; ++i) {
    std::ostringstream pid;
    pid << id << "-p" << (i < 10 ? "0" : "") << i;
    e.pool.push_back(make_paper(pid.str(), i < relevant ? 1 : 0, pid.str(),
                                i < relevant ? "randomized trial of adults" : "unrelated animal model study"));
  }
  e.no_relevant = relevant == 0;
  return e;
}

inline Dataset make_dataset(std::vector<SlrEntry> slrs, std::string name = "mock") {
  Dataset ds{std::move(name), std::move(slrs)};
  std::sort(ds.slrs.begin(), ds.slrs.end(),
            [](const SlrEntry& a, const SlrEntry& b) { return a.spec.slr_id < b.spec.slr_id; });
  return ds;
}

inline std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_all(const std::filesystem::path& p, const std::string& content) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << content;
}

/// Random 0/1 labels of length n with exactly p ones.
inline std::vector<int> random_labels(std::mt19937_64& rng, std::size_t n, std::size_t p) {
  std::vector<int> labels(n, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(p), 1);
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

}  // namespace lgar::testing
