#pragma once

// Shared fixtures for the test suite: temporary directories, hand-rolled
// random generators and small hand-built corpora and logs.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "opbm/clicksim.hpp"
#include "opbm/corpus.hpp"

namespace testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("opbm_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// Deliberately not opbm::Rng, so generators do not share code with the
// library under test.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  // Open interval (0, 1).
  double open_unit() {
    double u = 0.0;
    do u = uniform(); while (u <= 0.0);
    return u;
  }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }

  std::vector<int> grades(std::size_t n, int max_grade = 4) {
    std::vector<int> out(n);
    for (auto& g : out) g = integer(0, max_grade);
    return out;
  }

  std::vector<double> reals(std::size_t n, double lo, double hi) {
    std::vector<double> out(n);
    for (auto& v : out) v = uniform(lo, hi);
    return out;
  }

  template <class T>
  void shuffle(std::vector<T>& v) { std::shuffle(v.begin(), v.end(), engine_); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// NDCG@k from first principles: the ideal DCG is the maximum over every
/// permutation of the grade multiset.
inline double brute_force_ndcg(const std::vector<int>& ranked, int k, bool binary = false) {
  auto gain = [&](int g) { return binary ? (g > 2 ? 1.0 : 0.0) : std::pow(2.0, g) - 1.0; };
  auto dcg = [&](const std::vector<int>& order) {
    double s = 0.0;
    for (int i = 0; i < k && i < static_cast<int>(order.size()); ++i) s += gain(order[i]) / std::log2(i + 2.0);
    return s;
  };
  std::vector<int> perm = ranked;
  std::sort(perm.begin(), perm.end());
  double best = 0.0;
  do best = std::max(best, dcg(perm));
  while (std::next_permutation(perm.begin(), perm.end()));
  return best > 0.0 ? dcg(ranked) / best : 0.0;
}

/// A corpus of `n_queries` queries with `docs` documents each; grades cycle
/// through 0..4 and feature 0 equals the grade plus a small query offset.
inline opbm::RankingCorpus ladder_corpus(std::size_t n_queries, std::size_t docs, std::size_t dim = 2) {
  opbm::RankingCorpus c;
  c.feature_dim = dim;
  for (std::size_t q = 0; q < n_queries; ++q) {
    opbm::QueryGroup g{"q" + std::to_string(q), {}};
    for (std::size_t d = 0; d < docs; ++d) {
      opbm::Document doc;
      doc.doc_id = "d" + std::to_string(d);
      doc.grade = static_cast<int>((d + q) % 5);
      doc.features.assign(dim, 0.0);
      doc.features[0] = doc.grade + 0.01 * static_cast<double>(q % 7);
      if (dim > 1) doc.features[1] = static_cast<double>(d % 3);
      g.documents.push_back(std::move(doc));
    }
    c.queries.push_back(std::move(g));
  }
  return c;
}

/// Identity presentations (document i at rank i+1), truncated to `depth`.
inline std::vector<std::vector<std::uint16_t>> identity_presentation(const opbm::RankingCorpus& c, int depth) {
  std::vector<std::vector<std::uint16_t>> out;
  for (const auto& q : c.queries) {
    std::vector<std::uint16_t> order;
    for (std::size_t i = 0; i < q.documents.size() && static_cast<int>(i) < depth; ++i)
      order.push_back(static_cast<std::uint16_t>(i));
    out.push_back(order);
  }
  return out;
}

/// Appends one session to a hand-built log.
inline void add_session(opbm::ClickLog& log, std::uint32_t query, const opbm::OutlierSignature& sig,
                        const std::vector<bool>& clicks) {
  const auto s = static_cast<std::uint32_t>(log.sessions);
  const auto idx = log.intern(sig);
  for (std::size_t r = 0; r < clicks.size(); ++r) {
    opbm::ClickRecord rec;
    rec.session = s;
    rec.query = query;
    rec.doc = static_cast<std::uint16_t>(r);
    rec.rank = static_cast<std::uint16_t>(r + 1);
    rec.signature = idx;
    rec.clicked = clicks[r];
    log.clicks += clicks[r] ? 1 : 0;
    log.records.push_back(rec);
  }
  log.depth = std::max(log.depth, static_cast<int>(clicks.size()));
  ++log.sessions;
}

/// Collects library warnings for the lifetime of the object.
struct WarningCapture {
  std::vector<std::string> messages;
  std::function<void(std::string_view)> saved;
  WarningCapture() : saved(opbm::warning_sink()) {
    opbm::warning_sink() = [this](std::string_view m) { messages.emplace_back(m); };
  }
  ~WarningCapture() { opbm::warning_sink() = saved; }
};

inline opbm::OutlierSignature sig_of(std::initializer_list<int> positions) {
  return opbm::OutlierSignature{std::vector<int>(positions), false};
}

}  // namespace testing
