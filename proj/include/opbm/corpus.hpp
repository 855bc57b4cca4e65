#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "opbm/common.hpp"
#include "opbm/config.hpp"
#include "opbm/rng.hpp"

namespace opbm {

struct Document {
  std::string doc_id;
  std::vector<double> features;
  int grade = 0;
};

struct QueryGroup {
  std::string query_id;
  std::vector<Document> documents;
};

/// Queries with per-document feature vectors and graded labels.
/// Immutable once built; safe to share across threads.
struct RankingCorpus {
  std::vector<QueryGroup> queries;
  std::size_t feature_dim = 0;
  int grade_levels = 5;

  std::size_t document_count() const {
    std::size_t n = 0;
    for (const auto& q : queries) n += q.documents.size();
    return n;
  }

  bool empty() const { return queries.empty(); }

  void validate() const {
    if (feature_dim == 0) throw std::invalid_argument("corpus: feature_dim must be positive");
    for (const auto& q : queries) {
      if (q.documents.empty()) throw std::invalid_argument("corpus: query " + q.query_id + " has no documents");
      std::vector<std::string_view> ids;
      for (const auto& d : q.documents) {
        if (d.features.size() != feature_dim)
          throw std::invalid_argument("corpus: document " + d.doc_id + " has wrong feature count");
        if (d.grade < 0 || d.grade >= grade_levels)
          throw std::invalid_argument("corpus: grade out of range for document " + d.doc_id);
        ids.push_back(d.doc_id);
      }
      std::sort(ids.begin(), ids.end());
      if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
        throw std::invalid_argument("corpus: duplicate doc_id in query " + q.query_id);
    }
  }
};

enum class CorpusFormat { letor_svmlight, synthetic_manifest };

/// Relevance binarization: grades 3 and 4 are relevant.
inline int binarize(int grade) {
  if (grade < 0 || grade > 4) throw std::out_of_range("binarize: grade " + std::to_string(grade) + " outside [0,4]");
  return grade > 2 ? 1 : 0;
}

namespace detail {

inline std::optional<std::string> docid_from_comment(std::string_view comment) {
  auto pos = comment.find("docid");
  if (pos == std::string_view::npos) return std::nullopt;
  auto rest = trim(comment.substr(pos + 5));
  if (!rest.empty() && (rest.front() == '=' || rest.front() == ':')) rest = trim(rest.substr(1));
  auto end = rest.find_first_of(" \t");
  auto id = rest.substr(0, end);
  if (id.empty()) return std::nullopt;
  return std::string(id);
}

}  // namespace detail

/// Parses svmlight-with-qid text: `<grade> qid:<id> <idx>:<val> ... [# comment]`.
/// Indices are 1-based; absent indices are 0. When `feature_dim` is given, an
/// index beyond it is an error; otherwise the largest index seen is used.
/// A `docid = X` token inside the comment names the document; otherwise the
/// ordinal within the query is used.
inline RankingCorpus parse_svmlight(std::istream& in, std::optional<std::size_t> feature_dim = std::nullopt) {
  struct Row {
    std::size_t line;
    std::string qid;
    std::optional<std::string> docid;
    int grade;
    std::vector<std::pair<std::size_t, double>> sparse;
  };
  std::vector<Row> rows;
  std::size_t max_index = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view(line);
    std::optional<std::string> docid;
    if (auto hash = view.find('#'); hash != std::string_view::npos) {
      docid = detail::docid_from_comment(view.substr(hash + 1));
      view = view.substr(0, hash);
    }
    view = trim(view);
    if (view.empty()) continue;

    Row row{lineno, {}, docid, 0, {}};
    std::istringstream tokens{std::string(view)};
    std::string tok;
    tokens >> tok;
    double grade_value = parse_double(tok, lineno);
    if (grade_value != std::floor(grade_value)) throw ParseError("non-integer relevance grade", lineno);
    row.grade = static_cast<int>(grade_value);
    if (!(tokens >> tok) || tok.rfind("qid:", 0) != 0) throw ParseError("expected qid:<id> after grade", lineno);
    row.qid = tok.substr(4);
    if (row.qid.empty()) throw ParseError("empty qid", lineno);
    std::size_t previous = 0;
    while (tokens >> tok) {
      auto colon = tok.find(':');
      if (colon == std::string::npos) throw ParseError("expected <index>:<value>, got '" + tok + "'", lineno);
      auto idx = parse_int<std::size_t>(std::string_view(tok).substr(0, colon), lineno);
      if (idx == 0) throw ParseError("feature indices are 1-based", lineno);
      if (idx <= previous) throw ParseError("feature indices must be strictly increasing", lineno);
      if (feature_dim && idx > *feature_dim)
        throw ParseError("inconsistent feature_dim: index " + std::to_string(idx) + " exceeds " +
                             std::to_string(*feature_dim),
                         lineno);
      previous = idx;
      row.sparse.emplace_back(idx, parse_double(std::string_view(tok).substr(colon + 1), lineno));
    }
    max_index = std::max(max_index, previous);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError("empty corpus");

  RankingCorpus corpus;
  corpus.feature_dim = feature_dim.value_or(max_index);
  if (corpus.feature_dim == 0) throw ParseError("corpus has no features");
  std::unordered_map<std::string, std::size_t> query_index;
  for (auto& row : rows) {
    if (row.grade < 0 || row.grade >= corpus.grade_levels)
      throw ParseError("grade " + std::to_string(row.grade) + " outside [0," +
                           std::to_string(corpus.grade_levels - 1) + "]",
                       row.line);
    auto [it, inserted] = query_index.try_emplace(row.qid, corpus.queries.size());
    if (inserted) corpus.queries.push_back(QueryGroup{row.qid, {}});
    auto& group = corpus.queries[it->second];
    Document doc;
    doc.doc_id = row.docid.value_or(std::to_string(group.documents.size()));
    doc.grade = row.grade;
    doc.features.assign(corpus.feature_dim, 0.0);
    for (auto [idx, val] : row.sparse) doc.features[idx - 1] = val;
    for (const auto& other : group.documents)
      if (other.doc_id == doc.doc_id) throw ParseError("duplicate docid " + doc.doc_id + " in query " + row.qid, row.line);
    group.documents.push_back(std::move(doc));
  }
  return corpus;
}

/// Writes svmlight-with-qid; zero-valued features are omitted and the doc id
/// travels in the trailing comment.
inline void write_corpus(const RankingCorpus& corpus, std::ostream& out) {
  for (const auto& q : corpus.queries) {
    for (const auto& d : q.documents) {
      out << d.grade << " qid:" << q.query_id;
      for (std::size_t j = 0; j < d.features.size(); ++j)
        if (d.features[j] != 0.0) out << ' ' << (j + 1) << ':' << format_double(d.features[j]);
      out << " # docid = " << d.doc_id << '\n';
    }
  }
}

inline void write_corpus(const RankingCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write corpus: " + path.string());
  write_corpus(corpus, out);
}

/// Synthetic stand-in for LETOR data. Grades follow a fixed 5-level
/// distribution; feature j is `loading_j * grade + N(0,1)` with
/// loadings decaying geometrically, so a learnable but noisy signal exists.
inline RankingCorpus synthesize_corpus(std::size_t n_queries, std::size_t docs_per_query, std::size_t feature_dim,
                                       std::uint64_t seed) {
  if (n_queries == 0 || docs_per_query == 0 || feature_dim == 0)
    throw std::invalid_argument("synthesize_corpus: counts must be positive");
  static const std::vector<double> grade_distribution{0.35, 0.25, 0.15, 0.15, 0.10};
  std::vector<double> loading(feature_dim);
  for (std::size_t j = 0; j < feature_dim; ++j) loading[j] = 0.45 * std::pow(0.75, static_cast<double>(j));

  Rng rng(seed);
  RankingCorpus corpus;
  corpus.feature_dim = feature_dim;
  corpus.queries.reserve(n_queries);
  for (std::size_t q = 0; q < n_queries; ++q) {
    QueryGroup group{std::to_string(q + 1), {}};
    for (std::size_t d = 0; d < docs_per_query; ++d) {
      Document doc;
      doc.doc_id = std::to_string(d);
      doc.grade = static_cast<int>(rng.categorical(grade_distribution));
      doc.features.resize(feature_dim);
      for (std::size_t j = 0; j < feature_dim; ++j)
        doc.features[j] = loading[j] * doc.grade + rng.normal();
      group.documents.push_back(std::move(doc));
    }
    corpus.queries.push_back(std::move(group));
  }
  return corpus;
}

/// Parameters of a synthetic corpus, read from the `[corpus]` section.
struct SyntheticManifest {
  std::size_t n_queries = 2000;
  std::size_t docs_per_query = 10;
  std::size_t feature_dim = 8;
  std::uint64_t seed = 0;

  static SyntheticManifest from_config(const Config& cfg) {
    SyntheticManifest m;
    m.n_queries = cfg.get_int<std::size_t>("corpus.n_queries", m.n_queries);
    m.docs_per_query = cfg.get_int<std::size_t>("corpus.docs_per_query", m.docs_per_query);
    m.feature_dim = cfg.get_int<std::size_t>("corpus.feature_dim", m.feature_dim);
    m.seed = cfg.get_int<std::uint64_t>("corpus.seed", m.seed);
    return m;
  }

  RankingCorpus synthesize() const { return synthesize_corpus(n_queries, docs_per_query, feature_dim, seed); }
};

inline RankingCorpus load_corpus(const std::filesystem::path& path, CorpusFormat format,
                                 std::optional<std::size_t> feature_dim = std::nullopt) {
  if (format == CorpusFormat::synthetic_manifest) return SyntheticManifest::from_config(Config::load(path)).synthesize();
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path.string());
  return parse_svmlight(in, feature_dim);
}

/// Queries `indices` of `corpus`, in the given order.
inline RankingCorpus subset(const RankingCorpus& corpus, const std::vector<std::size_t>& indices) {
  RankingCorpus out;
  out.feature_dim = corpus.feature_dim;
  out.grade_levels = corpus.grade_levels;
  out.queries.reserve(indices.size());
  for (auto i : indices) out.queries.push_back(corpus.queries.at(i));
  return out;
}

struct SplitSpec {
  double train_fraction = 0.8;
  double production_fraction = 0.01;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    for (double f : {train_fraction, production_fraction, test_fraction})
      if (!(f >= 0.0 && f <= 1.0)) throw std::invalid_argument("split: fractions must lie in [0,1]");
    if (train_fraction + test_fraction > 1.0 + 1e-12)
      throw std::invalid_argument("split: train_fraction + test_fraction exceeds 1");
  }
};

/// Query-level partition. `production` is a flagged subset of `train`
/// (its queries also appear in `train`); `test` is disjoint from both.
struct CorpusSplit {
  RankingCorpus train;
  RankingCorpus production;
  RankingCorpus test;
  std::vector<std::size_t> train_indices, production_indices, test_indices;
};

inline CorpusSplit split(const RankingCorpus& corpus, const SplitSpec& spec) {
  spec.validate();
  if (corpus.empty()) throw std::invalid_argument("split: corpus is empty");
  const std::size_t n = corpus.queries.size();
  const auto count = [n](double fraction) { return static_cast<std::size_t>(std::llround(fraction * n)); };
  std::size_t n_test = count(spec.test_fraction);
  std::size_t n_train = std::min(count(spec.train_fraction), n - n_test);
  std::size_t n_production = count(spec.production_fraction);
  if (n_train == 0) throw std::invalid_argument("split: training split is empty");
  if (spec.test_fraction > 0.0 && n_test == 0) throw std::invalid_argument("split: test split is empty");
  if (spec.production_fraction > 0.0 && n_production == 0)
    throw std::invalid_argument("split: production split is empty");
  n_production = std::min(n_production, n_train);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(order);

  CorpusSplit out;
  out.test_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  out.train_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test),
                           order.begin() + static_cast<std::ptrdiff_t>(n_test + n_train));
  out.production_indices.assign(out.train_indices.begin(),
                                out.train_indices.begin() + static_cast<std::ptrdiff_t>(n_production));
  for (auto* v : {&out.train_indices, &out.production_indices, &out.test_indices}) std::sort(v->begin(), v->end());
  out.train = subset(corpus, out.train_indices);
  out.production = subset(corpus, out.production_indices);
  out.test = subset(corpus, out.test_indices);
  return out;
}

}  // namespace opbm
