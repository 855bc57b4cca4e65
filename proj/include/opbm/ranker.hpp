#pragma once

// Unbiased ranker training from clicks with inverse-propensity weights.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "opbm/clicksim.hpp"
#include "opbm/corpus.hpp"
#include "opbm/eval.hpp"
#include "opbm/learner.hpp"
#include "opbm/propensity_table.hpp"

namespace opbm {

enum class EstimatorKind { naive, pbm, opbm, opbm_lazy, oracle };

inline std::string to_string(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::naive: return "naive";
    case EstimatorKind::pbm: return "pbm";
    case EstimatorKind::opbm: return "opbm";
    case EstimatorKind::opbm_lazy: return "opbm_lazy";
    case EstimatorKind::oracle: return "oracle";
  }
  return "?";
}

inline EstimatorKind estimator_from_string(std::string_view s) {
  if (s == "naive") return EstimatorKind::naive;
  if (s == "pbm") return EstimatorKind::pbm;
  if (s == "opbm") return EstimatorKind::opbm;
  if (s == "opbm_lazy") return EstimatorKind::opbm_lazy;
  if (s == "oracle") return EstimatorKind::oracle;
  throw std::invalid_argument("unknown estimator: " + std::string(s));
}

struct EstimatorSpec {
  EstimatorKind kind = EstimatorKind::naive;
  std::optional<PropensityTable> table;

  bool needs_table() const {
    return kind == EstimatorKind::pbm || kind == EstimatorKind::opbm || kind == EstimatorKind::opbm_lazy;
  }

  void validate() const {
    if (needs_table() && !table) throw std::invalid_argument(to_string(kind) + " estimator needs a propensity table");
  }
};

/// Propensity the estimator assigns to rank k under signature o.
inline double estimator_propensity(int k, const OutlierSignature& sig, const EstimatorSpec& spec) {
  switch (spec.kind) {
    case EstimatorKind::naive:
    case EstimatorKind::oracle: return 1.0;
    case EstimatorKind::pbm: return spec.table->at(k, {});
    case EstimatorKind::opbm: return spec.table->at(k, sig);
    case EstimatorKind::opbm_lazy: return spec.table->at(k, make_lazy(sig));
  }
  return 1.0;
}

/// c / theta under the estimator's keying; 0 for unclicked records.
inline double ips_weight(const ClickRecord& record, const OutlierSignature& sig, const EstimatorSpec& spec) {
  spec.validate();
  const double theta = estimator_propensity(record.rank, sig, spec);
  if (!record.clicked) return 0.0;
  if (!(theta > 0.0)) throw std::domain_error("ips_weight: zero propensity on a clicked record");
  return 1.0 / theta;
}

inline double ips_weight(const ClickLog& log, const ClickRecord& record, const EstimatorSpec& spec) {
  return ips_weight(record, log.signature_of(record), spec);
}

struct UnbiasedTrainingConfig {
  RegressionConfig regression;
  double max_weight = 1e6;  // per-record cap on c/theta
};

namespace detail {

struct PairTotals {
  std::uint32_t query = 0;
  std::uint16_t doc = 0;
  double impressions = 0.0;
  double weight = 0.0;  // sum of capped c/theta
};

/// Per-(q, d) record counts and IPS weight sums, ordered by (query, doc).
/// Propensities are resolved once per (signature, rank) cell.
inline std::vector<PairTotals> pair_totals(const ClickLog& log, const EstimatorSpec& spec, double max_weight,
                                           double* total_weight = nullptr) {
  spec.validate();
  const std::size_t width = static_cast<std::size_t>(log.depth) + 1;
  std::vector<double> grid(log.signatures.size() * width, -1.0);
  std::unordered_map<std::uint64_t, std::size_t> index;
  std::vector<PairTotals> out;
  double total = 0.0;
  for (const auto& r : log.records) {
    const std::uint64_t key = (static_cast<std::uint64_t>(r.query) << 16) | r.doc;
    auto [it, inserted] = index.try_emplace(key, out.size());
    if (inserted) out.push_back({r.query, r.doc, 0.0, 0.0});
    auto& p = out[it->second];
    p.impressions += 1.0;
    if (!r.clicked || spec.kind == EstimatorKind::oracle) continue;
    if (r.rank >= width) throw std::out_of_range("record rank exceeds log depth");
    double& theta = grid[r.signature * width + r.rank];
    if (theta < 0.0) {
      theta = estimator_propensity(r.rank, log.signature_of(r), spec);
      if (!(theta > 0.0)) throw std::domain_error("ips_weight: zero propensity on a clicked record");
    }
    const double w = std::min(1.0 / theta, max_weight);
    p.weight += w;
    total += w;
  }
  std::sort(out.begin(), out.end(),
            [](const PairTotals& a, const PairTotals& b) { return a.query != b.query ? a.query < b.query : a.doc < b.doc; });
  if (total_weight) *total_weight = total;
  return out;
}

}  // namespace detail

/// Weighted cross-entropy training. For each (q, d) the positive weight is the
/// sum of capped c/theta over its records and the negative weight is the
/// record count times the log-wide mean IPS weight, so the fitted probability
/// is increasing in the pair's mean corrected click and the fit is unchanged
/// when every theta is multiplied by a common factor. The oracle uses the
/// true binarized labels of the logged pairs instead.
inline RelevanceModel train_unbiased(const ClickLog& log, const RankingCorpus& corpus, const EstimatorSpec& spec,
                                     const UnbiasedTrainingConfig& config, std::uint64_t seed = 0) {
  (void)seed;  // training is deterministic given the log
  if (log.records.empty()) throw std::invalid_argument("train_unbiased: click log is empty");
  if (!(config.max_weight > 0.0)) throw std::invalid_argument("train_unbiased: max_weight must be positive");
  double total_weight = 0.0;
  const auto pairs = detail::pair_totals(log, spec, config.max_weight, &total_weight);
  const double mean_weight = total_weight / static_cast<double>(log.records.size());

  std::vector<WeightedExample> examples;
  examples.reserve(pairs.size());
  for (const auto& p : pairs) {
    const auto& doc = corpus.queries.at(p.query).documents.at(p.doc);
    if (spec.kind == EstimatorKind::oracle) {
      const double g = binarize(doc.grade);
      examples.push_back({doc.features, p.impressions * g, p.impressions * (1.0 - g)});
    } else {
      examples.push_back({doc.features, p.weight, p.impressions * mean_weight});
    }
  }
  return fit_relevance_model(examples, corpus.feature_dim, config.regression);
}

struct ScoredDocument {
  std::uint16_t doc = 0;
  double score = 0.0;
};

using Ranking = std::vector<ScoredDocument>;

/// Every query of `corpus` ranked by descending score, ties by doc_id.
inline std::vector<Ranking> score_and_rank(const RelevanceModel& model, const RankingCorpus& corpus) {
  if (model.feature_dim() != corpus.feature_dim)
    throw std::invalid_argument("score_and_rank: model feature_dim differs from corpus");
  std::vector<Ranking> out;
  out.reserve(corpus.queries.size());
  for (const auto& q : corpus.queries) {
    Ranking ranking;
    for (auto i : rank_documents(model, q)) ranking.push_back({i, model.predict(q.documents[i].features)});
    out.push_back(std::move(ranking));
  }
  return out;
}

/// Mean NDCG@k over the queries of `corpus`.
inline double mean_ndcg(const std::vector<Ranking>& rankings, const RankingCorpus& corpus, int k, Gain gain) {
  if (rankings.size() != corpus.queries.size()) throw std::invalid_argument("mean_ndcg: one ranking per query");
  if (corpus.queries.empty()) throw std::invalid_argument("mean_ndcg: no queries");
  double sum = 0.0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto& docs = corpus.queries[q].documents;
    std::vector<int> ranked, all;
    for (const auto& s : rankings[q]) ranked.push_back(docs.at(s.doc).grade);
    for (const auto& d : docs) all.push_back(d.grade);
    sum += ndcg_at_k(ranked, all, k, gain);
  }
  return sum / static_cast<double>(rankings.size());
}

/// Mean binary CE between corrected clicks and true relevance, one term per
/// logged (q, d) pair: the prediction is the pair's mean c/theta, the label
/// its binarized grade.
inline double corrected_click_ce(const ClickLog& log, const RankingCorpus& corpus, const EstimatorSpec& spec,
                                 double clamp_eps = 1e-6) {
  if (log.records.empty()) throw std::invalid_argument("corrected_click_ce: click log is empty");
  const auto pairs = detail::pair_totals(log, spec, std::numeric_limits<double>::infinity());
  std::vector<double> predictions, labels;
  predictions.reserve(pairs.size());
  labels.reserve(pairs.size());
  for (const auto& p : pairs) {
    const double label = binarize(corpus.queries.at(p.query).documents.at(p.doc).grade);
    predictions.push_back(spec.kind == EstimatorKind::oracle ? label : p.weight / p.impressions);
    labels.push_back(label);
  }
  return mean_binary_ce(predictions, labels, clamp_eps);
}

/// `query_id,doc_id,rank,score`.
inline void write_rankings(const std::vector<Ranking>& rankings, const RankingCorpus& corpus, std::ostream& out) {
  out << "query_id,doc_id,rank,score\n";
  for (std::size_t q = 0; q < rankings.size(); ++q)
    for (std::size_t r = 0; r < rankings[q].size(); ++r)
      out << corpus.queries[q].query_id << ',' << corpus.queries[q].documents[rankings[q][r].doc].doc_id << ','
          << r + 1 << ',' << format_double(rankings[q][r].score) << '\n';
}

inline void write_rankings(const std::vector<Ranking>& rankings, const RankingCorpus& corpus,
                           const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write rankings: " + path.string());
  write_rankings(rankings, corpus, out);
}

/// Reads a rankings file back as per-query document orders (rank ascending).
/// Queries absent from the file get an empty list.
inline std::vector<std::vector<std::uint16_t>> read_rankings(const std::filesystem::path& path,
                                                             const RankingCorpus& corpus) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open rankings: " + path.string());
  std::map<std::string, std::size_t> qindex;
  std::vector<std::map<std::string, std::uint16_t>> dindex(corpus.queries.size());
  for (std::size_t q = 0; q < corpus.queries.size(); ++q) {
    qindex.emplace(corpus.queries[q].query_id, q);
    for (std::size_t d = 0; d < corpus.queries[q].documents.size(); ++d)
      dindex[q].emplace(corpus.queries[q].documents[d].doc_id, static_cast<std::uint16_t>(d));
  }
  std::vector<std::vector<std::pair<int, std::uint16_t>>> rows(corpus.queries.size());
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    auto view = trim(line);
    if (view.empty()) continue;
    if (!header) {
      if (view != "query_id,doc_id,rank,score") throw ParseError("rankings header must be query_id,doc_id,rank,score", lineno);
      header = true;
      continue;
    }
    auto cols = split_view(view, ',');
    if (cols.size() != 4) throw ParseError("ranking rows need 4 columns", lineno);
    auto qit = qindex.find(std::string(trim(cols[0])));
    if (qit == qindex.end()) throw ParseError("unknown query_id " + std::string(cols[0]), lineno);
    auto dit = dindex[qit->second].find(std::string(trim(cols[1])));
    if (dit == dindex[qit->second].end()) throw ParseError("unknown doc_id " + std::string(cols[1]), lineno);
    rows[qit->second].push_back({parse_int<int>(trim(cols[2]), lineno), dit->second});
  }
  std::vector<std::vector<std::uint16_t>> out(corpus.queries.size());
  for (std::size_t q = 0; q < rows.size(); ++q) {
    std::sort(rows[q].begin(), rows[q].end());
    for (std::size_t i = 0; i < rows[q].size(); ++i) {
      if (rows[q][i].first != static_cast<int>(i + 1))
        throw ParseError("ranks of query " + corpus.queries[q].query_id + " are not 1..n");
      out[q].push_back(rows[q][i].second);
    }
  }
  return out;
}

}  // namespace opbm
