#pragma once

// Regression-based EM for the outlier-aware position-based model.
//
// A click requires examination and relevance, P(C=1) = theta_{k,o} * gamma_{q,d}.
// theta is a table over (rank, outlier signature); gamma = f(x_{q,d}) is a
// regression model over query-document features that never sees o.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "opbm/clicksim.hpp"
#include "opbm/common.hpp"
#include "opbm/corpus.hpp"
#include "opbm/learner.hpp"
#include "opbm/propensity_table.hpp"
#include "opbm/rng.hpp"

namespace opbm {

enum class LabelMode { sample, soft };

enum class GammaInit { constant, ips };

inline std::string to_string(GammaInit g) { return g == GammaInit::ips ? "ips" : "constant"; }

inline GammaInit gamma_init_from_string(std::string_view s) {
  if (s == "ips") return GammaInit::ips;
  if (s == "constant") return GammaInit::constant;
  throw std::invalid_argument("unknown gamma init: " + std::string(s));
}

inline std::string to_string(LabelMode m) { return m == LabelMode::sample ? "sample" : "soft"; }

inline LabelMode label_mode_from_string(std::string_view s) {
  if (s == "sample") return LabelMode::sample;
  if (s == "soft") return LabelMode::soft;
  throw std::invalid_argument("unknown relevance label mode: " + std::string(s));
}

struct EMConfig {
  int max_iterations = 20;
  double theta_floor = 1e-6;
  bool normalize_anchor = true;
  LabelMode relevance_label_mode = LabelMode::sample;
  GammaInit gamma_init = GammaInit::ips;
  std::uint64_t seed = 0;
  // The M-step fit has to track gamma closely or the theta scale drifts
  // across iterations, hence more and larger boosting steps than the ranker.
  RegressionConfig regression{LearnerKind::boosted_stumps, 300, 0.3, 2};

  void validate() const {
    if (max_iterations < 1) throw std::invalid_argument("em: max_iterations must be >= 1");
    if (!(theta_floor > 0.0 && theta_floor < 0.1)) throw std::invalid_argument("em: theta_floor must lie in (0, 0.1)");
    regression.validate();
  }
};

struct Posterior {
  double examined = 0.0;  // P(E=1 | c, ...)
  double relevant = 0.0;  // P(R=1 | c, ...)
};

/// The four joint hidden-state probabilities given the click.
struct JointPosterior {
  double examined_relevant = 0.0;
  double examined_irrelevant = 0.0;
  double unexamined_relevant = 0.0;
  double unexamined_irrelevant = 0.0;
};

inline JointPosterior joint_posterior(double theta, double gamma, bool clicked) {
  if (!(theta >= 0.0 && theta <= 1.0) || !(gamma >= 0.0 && gamma <= 1.0))
    throw std::invalid_argument("posterior: theta and gamma must lie in [0,1]");
  if (clicked) {
    if (!(theta * gamma > 0.0)) throw std::invalid_argument("posterior: click observed where theta * gamma = 0");
    return {1.0, 0.0, 0.0, 0.0};
  }
  const double denom = 1.0 - theta * gamma;
  if (!(denom > 0.0)) throw std::domain_error("posterior: non-click where theta * gamma = 1 (inconsistent log)");
  return {0.0, theta * (1.0 - gamma) / denom, (1.0 - theta) * gamma / denom,
          (1.0 - theta) * (1.0 - gamma) / denom};
}

inline Posterior posterior(double theta, double gamma, bool clicked) {
  const auto j = joint_posterior(theta, gamma, clicked);
  return {j.examined_relevant + j.examined_irrelevant, j.examined_relevant + j.unexamined_relevant};
}

namespace detail {

inline void finish_theta(PropensityTable& table, const EMConfig& config, double* anchor_scale) {
  std::map<PropensityTable::Cell, double> values(table.cells().begin(), table.cells().end());
  for (auto& [cell, v] : values) v = std::max(v, config.theta_floor);
  double scale = 1.0;
  if (config.normalize_anchor) {
    auto anchor = values.find({1, {}});
    if (anchor != values.end()) scale = 1.0 / anchor->second;
    else warn("em: no normal ranking at rank 1, anchor normalization skipped");
  }
  PropensityTable out(table.depth());
  for (auto& [cell, v] : values) out.set(cell.rank, cell.signature, std::clamp(v * scale, config.theta_floor, 1.0));
  table = std::move(out);
  if (anchor_scale) *anchor_scale = scale;
}

}  // namespace detail

/// M-step for theta: per (k, o) cell, the mean of c + (1-c) P(E=1|...) over
/// the records in that cell; then the floor and optional anchor rescaling so
/// that theta_{1,empty} = 1. Cells without records are absent from the result.
inline PropensityTable update_theta(const ClickLog& log, std::span<const double> examined, const EMConfig& config,
                                    double* anchor_scale = nullptr) {
  if (examined.size() != log.records.size()) throw std::invalid_argument("update_theta: one posterior per record");
  std::map<PropensityTable::Cell, std::pair<double, double>> sums;
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    const auto& r = log.records[i];
    auto& [num, den] = sums[{r.rank, log.signature_of(r)}];
    num += r.clicked ? 1.0 : examined[i];
    den += 1.0;
  }
  PropensityTable table(log.depth);
  for (const auto& [cell, s] : sums) table.set(cell.rank, cell.signature, std::clamp(s.first / s.second, 0.0, 1.0));
  detail::finish_theta(table, config, anchor_scale);
  return table;
}

/// M-step for gamma: label each record relevant (clicked records always are;
/// others by a Bernoulli draw from P(R=1|...) in sample mode, or fractionally
/// in soft mode) and fit the regressor to the resulting cross-entropy.
/// Records of the same (q, d) are pooled into one weighted example.
inline RelevanceModel fit_relevance(const ClickLog& log, std::span<const double> relevant,
                                    const RankingCorpus& corpus, const RegressionConfig& config, LabelMode mode,
                                    std::uint64_t seed) {
  if (relevant.size() != log.records.size()) throw std::invalid_argument("fit_relevance: one posterior per record");
  std::map<std::pair<std::uint32_t, std::uint16_t>, std::size_t> slot;
  std::vector<WeightedExample> examples;
  Rng rng(seed);
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    const auto& r = log.records[i];
    auto [it, inserted] = slot.try_emplace({r.query, r.doc}, examples.size());
    if (inserted) examples.push_back({corpus.queries.at(r.query).documents.at(r.doc).features, 0.0, 0.0});
    double label = 1.0;
    if (!r.clicked) label = mode == LabelMode::soft ? relevant[i] : (rng.uniform() < relevant[i] ? 1.0 : 0.0);
    examples[it->second].positive += label;
    examples[it->second].negative += 1.0 - label;
  }
  return fit_relevance_model(examples, corpus.feature_dim, config);
}

/// Records pooled by (query, doc, rank, signature). Every quantity EM needs is
/// a function of these counts, so iterations cost O(groups) instead of
/// O(records).
struct AggregatedLog {
  struct Group {
    std::uint32_t query;
    std::uint16_t doc;
    std::uint32_t cell;
    double impressions;
    double clicks;
  };
  std::vector<Group> groups;
  std::vector<PropensityTable::Cell> cells;
  int depth = 0;

  static AggregatedLog from(const ClickLog& log) {
    AggregatedLog out;
    out.depth = log.depth;
    std::map<PropensityTable::Cell, std::uint32_t> cell_ids;
    std::map<std::tuple<std::uint32_t, std::uint16_t, std::uint16_t, std::uint16_t>, std::size_t> group_ids;
    std::vector<std::uint32_t> cell_of_signature_rank;
    for (const auto& r : log.records) {
      auto [git, inserted] = group_ids.try_emplace({r.query, r.doc, r.rank, r.signature}, out.groups.size());
      if (inserted) {
        auto [cit, new_cell] =
            cell_ids.try_emplace({r.rank, log.signature_of(r)}, static_cast<std::uint32_t>(cell_ids.size()));
        out.groups.push_back({r.query, r.doc, cit->second, 0.0, 0.0});
      }
      auto& g = out.groups[git->second];
      g.impressions += 1.0;
      g.clicks += r.clicked ? 1.0 : 0.0;
    }
    out.cells.resize(cell_ids.size());
    for (const auto& [cell, id] : cell_ids) out.cells[id] = cell;
    // Canonical group order, independent of record order.
    std::vector<std::size_t> order(out.groups.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const auto& x = out.groups[a];
      const auto& y = out.groups[b];
      if (x.query != y.query) return x.query < y.query;
      if (x.doc != y.doc) return x.doc < y.doc;
      return out.cells[x.cell] < out.cells[y.cell];
    });
    std::vector<Group> sorted;
    sorted.reserve(order.size());
    for (auto i : order) sorted.push_back(out.groups[i]);
    out.groups = std::move(sorted);
    return out;
  }
};

/// Group-level theta M-step; `examined` is P(E=1 | c=0) for each group.
inline PropensityTable update_theta(const AggregatedLog& log, std::span<const double> examined,
                                    const EMConfig& config, double* anchor_scale = nullptr) {
  std::vector<double> num(log.cells.size(), 0.0), den(log.cells.size(), 0.0);
  for (std::size_t i = 0; i < log.groups.size(); ++i) {
    const auto& g = log.groups[i];
    num[g.cell] += g.clicks + (g.impressions - g.clicks) * examined[i];
    den[g.cell] += g.impressions;
  }
  PropensityTable table(log.depth);
  for (std::size_t c = 0; c < log.cells.size(); ++c)
    if (den[c] > 0.0) table.set(log.cells[c].rank, log.cells[c].signature, std::clamp(num[c] / den[c], 0.0, 1.0));
  detail::finish_theta(table, config, anchor_scale);
  return table;
}

/// Group-level gamma M-step; `relevant` is P(R=1 | c=0) for each group.
inline RelevanceModel fit_relevance(const AggregatedLog& log, std::span<const double> relevant,
                                    const RankingCorpus& corpus, const RegressionConfig& config, LabelMode mode,
                                    std::uint64_t seed) {
  Rng rng(seed);
  std::vector<WeightedExample> examples;
  examples.reserve(log.groups.size());
  for (std::size_t i = 0; i < log.groups.size(); ++i) {
    const auto& g = log.groups[i];
    const double unclicked = g.impressions - g.clicks;
    double positives = g.clicks;
    if (mode == LabelMode::soft) {
      positives += unclicked * relevant[i];
    } else {
      const auto n = static_cast<std::size_t>(unclicked);
      for (std::size_t t = 0; t < n; ++t) positives += rng.uniform() < relevant[i] ? 1.0 : 0.0;
    }
    examples.push_back({corpus.queries.at(g.query).documents.at(g.doc).features, positives,
                        g.impressions - positives});
  }
  return fit_relevance_model(examples, corpus.feature_dim, config);
}

struct EMIteration {
  int iteration = 0;
  double log_likelihood = 0.0;
  double anchor_scale = 1.0;
};

struct EMState {
  PropensityTable theta;
  RelevanceModel relevance;
  int iteration = 0;
  double log_likelihood = 0.0;
  std::vector<EMIteration> trace;
};

inline double log_likelihood(const AggregatedLog& log, const PropensityTable& theta, std::span<const double> gamma) {
  double ll = 0.0;
  for (std::size_t i = 0; i < log.groups.size(); ++i) {
    const auto& g = log.groups[i];
    const double p = theta.at(log.cells[g.cell].rank, log.cells[g.cell].signature) * gamma[i];
    if (g.clicks > 0.0) ll += g.clicks * std::log(p);
    if (g.impressions > g.clicks) ll += (g.impressions - g.clicks) * std::log1p(-p);
  }
  return ll;
}

/// Starting propensities: 1/k for rankings without outliers. A cell with
/// outliers starts at 1/k times its CTR ratio to the normal cell of the same
/// rank, kept strictly below 1 (theta = 1 is a fixed point of the E-step).
inline PropensityTable initial_theta(const AggregatedLog& agg, const EMConfig& config) {
  std::vector<double> clicks(agg.cells.size(), 0.0), shown(agg.cells.size(), 0.0);
  for (const auto& g : agg.groups) {
    clicks[g.cell] += g.clicks;
    shown[g.cell] += g.impressions;
  }
  std::map<int, double> normal_ctr;
  for (std::size_t c = 0; c < agg.cells.size(); ++c)
    if (agg.cells[c].signature.empty() && shown[c] > 0.0) normal_ctr[agg.cells[c].rank] = clicks[c] / shown[c];

  PropensityTable theta(agg.depth);
  constexpr double cap = 0.999;
  for (std::size_t c = 0; c < agg.cells.size(); ++c) {
    const auto& cell = agg.cells[c];
    const double base = 1.0 / cell.rank;
    if (cell.signature.empty()) {
      theta.set(cell.rank, cell.signature, base);
      continue;
    }
    double v = std::min(base, cap);
    const auto it = normal_ctr.find(cell.rank);
    if (it != normal_ctr.end() && it->second > 0.0 && shown[c] > 0.0)
      v = std::clamp(base * (clicks[c] / shown[c]) / it->second, config.theta_floor, cap);
    theta.set(cell.rank, cell.signature, v);
  }
  return theta;
}

/// Alternates E and M steps for `max_iterations` rounds from
/// `initial_theta`. Gamma starts at 0.5 everywhere or, with GammaInit::ips,
/// from a model fit on clicks reweighted by the starting propensities. The
/// log-likelihood after each round is kept in the trace.
inline EMState run_em(const ClickLog& log, const RankingCorpus& corpus, const EMConfig& config) {
  config.validate();
  if (log.records.empty()) throw std::invalid_argument("run_em: click log is empty");
  const auto agg = AggregatedLog::from(log);
  const std::size_t n = agg.groups.size();

  EMState state;
  state.theta = initial_theta(agg, config);
  state.relevance = RelevanceModel::constant(0.5, corpus.feature_dim, config.regression.learner);

  std::vector<double> gamma(n, 0.5), theta(n), examined(n), relevant(n);
  if (config.gamma_init == GammaInit::ips) {
    std::vector<WeightedExample> examples;
    examples.reserve(n);
    for (const auto& g : agg.groups) {
      const auto& cell = agg.cells[g.cell];
      const double pos = std::min(g.impressions, g.clicks / state.theta.at(cell.rank, cell.signature));
      examples.push_back({corpus.queries.at(g.query).documents.at(g.doc).features, pos, g.impressions - pos});
    }
    state.relevance = fit_relevance_model(examples, corpus.feature_dim, config.regression);
    for (std::size_t i = 0; i < n; ++i)
      gamma[i] = state.relevance.predict(corpus.queries[agg.groups[i].query].documents[agg.groups[i].doc].features);
  }
  for (int it = 1; it <= config.max_iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& cell = agg.cells[agg.groups[i].cell];
      theta[i] = state.theta.at(cell.rank, cell.signature);
      const auto post = posterior(theta[i], gamma[i], false);
      examined[i] = post.examined;
      relevant[i] = post.relevant;
    }
    double scale = 1.0;
    state.theta = update_theta(agg, examined, config, &scale);
    state.relevance = fit_relevance(agg, relevant, corpus, config.regression, config.relevance_label_mode,
                                    derive_seed(config.seed, static_cast<std::uint64_t>(it)));
    for (std::size_t i = 0; i < n; ++i) {
      const auto& g = agg.groups[i];
      gamma[i] = state.relevance.predict(corpus.queries[g.query].documents[g.doc].features);
    }
    state.iteration = it;
    state.log_likelihood = log_likelihood(agg, state.theta, gamma);
    state.trace.push_back({it, state.log_likelihood, scale});
  }
  return state;
}

inline void export_table(const EMState& state, const std::filesystem::path& path) {
  state.theta.validate();
  state.theta.save(path);
}

/// Per-iteration metrics: `iteration,log_likelihood,theta_anchor_scale`.
inline void export_trace(const EMState& state, std::ostream& out) {
  out << "iteration,log_likelihood,theta_anchor_scale\n";
  for (const auto& t : state.trace)
    out << t.iteration << ',' << format_double(t.log_likelihood) << ',' << format_double(t.anchor_scale) << '\n';
}

inline void export_trace(const EMState& state, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write EM trace: " + path.string());
  export_trace(state, out);
}

}  // namespace opbm
