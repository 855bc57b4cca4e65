#pragma once

// Production ranker, examination models and the click simulator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "opbm/common.hpp"
#include "opbm/corpus.hpp"
#include "opbm/learner.hpp"
#include "opbm/outliers.hpp"
#include "opbm/propensity_table.hpp"
#include "opbm/rng.hpp"

namespace opbm {

enum class ClickModel { PBM, OPBM_G, OPBM_MG, OPBM_Real };

inline std::string to_string(ClickModel m) {
  switch (m) {
    case ClickModel::PBM: return "PBM";
    case ClickModel::OPBM_G: return "OPBM_G";
    case ClickModel::OPBM_MG: return "OPBM_MG";
    case ClickModel::OPBM_Real: return "OPBM_Real";
  }
  return "?";
}

inline ClickModel click_model_from_string(std::string_view s) {
  if (s == "PBM") return ClickModel::PBM;
  if (s == "OPBM_G") return ClickModel::OPBM_G;
  if (s == "OPBM_MG") return ClickModel::OPBM_MG;
  if (s == "OPBM_Real") return ClickModel::OPBM_Real;
  throw std::invalid_argument("unknown click model: " + std::string(s));
}

struct ClickModelConfig {
  ClickModel model = ClickModel::PBM;
  double alpha = 0.0;
  double sigma = 1.0;
  int K = 10;
  double position_bias_eta = 1.0;
  std::optional<std::filesystem::path> table_path;
  std::uint64_t seed = 0;

  void validate() const {
    if (K < 1) throw std::invalid_argument("click model: K must be >= 1");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("click model: alpha outside [0,1]");
    if (!(sigma > 0.0)) throw std::invalid_argument("click model: sigma must be positive");
    if (!(position_bias_eta > 0.0)) throw std::invalid_argument("click model: eta must be positive");
    if (model == ClickModel::OPBM_Real && !table_path)
      throw std::invalid_argument("click model: OPBM_Real requires table_path");
  }
};

inline double gaussian_density(double x, double mean, double sigma) {
  const double z = (x - mean) / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

/// Examination probability theta(k, o) under `config`.
/// PBM gives (1/k)^eta. OPBM_G mixes it with a Gaussian density centred on
/// the outlier rank, (1-alpha) theta_k + alpha N(k; o, sigma); OPBM_MG averages
/// that over every outlier rank. Normal rankings fall back to PBM under every
/// model. OPBM_Real reads `real_table` and never falls back.
inline double propensity(const ClickModelConfig& config, int k, const OutlierSignature& sig,
                         const PropensityTable* real_table = nullptr) {
  if (k < 1 || k > config.K) throw std::invalid_argument("propensity: rank outside [1, K]");
  const double position = std::pow(1.0 / k, config.position_bias_eta);
  double theta = position;
  switch (config.model) {
    case ClickModel::PBM:
      break;
    case ClickModel::OPBM_G:
    case ClickModel::OPBM_MG: {
      if (sig.empty()) break;
      if (config.model == ClickModel::OPBM_G && sig.positions.size() > 1)
        throw std::invalid_argument("propensity: OPBM_G takes a single outlier; use OPBM_MG");
      double sum = 0.0;
      for (int o : sig.positions)
        sum += (1.0 - config.alpha) * position + config.alpha * gaussian_density(k, o, config.sigma);
      theta = sum / static_cast<double>(sig.positions.size());
      break;
    }
    case ClickModel::OPBM_Real: {
      if (!real_table) throw std::invalid_argument("propensity: OPBM_Real needs a loaded table");
      auto v = real_table->find(k, sig);
      if (!v) throw std::out_of_range("uncovered signature " + sig.encode() + " at rank " + std::to_string(k));
      theta = *v;
      break;
    }
  }
  return std::clamp(theta, 0.0, 1.0);
}

/// A click model bound to its (optional) table; the form the simulator uses.
class ExaminationModel {
 public:
  explicit ExaminationModel(ClickModelConfig config) : config_(std::move(config)) {
    config_.validate();
    if (config_.model == ClickModel::OPBM_Real) table_ = load_propensity_table(*config_.table_path);
  }
  ExaminationModel(ClickModelConfig config, PropensityTable table) : config_(std::move(config)), table_(std::move(table)) {
    if (config_.model == ClickModel::OPBM_Real && !config_.table_path) config_.table_path = "<memory>";
    config_.validate();
  }

  double operator()(int k, const OutlierSignature& sig) const {
    return propensity(config_, k, sig, table_ ? &*table_ : nullptr);
  }

  const ClickModelConfig& config() const { return config_; }

 private:
  ClickModelConfig config_;
  std::optional<PropensityTable> table_;
};

/// One presented item in one session. Query and document are indices into
/// the corpus the log was generated from; the signature is an index into
/// `ClickLog::signatures`.
struct ClickRecord {
  std::uint32_t session = 0;
  std::uint32_t query = 0;
  std::uint16_t doc = 0;
  std::uint16_t rank = 0;
  std::uint16_t signature = 0;
  bool impression = true;
  bool clicked = false;
};

struct ClickLog {
  std::vector<OutlierSignature> signatures;  // dictionary; index 0 is always the empty signature
  std::vector<ClickRecord> records;          // ordered by session, then rank
  std::size_t sessions = 0;
  std::size_t clicks = 0;
  int depth = 0;

  ClickLog() : signatures{OutlierSignature{}} {}

  const OutlierSignature& signature_of(const ClickRecord& r) const { return signatures[r.signature]; }

  std::uint16_t intern(const OutlierSignature& sig) {
    for (std::size_t i = 0; i < signatures.size(); ++i)
      if (signatures[i] == sig) return static_cast<std::uint16_t>(i);
    if (signatures.size() >= 0xFFFF) throw std::length_error("click log: too many distinct signatures");
    signatures.push_back(OutlierSignature{sig.positions, false});
    return static_cast<std::uint16_t>(signatures.size() - 1);
  }

  /// The same log with every signature replaced by `transform(signature)`.
  template <class Fn>
  ClickLog rekeyed(Fn transform) const {
    ClickLog out;
    out.sessions = sessions;
    out.clicks = clicks;
    out.depth = depth;
    std::vector<std::uint16_t> remap(signatures.size());
    for (std::size_t i = 0; i < signatures.size(); ++i) remap[i] = out.intern(transform(signatures[i]));
    out.records = records;
    for (auto& r : out.records) r.signature = remap[r.signature];
    return out;
  }

  ClickLog without_outliers() const {
    return rekeyed([](const OutlierSignature&) { return OutlierSignature{}; });
  }
  ClickLog lazy() const { return rekeyed([](const OutlierSignature& s) { return make_lazy(s); }); }
};

/// Per-query presentation order: document indices sorted by descending
/// score, ties by ascending doc_id.
inline std::vector<std::uint16_t> rank_documents(const RelevanceModel& model, const QueryGroup& q) {
  std::vector<double> scores(q.documents.size());
  for (std::size_t i = 0; i < q.documents.size(); ++i) scores[i] = model.margin(q.documents[i].features);
  std::vector<std::uint16_t> order(q.documents.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::uint16_t>(i);
  std::sort(order.begin(), order.end(), [&](std::uint16_t a, std::uint16_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return id_less(q.documents[a].doc_id, q.documents[b].doc_id);
  });
  return order;
}

/// Top-`depth` presentation for every query of `corpus`.
inline std::vector<std::vector<std::uint16_t>> present(const RankingCorpus& corpus, const RelevanceModel& ranker,
                                                       int depth) {
  std::vector<std::vector<std::uint16_t>> out;
  out.reserve(corpus.queries.size());
  for (const auto& q : corpus.queries) {
    if (q.documents.size() > 0xFFFF) throw std::length_error("query has too many documents");
    auto order = rank_documents(ranker, q);
    if (order.size() > static_cast<std::size_t>(depth)) order.resize(static_cast<std::size_t>(depth));
    out.push_back(std::move(order));
  }
  return out;
}

/// Weak ranker fitted on the production sample's graded labels, using
/// grade / (levels - 1) as a fractional relevance target. A sample with a
/// single grade yields a constant model (and a warning); ranking then falls
/// back to the doc_id order.
inline RelevanceModel train_production_ranker(const RankingCorpus& production, std::uint64_t seed = 0,
                                              RegressionConfig config = {.learner = LearnerKind::boosted_stumps,
                                                                         .rounds = 10,
                                                                         .learning_rate = 0.1,
                                                                         .max_leaves = 2}) {
  (void)seed;  // the learner is deterministic; kept for a uniform call shape
  if (production.empty()) throw std::invalid_argument("train_production_ranker: production sample is empty");
  std::vector<WeightedExample> examples;
  int lo = production.grade_levels, hi = -1;
  const double top = static_cast<double>(production.grade_levels - 1);
  for (const auto& q : production.queries)
    for (const auto& d : q.documents) {
      const double t = d.grade / top;
      examples.push_back({d.features, t, 1.0 - t});
      lo = std::min(lo, d.grade);
      hi = std::max(hi, d.grade);
    }
  if (lo == hi) {
    warn("production ranker: all grades equal, using a constant model");
    return RelevanceModel::constant(0.5, production.feature_dim, config.learner);
  }
  return fit_relevance_model(examples, production.feature_dim, config);
}

struct SimulationBudget {
  std::size_t clicks = 0;            // stop once this many clicks were drawn (0: unused)
  std::size_t sessions = 0;          // exact number of sessions when clicks == 0
  std::size_t session_cap = 50'000'000;
};

/// Simulates sessions: pick a query uniformly, present its top-K ranking,
/// click each item independently with probability gamma * theta(k, o), with
/// gamma the binarized grade. Session s draws from stream `derive_seed(seed, s)`
/// so output is reproducible and independent of evaluation order.
inline ClickLog simulate(const RankingCorpus& corpus, const std::vector<std::vector<std::uint16_t>>& presentations,
                         const std::vector<OutlierSignature>& signatures, const ExaminationModel& model,
                         const SimulationBudget& budget) {
  if (corpus.empty()) throw std::invalid_argument("simulate: corpus is empty");
  if (presentations.size() != corpus.queries.size() || signatures.size() != corpus.queries.size())
    throw std::invalid_argument("simulate: one presentation and signature per query required");
  if (budget.clicks == 0 && budget.sessions == 0) throw std::invalid_argument("simulate: empty budget");
  const int K = model.config().K;

  ClickLog log;
  log.depth = K;
  std::vector<std::uint16_t> sig_index(corpus.queries.size());
  std::vector<std::vector<double>> click_prob(corpus.queries.size());
  double max_prob = 0.0;
  for (std::size_t q = 0; q < corpus.queries.size(); ++q) {
    const auto& shown = presentations[q];
    if (shown.size() > static_cast<std::size_t>(K)) throw std::invalid_argument("simulate: presentation deeper than K");
    signatures[q].validate(shown.size());
    sig_index[q] = log.intern(signatures[q]);
    for (std::size_t r = 0; r < shown.size(); ++r) {
      const double gamma = binarize(corpus.queries[q].documents.at(shown[r]).grade);
      const double p = gamma * model(static_cast<int>(r + 1), signatures[q]);
      click_prob[q].push_back(p);
      max_prob = std::max(max_prob, p);
    }
  }
  if (budget.clicks > 0 && max_prob <= 0.0)
    throw std::runtime_error("simulate: click target unreachable, no item can be clicked");

  const std::uint64_t seed = model.config().seed;
  for (std::size_t s = 0;; ++s) {
    if (budget.clicks > 0) {
      if (log.clicks >= budget.clicks) break;
      if (s >= budget.session_cap)
        throw std::runtime_error("simulate: session cap reached before the click target");
    } else if (s >= budget.sessions) {
      break;
    }
    Rng rng(derive_seed(seed, s));
    const auto q = rng.index(corpus.queries.size());
    const auto& shown = presentations[q];
    for (std::size_t r = 0; r < shown.size(); ++r) {
      ClickRecord rec;
      rec.session = static_cast<std::uint32_t>(s);
      rec.query = static_cast<std::uint32_t>(q);
      rec.doc = shown[r];
      rec.rank = static_cast<std::uint16_t>(r + 1);
      rec.signature = sig_index[q];
      rec.impression = true;
      rec.clicked = rng.uniform() < click_prob[q][r];
      log.clicks += rec.clicked;
      log.records.push_back(rec);
    }
    log.sessions = s + 1;
  }
  return log;
}

/// Writes `session,query_id,doc_id,rank,signature,impression,click`.
inline void write_click_log(const ClickLog& log, const RankingCorpus& corpus, std::ostream& out) {
  out << "session,query_id,doc_id,rank,signature,impression,click\n";
  std::vector<std::string> encoded;
  for (const auto& s : log.signatures) encoded.push_back(s.encode());
  for (const auto& r : log.records) {
    const auto& q = corpus.queries[r.query];
    out << r.session << ',' << q.query_id << ',' << q.documents[r.doc].doc_id << ',' << r.rank << ','
        << encoded[r.signature] << ',' << (r.impression ? 1 : 0) << ',' << (r.clicked ? 1 : 0) << '\n';
  }
}

inline void write_click_log(const ClickLog& log, const RankingCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write click log: " + path.string());
  write_click_log(log, corpus, out);
}

/// Reads a click log, resolving ids against `corpus`.
inline ClickLog read_click_log(std::istream& in, const RankingCorpus& corpus) {
  std::unordered_map<std::string, std::uint32_t> qindex;
  for (std::size_t i = 0; i < corpus.queries.size(); ++i) qindex.emplace(corpus.queries[i].query_id, i);
  std::vector<std::unordered_map<std::string, std::uint16_t>> dindex(corpus.queries.size());

  ClickLog log;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  std::map<std::string, std::uint16_t, std::less<>> sig_cache;
  long long last_session = -1;
  while (std::getline(in, line)) {
    ++lineno;
    auto view = trim(line);
    if (view.empty()) continue;
    if (!header) {
      if (view != "session,query_id,doc_id,rank,signature,impression,click")
        throw ParseError("click log header mismatch", lineno);
      header = true;
      continue;
    }
    auto cols = split_view(view, ',');
    if (cols.size() != 7) throw ParseError("click log rows need 7 columns", lineno);
    ClickRecord r;
    r.session = parse_int<std::uint32_t>(cols[0], lineno);
    auto qit = qindex.find(std::string(cols[1]));
    if (qit == qindex.end()) throw ParseError("unknown query_id " + std::string(cols[1]), lineno);
    r.query = qit->second;
    auto& docs = dindex[r.query];
    if (docs.empty()) {
      const auto& group = corpus.queries[r.query].documents;
      for (std::size_t d = 0; d < group.size(); ++d) docs.emplace(group[d].doc_id, static_cast<std::uint16_t>(d));
    }
    auto dit = docs.find(std::string(cols[2]));
    if (dit == docs.end()) throw ParseError("unknown doc_id " + std::string(cols[2]), lineno);
    r.doc = dit->second;
    r.rank = parse_int<std::uint16_t>(cols[3], lineno);
    if (r.rank < 1) throw ParseError("rank must be >= 1", lineno);
    auto sit = sig_cache.find(cols[4]);
    if (sit == sig_cache.end()) {
      auto sig = OutlierSignature::decode(cols[4], lineno);
      sit = sig_cache.emplace(std::string(cols[4]), log.intern(sig)).first;
    }
    r.signature = sit->second;
    const int impression = parse_int<int>(cols[5], lineno);
    const int click = parse_int<int>(cols[6], lineno);
    if ((impression != 0 && impression != 1) || (click != 0 && click != 1))
      throw ParseError("impression and click must be 0 or 1", lineno);
    if (click && !impression) throw ParseError("click without impression", lineno);
    r.impression = impression;
    r.clicked = click;
    if (static_cast<long long>(r.session) != last_session) {
      ++log.sessions;
      last_session = r.session;
    }
    log.clicks += r.clicked;
    log.depth = std::max<int>(log.depth, r.rank);
    log.records.push_back(r);
  }
  if (!header) throw ParseError("click log is empty");
  return log;
}

inline ClickLog read_click_log(const std::filesystem::path& path, const RankingCorpus& corpus) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open click log: " + path.string());
  return read_click_log(in, corpus);
}

/// Per-query signatures file: `query_id,signature`.
inline void write_signatures(const RankingCorpus& corpus, const std::vector<OutlierSignature>& sigs,
                             const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write signatures: " + path.string());
  out << "query_id,signature\n";
  for (std::size_t q = 0; q < corpus.queries.size(); ++q)
    out << corpus.queries[q].query_id << ',' << sigs[q].encode() << '\n';
}

inline std::vector<OutlierSignature> read_signatures(const std::filesystem::path& path, const RankingCorpus& corpus) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open signatures: " + path.string());
  std::unordered_map<std::string, std::size_t> qindex;
  for (std::size_t i = 0; i < corpus.queries.size(); ++i) qindex.emplace(corpus.queries[i].query_id, i);
  std::vector<OutlierSignature> out(corpus.queries.size());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto view = trim(line);
    if (view.empty() || (lineno == 1 && view == "query_id,signature")) continue;
    auto cols = split_view(view, ',');
    if (cols.size() != 2) throw ParseError("signature rows need 2 columns", lineno);
    auto it = qindex.find(std::string(trim(cols[0])));
    if (it == qindex.end()) continue;  // signatures for queries outside this corpus are ignored
    out[it->second] = OutlierSignature::decode(cols[1], lineno);
  }
  return out;
}

}  // namespace opbm
