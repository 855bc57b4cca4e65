#pragma once

// Config-driven experiment pipeline: corpus -> split -> production ranker ->
// outlier placement and detection -> click simulation -> propensity EM ->
// unbiased rankers -> metrics, repeated over seeded runs.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "opbm/clicksim.hpp"
#include "opbm/config.hpp"
#include "opbm/corpus.hpp"
#include "opbm/eval.hpp"
#include "opbm/loglab.hpp"
#include "opbm/outliers.hpp"
#include "opbm/propensity_em.hpp"
#include "opbm/ranker.hpp"

namespace opbm {

namespace fs = std::filesystem;

inline std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return out.str();
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

namespace detail {

inline RegressionConfig regression_from(const Config& cfg, const std::string& section, RegressionConfig r) {
  r.learner = learner_from_string(cfg.get_string(section + ".learner", to_string(r.learner)));
  r.rounds = cfg.get_int<int>(section + ".rounds", r.rounds);
  r.learning_rate = cfg.get_double(section + ".learning_rate", r.learning_rate);
  r.max_leaves = cfg.get_int<int>(section + ".max_leaves", r.max_leaves);
  return r;
}

}  // namespace detail

struct ExperimentConfig {
  Config source;

  std::optional<fs::path> corpus_path;  // svmlight file; synthetic corpus when absent
  SyntheticManifest synthetic;
  SplitSpec split;
  RegressionConfig production{.learner = LearnerKind::boosted_stumps, .rounds = 10, .learning_rate = 0.1, .max_leaves = 2};

  OutlierPlacement placement;
  double detect_threshold = 0.5;

  ClickModelConfig click;
  std::vector<double> alphas;  // sweep; a single entry when not swept

  std::vector<EstimatorKind> estimators{EstimatorKind::naive, EstimatorKind::pbm, EstimatorKind::opbm,
                                        EstimatorKind::oracle};
  EMConfig em;
  UnbiasedTrainingConfig ranker;

  std::size_t n_clicks = 1'000'000;
  std::size_t n_runs = 8;
  std::uint64_t base_seed = 0;
  int ndcg_k = 10;
  Gain gain = Gain::graded;
  double ce_clamp = 1e-6;
  bool write_click_logs = false;
  std::optional<fs::path> output_dir;

  void validate() const {
    if (n_runs < 1) throw std::invalid_argument("experiment: n_runs must be >= 1");
    if (estimators.empty()) throw std::invalid_argument("experiment: estimator list is empty");
    if (alphas.empty()) throw std::invalid_argument("experiment: no alpha value");
    if (n_clicks == 0) throw std::invalid_argument("experiment: n_clicks must be positive");
    if (ndcg_k < 1) throw std::invalid_argument("experiment: ndcg_k must be >= 1");
    split.validate();
    placement.validate();
    auto c = click;
    for (double a : alphas) {
      c.alpha = a;
      c.validate();
    }
    em.validate();
    ranker.regression.validate();
    production.validate();
  }

  static ExperimentConfig from_config(const Config& cfg) {
    ExperimentConfig e;
    e.source = cfg;
    if (auto p = cfg.raw("corpus.path"); p && !p->empty()) e.corpus_path = fs::path(*p);
    e.synthetic = SyntheticManifest::from_config(cfg);

    e.split.train_fraction = cfg.get_double("split.train_fraction", e.split.train_fraction);
    e.split.production_fraction = cfg.get_double("split.production_fraction", e.split.production_fraction);
    e.split.test_fraction = cfg.get_double("split.test_fraction", e.split.test_fraction);
    e.split.seed = cfg.get_int<std::uint64_t>("split.seed", e.split.seed);
    e.production = detail::regression_from(cfg, "production", e.production);

    e.click.model = click_model_from_string(cfg.get_string("click.model", to_string(e.click.model)));
    e.click.alpha = cfg.get_double("click.alpha", e.click.alpha);
    e.click.sigma = cfg.get_double("click.sigma", e.click.sigma);
    e.click.K = cfg.get_int<int>("click.K", e.click.K);
    e.click.position_bias_eta = cfg.get_double("click.eta", e.click.position_bias_eta);
    if (auto p = cfg.raw("click.table_path"); p && !p->empty()) e.click.table_path = fs::path(*p);
    e.alphas = cfg.get_double_list("click.alphas", {e.click.alpha});

    e.placement.p_abnormal = cfg.get_double("outliers.p_abnormal", e.placement.p_abnormal);
    e.placement.two_outlier_fraction = cfg.get_double("outliers.two_outlier_fraction", e.placement.two_outlier_fraction);
    if (cfg.has("outliers.fixed_pair")) {
      e.placement.fixed_pair.clear();
      for (const auto& s : cfg.get_list("outliers.fixed_pair", {})) e.placement.fixed_pair.push_back(parse_int<int>(s));
    }
    e.placement.depth = static_cast<std::size_t>(e.click.K);
    e.detect_threshold = cfg.get_double("outliers.threshold", e.detect_threshold);

    e.em.max_iterations = cfg.get_int<int>("em.max_iterations", e.em.max_iterations);
    e.em.theta_floor = cfg.get_double("em.theta_floor", e.em.theta_floor);
    e.em.normalize_anchor = cfg.get_bool("em.normalize_anchor", e.em.normalize_anchor);
    e.em.relevance_label_mode = label_mode_from_string(cfg.get_string("em.label_mode", to_string(e.em.relevance_label_mode)));
    e.em.gamma_init = gamma_init_from_string(cfg.get_string("em.gamma_init", to_string(e.em.gamma_init)));
    e.em.regression = detail::regression_from(cfg, "regression", e.em.regression);

    e.ranker.regression = detail::regression_from(cfg, "ranker", e.ranker.regression);
    e.ranker.max_weight = cfg.get_double("ranker.max_weight", e.ranker.max_weight);

    if (cfg.has("experiment.estimators")) {
      e.estimators.clear();
      for (const auto& s : cfg.get_list("experiment.estimators", {})) e.estimators.push_back(estimator_from_string(s));
    }
    e.n_clicks = cfg.get_int<std::size_t>("experiment.n_clicks", e.n_clicks);
    e.n_runs = cfg.get_int<std::size_t>("experiment.n_runs", e.n_runs);
    e.base_seed = cfg.get_int<std::uint64_t>("experiment.base_seed", e.base_seed);
    e.ndcg_k = cfg.get_int<int>("experiment.ndcg_k", e.ndcg_k);
    e.gain = gain_from_string(cfg.get_string("experiment.gain", to_string(e.gain)));
    e.ce_clamp = cfg.get_double("experiment.ce_clamp", e.ce_clamp);
    e.write_click_logs = cfg.get_bool("experiment.write_click_logs", e.write_click_logs);
    if (auto p = cfg.raw("experiment.output_dir"); p && !p->empty()) e.output_dir = fs::path(*p);
    return e;
  }
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"rq2_real_table", "rq3_sweep", "rq4_two_outliers", "pbm_sanity"};
  return names;
}

/// Fully specified configuration of a named experiment.
inline Config preset(std::string_view name) {
  std::string body;
  if (name == "rq3_sweep") {
    body =
        "[click]\nmodel = OPBM_G\nalphas = 0, 0.25, 0.5, 0.75, 1\nsigma = 1\n"
        "[outliers]\np_abnormal = 0.5\ntwo_outlier_fraction = 0\n"
        "[experiment]\nestimators = naive, pbm, opbm, oracle\n";
  } else if (name == "rq4_two_outliers") {
    body =
        "[click]\nmodel = OPBM_MG\nalpha = 0.75\nsigma = 1\n"
        "[outliers]\np_abnormal = 0.5\ntwo_outlier_fraction = 1\nfixed_pair = 4, 9\n"
        "[experiment]\nestimators = naive, pbm, opbm_lazy, opbm\n";
  } else if (name == "pbm_sanity") {
    body =
        "[click]\nmodel = PBM\nalpha = 0\n"
        "[outliers]\np_abnormal = 0\n"
        "[experiment]\nestimators = naive, pbm, opbm\n";
  } else if (name == "rq2_real_table") {
    body =
        "[click]\nmodel = OPBM_Real\ntable_path =\n"
        "[outliers]\np_abnormal = 0.5\ntwo_outlier_fraction = 0\n"
        "[experiment]\nestimators = naive, pbm, opbm, oracle\n";
  } else {
    throw std::invalid_argument("unknown preset: " + std::string(name));
  }
  const std::string common =
      "version = 1\n"
      "[corpus]\nn_queries = 2000\ndocs_per_query = 10\nfeature_dim = 8\nseed = 0\n"
      "[split]\ntrain_fraction = 0.8\nproduction_fraction = 0.01\ntest_fraction = 0.2\nseed = 0\n";
  auto cfg = Config::parse(common + body);
  cfg.set("experiment.preset", std::string(name));
  cfg.set("experiment.n_runs", "8");
  cfg.set("experiment.n_clicks", "1000000");
  cfg.set("experiment.base_seed", "0");
  cfg.set("click.K", "10");
  return cfg;
}

/// Everything fixed across runs: corpus, split, production ranker and the
/// presented top-K lists of the training queries.
struct Environment {
  CorpusSplit split;
  RelevanceModel production;
  std::vector<std::vector<std::uint16_t>> presented;
};

inline Environment prepare_environment(const ExperimentConfig& cfg) {
  Environment env;
  const auto corpus = cfg.corpus_path ? load_corpus(*cfg.corpus_path, CorpusFormat::letor_svmlight)
                                      : cfg.synthetic.synthesize();
  env.split = split(corpus, cfg.split);
  env.production = train_production_ranker(env.split.production, cfg.split.seed, cfg.production);
  env.presented = present(env.split.train, env.production, cfg.click.K);
  return env;
}

/// Plants outliers in the presented lists and runs detection on the
/// synthesized observable features. Returns the detected signatures.
inline std::vector<OutlierSignature> place_outliers(const RankingCorpus& corpus,
                                                    const std::vector<std::vector<std::uint16_t>>& presented,
                                                    const OutlierPlacement& placement, double threshold,
                                                    std::uint64_t seed, ObservableSidecar* sidecar = nullptr) {
  Rng rng(seed);
  std::vector<OutlierSignature> out(presented.size());
  if (sidecar) sidecar->set_names({"promotion_tag", "price"});
  for (std::size_t q = 0; q < presented.size(); ++q) {
    const auto obs = synthesize_observables(presented[q].size(), placement, rng);
    if (sidecar)
      for (std::size_t i = 0; i < presented[q].size(); ++i)
        sidecar->put(corpus.queries[q].query_id, corpus.queries[q].documents[presented[q][i]].doc_id, obs.values[i]);
    if (presented[q].size() >= 4) out[q] = signature(detect(obs, threshold), false);
  }
  return out;
}

/// Estimators that need a propensity table, and which EM variant feeds them.
inline std::optional<std::string> em_variant(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::pbm: return "pbm";
    case EstimatorKind::opbm: return "opbm";
    case EstimatorKind::opbm_lazy: return "opbm_lazy";
    default: return std::nullopt;
  }
}

/// PBM EM drops signatures, lazy EM keeps only the first outlier.
inline ClickLog log_for_variant(const ClickLog& log, const std::string& variant) {
  if (variant == "pbm") return log.without_outliers();
  if (variant == "opbm_lazy") return log.lazy();
  return log;
}

struct EstimatorResult {
  EstimatorKind kind = EstimatorKind::naive;
  double ndcg = 0.0;
  double ce = 0.0;
};

struct RunArtifacts {
  std::size_t run = 0;
  std::uint64_t seed = 0;
  double alpha = 0.0;
  std::vector<OutlierSignature> signatures;
  ClickLog log;
  std::map<std::string, EMState> em;
  std::vector<EstimatorResult> results;
  std::size_t test_queries = 0;
};

struct RunSeeds {
  std::uint64_t placement, clicks, em;
};

inline RunSeeds run_seeds(std::uint64_t run_seed) {
  return {derive_seed(run_seed, 101), derive_seed(run_seed, 202), derive_seed(run_seed, 303)};
}

/// One run at one alpha. Seed = base_seed + run; placement and clicks reuse
/// the same streams across alphas so a sweep compares like with like.
inline RunArtifacts execute_run(const Environment& env, const ExperimentConfig& cfg, std::size_t run, double alpha,
                                const std::vector<OutlierSignature>* signatures = nullptr) {
  RunArtifacts a;
  a.run = run;
  a.seed = cfg.base_seed + run;
  a.alpha = alpha;
  const auto seeds = run_seeds(a.seed);
  const auto& train = env.split.train;
  a.signatures = signatures ? *signatures
                            : place_outliers(train, env.presented, cfg.placement, cfg.detect_threshold, seeds.placement);

  auto click = cfg.click;
  click.alpha = alpha;
  click.seed = seeds.clicks;
  a.log = simulate(train, env.presented, a.signatures, ExaminationModel(click), {.clicks = cfg.n_clicks});

  auto em_cfg = cfg.em;
  em_cfg.seed = seeds.em;
  std::set<std::string> variants;
  for (auto k : cfg.estimators)
    if (auto v = em_variant(k)) variants.insert(*v);
  for (const auto& v : variants) {
    if (v == "opbm") a.em.emplace(v, run_em(a.log, train, em_cfg));
    else a.em.emplace(v, run_em(log_for_variant(a.log, v), train, em_cfg));
  }

  a.test_queries = env.split.test.queries.size();
  for (auto k : cfg.estimators) {
    EstimatorSpec spec{k, {}};
    if (auto v = em_variant(k)) spec.table = a.em.at(*v).theta;
    const auto model = train_unbiased(a.log, train, spec, cfg.ranker, a.seed);
    EstimatorResult r;
    r.kind = k;
    r.ndcg = mean_ndcg(score_and_rank(model, env.split.test), env.split.test, cfg.ndcg_k, cfg.gain);
    r.ce = corrected_click_ce(a.log, train, spec, cfg.ce_clamp);
    a.results.push_back(r);
  }
  return a;
}

struct AggregateRow {
  double alpha = 0.0;
  EstimatorKind kind = EstimatorKind::naive;
  std::size_t n_runs = 0;
  double ndcg_mean = 0.0, ndcg_std = 0.0;
  double ce_mean = 0.0, ce_std = 0.0;
};

struct RunRecord {
  std::size_t run = 0;
  std::uint64_t seed = 0;
  double alpha = 0.0;
  bool ok = true;
  std::string error;
  std::vector<EstimatorResult> results;
  std::size_t records = 0;
  std::size_t test_queries = 0;
};

struct ExperimentResult {
  std::vector<RunRecord> runs;
  std::vector<AggregateRow> aggregate;
  std::vector<std::string> files;  // relative to the output directory
};

namespace detail {

/// Mean and sample standard deviation (0 for a single value).
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline std::string alpha_dir(double alpha) { return "alpha_" + format_double(alpha); }

}  // namespace detail

inline std::vector<AggregateRow> aggregate_runs(const std::vector<RunRecord>& runs, const ExperimentConfig& cfg) {
  std::vector<AggregateRow> out;
  for (double alpha : cfg.alphas)
    for (auto k : cfg.estimators) {
      std::vector<double> ndcg, ce;
      for (const auto& r : runs) {
        if (!r.ok || r.alpha != alpha) continue;
        for (const auto& e : r.results)
          if (e.kind == k) {
            ndcg.push_back(e.ndcg);
            ce.push_back(e.ce);
          }
      }
      AggregateRow row;
      row.alpha = alpha;
      row.kind = k;
      row.n_runs = ndcg.size();
      if (!ndcg.empty()) {
        std::tie(row.ndcg_mean, row.ndcg_std) = detail::mean_std(ndcg);
        std::tie(row.ce_mean, row.ce_std) = detail::mean_std(ce);
      }
      out.push_back(row);
    }
  return out;
}

inline std::string runs_csv(const std::vector<RunRecord>& runs) {
  std::string out = "run,seed,alpha,estimator,ndcg_at_k,mean_ce,test_queries,records\n";
  for (const auto& r : runs) {
    if (!r.ok) continue;
    for (const auto& e : r.results)
      out += std::to_string(r.run) + ',' + std::to_string(r.seed) + ',' + format_double(r.alpha) + ',' +
             to_string(e.kind) + ',' + format_double(e.ndcg) + ',' + format_double(e.ce) + ',' +
             std::to_string(r.test_queries) + ',' + std::to_string(r.records) + '\n';
  }
  return out;
}

inline std::string aggregate_csv(const std::vector<AggregateRow>& rows) {
  std::string out = "alpha,estimator,n_runs,ndcg_mean,ndcg_std,ce_mean,ce_std\n";
  for (const auto& a : rows)
    out += format_double(a.alpha) + ',' + to_string(a.kind) + ',' + std::to_string(a.n_runs) + ',' +
           format_double(a.ndcg_mean) + ',' + format_double(a.ndcg_std) + ',' + format_double(a.ce_mean) + ',' +
           format_double(a.ce_std) + '\n';
  return out;
}

/// Lists every file under `dir` except the manifest, sorted, with slashes.
inline std::vector<std::string> list_files(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto rel = fs::relative(entry.path(), dir).generic_string();
    if (rel != "manifest.json") out.push_back(rel);
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Hashes every file under `dir` (except the manifest itself) into
/// `fields["files"]` and writes `dir/manifest.json`. Returns the listed paths.
inline std::vector<std::string> write_manifest(const fs::path& dir, nlohmann::ordered_json fields) {
  auto files = list_files(dir);
  auto& listed = fields["files"] = nlohmann::ordered_json::array();
  for (const auto& f : files) listed.push_back({{"path", f}, {"sha256", sha256_file(dir / f)}});
  detail::write_text(dir / "manifest.json", fields.dump(2) + '\n');
  return files;
}

/// Runs every (run, alpha) pair. A failing run is recorded and skipped; the
/// remaining runs continue. With an output directory, writes per-run files,
/// runs.csv, aggregate.csv, config.ini and a manifest hashing every file.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                       const std::function<void(const std::string&)>& progress = {}) {
  cfg.validate();
  ExperimentResult result;
  const auto env = prepare_environment(cfg);
  if (cfg.output_dir) fs::create_directories(*cfg.output_dir);

  for (std::size_t run = 0; run < cfg.n_runs; ++run) {
    std::optional<std::vector<OutlierSignature>> sigs;
    for (double alpha : cfg.alphas) {
      RunRecord rec;
      rec.run = run;
      rec.seed = cfg.base_seed + run;
      rec.alpha = alpha;
      if (progress) progress("run " + std::to_string(run) + " alpha " + format_double(alpha));
      try {
        auto a = execute_run(env, cfg, run, alpha, sigs ? &*sigs : nullptr);
        if (!sigs) sigs = a.signatures;
        rec.results = a.results;
        rec.records = a.log.records.size();
        rec.test_queries = a.test_queries;
        if (cfg.output_dir) {
          const auto dir = *cfg.output_dir / ("run_" + std::to_string(run)) / detail::alpha_dir(alpha);
          fs::create_directories(dir);
          for (const auto& [variant, state] : a.em) {
            state.theta.save(dir / ("theta_" + variant + ".csv"));
            export_trace(state, dir / ("em_trace_" + variant + ".csv"));
          }
          ctr_per_position(a.log).write_csv(dir / "ctr_per_position.csv");
          std::string metrics = MetricReport::csv_header() + '\n';
          for (const auto& e : a.results)
            metrics += MetricReport{to_string(e.kind), e.ndcg, e.ce, a.test_queries, a.log.records.size(), a.seed}
                           .csv_row() + '\n';
          detail::write_text(dir / "metrics.csv", metrics);
          write_signatures(env.split.train, a.signatures, dir / "signatures.csv");
          if (cfg.write_click_logs) write_click_log(a.log, env.split.train, dir / "clicks.csv");
        }
      } catch (const std::exception& e) {
        rec.ok = false;
        rec.error = e.what();
        warn("run " + std::to_string(run) + " failed: " + rec.error);
      }
      result.runs.push_back(std::move(rec));
    }
  }
  result.aggregate = aggregate_runs(result.runs, cfg);

  if (cfg.output_dir) {
    const auto& dir = *cfg.output_dir;
    detail::write_text(dir / "runs.csv", runs_csv(result.runs));
    detail::write_text(dir / "aggregate.csv", aggregate_csv(result.aggregate));
    detail::write_text(dir / "config.ini", cfg.source.to_ini());

    nlohmann::ordered_json m;
    m["toolkit_version"] = std::string(kToolkitVersion);
    m["config_hash"] = sha256_hex(cfg.source.canonical());
    m["base_seed"] = cfg.base_seed;
    m["n_runs"] = cfg.n_runs;
    m["corpus_seed"] = cfg.synthetic.seed;
    m["split_seed"] = cfg.split.seed;
    auto& runs = m["runs"] = nlohmann::ordered_json::array();
    for (const auto& r : result.runs) {
      const auto s = run_seeds(r.seed);
      nlohmann::ordered_json j;
      j["run"] = r.run;
      j["alpha"] = r.alpha;
      j["seed"] = r.seed;
      j["placement_seed"] = s.placement;
      j["click_seed"] = s.clicks;
      j["em_seed"] = s.em;
      j["status"] = r.ok ? "ok" : "error";
      if (!r.ok) j["error"] = r.error;
      runs.push_back(j);
    }
    result.files = write_manifest(dir, std::move(m));
  }
  return result;
}

/// Re-hashes every file listed in `dir/manifest.json`. Returns one line per
/// problem: `changed: <path>`, `missing: <path>` or `unlisted: <path>`.
inline std::vector<std::string> verify_manifest(const fs::path& dir) {
  const auto manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  std::vector<std::string> drift;
  std::set<std::string> listed;
  for (const auto& f : manifest.at("files")) {
    const auto path = f.at("path").get<std::string>();
    listed.insert(path);
    if (!fs::exists(dir / path)) drift.push_back("missing: " + path);
    else if (sha256_file(dir / path) != f.at("sha256").get<std::string>()) drift.push_back("changed: " + path);
  }
  for (const auto& f : list_files(dir))
    if (!listed.count(f)) drift.push_back("unlisted: " + f);
  return drift;
}

}  // namespace opbm
