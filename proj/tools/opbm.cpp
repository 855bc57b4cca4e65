// opbm: command-line front end for the toolkit.
//
// Every subcommand reads the same configuration (--config FILE or --preset
// NAME, then --set section.key=value overrides) and writes into one results
// directory (--out, default "results") whose manifest.json is refreshed after
// each stage. Stages rebuild the corpus split and production ranker from the
// configuration, so their files line up with those of `experiment`.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "opbm/experiment.hpp"

namespace fs = std::filesystem;
using namespace opbm;

namespace {

struct Common {
  std::string config_path;
  std::string preset_name;
  std::vector<std::string> overrides;
  std::string out = "results";
  std::size_t run = 0;
  std::optional<double> alpha;
};

void add_common(CLI::App* cmd, Common& c) {
  auto* cfg = cmd->add_option("--config", c.config_path, "Configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--preset", c.preset_name, "Named preset (rq2_real_table, rq3_sweep, rq4_two_outliers, pbm_sanity)")
      ->excludes(cfg);
  cmd->add_option("--set", c.overrides, "Override, section.key=value (repeatable)");
  cmd->add_option("-o,--out", c.out, "Results directory");
}

void add_run(CLI::App* cmd, Common& c) {
  cmd->add_option("--run", c.run, "Run index; seed = base_seed + run");
  cmd->add_option("--alpha", c.alpha, "Outlier severity (default: first configured alpha)");
}

Config build_config(const Common& c) {
  Config cfg;
  if (!c.preset_name.empty()) cfg = preset(c.preset_name);
  else if (!c.config_path.empty()) cfg = Config::load(c.config_path);
  for (const auto& o : c.overrides) cfg.set(o);
  return cfg;
}

double stage_alpha(const Common& c, const ExperimentConfig& e) { return c.alpha.value_or(e.alphas.front()); }

fs::path out_dir(const Common& c) {
  fs::create_directories(c.out);
  return c.out;
}

void finish_stage(const fs::path& dir, const ExperimentConfig& e, const std::string& stage) {
  detail::write_text(dir / "config.ini", e.source.to_ini());
  nlohmann::ordered_json m;
  m["toolkit_version"] = std::string(kToolkitVersion);
  m["config_hash"] = sha256_hex(e.source.canonical());
  m["last_stage"] = stage;
  m["base_seed"] = e.base_seed;
  write_manifest(dir, std::move(m));
}

fs::path input_or(const std::string& given, const fs::path& fallback) {
  return given.empty() ? fallback : fs::path(given);
}

std::vector<std::size_t> parse_columns(const std::string& text) {
  std::vector<std::size_t> cols;
  for (auto part : split_view(text, ',')) {
    const auto c = parse_int<std::size_t>(trim(part));
    if (c < 1) throw std::invalid_argument("observable columns are 1-based");
    cols.push_back(c - 1);
  }
  return cols;
}

std::string variant_of(EstimatorKind k) {
  auto v = em_variant(k);
  if (!v) throw std::invalid_argument(to_string(k) + " does not use a propensity table");
  return *v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Outlier-aware click models for counterfactual learning to rank"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolkitVersion));
  Common c;

  auto* synth = app.add_subcommand("synth", "Write the configured synthetic corpus as svmlight");
  add_common(synth, c);

  auto* detect_cmd = app.add_subcommand("detect", "Detect outliers in the presented training lists");
  add_common(detect_cmd, c);
  add_run(detect_cmd, c);
  std::string sidecar_path, columns;
  bool lazy = false;
  detect_cmd->add_option("--sidecar", sidecar_path, "Observable features CSV keyed by query_id,doc_id")
      ->check(CLI::ExistingFile);
  detect_cmd->add_option("--columns", columns, "Corpus feature columns (1-based) holding observable features");
  detect_cmd->add_flag("--lazy", lazy, "Keep only the first outlier of each list");

  auto* simulate_cmd = app.add_subcommand("simulate", "Simulate a click log");
  add_common(simulate_cmd, c);
  add_run(simulate_cmd, c);
  std::string signatures_in;
  simulate_cmd->add_option("--signatures", signatures_in, "Signatures CSV (default: <out>/signatures.csv)");

  auto* estimate_cmd = app.add_subcommand("estimate", "Estimate propensities with regression EM");
  add_common(estimate_cmd, c);
  add_run(estimate_cmd, c);
  std::string clicks_in, variant = "opbm";
  estimate_cmd->add_option("--clicks", clicks_in, "Click log (default: <out>/clicks.csv)");
  estimate_cmd->add_option("--variant", variant, "pbm, opbm or opbm_lazy")
      ->check(CLI::IsMember({"pbm", "opbm", "opbm_lazy"}));

  auto* train_cmd = app.add_subcommand("train", "Train a ranker from clicks and rank the test split");
  add_common(train_cmd, c);
  add_run(train_cmd, c);
  std::string estimator_name = "opbm", table_in;
  train_cmd->add_option("--clicks", clicks_in, "Click log (default: <out>/clicks.csv)");
  train_cmd->add_option("--estimator", estimator_name, "naive, pbm, opbm, opbm_lazy or oracle");
  train_cmd->add_option("--table", table_in, "Propensity table (default: <out>/theta_<variant>.csv)");

  auto* evaluate_cmd = app.add_subcommand("evaluate", "NDCG of test rankings and CE of corrected clicks");
  add_common(evaluate_cmd, c);
  add_run(evaluate_cmd, c);
  std::string rankings_in;
  evaluate_cmd->add_option("--clicks", clicks_in, "Click log (default: <out>/clicks.csv)");
  evaluate_cmd->add_option("--estimator", estimator_name, "naive, pbm, opbm, opbm_lazy or oracle");
  evaluate_cmd->add_option("--table", table_in, "Propensity table (default: <out>/theta_<variant>.csv)");
  evaluate_cmd->add_option("--rankings", rankings_in, "Test rankings (default: <out>/rankings_<estimator>.csv)");

  auto* analyze_cmd = app.add_subcommand("analyze", "CTR breakdowns and outlier/non-outlier comparison");
  add_common(analyze_cmd, c);
  bool welch = false;
  double min_support = 0.01;
  analyze_cmd->add_option("--clicks", clicks_in, "Click log (default: <out>/clicks.csv)");
  analyze_cmd->add_flag("--welch", welch, "Welch's unequal-variance t-test");
  analyze_cmd->add_option("--min-support", min_support, "Minimum session share of an outlier@k group")
      ->check(CLI::Range(0.0, 1.0));

  auto* experiment_cmd = app.add_subcommand("experiment", "Run every (run, alpha) pair and aggregate");
  add_common(experiment_cmd, c);
  bool quiet = false;
  experiment_cmd->add_flag("-q,--quiet", quiet, "No progress output");

  auto* verify_cmd = app.add_subcommand("verify", "Re-hash the files of a results directory");
  std::string verify_dir;
  verify_cmd->add_option("dir", verify_dir, "Results directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (verify_cmd->parsed()) {
      const auto drift = verify_manifest(verify_dir);
      for (const auto& d : drift) std::cout << d << '\n';
      if (!drift.empty()) return 1;
      std::cout << "ok\n";
      return 0;
    }

    const auto config = build_config(c);
    auto e = ExperimentConfig::from_config(config);
    if (experiment_cmd->parsed()) {
      e.output_dir = fs::path(c.out);
      const auto result = run_experiment(e, [&](const std::string& msg) {
        if (!quiet) std::cerr << msg << '\n';
      });
      std::cout << aggregate_csv(result.aggregate);
      std::size_t failed = 0;
      for (const auto& r : result.runs) failed += r.ok ? 0 : 1;
      if (failed) std::cerr << failed << " run(s) failed; see manifest.json\n";
      return failed == result.runs.size() ? 1 : 0;
    }
    e.validate();
    const auto dir = out_dir(c);

    if (synth->parsed()) {
      if (e.corpus_path) throw std::invalid_argument("synth: corpus.path is set; nothing to synthesize");
      write_corpus(e.synthetic.synthesize(), dir / "corpus.txt");
      finish_stage(dir, e, "synth");
      return 0;
    }

    const auto env = prepare_environment(e);
    const auto& train = env.split.train;
    const auto seeds = run_seeds(e.base_seed + c.run);

    if (detect_cmd->parsed()) {
      std::vector<OutlierSignature> sigs(train.queries.size());
      if (!sidecar_path.empty() || !columns.empty()) {
        std::optional<ObservableSidecar> sidecar;
        if (!sidecar_path.empty()) sidecar = ObservableSidecar::load(sidecar_path);
        const auto cols = columns.empty() ? std::vector<std::size_t>{} : parse_columns(columns);
        for (std::size_t q = 0; q < train.queries.size(); ++q) {
          const auto& shown = env.presented[q];
          if (shown.size() < 4) continue;
          const auto obs = sidecar ? observables_from_sidecar(*sidecar, train.queries[q], shown)
                                   : observables_from_columns(train.queries[q], shown, cols);
          sigs[q] = signature(detect(obs, e.detect_threshold), lazy);
        }
      } else {
        ObservableSidecar planted;
        sigs = place_outliers(train, env.presented, e.placement, e.detect_threshold, seeds.placement, &planted);
        if (lazy)
          for (auto& s : sigs) s = make_lazy(s);
        planted.save(dir / "observables.csv");
      }
      write_signatures(train, sigs, dir / "signatures.csv");
      std::size_t abnormal = 0;
      for (const auto& s : sigs) abnormal += s.empty() ? 0 : 1;
      std::cout << abnormal << " of " << sigs.size() << " rankings abnormal\n";
      finish_stage(dir, e, "detect");
      return 0;
    }

    if (simulate_cmd->parsed()) {
      const auto sigs = read_signatures(input_or(signatures_in, dir / "signatures.csv"), train);
      auto click = e.click;
      click.alpha = stage_alpha(c, e);
      click.seed = seeds.clicks;
      const auto log = simulate(train, env.presented, sigs, ExaminationModel(click), {.clicks = e.n_clicks});
      write_click_log(log, train, dir / "clicks.csv");
      std::cout << log.sessions << " sessions, " << log.clicks << " clicks\n";
      finish_stage(dir, e, "simulate");
      return 0;
    }

    const auto log = read_click_log(input_or(clicks_in, dir / "clicks.csv"), train);

    if (estimate_cmd->parsed()) {
      auto em = e.em;
      em.seed = seeds.em;
      const auto state = run_em(log_for_variant(log, variant), train, em);
      export_table(state, dir / ("theta_" + variant + ".csv"));
      export_trace(state, dir / ("em_trace_" + variant + ".csv"));
      std::cout << "log-likelihood " << format_double(state.log_likelihood) << " after " << state.iteration
                << " iterations\n";
      finish_stage(dir, e, "estimate");
      return 0;
    }

    if (analyze_cmd->parsed()) {
      ctr_per_position(log).write_csv(dir / "ctr_per_position.csv");
      const auto groups = ctr_by_outlier_group(log, min_support);
      groups.write_csv(dir / "ctr_by_outlier_group.csv");
      for (const auto& g : groups.suppressed_groups) warn("group " + g + " below minimum support, suppressed");
      const auto summary = outlier_vs_nonoutlier_summary(log, welch);
      detail::write_text(dir / "outlier_summary.json", summary.to_json().dump(2) + '\n');
      std::cout << summary.to_json().dump(2) << '\n';
      finish_stage(dir, e, "analyze");
      return 0;
    }

    const auto kind = estimator_from_string(estimator_name);
    EstimatorSpec spec{kind, {}};
    if (spec.needs_table())
      spec.table = load_propensity_table(input_or(table_in, dir / ("theta_" + variant_of(kind) + ".csv")));

    if (train_cmd->parsed()) {
      const auto model = train_unbiased(log, train, spec, e.ranker, e.base_seed + c.run);
      std::ofstream model_out(dir / ("model_" + estimator_name + ".txt"));
      model.save(model_out);
      model_out.close();
      write_rankings(score_and_rank(model, env.split.test), env.split.test,
                     dir / ("rankings_" + estimator_name + ".csv"));
      finish_stage(dir, e, "train");
      return 0;
    }

    if (evaluate_cmd->parsed()) {
      const auto& test = env.split.test;
      const auto orders = read_rankings(input_or(rankings_in, dir / ("rankings_" + estimator_name + ".csv")), test);
      std::vector<Ranking> rankings;
      for (const auto& order : orders) {
        Ranking r;
        for (auto d : order) r.push_back({d, 0.0});
        rankings.push_back(std::move(r));
      }
      MetricReport report;
      report.estimator = estimator_name;
      report.ndcg_at_k = mean_ndcg(rankings, test, e.ndcg_k, e.gain);
      report.mean_ce = corrected_click_ce(log, train, spec, e.ce_clamp);
      report.n_queries = test.queries.size();
      report.n_records = log.records.size();
      report.seed = e.base_seed + c.run;
      detail::write_text(dir / ("metrics_" + estimator_name + ".csv"),
                         MetricReport::csv_header() + '\n' + report.csv_row() + '\n');
      detail::write_text(dir / ("metrics_" + estimator_name + ".json"), report.to_json().dump(2) + '\n');
      std::cout << report.to_json().dump(2) << '\n';
      finish_stage(dir, e, "evaluate");
      return 0;
    }
  } catch (const ParseError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 0;
}
