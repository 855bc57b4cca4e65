#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "opbm/propensity_em.hpp"
#include "support.hpp"

using Catch::Approx;
using testing::sig_of;

namespace {

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const auto n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

opbm::EMConfig fast_em(std::uint64_t seed = 0) {
  opbm::EMConfig cfg;
  cfg.seed = seed;
  cfg.max_iterations = 8;
  return cfg;
}

struct SimulatedLog {
  opbm::RankingCorpus corpus;
  opbm::ClickLog log;
};

SimulatedLog simulated(opbm::ClickModel model, double alpha, double p_abnormal, std::size_t clicks, int K,
                       std::uint64_t seed) {
  SimulatedLog out;
  out.corpus = opbm::synthesize_corpus(400, 10, 8, seed);
  auto ranker = opbm::train_production_ranker(opbm::subset(out.corpus, {0, 1, 2, 3, 4, 5, 6, 7}));
  auto shown = opbm::present(out.corpus, ranker, K);
  opbm::Rng rng(seed + 1);
  std::vector<opbm::OutlierSignature> sigs(out.corpus.queries.size());
  for (auto& s : sigs)
    if (rng.uniform() < p_abnormal) s = sig_of({static_cast<int>(rng.index(static_cast<std::size_t>(K))) + 1});
  opbm::ClickModelConfig cfg;
  cfg.model = model;
  cfg.alpha = alpha;
  cfg.K = K;
  cfg.seed = seed + 2;
  out.log = opbm::simulate(out.corpus, shown, sigs, opbm::ExaminationModel(cfg), {.clicks = clicks});
  return out;
}

}  // namespace

TEST_CASE("posterior: hand-computed non-click") {
  auto p = opbm::posterior(0.5, 0.5, false);
  CHECK(p.examined == Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(p.relevant == Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("posterior: a click implies examination and relevance") {
  testing::Gen gen(51);
  for (int i = 0; i < 100; ++i) {
    auto p = opbm::posterior(gen.open_unit(), gen.open_unit(), true);
    CHECK(p.examined == 1.0);
    CHECK(p.relevant == 1.0);
  }
}

TEST_CASE("posterior: unexamined relevant item") {
  auto p = opbm::posterior(0.0, 1.0, false);
  CHECK(p.examined == 0.0);
  CHECK(p.relevant == 1.0);
}

TEST_CASE("posterior: inconsistent observations") {
  CHECK_THROWS_AS(opbm::posterior(1.0, 1.0, false), std::domain_error);
  CHECK_THROWS_AS(opbm::posterior(0.0, 0.5, true), std::invalid_argument);
  CHECK_THROWS_AS(opbm::posterior(1.5, 0.5, false), std::invalid_argument);
  CHECK_THROWS_AS(opbm::posterior(0.5, -0.1, false), std::invalid_argument);
}

TEST_CASE("posterior: joint terms sum to one") {
  testing::Gen gen(52);
  for (int i = 0; i < 10000; ++i) {
    const double theta = gen.open_unit(), gamma = gen.open_unit();
    for (bool c : {false, true}) {
      auto j = opbm::joint_posterior(theta, gamma, c);
      const double total = j.examined_relevant + j.examined_irrelevant + j.unexamined_relevant + j.unexamined_irrelevant;
      REQUIRE(std::abs(total - 1.0) <= 1e-12);
      auto m = opbm::posterior(theta, gamma, c);
      REQUIRE(m.examined == j.examined_relevant + j.examined_irrelevant);
    }
  }
}

TEST_CASE("update_theta: all-click cell and hand example") {
  opbm::ClickLog log;
  testing::add_session(log, 0, {}, {true, true});
  testing::add_session(log, 0, {}, {true, false});
  std::vector<double> examined{1.0, 1.0, 1.0, 0.5};
  auto cfg = fast_em();
  cfg.normalize_anchor = false;
  auto t = opbm::update_theta(log, examined, cfg);
  CHECK(t.at(1, {}) == 1.0);
  CHECK(t.at(2, {}) == Approx(0.75));
  CHECK(t.size() == 2);
}

TEST_CASE("update_theta: floor, anchor and omitted cells") {
  opbm::ClickLog log;
  testing::add_session(log, 0, {}, {false, false, false});
  testing::add_session(log, 1, sig_of({2}), {false, false, false});
  std::vector<double> examined{0.5, 0.25, 0.0, 0.4, 0.2, 0.1};
  auto cfg = fast_em();
  double scale = 0.0;
  auto t = opbm::update_theta(log, examined, cfg, &scale);
  CHECK(scale == Approx(2.0));
  CHECK(t.at(1, {}) == 1.0);
  CHECK(t.at(2, {}) == Approx(0.5));
  CHECK(t.at(3, {}) == Approx(2.0 * cfg.theta_floor));
  CHECK(t.at(1, sig_of({2})) == Approx(0.8));
  CHECK_FALSE(t.contains(1, sig_of({3})));
  CHECK_THROWS_AS(opbm::update_theta(log, std::vector<double>{0.5}, cfg), std::invalid_argument);
}

TEST_CASE("update_theta: anchoring keeps ratios and the argmax") {
  testing::Gen gen(53);
  int compared = 0;
  for (int trial = 0; trial < 100; ++trial) {
    opbm::ClickLog log;
    std::vector<double> examined;
    for (int s = 0; s < 30; ++s) {
      auto sig = s % 3 == 0 ? opbm::OutlierSignature{} : sig_of({gen.integer(1, 4)});
      std::vector<bool> clicks(4);
      for (std::size_t r = 0; r < 4; ++r) clicks[r] = gen.uniform() < 0.3 / static_cast<double>(r + 1);
      if (sig.empty()) clicks[0] = gen.uniform() < 0.9;
      testing::add_session(log, static_cast<std::uint32_t>(s), sig, clicks);
      for (std::size_t r = 0; r < 4; ++r) examined.push_back(gen.uniform(0.0, 0.2));
    }
    auto on = fast_em(), off = fast_em();
    off.normalize_anchor = false;
    auto a = opbm::update_theta(log, examined, on);
    auto b = opbm::update_theta(log, examined, off);
    const auto& ca = a.cells();
    const auto& cb = b.cells();
    REQUIRE(ca.size() == cb.size());
    // Cells pushed past one by the rescaling are clamped; only compare
    // tables where that did not happen.
    bool clamped = false;
    for (const auto& [cell, v] : ca) clamped |= v == 1.0 && !(cell.rank == 1 && cell.signature.empty());
    if (clamped) continue;
    ++compared;
    const double ratio = ca.begin()->second / cb.begin()->second;
    auto argmax = [](const auto& cells) {
      return std::max_element(cells.begin(), cells.end(), [](auto& x, auto& y) { return x.second < y.second; })->first;
    };
    CHECK(argmax(ca) == argmax(cb));
    for (auto it = ca.begin(), jt = cb.begin(); it != ca.end(); ++it, ++jt)
      CHECK(it->second / jt->second == Approx(ratio).epsilon(1e-12));
  }
  CHECK(compared > 50);
}

TEST_CASE("update_theta: grouped and per-record forms agree") {
  auto sim = simulated(opbm::ClickModel::OPBM_G, 0.75, 0.5, 5000, 6, 3);
  const auto agg = opbm::AggregatedLog::from(sim.log);
  testing::Gen gen(54);
  std::vector<double> grouped(agg.groups.size());
  for (std::size_t i = 0; i < agg.groups.size(); ++i) grouped[i] = gen.uniform();
  // Map each record to its group's posterior.
  std::map<std::tuple<std::uint32_t, std::uint16_t, int, std::vector<int>>, double> by_key;
  for (std::size_t i = 0; i < agg.groups.size(); ++i) {
    const auto& g = agg.groups[i];
    by_key[{g.query, g.doc, agg.cells[g.cell].rank, agg.cells[g.cell].signature.positions}] = grouped[i];
  }
  std::vector<double> per_record;
  for (const auto& r : sim.log.records)
    per_record.push_back(by_key.at({r.query, r.doc, r.rank, sim.log.signature_of(r).positions}));
  auto cfg = fast_em();
  auto a = opbm::update_theta(sim.log, per_record, cfg);
  auto b = opbm::update_theta(agg, grouped, cfg);
  REQUIRE(a.size() == b.size());
  for (const auto& [cell, v] : a.cells()) CHECK(b.at(cell.rank, cell.signature) == Approx(v).epsilon(1e-12));
}

TEST_CASE("fit_relevance: all-relevant posteriors give a saturated model") {
  testing::WarningCapture warnings;
  opbm::ClickLog log;
  testing::add_session(log, 0, {}, {false, true, false});
  testing::add_session(log, 1, {}, {false, false, false});
  auto corpus = testing::ladder_corpus(2, 3);
  std::vector<double> ones(log.records.size(), 1.0);
  for (auto mode : {opbm::LabelMode::sample, opbm::LabelMode::soft}) {
    auto m = opbm::fit_relevance(log, ones, corpus, {}, mode, 1);
    for (const auto& q : corpus.queries)
      for (const auto& d : q.documents) CHECK(m.predict(d.features) == Approx(1.0 - 1e-6).epsilon(1e-12));
  }
  CHECK_FALSE(warnings.messages.empty());
}

TEST_CASE("fit_relevance: separable posteriors generalize") {
  testing::Gen gen(55);
  opbm::RankingCorpus corpus;
  corpus.feature_dim = 3;
  for (int q = 0; q < 80; ++q) {
    opbm::QueryGroup g{std::to_string(q), {}};
    for (int d = 0; d < 8; ++d) {
      std::vector<double> x{gen.normal(), gen.normal(), gen.normal()};
      g.documents.push_back({std::to_string(d), x, 0});
    }
    corpus.queries.push_back(g);
  }
  auto relevant = [&](const opbm::Document& d) { return d.features[0] + 0.5 * d.features[1] > 0.0; };
  opbm::ClickLog log;
  std::vector<double> post;
  for (std::uint32_t q = 0; q < 60; ++q) {
    testing::add_session(log, q, {}, std::vector<bool>(8, false));
    for (int d = 0; d < 8; ++d) post.push_back(relevant(corpus.queries[q].documents[static_cast<std::size_t>(d)]) ? 0.95 : 0.05);
  }
  opbm::RegressionConfig reg{opbm::LearnerKind::boosted_stumps, 100, 0.1, 2};
  auto model = opbm::fit_relevance(log, post, corpus, reg, opbm::LabelMode::sample, 3);
  std::vector<double> pos, neg;
  for (std::size_t q = 60; q < 80; ++q)
    for (const auto& d : corpus.queries[q].documents) (relevant(d) ? pos : neg).push_back(model.predict(d.features));
  double wins = 0.0;
  for (double p : pos)
    for (double n : neg) wins += p > n ? 1.0 : p == n ? 0.5 : 0.0;
  const double auc = wins / static_cast<double>(pos.size() * neg.size());
  CHECK(auc > 0.9);

  auto again = opbm::fit_relevance(log, post, corpus, reg, opbm::LabelMode::sample, 3);
  CHECK(again == model);
}

TEST_CASE("run_em: initial propensities") {
  opbm::ClickLog log;
  testing::add_session(log, 0, {}, {true, false, true});
  testing::add_session(log, 1, {}, {true, true, false});
  testing::add_session(log, 2, sig_of({2}), {false, true, true});
  testing::add_session(log, 3, sig_of({3}), {false, false, false});
  const auto agg = opbm::AggregatedLog::from(log);
  auto t = opbm::initial_theta(agg, fast_em());
  CHECK(t.at(1, {}) == 1.0);
  CHECK(t.at(2, {}) == Approx(0.5));
  CHECK(t.at(3, {}) == Approx(1.0 / 3.0));
  // CTR ratio to the normal cell of the same rank, capped below one.
  CHECK(t.at(2, sig_of({2})) == Approx(0.999));
  CHECK(t.at(3, sig_of({2})) == Approx((1.0 / 3.0) * 1.0 / 0.5));
  CHECK(t.at(1, sig_of({2})) == Approx(fast_em().theta_floor));
  CHECK(t.at(3, sig_of({3})) == Approx(fast_em().theta_floor));
  for (const auto& [cell, v] : t.cells()) {
    CHECK(v > 0.0);
    if (!cell.signature.empty()) CHECK(v < 1.0);
  }
}

TEST_CASE("run_em: normal-only logs reduce to the position-based model") {
  auto sim = simulated(opbm::ClickModel::PBM, 0.0, 0.0, 20000, 5, 7);
  auto opbm_state = opbm::run_em(sim.log, sim.corpus, fast_em(9));
  auto pbm_state = opbm::run_em(sim.log.without_outliers(), sim.corpus, fast_em(9));
  CHECK(opbm_state.theta.signatures().size() == 1);
  REQUIRE(opbm_state.theta.size() == pbm_state.theta.size());
  for (const auto& [cell, v] : opbm_state.theta.cells()) CHECK(pbm_state.theta.at(cell.rank, cell.signature) == v);
  CHECK(opbm_state.log_likelihood == pbm_state.log_likelihood);
}

TEST_CASE("run_em: recovers position bias") {
  auto sim = simulated(opbm::ClickModel::PBM, 0.0, 0.0, 200000, 5, 11);
  opbm::EMConfig cfg;
  cfg.seed = 4;
  auto state = opbm::run_em(sim.log, sim.corpus, cfg);
  std::vector<double> est, truth;
  for (int k = 1; k <= 5; ++k) {
    est.push_back(state.theta.at(k, {}));
    truth.push_back(1.0 / k);
  }
  CHECK(pearson(est, truth) > 0.99);
  CHECK(state.theta.at(1, {}) == 1.0);
}

TEST_CASE("run_em: likelihood does not drop materially") {
  testing::WarningCapture warnings;
  auto sim = simulated(opbm::ClickModel::OPBM_G, 0.75, 0.5, 60000, 10, 13);
  opbm::EMConfig cfg;
  cfg.seed = 5;
  auto state = opbm::run_em(sim.log, sim.corpus, cfg);
  REQUIRE(state.trace.size() == 20);
  for (std::size_t i = 1; i < state.trace.size(); ++i) {
    const double prev = state.trace[i - 1].log_likelihood, cur = state.trace[i].log_likelihood;
    CHECK(std::isfinite(cur));
    if (cur < prev) UNSCOPED_INFO("iteration " << i + 1 << " decreased the log-likelihood by " << prev - cur);
    CHECK(cur >= prev - 0.005 * std::abs(prev));
  }
  CHECK(state.iteration == 20);
  for (const auto& [cell, v] : state.theta.cells()) {
    CHECK(v > 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("run_em: deterministic in the seed") {
  auto sim = simulated(opbm::ClickModel::OPBM_G, 0.5, 0.5, 8000, 6, 17);
  auto a = opbm::run_em(sim.log, sim.corpus, fast_em(1));
  auto b = opbm::run_em(sim.log, sim.corpus, fast_em(1));
  CHECK(a.theta == b.theta);
  CHECK(a.relevance == b.relevance);
  std::ostringstream ta, tb;
  opbm::export_trace(a, ta);
  opbm::export_trace(b, tb);
  CHECK(ta.str() == tb.str());
  CHECK(ta.str().rfind("iteration,log_likelihood,theta_anchor_scale\n", 0) == 0);
}

TEST_CASE("run_em: zero-click log is handled") {
  testing::WarningCapture warnings;
  opbm::ClickLog log;
  for (std::uint32_t s = 0; s < 20; ++s) testing::add_session(log, s % 4, s % 2 ? sig_of({2}) : opbm::OutlierSignature{}, std::vector<bool>(4, false));
  auto corpus = testing::ladder_corpus(4, 4);
  auto state = opbm::run_em(log, corpus, fast_em());
  CHECK(std::isfinite(state.log_likelihood));
  for (const auto& [cell, v] : state.theta.cells()) {
    CHECK(v >= fast_em().theta_floor);
    CHECK(v <= 1.0);
  }
  for (const auto& q : corpus.queries)
    for (const auto& d : q.documents) CHECK(state.relevance.predict(d.features) <= 1e-5);
}

TEST_CASE("run_em: input validation") {
  auto corpus = testing::ladder_corpus(1, 4);
  CHECK_THROWS_AS(opbm::run_em(opbm::ClickLog{}, corpus, fast_em()), std::invalid_argument);
  opbm::ClickLog log;
  testing::add_session(log, 0, {}, {true, false});
  auto cfg = fast_em();
  cfg.theta_floor = 0.5;
  CHECK_THROWS_AS(opbm::run_em(log, corpus, cfg), std::invalid_argument);
  cfg = fast_em();
  cfg.max_iterations = 0;
  CHECK_THROWS_AS(opbm::run_em(log, corpus, cfg), std::invalid_argument);
}

TEST_CASE("export: table round trip and size bound") {
  auto sim = simulated(opbm::ClickModel::OPBM_G, 0.75, 0.6, 30000, 10, 19);
  auto state = opbm::run_em(sim.log, sim.corpus, fast_em(2));
  testing::TempDir dir;
  opbm::export_table(state, dir / "theta.csv");
  auto back = opbm::load_propensity_table(dir / "theta.csv");
  for (const auto& [cell, v] : state.theta.cells()) CHECK(std::abs(back.at(cell.rank, cell.signature) - v) <= 1e-12);
  CHECK(back.size() <= 10 + 10 * 10);
  for (int k = 1; k <= 10; ++k) CHECK(back.contains(k, {}));
  std::istringstream lines(testing::slurp(dir / "theta.csv"));
  std::size_t rows = 0;
  for (std::string line; std::getline(lines, line);) ++rows;
  CHECK(rows - 1 <= 110);
}
