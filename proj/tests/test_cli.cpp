#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>

#include <json.hpp>

#include "support.hpp"

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome run(const std::string& args) {
  const std::string cmd = std::string(OPBM_CLI_PATH) + " " + args + " 2>/dev/null";
  Outcome o;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) o.out.append(buf.data(), n);
  const int status = pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

const char* kConfig =
    "version = 1\n"
    "[corpus]\nn_queries = 80\ndocs_per_query = 10\nfeature_dim = 4\nseed = 5\n"
    "[split]\ntrain_fraction = 0.75\nproduction_fraction = 0.05\ntest_fraction = 0.25\nseed = 2\n"
    "[click]\nmodel = OPBM_G\nalpha = 0.75\nK = 10\n"
    "[outliers]\np_abnormal = 0.5\n"
    "[em]\nmax_iterations = 3\n"
    "[regression]\nrounds = 15\n"
    "[ranker]\nrounds = 15\n"
    "[experiment]\nn_runs = 1\nn_clicks = 4000\nestimators = naive, opbm\n";

}  // namespace

TEST_CASE("cli: the staged pipeline") {
  testing::TempDir dir;
  testing::spit(dir / "c.ini", kConfig);
  const std::string common = "--config " + (dir / "c.ini").string() + " --out " + (dir / "out").string();

  CHECK(run("synth " + common).code == 0);
  CHECK(std::filesystem::exists(dir / "out" / "corpus.txt"));

  auto detected = run("detect " + common);
  CHECK(detected.code == 0);
  CHECK(detected.out.find("rankings abnormal") != std::string::npos);
  const auto planted = testing::slurp(dir / "out" / "signatures.csv");

  // detection from the written observables reproduces the planted signatures
  CHECK(run("detect " + common + " --sidecar " + (dir / "out" / "observables.csv").string()).code == 0);
  CHECK(testing::slurp(dir / "out" / "signatures.csv") == planted);

  CHECK(run("simulate " + common).code == 0);
  CHECK(testing::slurp(dir / "out" / "clicks.csv").rfind("session,query_id,doc_id,rank,signature,impression,click\n",
                                                         0) == 0);

  auto analyzed = run("analyze " + common);
  CHECK(analyzed.code == 0);
  auto summary = nlohmann::json::parse(testing::slurp(dir / "out" / "outlier_summary.json"));
  CHECK(summary["abnormal_pages"].get<int>() > 0);

  CHECK(run("estimate " + common + " --variant opbm").code == 0);
  CHECK(std::filesystem::exists(dir / "out" / "theta_opbm.csv"));
  CHECK(std::filesystem::exists(dir / "out" / "em_trace_opbm.csv"));

  CHECK(run("train " + common + " --estimator opbm").code == 0);
  auto evaluated = run("evaluate " + common + " --estimator opbm");
  CHECK(evaluated.code == 0);
  auto metrics = nlohmann::json::parse(testing::slurp(dir / "out" / "metrics_opbm.json"));
  CHECK(metrics["ndcg_at_k"].get<double>() > 0.0);
  CHECK(metrics["ndcg_at_k"].get<double>() <= 1.0);
  CHECK(metrics["mean_ce"].get<double>() > 0.0);

  auto ok = run("verify " + (dir / "out").string());
  CHECK(ok.code == 0);
  CHECK(ok.out == "ok\n");
  testing::spit(dir / "out" / "clicks.csv", "tampered\n");
  auto drift = run("verify " + (dir / "out").string());
  CHECK(drift.code == 1);
  CHECK(drift.out == "changed: clicks.csv\n");
}

TEST_CASE("cli: experiment writes a verifiable directory") {
  testing::TempDir dir;
  testing::spit(dir / "c.ini", kConfig);
  auto r = run("experiment -q --config " + (dir / "c.ini").string() + " --out " + (dir / "exp").string() +
               " --set click.alphas=0,0.75");
  CHECK(r.code == 0);
  CHECK(r.out.rfind("alpha,estimator,n_runs,ndcg_mean,ndcg_std,ce_mean,ce_std\n", 0) == 0);
  CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 5);
  CHECK(run("verify " + (dir / "exp").string()).code == 0);
}

TEST_CASE("cli: errors and exit codes") {
  testing::TempDir dir;
  testing::spit(dir / "c.ini", kConfig);
  const std::string common = "--config " + (dir / "c.ini").string() + " --out " + (dir / "out").string();
  CHECK(run("--version").out.find("1.0.0") != std::string::npos);
  CHECK(run("").code != 0);
  CHECK(run("synth --preset rq9").code == 2);
  CHECK(run("synth --config " + (dir / "missing.ini").string()).code != 0);
  CHECK(run("synth " + common + " --set click.alpha=2").code == 2);
  CHECK(run("train " + common).code != 0);  // no click log yet
  testing::spit(dir / "bad.ini", "version = 7\n");
  CHECK(run("synth --config " + (dir / "bad.ini").string()).code == 2);
  CHECK(run("detect " + common).code == 0);
  CHECK(run("simulate " + common).code == 0);
  CHECK(run("train " + common + " --estimator ipw").code == 2);
  CHECK(run("train " + common + " --estimator pbm").code != 0);  // no table estimated
}
