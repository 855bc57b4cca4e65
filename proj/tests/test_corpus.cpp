#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <sstream>

#include "opbm/corpus.hpp"
#include "probe.hpp"
#include "support.hpp"

namespace {

opbm::RankingCorpus parse(const std::string& text, std::optional<std::size_t> dim = std::nullopt) {
  std::istringstream in(text);
  return opbm::parse_svmlight(in, dim);
}

std::string serialize(const opbm::RankingCorpus& c) {
  std::ostringstream out;
  opbm::write_corpus(c, out);
  return out.str();
}

std::set<std::string> ids(const opbm::RankingCorpus& c) {
  std::set<std::string> out;
  for (const auto& q : c.queries) out.insert(q.query_id);
  return out;
}

}  // namespace

TEST_CASE("svmlight: sparse line maps onto a dense vector") {
  auto c = parse("2 qid:7 1:0.5 3:1.0\n", 3);
  REQUIRE(c.queries.size() == 1);
  CHECK(c.queries[0].query_id == "7");
  REQUIRE(c.queries[0].documents.size() == 1);
  const auto& d = c.queries[0].documents[0];
  CHECK(d.grade == 2);
  CHECK(d.features == std::vector<double>{0.5, 0.0, 1.0});
  CHECK(c.feature_dim == 3);
}

TEST_CASE("svmlight: empty input is an error") {
  try {
    parse("");
    FAIL("expected a parse error");
  } catch (const opbm::ParseError& e) {
    CHECK(std::string(e.what()).find("empty corpus") != std::string::npos);
  }
  CHECK_THROWS_AS(parse("# only a comment\n\n"), opbm::ParseError);
}

TEST_CASE("svmlight: malformed lines report their line number") {
  auto line_of = [](const std::string& text, std::optional<std::size_t> dim = std::nullopt) -> std::size_t {
    try {
      parse(text, dim);
    } catch (const opbm::ParseError& e) {
      return e.line();
    }
    return 0;
  };
  CHECK(line_of("1 qid:1 1:1\nx qid:1 1:1\n") == 2);
  CHECK(line_of("1 qid:1 1:1\n1 1:1\n") == 2);
  CHECK(line_of("1 qid:1 1:1\n\n1 qid:2 2:a\n") == 3);
  CHECK(line_of("1 qid:1 2:1 1:1\n") == 1);
  CHECK(line_of("1 qid:1 0:1\n") == 1);
  CHECK(line_of("7 qid:1 1:1\n") == 1);
  CHECK(line_of("1.5 qid:1 1:1\n") == 1);
  CHECK(line_of("1 qid:1 1:1\n1 qid:1 4:1\n", 3) == 2);
}

TEST_CASE("svmlight: comments, doc ids and file order") {
  auto c = parse(
      "# header comment\n"
      "0 qid:a 1:1 # docid = x9\n"
      "4 qid:b 2:2\n"
      "3 qid:a 2:0.25 #docid=x1 extra\n");
  REQUIRE(c.queries.size() == 2);
  CHECK(c.feature_dim == 2);
  CHECK(c.queries[0].query_id == "a");
  CHECK(c.queries[0].documents[0].doc_id == "x9");
  CHECK(c.queries[0].documents[1].doc_id == "x1");
  CHECK(c.queries[0].documents[1].grade == 3);
  CHECK(c.queries[1].documents[0].doc_id == "0");
  CHECK_THROWS_AS(parse("1 qid:a 1:1 # docid = z\n2 qid:a 1:2 # docid = z\n"), opbm::ParseError);
}

TEST_CASE("svmlight: write then parse preserves every record") {
  auto c = opbm::synthesize_corpus(6, 7, 5, 3);
  c.queries[2].documents[1].features[3] = 0.0;  // exercise omitted zeros
  auto back = parse(serialize(c), c.feature_dim);
  REQUIRE(back.queries.size() == c.queries.size());
  for (std::size_t q = 0; q < c.queries.size(); ++q) {
    CHECK(back.queries[q].query_id == c.queries[q].query_id);
    REQUIRE(back.queries[q].documents.size() == c.queries[q].documents.size());
    for (std::size_t d = 0; d < c.queries[q].documents.size(); ++d) {
      CHECK(back.queries[q].documents[d].doc_id == c.queries[q].documents[d].doc_id);
      CHECK(back.queries[q].documents[d].grade == c.queries[q].documents[d].grade);
      CHECK(back.queries[q].documents[d].features == c.queries[q].documents[d].features);
    }
  }
  CHECK(serialize(back) == serialize(c));
}

TEST_CASE("synthetic: deterministic and in range") {
  auto a = opbm::synthesize_corpus(1, 5, 2, 0);
  auto b = opbm::synthesize_corpus(1, 5, 2, 0);
  CHECK(serialize(a) == serialize(b));
  auto big = opbm::synthesize_corpus(50, 10, 4, 9);
  CHECK_NOTHROW(big.validate());
  for (const auto& q : big.queries)
    for (const auto& d : q.documents) {
      CHECK(d.grade >= 0);
      CHECK(d.grade <= 4);
    }
  CHECK(serialize(big) != serialize(opbm::synthesize_corpus(50, 10, 4, 10)));
  CHECK_THROWS_AS(opbm::synthesize_corpus(0, 5, 2, 0), std::invalid_argument);
}

TEST_CASE("synthetic: manifest loads identically twice") {
  testing::TempDir dir;
  testing::spit(dir / "m.ini", "version = 1\n[corpus]\nn_queries = 3\ndocs_per_query = 8\nfeature_dim = 4\nseed = 42\n");
  auto a = opbm::load_corpus(dir / "m.ini", opbm::CorpusFormat::synthetic_manifest);
  auto b = opbm::load_corpus(dir / "m.ini", opbm::CorpusFormat::synthetic_manifest);
  CHECK(a.queries.size() == 3);
  CHECK(a.queries[0].documents.size() == 8);
  CHECK(a.feature_dim == 4);
  CHECK(serialize(a) == serialize(b));
}

TEST_CASE("synthetic: a linear probe orders held-out documents above chance") {
  auto c = opbm::synthesize_corpus(200, 10, 8, 1);
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t i = 0; i < 200; ++i) (i < 150 ? train_idx : test_idx).push_back(i);
  const auto w = testing::fit_probe(opbm::subset(c, train_idx));
  double tau = 0.0;
  for (auto i : test_idx) {
    std::vector<double> scores, grades;
    for (const auto& d : c.queries[i].documents) {
      scores.push_back(testing::probe_score(w, d.features));
      grades.push_back(d.grade);
    }
    tau += testing::kendall_tau(scores, grades);
  }
  tau /= static_cast<double>(test_idx.size());
  CHECK(tau > 0.0);
}

TEST_CASE("binarize: relevance threshold") {
  CHECK(opbm::binarize(3) == 1);
  CHECK(opbm::binarize(4) == 1);
  CHECK(opbm::binarize(2) == 0);
  CHECK(opbm::binarize(0) == 0);
  for (int g = 0; g < 4; ++g) CHECK(opbm::binarize(g) <= opbm::binarize(g + 1));
  CHECK_THROWS_AS(opbm::binarize(5), std::out_of_range);
  CHECK_THROWS_AS(opbm::binarize(-1), std::out_of_range);
}

TEST_CASE("split: one percent production sample") {
  auto c = opbm::synthesize_corpus(100, 2, 1, 0);
  opbm::SplitSpec spec;
  auto s = opbm::split(c, spec);
  CHECK(s.production.queries.size() == 1);
  CHECK(s.test.queries.size() == 20);
  CHECK(s.train.queries.size() == 80);
}

TEST_CASE("split: no test split when not requested") {
  auto c = opbm::synthesize_corpus(30, 2, 1, 0);
  opbm::SplitSpec spec{1.0, 0.1, 0.0, 4};
  auto s = opbm::split(c, spec);
  CHECK(s.test.queries.empty());
  CHECK(s.train.queries.size() == 30);
}

TEST_CASE("split: partition property and determinism") {
  testing::Gen gen(31);
  for (int trial = 0; trial < 40; ++trial) {
    const auto n = static_cast<std::size_t>(gen.integer(5, 120));
    auto c = opbm::synthesize_corpus(n, 1, 1, static_cast<std::uint64_t>(trial));
    opbm::SplitSpec spec;
    spec.test_fraction = gen.uniform(0.1, 0.4);
    spec.train_fraction = 1.0 - spec.test_fraction;
    spec.production_fraction = gen.uniform(0.1, 0.3);
    spec.seed = static_cast<std::uint64_t>(gen.integer(0, 1000));
    auto s = opbm::split(c, spec);
    auto train = ids(s.train), test = ids(s.test), prod = ids(s.production);
    for (const auto& q : test) CHECK(train.count(q) == 0);
    for (const auto& q : prod) CHECK(train.count(q) == 1);
    std::set<std::string> all = train;
    all.insert(test.begin(), test.end());
    CHECK(all == ids(c));
    auto again = opbm::split(c, spec);
    CHECK(again.train_indices == s.train_indices);
    CHECK(again.test_indices == s.test_indices);
    CHECK(again.production_indices == s.production_indices);
  }
}

TEST_CASE("split: impossible fractions") {
  auto c = opbm::synthesize_corpus(10, 1, 1, 0);
  CHECK_THROWS_AS(opbm::split(c, {0.7, 0.01, 0.5, 0}), std::invalid_argument);
  CHECK_THROWS_AS(opbm::split(c, {0.0, 0.0, 0.2, 0}), std::invalid_argument);
  CHECK_THROWS_AS(opbm::split(c, {0.8, 0.01, 0.2, 0}), std::invalid_argument);  // production rounds to 0
  CHECK_THROWS_AS(opbm::split(opbm::RankingCorpus{}, {}), std::invalid_argument);
}

TEST_CASE("corpus: validation") {
  auto c = testing::ladder_corpus(2, 3);
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.queries[0].documents[1].doc_id = bad.queries[0].documents[0].doc_id;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.queries[1].documents[0].features.pop_back();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.queries[1].documents.clear();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
