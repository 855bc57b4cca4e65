#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "opbm/common.hpp"

namespace opbm {

enum class Gain { graded, binary };

inline std::string to_string(Gain g) { return g == Gain::graded ? "graded" : "binary"; }

inline Gain gain_from_string(std::string_view s) {
  if (s == "graded") return Gain::graded;
  if (s == "binary") return Gain::binary;
  throw std::invalid_argument("unknown gain: " + std::string(s));
}

namespace detail {

inline double gain_of(int grade, Gain mode) {
  if (grade < 0) throw std::invalid_argument("ndcg: negative grade");
  if (mode == Gain::binary) return grade > 2 ? 1.0 : 0.0;
  return std::exp2(static_cast<double>(grade)) - 1.0;
}

inline double dcg(std::span<const int> grades, std::size_t k, Gain mode) {
  double sum = 0.0;
  const std::size_t n = std::min(k, grades.size());
  for (std::size_t i = 0; i < n; ++i) sum += gain_of(grades[i], mode) / std::log2(static_cast<double>(i) + 2.0);
  return sum;
}

}  // namespace detail

/// NDCG@k with gains 2^g - 1 (or the binarized grade) and log2(i+1)
/// discounts. The ideal ordering comes from `ideal_source` sorted descending.
/// A query with no positive gain scores 0.
inline double ndcg_at_k(std::span<const int> ranked_grades, std::span<const int> ideal_source, int k,
                        Gain mode = Gain::graded) {
  if (k < 1) throw std::invalid_argument("ndcg: k must be >= 1");
  for (int g : ranked_grades)
    if (g < 0) throw std::invalid_argument("ndcg: negative grade");
  std::vector<int> ideal(ideal_source.begin(), ideal_source.end());
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  const auto kk = static_cast<std::size_t>(k);
  const double idcg = detail::dcg(ideal, kk, mode);
  if (!(idcg > 0.0)) return 0.0;
  return detail::dcg(ranked_grades, kk, mode) / idcg;
}

inline double ndcg_at_k(std::span<const int> ranked_grades, int k, Gain mode = Gain::graded) {
  return ndcg_at_k(ranked_grades, ranked_grades, k, mode);
}

/// Mean of -[y ln p + (1-y) ln(1-p)] with p clamped to [eps, 1-eps].
inline double mean_binary_ce(std::span<const double> predictions, std::span<const double> labels,
                             double clamp_eps = 1e-6) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("mean_binary_ce: length mismatch");
  if (predictions.empty()) throw std::invalid_argument("mean_binary_ce: empty input");
  if (!(clamp_eps > 0.0 && clamp_eps < 0.5)) throw std::invalid_argument("mean_binary_ce: clamp_eps outside (0, 0.5)");
  double sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (std::isnan(predictions[i])) throw std::invalid_argument("mean_binary_ce: NaN prediction");
    const double p = std::clamp(predictions[i], clamp_eps, 1.0 - clamp_eps);
    const double y = labels[i];
    sum -= y * std::log(p) + (1.0 - y) * std::log1p(-p);
  }
  return sum / static_cast<double>(predictions.size());
}

/// Clicks over impressions; 0 when nothing was shown.
inline double ctr(std::uint64_t clicks, std::uint64_t impressions) {
  if (clicks > impressions) throw std::invalid_argument("ctr: more clicks than impressions");
  if (impressions == 0) return 0.0;
  return static_cast<double>(clicks) / static_cast<double>(impressions);
}

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) return h;
  }
  throw std::runtime_error("incomplete beta: continued fraction did not converge");
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double regularized_incomplete_beta(double x, double a, double b) {
  if (!(a > 0.0 && b > 0.0)) throw std::invalid_argument("incomplete beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument("incomplete beta: x outside [0,1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// Two-sided p-value of a Student t statistic with `df` degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
  if (std::isinf(t)) return 0.0;
  return regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5);
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double df = 0.0;
};

/// Two-sample t-test, pooled variance by default, Welch's unequal-variance
/// form when `welch`. With zero standard error: equal means give t=0, p=1;
/// different means give t=+-inf, p=0.
inline TTestResult t_test_two_sample(std::span<const double> a, std::span<const double> b, bool welch = false) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("t_test: each sample needs at least 2 values");
  const auto na = static_cast<double>(a.size());
  const auto nb = static_cast<double>(b.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / na;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / nb;
  double ssa = 0.0, ssb = 0.0;
  for (double v : a) ssa += (v - ma) * (v - ma);
  for (double v : b) ssb += (v - mb) * (v - mb);
  const double va = ssa / (na - 1.0);
  const double vb = ssb / (nb - 1.0);

  TTestResult out;
  double se2 = 0.0;
  if (welch) {
    se2 = va / na + vb / nb;
    const double num = se2 * se2;
    const double den = (va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0);
    out.df = den > 0.0 ? num / den : na + nb - 2.0;
  } else {
    out.df = na + nb - 2.0;
    const double pooled = (ssa + ssb) / out.df;
    se2 = pooled * (1.0 / na + 1.0 / nb);
  }
  const double diff = ma - mb;
  if (!(se2 > 0.0)) {
    if (diff == 0.0) return {0.0, 1.0, out.df};
    out.t = diff > 0.0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    out.p = 0.0;
    return out;
  }
  out.t = diff / std::sqrt(se2);
  out.p = student_t_two_sided_p(out.t, out.df);
  return out;
}

struct MetricReport {
  static constexpr int kSchemaVersion = 1;
  std::string estimator;
  double ndcg_at_k = 0.0;
  double mean_ce = 0.0;
  std::size_t n_queries = 0;
  std::size_t n_records = 0;
  std::uint64_t seed = 0;

  static std::string csv_header() { return "schema_version,estimator,ndcg_at_k,mean_ce,n_queries,n_records,seed"; }

  std::string csv_row() const {
    return std::to_string(kSchemaVersion) + ',' + estimator + ',' + format_double(ndcg_at_k) + ',' +
           format_double(mean_ce) + ',' + std::to_string(n_queries) + ',' + std::to_string(n_records) + ',' +
           std::to_string(seed);
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["schema_version"] = kSchemaVersion;
    j["estimator"] = estimator;
    j["ndcg_at_k"] = ndcg_at_k;
    j["mean_ce"] = mean_ce;
    j["n_queries"] = n_queries;
    j["n_records"] = n_records;
    j["seed"] = seed;
    return j;
  }
};

}  // namespace opbm
