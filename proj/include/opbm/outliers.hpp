#pragma once

// Outlier detection inside a presented list: per-list min-max normalization of
// each observable feature, interquartile fences, and a degree of outlierness
// measured as the distance beyond the fence.

#include <algorithm>
#include <cmath>
#include <compare>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "opbm/common.hpp"
#include "opbm/corpus.hpp"
#include "opbm/rng.hpp"

namespace opbm {

struct ObservableFeatureSet {
  std::vector<std::string> names;
  std::vector<std::vector<double>> values;  // one row per item, in rank order

  std::size_t items() const { return values.size(); }
  std::size_t features() const { return names.size(); }
};

struct OutlierVerdict {
  std::vector<std::vector<double>> per_feature_degree;
  std::vector<std::vector<double>> signed_degree;  // + above upper fence, - below lower
  std::vector<bool> is_outlier;
  std::vector<int> outlier_positions;  // 1-based ranks, ascending
};

/// The set of outlier ranks in a presented list; empty for a normal ranking.
/// Identity (equality and ordering) is the position list alone.
struct OutlierSignature {
  std::vector<int> positions;
  bool lazy = false;

  bool empty() const { return positions.empty(); }

  bool operator==(const OutlierSignature& other) const { return positions == other.positions; }
  std::strong_ordering operator<=>(const OutlierSignature& other) const {
    if (positions.size() != other.positions.size()) return positions.size() <=> other.positions.size();
    return positions <=> other.positions;
  }

  bool contains(int rank) const { return std::binary_search(positions.begin(), positions.end(), rank); }

  /// `-` for empty, otherwise `+`-joined ranks (`4+9`).
  std::string encode() const {
    if (positions.empty()) return "-";
    std::string out;
    for (std::size_t i = 0; i < positions.size(); ++i) {
      if (i) out += '+';
      out += std::to_string(positions[i]);
    }
    return out;
  }

  static OutlierSignature decode(std::string_view text, std::size_t line = 0) {
    text = trim(text);
    OutlierSignature sig;
    if (text == "-" ) return sig;
    if (text.empty()) throw ParseError("empty signature", line);
    for (auto part : split_view(text, '+')) sig.positions.push_back(parse_int<int>(trim(part), line));
    for (std::size_t i = 0; i < sig.positions.size(); ++i) {
      if (sig.positions[i] < 1) throw ParseError("signature ranks are 1-based", line);
      if (i && sig.positions[i] <= sig.positions[i - 1])
        throw ParseError("signature ranks must be strictly increasing", line);
    }
    return sig;
  }

  void validate(std::size_t list_length) const {
    for (std::size_t i = 0; i < positions.size(); ++i) {
      if (positions[i] < 1 || static_cast<std::size_t>(positions[i]) > list_length)
        throw std::invalid_argument("signature rank outside list");
      if (i && positions[i] <= positions[i - 1]) throw std::invalid_argument("signature ranks not increasing");
    }
    if (lazy && positions.size() > 1) throw std::invalid_argument("lazy signature holds more than one rank");
  }
};

/// First-outlier-only view of a signature.
inline OutlierSignature make_lazy(const OutlierSignature& sig) {
  OutlierSignature out;
  out.lazy = true;
  if (!sig.positions.empty()) out.positions.push_back(sig.positions.front());
  return out;
}

struct QuartileBounds {
  double lower = 0.0;
  double upper = 0.0;
};

/// Quantile by linear interpolation between order statistics at q*(n-1).
inline double interpolated_quantile(std::span<const double> sorted, double q) {
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Tukey fences Q1 - 1.5 IQR and Q3 + 1.5 IQR. Needs at least 4 values.
inline QuartileBounds iqr_bounds(std::span<const double> values) {
  if (values.size() < 4) throw std::invalid_argument("iqr_bounds: need at least 4 values");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double q1 = interpolated_quantile(sorted, 0.25);
  const double q3 = interpolated_quantile(sorted, 0.75);
  const double iqr = q3 - q1;
  return {q1 - 1.5 * iqr, q3 + 1.5 * iqr};
}

inline OutlierVerdict detect(const ObservableFeatureSet& list, double threshold = 0.5) {
  const std::size_t n = list.items();
  if (n < 4) throw std::invalid_argument("detect: lists shorter than 4 items have no outliers by definition");
  const std::size_t m = list.features();
  for (const auto& row : list.values) {
    if (row.size() != m) throw std::invalid_argument("detect: row width differs from feature names");
    for (double v : row)
      if (!std::isfinite(v)) throw std::invalid_argument("detect: non-finite observable feature value");
  }

  OutlierVerdict verdict;
  verdict.per_feature_degree.assign(n, std::vector<double>(m, 0.0));
  verdict.signed_degree.assign(n, std::vector<double>(m, 0.0));
  verdict.is_outlier.assign(n, false);

  std::vector<double> column(n);
  for (std::size_t f = 0; f < m; ++f) {
    double lo = list.values[0][f], hi = lo;
    for (std::size_t i = 0; i < n; ++i) {
      lo = std::min(lo, list.values[i][f]);
      hi = std::max(hi, list.values[i][f]);
    }
    const double range = hi - lo;
    for (std::size_t i = 0; i < n; ++i) column[i] = range > 0.0 ? (list.values[i][f] - lo) / range : 0.0;
    const auto bounds = iqr_bounds(column);
    for (std::size_t i = 0; i < n; ++i) {
      const double above = column[i] - bounds.upper;
      const double below = bounds.lower - column[i];
      double signed_deg = 0.0;
      if (above > 0.0) signed_deg = above;
      else if (below > 0.0) signed_deg = -below;
      verdict.signed_degree[i][f] = signed_deg;
      verdict.per_feature_degree[i][f] = std::abs(signed_deg);
      if (std::abs(signed_deg) > threshold) verdict.is_outlier[i] = true;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (verdict.is_outlier[i]) verdict.outlier_positions.push_back(static_cast<int>(i + 1));
  return verdict;
}

inline OutlierSignature signature(const OutlierVerdict& verdict, bool lazy) {
  OutlierSignature sig;
  sig.positions = verdict.outlier_positions;
  return lazy ? make_lazy(sig) : sig;
}

/// Observable features of presented items, supplied as a sidecar CSV
/// `query_id,doc_id,<feature>...` with a header row.
class ObservableSidecar {
 public:
  static ObservableSidecar load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open observable feature file: " + path.string());
    ObservableSidecar out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (trim(line).empty()) continue;
      auto cells = split_view(trim(line), ',');
      if (out.names_.empty()) {
        if (cells.size() < 3 || trim(cells[0]) != "query_id" || trim(cells[1]) != "doc_id")
          throw ParseError("observable sidecar header must start with query_id,doc_id", lineno);
        for (std::size_t i = 2; i < cells.size(); ++i) out.names_.emplace_back(trim(cells[i]));
        continue;
      }
      if (cells.size() != out.names_.size() + 2) throw ParseError("wrong column count", lineno);
      std::vector<double> row;
      for (std::size_t i = 2; i < cells.size(); ++i) row.push_back(parse_double(trim(cells[i]), lineno));
      out.rows_[{std::string(trim(cells[0])), std::string(trim(cells[1]))}] = std::move(row);
    }
    if (out.names_.empty()) throw ParseError("observable sidecar is empty");
    return out;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write observable feature file: " + path.string());
    out << "query_id,doc_id";
    for (const auto& n : names_) out << ',' << n;
    out << '\n';
    for (const auto& [key, row] : rows_) {
      out << key.first << ',' << key.second;
      for (double v : row) out << ',' << format_double(v);
      out << '\n';
    }
  }

  const std::vector<std::string>& names() const { return names_; }

  void set_names(std::vector<std::string> names) { names_ = std::move(names); }

  void put(const std::string& query_id, const std::string& doc_id, std::vector<double> row) {
    rows_[{query_id, doc_id}] = std::move(row);
  }

  const std::vector<double>& row(const std::string& query_id, const std::string& doc_id) const {
    auto it = rows_.find({query_id, doc_id});
    if (it == rows_.end())
      throw std::out_of_range("no observable features for query " + query_id + " doc " + doc_id);
    return it->second;
  }

 private:
  std::vector<std::string> names_;
  std::map<std::pair<std::string, std::string>, std::vector<double>> rows_;
};

/// Observable features of a presented list taken from designated corpus
/// feature columns (0-based).
inline ObservableFeatureSet observables_from_columns(const QueryGroup& query, std::span<const std::uint16_t> shown,
                                                     std::span<const std::size_t> columns) {
  if (columns.empty()) throw std::invalid_argument("no observable columns given");
  ObservableFeatureSet set;
  for (auto c : columns) set.names.push_back("f" + std::to_string(c + 1));
  for (auto d : shown) {
    const auto& features = query.documents.at(d).features;
    std::vector<double> row;
    for (auto c : columns) {
      if (c >= features.size()) throw std::out_of_range("observable column beyond feature_dim");
      row.push_back(features[c]);
    }
    set.values.push_back(std::move(row));
  }
  return set;
}

inline ObservableFeatureSet observables_from_sidecar(const ObservableSidecar& sidecar, const QueryGroup& query,
                                                     std::span<const std::uint16_t> shown) {
  ObservableFeatureSet set;
  set.names = sidecar.names();
  for (auto d : shown) set.values.push_back(sidecar.row(query.query_id, query.documents.at(d).doc_id));
  return set;
}

/// Where synthetic outliers are planted in presented lists.
struct OutlierPlacement {
  double p_abnormal = 0.5;            // share of rankings that receive outliers
  double two_outlier_fraction = 0.0;  // share of abnormal rankings using `fixed_pair`
  std::vector<int> fixed_pair{4, 9};
  std::size_t depth = 10;             // single outliers drawn uniformly from 1..depth

  void validate() const {
    if (!(p_abnormal >= 0.0 && p_abnormal <= 1.0)) throw std::invalid_argument("p_abnormal outside [0,1]");
    if (!(two_outlier_fraction >= 0.0 && two_outlier_fraction <= 1.0))
      throw std::invalid_argument("two_outlier_fraction outside [0,1]");
    if (depth == 0) throw std::invalid_argument("placement depth must be positive");
    for (std::size_t i = 0; i < fixed_pair.size(); ++i)
      if (fixed_pair[i] < 1 || (i && fixed_pair[i] <= fixed_pair[i - 1]))
        throw std::invalid_argument("fixed outlier positions must be increasing 1-based ranks");
  }
};

/// Synthesizes observable features for a presented list of `length` items:
/// a binary promotion tag set only on planted outliers, and a stratified
/// price column. Returns the planted positions alongside.
inline ObservableFeatureSet synthesize_observables(std::size_t length, const OutlierPlacement& placement, Rng& rng,
                                                   std::vector<int>* planted = nullptr) {
  placement.validate();
  std::vector<int> positions;
  if (length >= 4 && rng.uniform() < placement.p_abnormal) {
    const bool pair = !placement.fixed_pair.empty() && rng.uniform() < placement.two_outlier_fraction &&
                      static_cast<std::size_t>(placement.fixed_pair.back()) <= length;
    if (pair) {
      positions = placement.fixed_pair;
    } else {
      const std::size_t depth = std::min(placement.depth, length);
      positions.push_back(static_cast<int>(rng.index(depth)) + 1);
    }
  }
  ObservableFeatureSet set;
  set.names = {"promotion_tag", "price"};
  set.values.assign(length, std::vector<double>(2, 0.0));
  // One price per stratum of [10, 30], shuffled: quartiles stay spread, so
  // the price column alone never crosses a fence.
  std::vector<std::size_t> stratum(length);
  for (std::size_t i = 0; i < length; ++i) stratum[i] = i;
  rng.shuffle(stratum);
  const double width = 20.0 / static_cast<double>(length);
  for (std::size_t i = 0; i < length; ++i)
    set.values[i][1] = 10.0 + width * (static_cast<double>(stratum[i]) + rng.uniform());
  for (int p : positions) set.values[static_cast<std::size_t>(p - 1)][0] = 1.0;
  if (planted) *planted = positions;
  return set;
}

}  // namespace opbm
