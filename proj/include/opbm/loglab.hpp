#pragma once

// Observational analyses of click logs: CTR per rank split by outlier status,
// CTR curves grouped by outlier position, and per-page class summaries.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "opbm/clicksim.hpp"
#include "opbm/common.hpp"
#include "opbm/eval.hpp"

namespace opbm {

struct CtrCell {
  std::uint64_t clicks = 0;
  std::uint64_t impressions = 0;

  double ctr() const { return opbm::ctr(clicks, impressions); }

  void add(const ClickRecord& r) {
    clicks += r.clicked ? 1 : 0;
    impressions += r.impression ? 1 : 0;
  }
};

struct CtrRow {
  int rank = 0;
  std::string group;
  CtrCell cell;
};

struct CtrBreakdown {
  std::vector<CtrRow> rows;                    // sorted by (group, rank)
  std::vector<std::string> suppressed_groups;  // groups below the support threshold

  std::vector<CtrRow> series(std::string_view group) const {
    std::vector<CtrRow> out;
    for (const auto& r : rows)
      if (r.group == group) out.push_back(r);
    return out;
  }

  std::vector<std::string> groups() const {
    std::vector<std::string> out;
    for (const auto& r : rows)
      if (std::find(out.begin(), out.end(), r.group) == out.end()) out.push_back(r.group);
    return out;
  }

  /// `rank,group,clicks,impressions,ctr`.
  void write_csv(std::ostream& out) const {
    out << "rank,group,clicks,impressions,ctr\n";
    for (const auto& r : rows)
      out << r.rank << ',' << r.group << ',' << r.cell.clicks << ',' << r.cell.impressions << ','
          << format_double(r.cell.ctr()) << '\n';
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write CTR table: " + path.string());
    write_csv(out);
  }
};

namespace detail {

inline CtrBreakdown rows_from(const std::map<std::pair<std::string, int>, CtrCell>& cells) {
  CtrBreakdown out;
  for (const auto& [key, cell] : cells) out.rows.push_back({key.second, key.first, cell});
  return out;
}

inline std::string group_name(int outlier_rank) { return "outlier@" + std::to_string(outlier_rank); }

}  // namespace detail

/// Per-rank CTR in three series: `outlier` (the item at that rank is an
/// outlier of its list), `non_outlier` (items of normal rankings) and
/// `abnormal_non_outlier` (the remaining items of abnormal rankings).
inline CtrBreakdown ctr_per_position(const ClickLog& log) {
  std::map<std::pair<std::string, int>, CtrCell> cells;
  for (const auto& r : log.records) {
    const auto& sig = log.signature_of(r);
    const char* group = sig.empty() ? "non_outlier" : sig.contains(r.rank) ? "outlier" : "abnormal_non_outlier";
    cells[{group, r.rank}].add(r);
  }
  return detail::rows_from(cells);
}

/// One CTR-by-rank curve per single-outlier position (`outlier@k`) whose
/// sessions make up at least `min_support_fraction` of all sessions, plus the
/// `normal` curve of rankings without outliers. Lists with several outliers
/// are not grouped.
inline CtrBreakdown ctr_by_outlier_group(const ClickLog& log, double min_support_fraction = 0.01) {
  if (!(min_support_fraction >= 0.0 && min_support_fraction <= 1.0))
    throw std::invalid_argument("min_support_fraction outside [0,1]");
  std::vector<std::uint64_t> sessions_per_sig(log.signatures.size(), 0);
  std::uint64_t sessions = 0;
  bool first = true;
  std::uint32_t last = 0;
  for (const auto& r : log.records) {
    if (first || r.session != last) {
      ++sessions_per_sig[r.signature];
      ++sessions;
      last = r.session;
      first = false;
    }
  }
  std::vector<bool> keep(log.signatures.size(), false);
  CtrBreakdown out;
  std::vector<int> suppressed;
  for (std::size_t s = 0; s < log.signatures.size(); ++s) {
    const auto& sig = log.signatures[s];
    if (sig.empty()) {
      keep[s] = true;
      continue;
    }
    if (sig.positions.size() != 1 || sessions_per_sig[s] == 0) continue;
    const double support = static_cast<double>(sessions_per_sig[s]) / static_cast<double>(sessions);
    if (support >= min_support_fraction) keep[s] = true;
    else suppressed.push_back(sig.positions.front());
  }
  std::map<std::pair<std::string, int>, CtrCell> cells;
  for (const auto& r : log.records) {
    if (!keep[r.signature]) continue;
    const auto& sig = log.signature_of(r);
    cells[{sig.empty() ? std::string("normal") : detail::group_name(sig.positions.front()), r.rank}].add(r);
  }
  out.rows = detail::rows_from(cells).rows;
  std::sort(suppressed.begin(), suppressed.end());
  for (int k : suppressed) out.suppressed_groups.push_back(detail::group_name(k));
  return out;
}

struct ClassAverages {
  double avg_clicks = 0.0;
  double avg_impressions = 0.0;
  double avg_ctr = 0.0;
  std::uint64_t clicks = 0;
  std::uint64_t impressions = 0;
  std::uint64_t items = 0;
};

struct OutlierSummary {
  std::size_t abnormal_pages = 0;
  ClassAverages outlier;
  ClassAverages non_outlier;
  ClassAverages total;
  ClassAverages normal;  // items of normal rankings, outside the comparison
  std::optional<TTestResult> clicks_test;
  std::optional<TTestResult> impressions_test;
  std::optional<TTestResult> ctr_test;
  std::uint64_t log_clicks = 0;

  nlohmann::ordered_json to_json() const {
    auto cls = [](const ClassAverages& c) {
      nlohmann::ordered_json j;
      j["avg_clicks"] = c.avg_clicks;
      j["avg_impressions"] = c.avg_impressions;
      j["avg_ctr"] = c.avg_ctr;
      j["clicks"] = c.clicks;
      j["impressions"] = c.impressions;
      j["items"] = c.items;
      return j;
    };
    auto test = [](const std::optional<TTestResult>& t) {
      if (!t) return nlohmann::ordered_json(nullptr);
      nlohmann::ordered_json j;
      j["t"] = std::isfinite(t->t) ? nlohmann::ordered_json(t->t) : nlohmann::ordered_json(t->t > 0 ? "inf" : "-inf");
      j["p"] = t->p;
      j["df"] = t->df;
      return j;
    };
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["abnormal_pages"] = abnormal_pages;
    j["log_clicks"] = log_clicks;
    j["outlier"] = cls(outlier);
    j["non_outlier"] = cls(non_outlier);
    j["total"] = cls(total);
    j["normal"] = cls(normal);
    j["t_test"]["clicks"] = test(clicks_test);
    j["t_test"]["impressions"] = test(impressions_test);
    j["t_test"]["ctr"] = test(ctr_test);
    return j;
  }
};

/// Outlier vs non-outlier items of abnormal rankings. For every abnormal page
/// (session) each class gets its mean clicks, mean impressions and CTR per
/// item; the reported figures average those page means, and the t-tests
/// compare the per-page samples of the two classes. Tests need at least two
/// abnormal pages and are omitted otherwise.
inline OutlierSummary outlier_vs_nonoutlier_summary(const ClickLog& log, bool welch = false) {
  OutlierSummary out;
  std::vector<double> clicks[2], impressions[2], ctrs[2];
  std::vector<double> total_clicks, total_impressions, total_ctr;
  std::vector<double> normal_clicks, normal_impressions, normal_ctr;
  ClassAverages* classes[2] = {&out.non_outlier, &out.outlier};

  std::size_t i = 0;
  const auto& recs = log.records;
  while (i < recs.size()) {
    std::size_t j = i;
    while (j < recs.size() && recs[j].session == recs[i].session) ++j;
    for (std::size_t t = i; t < j; ++t) out.log_clicks += recs[t].clicked ? 1 : 0;
    const auto& sig = log.signature_of(recs[i]);
    if (!sig.empty()) {
      ++out.abnormal_pages;
      CtrCell cell[2];
      std::uint64_t items[2] = {0, 0};
      for (std::size_t t = i; t < j; ++t) {
        const int c = sig.contains(recs[t].rank) ? 1 : 0;
        cell[c].add(recs[t]);
        ++items[c];
      }
      for (int c = 0; c < 2; ++c) {
        classes[c]->clicks += cell[c].clicks;
        classes[c]->impressions += cell[c].impressions;
        classes[c]->items += items[c];
        if (items[c] == 0) continue;
        const auto n = static_cast<double>(items[c]);
        clicks[c].push_back(static_cast<double>(cell[c].clicks) / n);
        impressions[c].push_back(static_cast<double>(cell[c].impressions) / n);
        ctrs[c].push_back(cell[c].ctr());
      }
      CtrCell all;
      all.clicks = cell[0].clicks + cell[1].clicks;
      all.impressions = cell[0].impressions + cell[1].impressions;
      const auto n = static_cast<double>(items[0] + items[1]);
      total_clicks.push_back(static_cast<double>(all.clicks) / n);
      total_impressions.push_back(static_cast<double>(all.impressions) / n);
      total_ctr.push_back(all.ctr());
      out.total.clicks += all.clicks;
      out.total.impressions += all.impressions;
      out.total.items += items[0] + items[1];
    } else {
      CtrCell cell;
      for (std::size_t t = i; t < j; ++t) cell.add(recs[t]);
      out.normal.clicks += cell.clicks;
      out.normal.impressions += cell.impressions;
      out.normal.items += j - i;
      normal_clicks.push_back(static_cast<double>(cell.clicks) / static_cast<double>(j - i));
      normal_impressions.push_back(static_cast<double>(cell.impressions) / static_cast<double>(j - i));
      normal_ctr.push_back(cell.ctr());
    }
    i = j;
  }
  if (out.abnormal_pages == 0)
    throw std::invalid_argument(
        "outlier summary: the log has no abnormal rankings; run outlier detection or supply signatures first");

  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  for (int c = 0; c < 2; ++c) {
    classes[c]->avg_clicks = mean(clicks[c]);
    classes[c]->avg_impressions = mean(impressions[c]);
    classes[c]->avg_ctr = mean(ctrs[c]);
  }
  out.total.avg_clicks = mean(total_clicks);
  out.total.avg_impressions = mean(total_impressions);
  out.total.avg_ctr = mean(total_ctr);
  out.normal.avg_clicks = mean(normal_clicks);
  out.normal.avg_impressions = mean(normal_impressions);
  out.normal.avg_ctr = mean(normal_ctr);
  if (clicks[0].size() >= 2 && clicks[1].size() >= 2) {
    out.clicks_test = t_test_two_sample(clicks[1], clicks[0], welch);
    out.impressions_test = t_test_two_sample(impressions[1], impressions[0], welch);
    out.ctr_test = t_test_two_sample(ctrs[1], ctrs[0], welch);
  }
  return out;
}

}  // namespace opbm
