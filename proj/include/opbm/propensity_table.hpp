#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "opbm/common.hpp"
#include "opbm/outliers.hpp"

namespace opbm {

/// Examination propensities theta indexed by (rank, outlier signature).
/// The empty-signature column holds the plain position bias theta_k.
class PropensityTable {
 public:
  struct Cell {
    int rank;
    OutlierSignature signature;
    auto operator<=>(const Cell& other) const {
      if (auto c = signature <=> other.signature; c != 0) return c;
      return rank <=> other.rank;
    }
    bool operator==(const Cell& other) const { return rank == other.rank && signature == other.signature; }
  };

  PropensityTable() = default;
  explicit PropensityTable(int depth) : depth_(depth) {}

  int depth() const { return depth_; }
  std::size_t size() const { return cells_.size(); }
  const std::map<Cell, double>& cells() const { return cells_; }

  void set(int rank, const OutlierSignature& sig, double theta) {
    if (rank < 1) throw std::invalid_argument("propensity table: ranks are 1-based");
    if (!(theta >= 0.0 && theta <= 1.0)) throw std::invalid_argument("propensity table: value outside [0,1]");
    cells_[{rank, plain(sig)}] = theta;
    depth_ = std::max(depth_, rank);
  }

  std::optional<double> find(int rank, const OutlierSignature& sig) const {
    auto it = cells_.find({rank, plain(sig)});
    if (it == cells_.end()) return std::nullopt;
    return it->second;
  }

  double at(int rank, const OutlierSignature& sig) const {
    auto v = find(rank, sig);
    if (!v) throw std::out_of_range("uncovered signature: rank " + std::to_string(rank) + " signature " + sig.encode());
    return *v;
  }

  bool contains(int rank, const OutlierSignature& sig) const { return find(rank, sig).has_value(); }

  /// Distinct signatures present, ascending (empty first).
  std::vector<OutlierSignature> signatures() const {
    std::vector<OutlierSignature> out;
    for (const auto& [cell, _] : cells_)
      if (out.empty() || !(out.back() == cell.signature)) out.push_back(cell.signature);
    return out;
  }

  /// Table restricted to the empty-signature column.
  PropensityTable position_column() const {
    PropensityTable out(depth_);
    for (const auto& [cell, v] : cells_)
      if (cell.signature.empty()) out.cells_[cell] = v;
    return out;
  }

  /// Multiplies every cell by `factor` without range checks (used to probe
  /// scale invariance of downstream consumers).
  PropensityTable scaled(double factor) const {
    PropensityTable out(depth_);
    for (const auto& [cell, v] : cells_) out.cells_[cell] = v * factor;
    return out;
  }

  /// Throws unless the empty-signature column covers ranks 1..depth.
  void validate() const {
    for (int k = 1; k <= depth_; ++k)
      if (!contains(k, {}))
        throw std::invalid_argument("propensity table: empty-signature column missing rank " + std::to_string(k));
  }

  void save(std::ostream& out) const {
    out << "rank,signature,theta\n";
    for (const auto& [cell, v] : cells_) out << cell.rank << ',' << cell.signature.encode() << ',' << format_double(v) << '\n';
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write propensity table: " + path.string());
    save(out);
  }

  static PropensityTable parse(std::istream& in) {
    PropensityTable table;
    std::string line;
    std::size_t lineno = 0;
    bool header = false;
    while (std::getline(in, line)) {
      ++lineno;
      auto view = trim(line);
      if (view.empty()) continue;
      if (!header) {
        if (view != "rank,signature,theta") throw ParseError("propensity table header must be rank,signature,theta", lineno);
        header = true;
        continue;
      }
      auto cols = split_view(view, ',');
      if (cols.size() != 3) throw ParseError("propensity table rows need 3 columns", lineno);
      const int rank = parse_int<int>(trim(cols[0]), lineno);
      auto sig = OutlierSignature::decode(cols[1], lineno);
      const double theta = parse_double(trim(cols[2]), lineno);
      if (rank < 1) throw ParseError("rank must be >= 1", lineno);
      if (!(theta >= 0.0 && theta <= 1.0)) throw ParseError("theta outside [0,1]", lineno);
      table.set(rank, sig, theta);
    }
    if (!header) throw ParseError("propensity table is empty");
    try {
      table.validate();
    } catch (const std::invalid_argument& e) {
      throw ParseError(e.what());
    }
    return table;
  }

  friend bool operator==(const PropensityTable&, const PropensityTable&) = default;

 private:
  static OutlierSignature plain(const OutlierSignature& sig) { return OutlierSignature{sig.positions, false}; }

  int depth_ = 0;
  std::map<Cell, double> cells_;
};

inline PropensityTable load_propensity_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open propensity table: " + path.string());
  return PropensityTable::parse(in);
}

}  // namespace opbm
