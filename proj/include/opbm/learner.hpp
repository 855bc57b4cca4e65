#pragma once

// Pointwise relevance regressor shared by the EM relevance step, the
// production ranker and the unbiased ranker.
//
// Every training example carries a positive and a negative weight; the loss is
//   sum_i  -pos_i * log f(x_i) - neg_i * log(1 - f(x_i)),
// which covers hard labels, fractional labels and IPS-weighted clicks alike.
// The default learner is gradient boosting of small leaf-wise trees (stumps at
// max_leaves = 2) with Newton leaf values. Leaf values and split gains are
// ratios of weighted sums, so scaling every weight by a common factor leaves
// the fitted model unchanged.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "opbm/common.hpp"

namespace opbm {

enum class LearnerKind { boosted_stumps, logistic_linear };

inline std::string to_string(LearnerKind k) {
  return k == LearnerKind::boosted_stumps ? "boosted_stumps" : "logistic_linear";
}

inline LearnerKind learner_from_string(std::string_view s) {
  if (s == "boosted_stumps") return LearnerKind::boosted_stumps;
  if (s == "logistic_linear") return LearnerKind::logistic_linear;
  throw std::invalid_argument("unknown learner: " + std::string(s));
}

struct RegressionConfig {
  LearnerKind learner = LearnerKind::boosted_stumps;
  int rounds = 100;
  double learning_rate = 0.1;
  int max_leaves = 2;

  void validate() const {
    if (rounds < 1) throw std::invalid_argument("regression: rounds must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("regression: learning_rate must be positive");
    if (max_leaves < 2) throw std::invalid_argument("regression: max_leaves must be >= 2");
  }
};

struct WeightedExample {
  std::span<const double> features;
  double positive = 0.0;
  double negative = 0.0;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;
};

struct RegressionTree {
  std::vector<TreeNode> nodes;

  double evaluate(std::span<const double> x) const {
    int i = 0;
    while (nodes[static_cast<std::size_t>(i)].feature >= 0) {
      const auto& n = nodes[static_cast<std::size_t>(i)];
      i = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(i)].value;
  }
};

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// f(x): a learned map from feature vectors to relevance probabilities.
/// Predictions are always clamped to [clamp_lo, clamp_hi].
class RelevanceModel {
 public:
  static constexpr double kDefaultClamp = 1e-6;
  static constexpr int kFormatVersion = 1;

  RelevanceModel() = default;

  static RelevanceModel constant(double probability, std::size_t feature_dim,
                                 LearnerKind kind = LearnerKind::boosted_stumps) {
    RelevanceModel m;
    m.kind_ = kind;
    m.feature_dim_ = feature_dim;
    const double p = std::clamp(probability, m.clamp_lo_, m.clamp_hi_);
    m.base_score_ = std::log(p / (1.0 - p));
    m.constant_ = true;
    if (kind == LearnerKind::logistic_linear) m.weights_.assign(feature_dim, 0.0);
    return m;
  }

  LearnerKind kind() const { return kind_; }
  std::size_t feature_dim() const { return feature_dim_; }
  double clamp_lo() const { return clamp_lo_; }
  double clamp_hi() const { return clamp_hi_; }
  bool is_constant() const { return constant_; }
  double base_score() const { return base_score_; }
  const std::vector<RegressionTree>& trees() const { return trees_; }
  const std::vector<double>& weights() const { return weights_; }

  /// Raw margin (log-odds).
  double margin(std::span<const double> x) const {
    if (x.size() != feature_dim_) throw std::invalid_argument("model: feature dimension mismatch");
    double z = base_score_;
    if (kind_ == LearnerKind::boosted_stumps) {
      for (const auto& t : trees_) z += t.evaluate(x);
    } else {
      for (std::size_t j = 0; j < weights_.size(); ++j) z += weights_[j] * x[j];
    }
    return z;
  }

  double predict(std::span<const double> x) const { return std::clamp(sigmoid(margin(x)), clamp_lo_, clamp_hi_); }

  void save(std::ostream& out) const {
    out << "opbm-relevance-model " << kFormatVersion << '\n';
    out << "learner " << to_string(kind_) << '\n';
    out << "feature_dim " << feature_dim_ << '\n';
    out << "clamp " << format_double(clamp_lo_) << ' ' << format_double(clamp_hi_) << '\n';
    out << "constant " << (constant_ ? 1 : 0) << '\n';
    out << "base " << format_double(base_score_) << '\n';
    if (kind_ == LearnerKind::boosted_stumps) {
      out << "trees " << trees_.size() << '\n';
      for (const auto& t : trees_) {
        out << "tree " << t.nodes.size() << '\n';
        for (const auto& n : t.nodes)
          out << "node " << n.feature << ' ' << format_double(n.threshold) << ' ' << n.left << ' ' << n.right << ' '
              << format_double(n.value) << '\n';
      }
    } else {
      out << "weights " << weights_.size();
      for (double w : weights_) out << ' ' << format_double(w);
      out << '\n';
    }
  }

  static RelevanceModel load(std::istream& in) {
    RelevanceModel m;
    std::string tag, value;
    int version = 0;
    if (!(in >> tag >> version) || tag != "opbm-relevance-model") throw ParseError("not a relevance model file");
    if (version != kFormatVersion) throw ParseError("unsupported model version " + std::to_string(version));
    auto expect = [&](const char* name) {
      if (!(in >> tag) || tag != name) throw ParseError(std::string("model file: expected '") + name + "'");
    };
    auto read_double = [&] {
      if (!(in >> value)) throw ParseError("model file: truncated");
      return parse_double(value);
    };
    expect("learner");
    in >> value;
    m.kind_ = learner_from_string(value);
    expect("feature_dim");
    in >> m.feature_dim_;
    expect("clamp");
    m.clamp_lo_ = read_double();
    m.clamp_hi_ = read_double();
    expect("constant");
    int c = 0;
    in >> c;
    m.constant_ = c != 0;
    expect("base");
    m.base_score_ = read_double();
    if (m.kind_ == LearnerKind::boosted_stumps) {
      expect("trees");
      std::size_t n_trees = 0;
      in >> n_trees;
      m.trees_.resize(n_trees);
      for (auto& t : m.trees_) {
        expect("tree");
        std::size_t n_nodes = 0;
        in >> n_nodes;
        t.nodes.resize(n_nodes);
        for (auto& n : t.nodes) {
          expect("node");
          in >> n.feature;
          n.threshold = read_double();
          in >> n.left >> n.right;
          n.value = read_double();
          if (n.feature >= static_cast<int>(m.feature_dim_)) throw ParseError("model file: feature out of range");
        }
      }
    } else {
      expect("weights");
      std::size_t n = 0;
      in >> n;
      if (n != m.feature_dim_) throw ParseError("model file: weight count mismatch");
      m.weights_.resize(n);
      for (auto& w : m.weights_) w = read_double();
    }
    if (!in) throw ParseError("model file: truncated");
    return m;
  }

  friend bool operator==(const RelevanceModel& a, const RelevanceModel& b) {
    auto same_trees = [&] {
      if (a.trees_.size() != b.trees_.size()) return false;
      for (std::size_t i = 0; i < a.trees_.size(); ++i) {
        const auto& x = a.trees_[i].nodes;
        const auto& y = b.trees_[i].nodes;
        if (x.size() != y.size()) return false;
        for (std::size_t j = 0; j < x.size(); ++j)
          if (x[j].feature != y[j].feature || x[j].threshold != y[j].threshold || x[j].left != y[j].left ||
              x[j].right != y[j].right || x[j].value != y[j].value)
            return false;
      }
      return true;
    };
    return a.kind_ == b.kind_ && a.feature_dim_ == b.feature_dim_ && a.base_score_ == b.base_score_ &&
           a.constant_ == b.constant_ && a.weights_ == b.weights_ && same_trees();
  }

 private:
  friend RelevanceModel fit_relevance_model(std::span<const WeightedExample>, std::size_t,
                                            const RegressionConfig&);

  LearnerKind kind_ = LearnerKind::boosted_stumps;
  std::size_t feature_dim_ = 0;
  double clamp_lo_ = kDefaultClamp;
  double clamp_hi_ = 1.0 - kDefaultClamp;
  double base_score_ = 0.0;
  bool constant_ = false;
  std::vector<RegressionTree> trees_;
  std::vector<double> weights_;
};

namespace detail {

struct SplitCandidate {
  double gain = 0.0;
  int feature = -1;
  double threshold = 0.0;
};

class TreeGrower {
 public:
  // Features are bucketed once into at most kMaxBins quantile bins; splits are
  // searched on bin boundaries (exact when a feature has few distinct values).
  static constexpr std::size_t kMaxBins = 256;

  TreeGrower(std::span<const WeightedExample> examples, std::size_t feature_dim)
      : examples_(examples), dim_(feature_dim), bins_(examples.size() * feature_dim), cuts_(feature_dim) {
    const std::size_t n = examples_.size();
    std::vector<double> values(n);
    for (std::size_t f = 0; f < dim_; ++f) {
      for (std::size_t i = 0; i < n; ++i) values[i] = examples_[i].features[f];
      std::sort(values.begin(), values.end());
      values.erase(std::unique(values.begin(), values.end()), values.end());
      // upper[b] is the largest value falling into bin b.
      std::vector<double> upper;
      if (values.size() <= kMaxBins) {
        upper = values;
      } else {
        for (std::size_t b = 1; b <= kMaxBins; ++b) {
          const double v = values[b * values.size() / kMaxBins - 1];
          if (upper.empty() || v > upper.back()) upper.push_back(v);
        }
      }
      auto& cuts = cuts_[f];
      for (std::size_t b = 0; b + 1 < upper.size(); ++b) {
        const double next = *std::upper_bound(values.begin(), values.end(), upper[b]);
        cuts.push_back(upper[b] + 0.5 * (next - upper[b]));
      }
      for (std::size_t i = 0; i < n; ++i) {
        const double v = examples_[i].features[f];
        bins_[i * dim_ + f] =
            static_cast<std::uint8_t>(std::lower_bound(upper.begin(), upper.end(), v) - upper.begin());
      }
    }
    leaf_of_.assign(n, 0);
  }

  RegressionTree grow(const std::vector<double>& grad, const std::vector<double>& hess, int max_leaves,
                      double learning_rate) {
    RegressionTree tree;
    tree.nodes.push_back({});
    std::fill(leaf_of_.begin(), leaf_of_.end(), 0);
    std::vector<int> leaves{0};
    std::vector<SplitCandidate> best{best_split(0, grad, hess)};
    while (static_cast<int>(leaves.size()) < max_leaves) {
      std::size_t pick = leaves.size();
      for (std::size_t i = 0; i < leaves.size(); ++i)
        if (best[i].feature >= 0 && (pick == leaves.size() || best[i].gain > best[pick].gain)) pick = i;
      if (pick == leaves.size()) break;
      const int node = leaves[pick];
      const auto split = best[pick];
      const int left = static_cast<int>(tree.nodes.size());
      const int right = left + 1;
      tree.nodes.push_back({});
      tree.nodes.push_back({});
      auto& nd = tree.nodes[static_cast<std::size_t>(node)];
      nd.feature = split.feature;
      nd.threshold = split.threshold;
      nd.left = left;
      nd.right = right;
      for (std::size_t i = 0; i < examples_.size(); ++i)
        if (leaf_of_[i] == node)
          leaf_of_[i] = examples_[i].features[static_cast<std::size_t>(split.feature)] <= split.threshold ? left : right;
      leaves[pick] = left;
      leaves.push_back(right);
      const bool more = static_cast<int>(leaves.size()) < max_leaves;
      best[pick] = more ? best_split(left, grad, hess) : detail::SplitCandidate{};
      best.push_back(more ? best_split(right, grad, hess) : detail::SplitCandidate{});
    }
    // Newton leaf values.
    std::vector<double> g(tree.nodes.size(), 0.0), h(tree.nodes.size(), 0.0);
    for (std::size_t i = 0; i < examples_.size(); ++i) {
      g[static_cast<std::size_t>(leaf_of_[i])] += grad[i];
      h[static_cast<std::size_t>(leaf_of_[i])] += hess[i];
    }
    for (int leaf : leaves) {
      auto idx = static_cast<std::size_t>(leaf);
      tree.nodes[idx].value = h[idx] > 0.0 ? -learning_rate * g[idx] / h[idx] : 0.0;
    }
    return tree;
  }

  const std::vector<int>& leaf_assignment() const { return leaf_of_; }

 private:
  SplitCandidate best_split(int leaf, const std::vector<double>& grad, const std::vector<double>& hess) const {
    std::vector<double> hg(dim_ * kMaxBins, 0.0), hh(dim_ * kMaxBins, 0.0);
    double total_g = 0.0, total_h = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < examples_.size(); ++i) {
      if (leaf_of_[i] != leaf) continue;
      total_g += grad[i];
      total_h += hess[i];
      ++count;
      const std::uint8_t* row = &bins_[i * dim_];
      for (std::size_t f = 0; f < dim_; ++f) {
        hg[f * kMaxBins + row[f]] += grad[i];
        hh[f * kMaxBins + row[f]] += hess[i];
      }
    }
    SplitCandidate best;
    if (count < 2 || !(total_h > 0.0)) return best;
    const double parent = total_g * total_g / total_h;
    const double min_h = 1e-9 * total_h;
    for (std::size_t f = 0; f < dim_; ++f) {
      double gl = 0.0, hl = 0.0;
      for (std::size_t b = 0; b < cuts_[f].size(); ++b) {
        gl += hg[f * kMaxBins + b];
        hl += hh[f * kMaxBins + b];
        const double hr = total_h - hl;
        if (!(hl > min_h && hr > min_h)) continue;
        const double gr = total_g - gl;
        const double gain = gl * gl / hl + gr * gr / hr - parent;
        if (gain > best.gain && gain > 1e-12 * parent) {
          best.gain = gain;
          best.feature = static_cast<int>(f);
          best.threshold = cuts_[f][b];
        }
      }
    }
    return best;
  }

  std::span<const WeightedExample> examples_;
  std::size_t dim_;
  std::vector<std::uint8_t> bins_;          // example-major, dim_ entries per example
  std::vector<std::vector<double>> cuts_;   // split thresholds between consecutive bins
  std::vector<int> leaf_of_;
};

}  // namespace detail

/// Fits f(x) by minimizing the weighted cross-entropy of `examples`.
/// Falls back to a constant model (with a warning) when one class has no
/// weight. Deterministic: no randomness is involved.
inline RelevanceModel fit_relevance_model(std::span<const WeightedExample> examples, std::size_t feature_dim,
                                          const RegressionConfig& config) {
  config.validate();
  double pos = 0.0, neg = 0.0;
  for (const auto& e : examples) {
    if (e.features.size() != feature_dim) throw std::invalid_argument("fit: feature dimension mismatch");
    if (!(e.positive >= 0.0) || !(e.negative >= 0.0) || !std::isfinite(e.positive) || !std::isfinite(e.negative))
      throw std::invalid_argument("fit: example weights must be finite and non-negative");
    pos += e.positive;
    neg += e.negative;
  }
  if (!(pos > 0.0) || !(neg > 0.0)) {
    warn("relevance fit: all labels identical, returning a constant model");
    return RelevanceModel::constant(pos > 0.0 ? 1.0 : 0.0, feature_dim, config.learner);
  }

  RelevanceModel model;
  model.kind_ = config.learner;
  model.feature_dim_ = feature_dim;
  model.base_score_ = std::log(pos / neg);
  const std::size_t n = examples.size();
  std::vector<double> margin(n, model.base_score_);

  if (config.learner == LearnerKind::boosted_stumps) {
    detail::TreeGrower grower(examples, feature_dim);
    std::vector<double> grad(n), hess(n);
    for (int round = 0; round < config.rounds; ++round) {
      for (std::size_t i = 0; i < n; ++i) {
        const double p = sigmoid(margin[i]);
        const double w = examples[i].positive + examples[i].negative;
        grad[i] = w * p - examples[i].positive;
        hess[i] = w * p * (1.0 - p);
      }
      auto tree = grower.grow(grad, hess, config.max_leaves, config.learning_rate);
      if (tree.nodes.size() == 1) break;  // no split improves the loss
      const auto& leaf_of = grower.leaf_assignment();
      for (std::size_t i = 0; i < n; ++i) margin[i] += tree.nodes[static_cast<std::size_t>(leaf_of[i])].value;
      model.trees_.push_back(std::move(tree));
    }
  } else {
    // Full-batch gradient descent on the mean loss.
    model.weights_.assign(feature_dim, 0.0);
    const double total = pos + neg;
    std::vector<double> grad(feature_dim);
    for (int round = 0; round < config.rounds; ++round) {
      std::fill(grad.begin(), grad.end(), 0.0);
      double grad_bias = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& e = examples[i];
        double z = model.base_score_;
        for (std::size_t j = 0; j < feature_dim; ++j) z += model.weights_[j] * e.features[j];
        const double r = (e.positive + e.negative) * sigmoid(z) - e.positive;
        grad_bias += r;
        for (std::size_t j = 0; j < feature_dim; ++j) grad[j] += r * e.features[j];
      }
      model.base_score_ -= config.learning_rate * grad_bias / total;
      for (std::size_t j = 0; j < feature_dim; ++j) model.weights_[j] -= config.learning_rate * grad[j] / total;
    }
  }
  return model;
}

}  // namespace opbm
