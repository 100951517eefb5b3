#include "gridstab/tree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "gridstab/error.hpp"
#include "gridstab/random.hpp"

namespace gridstab::trees {

namespace {

constexpr int kFormatVersion = 1;

// Sufficient statistics of a weighted node. For classification `sum` holds the
// class-0 and class-1 weights; for regression sum[0] is the weighted target sum.
struct NodeStats {
  double weight = 0.0;
  std::array<double, 2> sum{};
  double y_min = std::numeric_limits<double>::infinity();
  double y_max = -std::numeric_limits<double>::infinity();

  // W * impurity is `weight - score` (Gini) or `sum y^2 - score` (variance); only
  // differences of score matter for split selection.
  double score(Task task) const {
    if (weight <= 0.0) return 0.0;
    if (task == Task::Classification) return (sum[0] * sum[0] + sum[1] * sum[1]) / weight;
    return sum[0] * sum[0] / weight;
  }
};

struct SplitChoice {
  int feature = -1;
  double threshold = 0.0;
  double gain = -std::numeric_limits<double>::infinity();
  std::size_t left_count = 0;  // histogram mode: bin index of the split
};

void require_shapes(const Matrix& x, std::size_t n_targets, std::span<const double> weights) {
  if (x.rows == 0) throw Error(ErrorCode::EmptyInput, "no training rows");
  if (x.cols == 0) throw Error(ErrorCode::ShapeMismatch, "no feature columns");
  if (n_targets != x.rows) {
    throw Error(ErrorCode::ShapeMismatch, std::to_string(x.rows) + " rows but " +
                                              std::to_string(n_targets) + " targets");
  }
  if (!weights.empty() && weights.size() != x.rows) {
    throw Error(ErrorCode::ShapeMismatch, "weight vector length differs from row count");
  }
}

std::vector<std::size_t> choose_features(std::size_t n_features, int per_split, Rng& rng) {
  std::vector<std::size_t> all(n_features);
  std::iota(all.begin(), all.end(), 0);
  if (per_split <= 0 || static_cast<std::size_t>(per_split) >= n_features) return all;
  const auto k = static_cast<std::size_t>(per_split);
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(all[i], all[i + rng.below(n_features - i)]);
  }
  all.resize(k);
  std::sort(all.begin(), all.end());
  return all;
}

double midpoint(double lo, double hi) {
  const double mid = lo + 0.5 * (hi - lo);
  return mid < hi ? mid : lo;
}

// Depth-first builder over per-feature presorted row lists. A node owns the
// range [lo, hi) of every list; splitting stably partitions each range.
class ExactBuilder {
 public:
  struct Entry {
    double x;
    std::uint32_t row;
  };

  ExactBuilder(const Matrix& x, std::span<const double> y, std::span<const double> w, Task task,
               const TreeParams& params, const ColumnOrder& presorted)
      : x_(x), y_(y), w_(w), task_(task), params_(params), rng_(params.seed), goes_left_(x.rows, 0) {
    order_.resize(x.cols);
    for (std::size_t f = 0; f < x.cols; ++f) {
      auto& dst = order_[f];
      dst.reserve(x.rows);
      for (std::uint32_t row : presorted.order[f]) {
        if (weight(row) > 0.0) dst.push_back({x(row, f), row});
      }
    }
    scratch_.resize(order_[0].size());
  }

  DecisionTree build() {
    if (order_[0].empty()) throw Error(ErrorCode::EmptyInput, "all sample weights are zero");
    grow(0, order_[0].size(), 0);
    return DecisionTree(task_, x_.cols, params_.max_depth, std::move(nodes_));
  }

  // Leaf value reached by each training row; only valid after build().
  std::vector<double> leaf_values_by_row(const std::vector<TreeNode>& nodes) const {
    std::vector<double> out(x_.rows, 0.0);
    for (const auto& [lo, hi, id] : leaf_ranges_) {
      for (std::size_t i = lo; i < hi; ++i) out[order_[0][i].row] = nodes[static_cast<std::size_t>(id)].value;
    }
    return out;
  }

 private:
  struct LeafRange {
    std::size_t lo, hi;
    int id;
  };

  double weight(std::uint32_t row) const { return w_.empty() ? 1.0 : w_[row]; }

  void accumulate(NodeStats& s, std::uint32_t row) const {
    const double wt = weight(row);
    s.weight += wt;
    if (task_ == Task::Classification) {
      s.sum[y_[row] > 0.5 ? 1 : 0] += wt;
    } else {
      s.sum[0] += wt * y_[row];
    }
  }

  int make_leaf(std::size_t lo, std::size_t hi, int id) {
    leaf_ranges_.push_back({lo, hi, id});
    return id;
  }

  int grow(std::size_t lo, std::size_t hi, int depth) {
    NodeStats stats;
    for (std::size_t i = lo; i < hi; ++i) {
      const std::uint32_t row = order_[0][i].row;
      accumulate(stats, row);
      stats.y_min = std::min(stats.y_min, y_[row]);
      stats.y_max = std::max(stats.y_max, y_[row]);
    }

    const int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    {
      TreeNode& node = nodes_.back();
      node.weight = stats.weight;
      if (task_ == Task::Classification) {
        node.counts = stats.sum;
      } else {
        node.value = stats.sum[0] / stats.weight;
      }
    }

    const bool pure = stats.y_min == stats.y_max;
    const bool depth_ok = params_.max_depth < 0 || depth < params_.max_depth;
    if (pure || !depth_ok || stats.weight < 2.0 * params_.min_samples_leaf) return make_leaf(lo, hi, id);

    const SplitChoice best = find_split(lo, hi, stats);
    if (best.feature < 0) return make_leaf(lo, hi, id);

    const auto f = static_cast<std::size_t>(best.feature);
    std::size_t n_left = 0;
    for (std::size_t i = lo; i < hi; ++i) {
      const Entry& e = order_[f][i];
      goes_left_[e.row] = e.x <= best.threshold ? 1 : 0;
      n_left += goes_left_[e.row];
    }
    for (auto& list : order_) {
      std::size_t l = lo, r = 0;
      for (std::size_t i = lo; i < hi; ++i) {
        const Entry e = list[i];
        if (goes_left_[e.row]) {
          list[l++] = e;
        } else {
          scratch_[r++] = e;
        }
      }
      std::copy(scratch_.begin(), scratch_.begin() + static_cast<std::ptrdiff_t>(r),
                list.begin() + static_cast<std::ptrdiff_t>(l));
    }

    nodes_[id].feature = best.feature;
    nodes_[id].threshold = best.threshold;
    nodes_[id].impurity_decrease = std::max(0.0, best.gain);
    const int left = grow(lo, lo + n_left, depth + 1);
    const int right = grow(lo + n_left, hi, depth + 1);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  SplitChoice find_split(std::size_t lo, std::size_t hi, const NodeStats& total) {
    SplitChoice best;
    const double parent_score = total.score(task_);
    for (std::size_t f : choose_features(x_.cols, params_.features_per_split, rng_)) {
      const auto& list = order_[f];
      NodeStats left;
      for (std::size_t i = lo; i + 1 < hi; ++i) {
        accumulate(left, list[i].row);
        const double xv = list[i].x;
        const double xn = list[i + 1].x;
        if (!(xv < xn)) continue;
        const double right_w = total.weight - left.weight;
        if (left.weight < params_.min_samples_leaf || right_w < params_.min_samples_leaf) continue;
        NodeStats right;
        right.weight = right_w;
        right.sum = {total.sum[0] - left.sum[0], total.sum[1] - left.sum[1]};
        const double gain = left.score(task_) + right.score(task_) - parent_score;
        if (gain > best.gain) {
          best.gain = gain;
          best.feature = static_cast<int>(f);
          best.threshold = midpoint(xv, xn);
        }
      }
    }
    return best;
  }

  const Matrix& x_;
  std::span<const double> y_;
  std::span<const double> w_;
  Task task_;
  TreeParams params_;
  Rng rng_;
  std::vector<std::vector<Entry>> order_;
  std::vector<std::uint8_t> goes_left_;
  std::vector<Entry> scratch_;
  std::vector<TreeNode> nodes_;
  std::vector<LeafRange> leaf_ranges_;
};

// Equal-frequency binning of each feature. Bin edges are midpoints between
// adjacent distinct training values.
struct BinMapper {
  std::vector<std::vector<double>> edges;          // per feature, ascending
  std::vector<std::vector<std::uint16_t>> codes;   // per feature, per row

  static BinMapper build(const Matrix& x, const ColumnOrder& order, int n_bins) {
    BinMapper m;
    m.edges.resize(x.cols);
    m.codes.assign(x.cols, std::vector<std::uint16_t>(x.rows));
    const std::size_t n = x.rows;
    for (std::size_t f = 0; f < x.cols; ++f) {
      const auto& ord = order.order[f];
      auto& e = m.edges[f];
      for (int k = 1; k < n_bins; ++k) {
        std::size_t r = static_cast<std::size_t>(k) * n / static_cast<std::size_t>(n_bins);
        if (r == 0 || r >= n) continue;
        const double before = x(ord[r - 1], f);
        while (r < n && !(x(ord[r], f) > before)) ++r;
        if (r >= n) break;
        const double edge = midpoint(before, x(ord[r], f));
        if (e.empty() || edge > e.back()) e.push_back(edge);
      }
      for (std::size_t row = 0; row < n; ++row) {
        const auto it = std::lower_bound(e.begin(), e.end(), x(row, f));
        m.codes[f][row] = static_cast<std::uint16_t>(it - e.begin());
      }
    }
    return m;
  }
};

// Regression trees over binned features (histogram split search).
class HistogramBuilder {
 public:
  HistogramBuilder(const BinMapper& bins, std::span<const double> y, const TreeParams& params)
      : bins_(bins), y_(y), params_(params), rows_(y.size()) {
    std::iota(rows_.begin(), rows_.end(), 0U);
    scratch_.resize(rows_.size());
  }

  DecisionTree build() {
    grow(0, rows_.size(), 0);
    return DecisionTree(Task::Regression, bins_.edges.size(), params_.max_depth, std::move(nodes_));
  }

  std::vector<double> leaf_values_by_row(const std::vector<TreeNode>& nodes) const {
    std::vector<double> out(rows_.size(), 0.0);
    for (const auto& [lo, hi, id] : leaf_ranges_) {
      for (std::size_t i = lo; i < hi; ++i) out[rows_[i]] = nodes[static_cast<std::size_t>(id)].value;
    }
    return out;
  }

 private:
  struct LeafRange {
    std::size_t lo, hi;
    int id;
  };

  int make_leaf(std::size_t lo, std::size_t hi, int id) {
    leaf_ranges_.push_back({lo, hi, id});
    return id;
  }

  int grow(std::size_t lo, std::size_t hi, int depth) {
    double sum = 0.0, y_min = std::numeric_limits<double>::infinity(), y_max = -y_min;
    for (std::size_t i = lo; i < hi; ++i) {
      const double v = y_[rows_[i]];
      sum += v;
      y_min = std::min(y_min, v);
      y_max = std::max(y_max, v);
    }
    const double weight = static_cast<double>(hi - lo);
    const int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    nodes_.back().weight = weight;
    nodes_.back().value = sum / weight;

    const bool depth_ok = params_.max_depth < 0 || depth < params_.max_depth;
    if (y_min == y_max || !depth_ok || weight < 2.0 * params_.min_samples_leaf) return make_leaf(lo, hi, id);

    const double parent_score = sum * sum / weight;
    SplitChoice best;
    std::vector<double> hist_w, hist_s;
    for (std::size_t f = 0; f < bins_.edges.size(); ++f) {
      const std::size_t n_bins = bins_.edges[f].size() + 1;
      if (n_bins < 2) continue;
      hist_w.assign(n_bins, 0.0);
      hist_s.assign(n_bins, 0.0);
      const auto& codes = bins_.codes[f];
      for (std::size_t i = lo; i < hi; ++i) {
        const std::uint32_t row = rows_[i];
        hist_w[codes[row]] += 1.0;
        hist_s[codes[row]] += y_[row];
      }
      double lw = 0.0, ls = 0.0;
      for (std::size_t b = 0; b + 1 < n_bins; ++b) {
        lw += hist_w[b];
        ls += hist_s[b];
        if (hist_w[b] == 0.0 && b > 0) {
          // An empty bin repeats the previous candidate; skip it.
          continue;
        }
        const double rw = weight - lw;
        if (lw < params_.min_samples_leaf || rw < params_.min_samples_leaf) continue;
        const double rs = sum - ls;
        const double gain = ls * ls / lw + rs * rs / rw - parent_score;
        if (gain > best.gain) {
          best.gain = gain;
          best.feature = static_cast<int>(f);
          best.left_count = b;
          best.threshold = bins_.edges[f][b];
        }
      }
    }
    if (best.feature < 0) return make_leaf(lo, hi, id);

    const auto& codes = bins_.codes[static_cast<std::size_t>(best.feature)];
    std::size_t l = lo, r = 0;
    for (std::size_t i = lo; i < hi; ++i) {
      const std::uint32_t row = rows_[i];
      if (codes[row] <= best.left_count) {
        rows_[l++] = row;
      } else {
        scratch_[r++] = row;
      }
    }
    std::copy(scratch_.begin(), scratch_.begin() + static_cast<std::ptrdiff_t>(r),
              rows_.begin() + static_cast<std::ptrdiff_t>(l));
    const std::size_t mid = l;

    nodes_[id].feature = best.feature;
    nodes_[id].threshold = best.threshold;
    nodes_[id].impurity_decrease = std::max(0.0, best.gain);
    const int left = grow(lo, mid, depth + 1);
    const int right = grow(mid, hi, depth + 1);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  const BinMapper& bins_;
  std::span<const double> y_;
  TreeParams params_;
  std::vector<std::uint32_t> rows_;
  std::vector<std::uint32_t> scratch_;
  std::vector<TreeNode> nodes_;
  std::vector<LeafRange> leaf_ranges_;
};

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

std::vector<double> to_double_labels(std::span<const int> labels) {
  std::vector<double> y(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) {
      throw Error(ErrorCode::InvalidConfig, "labels must be 0 or 1, row " + std::to_string(i));
    }
    y[i] = labels[i];
  }
  return y;
}

void require_dim(std::size_t expected, std::span<const double> x) {
  if (x.size() != expected) {
    throw Error(ErrorCode::ShapeMismatch, "expected " + std::to_string(expected) + " features, got " +
                                              std::to_string(x.size()));
  }
}

std::string_view to_string(Task t) { return t == Task::Classification ? "classification" : "regression"; }
Task task_from(const std::string& s) {
  if (s == "classification") return Task::Classification;
  if (s == "regression") return Task::Regression;
  throw Error(ErrorCode::ParseError, "unknown task '" + s + "'");
}

void check_format(const nlohmann::json& j, std::string_view format) {
  if (j.value("format", "") != format) {
    throw Error(ErrorCode::ParseError, "expected format '" + std::string(format) + "'");
  }
  if (j.value("version", 0) != kFormatVersion) {
    throw Error(ErrorCode::ParseError, "unsupported " + std::string(format) + " version");
  }
}

}  // namespace

DecisionTree::DecisionTree(Task task, std::size_t n_features, int max_depth, std::vector<TreeNode> nodes)
    : task_(task), n_features_(n_features), max_depth_(max_depth), nodes_(std::move(nodes)) {}

int DecisionTree::depth() const {
  if (nodes_.empty()) return 0;
  // Children always have larger indices than their parent.
  std::vector<int> d(nodes_.size(), 0);
  int deepest = 0;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    if (n.is_leaf()) continue;
    d[static_cast<std::size_t>(n.left)] = d[i] + 1;
    d[static_cast<std::size_t>(n.right)] = d[i] + 1;
    deepest = std::max(deepest, d[i] + 1);
  }
  return deepest;
}

const TreeNode& DecisionTree::leaf_for(std::span<const double> x) const {
  if (nodes_.empty()) throw Error(ErrorCode::UntrainedModel, "empty tree");
  require_dim(n_features_, x);
  std::size_t i = 0;
  while (!nodes_[i].is_leaf()) {
    const auto& n = nodes_[i];
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right);
  }
  return nodes_[i];
}

ColumnOrder ColumnOrder::build(const Matrix& x) {
  ColumnOrder c;
  c.order.resize(x.cols);
  for (std::size_t f = 0; f < x.cols; ++f) {
    auto& o = c.order[f];
    o.resize(x.rows);
    std::iota(o.begin(), o.end(), 0U);
    std::stable_sort(o.begin(), o.end(), [&](std::uint32_t a, std::uint32_t b) { return x(a, f) < x(b, f); });
  }
  return c;
}

DecisionTree fit_tree(const Matrix& x, std::span<const double> y, const TreeParams& params, Task task,
                      std::span<const double> weights, const ColumnOrder* presorted) {
  require_shapes(x, y.size(), weights);
  if (task == Task::Classification) {
    for (double v : y) {
      if (v != 0.0 && v != 1.0) throw Error(ErrorCode::InvalidConfig, "classification targets must be 0/1");
    }
  }
  ColumnOrder local;
  if (presorted == nullptr) {
    local = ColumnOrder::build(x);
    presorted = &local;
  }
  return ExactBuilder(x, y, weights, task, params, *presorted).build();
}

DecisionTree fit_tree(const Matrix& x, std::span<const int> labels, const TreeParams& params) {
  if (labels.size() != x.rows) require_shapes(x, labels.size(), {});
  const auto y = to_double_labels(labels);
  return fit_tree(x, y, params, Task::Classification);
}

std::vector<double> predict_tree(const DecisionTree& tree, std::span<const double> x) {
  const TreeNode& leaf = tree.leaf_for(x);
  if (tree.task() == Task::Regression) return {leaf.value};
  const double total = leaf.counts[0] + leaf.counts[1];
  return {leaf.counts[0] / total, leaf.counts[1] / total};
}

double predict_tree_value(const DecisionTree& tree, std::span<const double> x) {
  const TreeNode& leaf = tree.leaf_for(x);
  if (tree.task() == Task::Regression) return leaf.value;
  return leaf.counts[1] / (leaf.counts[0] + leaf.counts[1]);
}

int forest_hard_vote(std::span<const int> per_tree_labels) {
  if (per_tree_labels.empty()) throw Error(ErrorCode::EmptyInput, "no votes");
  const int max_label = *std::max_element(per_tree_labels.begin(), per_tree_labels.end());
  if (*std::min_element(per_tree_labels.begin(), per_tree_labels.end()) < 0) {
    throw Error(ErrorCode::InvalidConfig, "negative class label");
  }
  std::vector<std::size_t> votes(static_cast<std::size_t>(max_label) + 1, 0);
  for (int l : per_tree_labels) ++votes[static_cast<std::size_t>(l)];
  // max_element returns the first maximum, i.e. the lowest class index.
  return static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
}

std::vector<double> forest_soft_vote(std::span<const std::vector<double>> per_tree_probs) {
  if (per_tree_probs.empty()) throw Error(ErrorCode::EmptyInput, "no probability vectors");
  const std::size_t k = per_tree_probs.front().size();
  if (k == 0) throw Error(ErrorCode::EmptyInput, "empty probability vector");
  std::vector<double> mean(k, 0.0);
  for (const auto& p : per_tree_probs) {
    if (p.size() != k) throw Error(ErrorCode::ShapeMismatch, "probability vectors differ in length");
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    if (std::abs(total - 1.0) > 1e-9) {
      throw Error(ErrorCode::NotNormalized, "probabilities sum to " + std::to_string(total));
    }
    for (std::size_t c = 0; c < k; ++c) mean[c] += p[c];
  }
  for (double& m : mean) m /= static_cast<double>(per_tree_probs.size());
  return mean;
}

int argmax_class(std::span<const double> probs) {
  if (probs.empty()) throw Error(ErrorCode::EmptyInput, "empty probability vector");
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

ForestModel fit_forest(const Matrix& x, std::span<const int> labels, const ForestParams& params) {
  if (params.n_trees < 1) throw Error(ErrorCode::InvalidConfig, "n_trees must be >= 1");
  require_shapes(x, labels.size(), {});
  const auto y = to_double_labels(labels);
  const ColumnOrder order = ColumnOrder::build(x);

  ForestModel model;
  model.params = params;
  model.n_features = x.cols;
  model.trees.reserve(static_cast<std::size_t>(params.n_trees));
  std::vector<double> weights(x.rows);
  for (int t = 0; t < params.n_trees; ++t) {
    const std::uint64_t tree_seed = derive_seed(params.seed, 0x7265, static_cast<std::uint64_t>(t));
    model.tree_seeds.push_back(tree_seed);
    Rng rng(tree_seed);
    if (params.bootstrap) {
      std::fill(weights.begin(), weights.end(), 0.0);
      for (std::size_t i = 0; i < x.rows; ++i) weights[rng.below(x.rows)] += 1.0;
    } else {
      std::fill(weights.begin(), weights.end(), 1.0);
    }
    TreeParams tp;
    tp.max_depth = params.max_depth;
    tp.min_samples_leaf = params.min_samples_leaf;
    tp.features_per_split = params.features_per_split;
    tp.seed = rng.next_u64();
    model.trees.push_back(fit_tree(x, y, tp, Task::Classification, weights, &order));
  }
  return model;
}

std::vector<double> predict_forest(const ForestModel& model, std::span<const double> x) {
  if (!model.trained()) throw Error(ErrorCode::UntrainedModel, "forest has no trees");
  require_dim(model.n_features, x);
  std::vector<double> out(2, 0.0);
  for (const auto& tree : model.trees) {
    const auto p = predict_tree(tree, x);
    if (model.params.voting == Voting::Soft) {
      out[0] += p[0];
      out[1] += p[1];
    } else {
      out[static_cast<std::size_t>(argmax_class(p))] += 1.0;
    }
  }
  const double n = static_cast<double>(model.trees.size());
  out[0] /= n;
  out[1] /= n;
  return out;
}

int predict_forest_label(const ForestModel& model, std::span<const double> x) {
  return argmax_class(predict_forest(model, x));
}

FeatureImportance forest_feature_importance(const ForestModel& model) {
  if (!model.trained()) throw Error(ErrorCode::UntrainedModel, "forest has no trees");
  FeatureImportance imp;
  imp.scores.assign(model.n_features, 0.0);
  for (const auto& tree : model.trees) {
    for (const auto& node : tree.nodes()) {
      if (!node.is_leaf()) imp.scores[static_cast<std::size_t>(node.feature)] += node.impurity_decrease;
    }
  }
  const double total = std::accumulate(imp.scores.begin(), imp.scores.end(), 0.0);
  if (!(total > 0.0)) {
    imp.degenerate = true;
    std::fill(imp.scores.begin(), imp.scores.end(), 1.0 / static_cast<double>(model.n_features));
    return imp;
  }
  for (double& s : imp.scores) s /= total;
  return imp;
}

GbtModel fit_gbt(const Matrix& x, std::span<const double> y, const GbtParams& params) {
  if (!(params.learning_rate > 0.0)) throw Error(ErrorCode::InvalidConfig, "learning_rate must be > 0");
  if (params.n_stages < 0) throw Error(ErrorCode::InvalidConfig, "n_stages must be >= 0");
  if (params.split_mode == SplitMode::Histogram && (params.n_bins < 2 || params.n_bins > 65535)) {
    throw Error(ErrorCode::InvalidConfig, "n_bins must lie in [2, 65535]");
  }
  require_shapes(x, y.size(), {});

  GbtModel model;
  model.params = params;
  model.n_features = x.cols;
  const double n = static_cast<double>(x.rows);
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / n;
  if (params.loss == Loss::Logistic) {
    for (double v : y) {
      if (v != 0.0 && v != 1.0) throw Error(ErrorCode::InvalidConfig, "logistic targets must be 0/1");
    }
    const double prior = std::clamp(mean, 1e-12, 1.0 - 1e-12);
    model.base_score = std::log(prior / (1.0 - prior));
  } else {
    model.base_score = mean;
  }
  if (params.n_stages == 0) return model;

  const ColumnOrder order = ColumnOrder::build(x);
  BinMapper bins;
  if (params.split_mode == SplitMode::Histogram) bins = BinMapper::build(x, order, params.n_bins);

  std::vector<double> score(x.rows, model.base_score);
  std::vector<double> residual(x.rows);
  TreeParams tp;
  tp.max_depth = params.max_depth;
  tp.min_samples_leaf = params.min_samples_leaf;
  tp.features_per_split = 0;
  for (int stage = 0; stage < params.n_stages; ++stage) {
    for (std::size_t i = 0; i < x.rows; ++i) {
      residual[i] = params.loss == Loss::Logistic ? y[i] - sigmoid(score[i]) : y[i] - score[i];
    }
    tp.seed = derive_seed(params.seed, 0x6762, static_cast<std::uint64_t>(stage));
    DecisionTree tree;
    std::vector<double> update;
    if (params.split_mode == SplitMode::Exact) {
      ExactBuilder builder(x, residual, {}, Task::Regression, tp, order);
      tree = builder.build();
      update = builder.leaf_values_by_row(tree.nodes());
    } else {
      HistogramBuilder builder(bins, residual, tp);
      tree = builder.build();
      update = builder.leaf_values_by_row(tree.nodes());
    }
    for (std::size_t i = 0; i < x.rows; ++i) score[i] += params.learning_rate * update[i];
    model.stages.push_back(std::move(tree));
  }
  return model;
}

GbtModel fit_gbt(const Matrix& x, std::span<const int> labels, const GbtParams& params) {
  if (labels.size() != x.rows) require_shapes(x, labels.size(), {});
  const auto y = to_double_labels(labels);
  GbtParams p = params;
  p.loss = Loss::Logistic;
  return fit_gbt(x, y, p);
}

double gbt_score(const GbtModel& model, std::span<const double> x) {
  require_dim(model.n_features, x);
  double s = 0.0;
  for (const auto& tree : model.stages) s += tree.leaf_for(x).value;
  return model.base_score + model.params.learning_rate * s;
}

std::vector<double> predict_gbt(const GbtModel& model, std::span<const double> x) {
  const double s = gbt_score(model, x);
  if (model.params.loss == Loss::Squared) return {s};
  const double p = sigmoid(s);
  return {1.0 - p, p};
}

double predict_gbt_value(const GbtModel& model, std::span<const double> x) {
  const double s = gbt_score(model, x);
  return model.params.loss == Loss::Squared ? s : sigmoid(s);
}

std::vector<double> gbt_training_loss_curve(const GbtModel& model, const Matrix& x, std::span<const double> y) {
  require_shapes(x, y.size(), {});
  std::vector<double> score(x.rows, model.base_score);
  std::vector<double> curve;
  curve.reserve(model.stages.size() + 1);
  auto mean_loss = [&] {
    double total = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) {
      if (model.params.loss == Loss::Squared) {
        const double d = y[i] - score[i];
        total += d * d;
      } else {
        // log(1 + e^s) - y s, computed stably
        const double s = score[i];
        total += std::max(s, 0.0) + std::log1p(std::exp(-std::abs(s))) - y[i] * s;
      }
    }
    return total / static_cast<double>(x.rows);
  };
  curve.push_back(mean_loss());
  for (const auto& tree : model.stages) {
    for (std::size_t i = 0; i < x.rows; ++i) score[i] += model.params.learning_rate * tree.leaf_for(x.row(i)).value;
    curve.push_back(mean_loss());
  }
  return curve;
}

nlohmann::json to_json(const DecisionTree& tree) {
  nlohmann::json nodes;
  std::vector<int> feature, left, right;
  std::vector<double> threshold, value, count0, count1, weight, decrease;
  for (const auto& n : tree.nodes()) {
    feature.push_back(n.feature);
    left.push_back(n.left);
    right.push_back(n.right);
    threshold.push_back(n.threshold);
    value.push_back(n.value);
    count0.push_back(n.counts[0]);
    count1.push_back(n.counts[1]);
    weight.push_back(n.weight);
    decrease.push_back(n.impurity_decrease);
  }
  return {{"format", "gridstab.tree"},
          {"version", kFormatVersion},
          {"task", to_string(tree.task())},
          {"n_features", tree.n_features()},
          {"max_depth", tree.max_depth()},
          {"nodes",
           {{"feature", feature},
            {"threshold", threshold},
            {"left", left},
            {"right", right},
            {"value", value},
            {"count0", count0},
            {"count1", count1},
            {"weight", weight},
            {"impurity_decrease", decrease}}}};
}

DecisionTree tree_from_json(const nlohmann::json& j) {
  check_format(j, "gridstab.tree");
  const auto& n = j.at("nodes");
  const auto feature = n.at("feature").get<std::vector<int>>();
  const auto threshold = n.at("threshold").get<std::vector<double>>();
  const auto left = n.at("left").get<std::vector<int>>();
  const auto right = n.at("right").get<std::vector<int>>();
  const auto value = n.at("value").get<std::vector<double>>();
  const auto count0 = n.at("count0").get<std::vector<double>>();
  const auto count1 = n.at("count1").get<std::vector<double>>();
  const auto weight = n.at("weight").get<std::vector<double>>();
  const auto decrease = n.at("impurity_decrease").get<std::vector<double>>();
  const std::size_t count = feature.size();
  for (const auto* v : {&threshold, &value, &count0, &count1, &weight, &decrease}) {
    if (v->size() != count) throw Error(ErrorCode::ParseError, "node arrays differ in length");
  }
  if (left.size() != count || right.size() != count) throw Error(ErrorCode::ParseError, "node arrays differ in length");
  std::vector<TreeNode> nodes(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto& node = nodes[i];
    node.feature = feature[i];
    node.threshold = threshold[i];
    node.left = left[i];
    node.right = right[i];
    node.value = value[i];
    node.counts = {count0[i], count1[i]};
    node.weight = weight[i];
    node.impurity_decrease = decrease[i];
    if (!node.is_leaf()) {
      const auto ok = [&](int c) { return c > static_cast<int>(i) && c < static_cast<int>(count); };
      if (!ok(node.left) || !ok(node.right)) throw Error(ErrorCode::ParseError, "bad child index at node " + std::to_string(i));
    }
  }
  return DecisionTree(task_from(j.at("task").get<std::string>()), j.at("n_features").get<std::size_t>(),
                      j.at("max_depth").get<int>(), std::move(nodes));
}

nlohmann::json to_json(const ForestModel& model) {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& t : model.trees) trees.push_back(to_json(t));
  const auto& p = model.params;
  return {{"format", "gridstab.forest"},
          {"version", kFormatVersion},
          {"config",
           {{"n_trees", p.n_trees},
            {"max_depth", p.max_depth},
            {"features_per_split", p.features_per_split},
            {"min_samples_leaf", p.min_samples_leaf},
            {"bootstrap", p.bootstrap},
            {"voting", p.voting == Voting::Soft ? "soft" : "hard"},
            {"seed", p.seed}}},
          {"n_features", model.n_features},
          {"tree_seeds", model.tree_seeds},
          {"trees", trees}};
}

ForestModel forest_from_json(const nlohmann::json& j) {
  check_format(j, "gridstab.forest");
  ForestModel m;
  const auto& c = j.at("config");
  m.params.n_trees = c.at("n_trees").get<int>();
  m.params.max_depth = c.at("max_depth").get<int>();
  m.params.features_per_split = c.at("features_per_split").get<int>();
  m.params.min_samples_leaf = c.at("min_samples_leaf").get<double>();
  m.params.bootstrap = c.at("bootstrap").get<bool>();
  m.params.voting = c.at("voting").get<std::string>() == "hard" ? Voting::Hard : Voting::Soft;
  m.params.seed = c.at("seed").get<std::uint64_t>();
  m.n_features = j.at("n_features").get<std::size_t>();
  m.tree_seeds = j.at("tree_seeds").get<std::vector<std::uint64_t>>();
  for (const auto& t : j.at("trees")) m.trees.push_back(tree_from_json(t));
  return m;
}

nlohmann::json to_json(const GbtModel& model) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& t : model.stages) stages.push_back(to_json(t));
  const auto& p = model.params;
  return {{"format", "gridstab.gbt"},
          {"version", kFormatVersion},
          {"config",
           {{"n_stages", p.n_stages},
            {"learning_rate", p.learning_rate},
            {"max_depth", p.max_depth},
            {"min_samples_leaf", p.min_samples_leaf},
            {"split_mode", p.split_mode == SplitMode::Exact ? "exact" : "histogram"},
            {"n_bins", p.n_bins},
            {"loss", p.loss == Loss::Logistic ? "logistic" : "squared"},
            {"seed", p.seed}}},
          {"n_features", model.n_features},
          {"base_score", model.base_score},
          {"stages", stages}};
}

GbtModel gbt_from_json(const nlohmann::json& j) {
  check_format(j, "gridstab.gbt");
  GbtModel m;
  const auto& c = j.at("config");
  m.params.n_stages = c.at("n_stages").get<int>();
  m.params.learning_rate = c.at("learning_rate").get<double>();
  m.params.max_depth = c.at("max_depth").get<int>();
  m.params.min_samples_leaf = c.at("min_samples_leaf").get<double>();
  m.params.split_mode = c.at("split_mode").get<std::string>() == "histogram" ? SplitMode::Histogram : SplitMode::Exact;
  m.params.n_bins = c.at("n_bins").get<int>();
  m.params.loss = c.at("loss").get<std::string>() == "squared" ? Loss::Squared : Loss::Logistic;
  m.params.seed = c.at("seed").get<std::uint64_t>();
  m.n_features = j.at("n_features").get<std::size_t>();
  m.base_score = j.at("base_score").get<double>();
  for (const auto& t : j.at("stages")) m.stages.push_back(tree_from_json(t));
  return m;
}

}  // namespace gridstab::trees
