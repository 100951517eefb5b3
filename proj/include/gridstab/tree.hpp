#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "gridstab/data.hpp"

namespace gridstab::trees {

enum class Task { Classification, Regression };

// Internal nodes have feature >= 0; rows with x[feature] <= threshold go left.
struct TreeNode {
  int feature = -1;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;                  // regression leaf output
  std::array<double, 2> counts{};      // weighted class counts (classification)
  double weight = 0.0;                 // weighted sample count reaching the node
  double impurity_decrease = 0.0;      // weighted, internal nodes only

  bool is_leaf() const noexcept { return feature < 0; }
  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

struct TreeParams {
  int max_depth = -1;            // < 0: unlimited; 0: a single leaf
  double min_samples_leaf = 1;   // weighted
  int features_per_split = 0;    // <= 0: all features
  std::uint64_t seed = 0;
};

class DecisionTree {
 public:
  DecisionTree() = default;
  DecisionTree(Task task, std::size_t n_features, int max_depth, std::vector<TreeNode> nodes);

  Task task() const noexcept { return task_; }
  std::size_t n_features() const noexcept { return n_features_; }
  int max_depth() const noexcept { return max_depth_; }
  const std::vector<TreeNode>& nodes() const noexcept { return nodes_; }
  int depth() const;

  const TreeNode& leaf_for(std::span<const double> x) const;

  friend bool operator==(const DecisionTree&, const DecisionTree&) = default;

 private:
  Task task_ = Task::Classification;
  std::size_t n_features_ = 0;
  int max_depth_ = -1;
  std::vector<TreeNode> nodes_;
};

// Per-feature row order sorted by (value, row index). Reusable across trees fitted on the same X.
struct ColumnOrder {
  std::vector<std::vector<std::uint32_t>> order;
  static ColumnOrder build(const Matrix& x);
};

// Greedy CART: Gini for classification (y in {0,1}), variance reduction for
// regression. `weights` are per-row multiplicities (bootstrap counts); empty means all 1.
DecisionTree fit_tree(const Matrix& x, std::span<const double> y, const TreeParams& params, Task task,
                      std::span<const double> weights = {}, const ColumnOrder* presorted = nullptr);
DecisionTree fit_tree(const Matrix& x, std::span<const int> labels, const TreeParams& params);

// Classification: normalized leaf class frequencies.
std::vector<double> predict_tree(const DecisionTree& tree, std::span<const double> x);
double predict_tree_value(const DecisionTree& tree, std::span<const double> x);

int forest_hard_vote(std::span<const int> per_tree_labels);
std::vector<double> forest_soft_vote(std::span<const std::vector<double>> per_tree_probs);
int argmax_class(std::span<const double> probs);

enum class Voting { Hard, Soft };

struct ForestParams {
  int n_trees = 200;
  int max_depth = 16;
  int features_per_split = 4;
  double min_samples_leaf = 1;
  bool bootstrap = true;  // false only for degenerate-forest tests
  Voting voting = Voting::Soft;
  std::uint64_t seed = 0;

  friend bool operator==(const ForestParams&, const ForestParams&) = default;
};

struct ForestModel {
  ForestParams params;
  std::size_t n_features = 0;
  std::vector<std::uint64_t> tree_seeds;
  std::vector<DecisionTree> trees;

  bool trained() const noexcept { return !trees.empty(); }
  friend bool operator==(const ForestModel&, const ForestModel&) = default;
};

ForestModel fit_forest(const Matrix& x, std::span<const int> labels, const ForestParams& params);
// Soft: mean of tree probabilities. Hard: vote fractions, whose argmax is the hard-vote label.
std::vector<double> predict_forest(const ForestModel& model, std::span<const double> x);
int predict_forest_label(const ForestModel& model, std::span<const double> x);

struct FeatureImportance {
  std::vector<double> scores;  // sums to 1
  bool degenerate = false;     // no split anywhere; scores reported uniform
};
FeatureImportance forest_feature_importance(const ForestModel& model);

enum class SplitMode { Exact, Histogram };
enum class Loss { Logistic, Squared };

struct GbtParams {
  int n_stages = 500;
  double learning_rate = 0.3;
  int max_depth = 7;
  double min_samples_leaf = 1;
  SplitMode split_mode = SplitMode::Exact;
  int n_bins = 256;
  Loss loss = Loss::Logistic;
  std::uint64_t seed = 0;

  friend bool operator==(const GbtParams&, const GbtParams&) = default;
};

struct GbtModel {
  GbtParams params;
  std::size_t n_features = 0;
  double base_score = 0.0;  // log-odds of positive prior (logistic) or target mean (squared)
  std::vector<DecisionTree> stages;

  friend bool operator==(const GbtModel&, const GbtModel&) = default;
};

GbtModel fit_gbt(const Matrix& x, std::span<const double> y, const GbtParams& params);
GbtModel fit_gbt(const Matrix& x, std::span<const int> labels, const GbtParams& params);

// Raw additive score: base_score + lr * sum of stage outputs.
double gbt_score(const GbtModel& model, std::span<const double> x);
// Logistic loss: [P(stable), P(unstable)]. Squared loss: the single regression value.
std::vector<double> predict_gbt(const GbtModel& model, std::span<const double> x);
double predict_gbt_value(const GbtModel& model, std::span<const double> x);

// Mean training loss after each stage count 0..n_stages (logistic or squared).
std::vector<double> gbt_training_loss_curve(const GbtModel& model, const Matrix& x, std::span<const double> y);

nlohmann::json to_json(const DecisionTree& tree);
DecisionTree tree_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ForestModel& model);
ForestModel forest_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GbtModel& model);
GbtModel gbt_from_json(const nlohmann::json& j);

}  // namespace gridstab::trees
