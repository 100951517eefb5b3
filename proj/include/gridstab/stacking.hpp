#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "gridstab/data.hpp"
#include "gridstab/mlp.hpp"
#include "gridstab/tree.hpp"

namespace gridstab::stacking {

inline constexpr std::size_t kBaseModels = 4;

struct LogisticModel {
  std::vector<double> weights;
  double bias = 0.0;

  friend bool operator==(const LogisticModel&, const LogisticModel&) = default;
};

struct LogisticConfig {
  int steps = 2000;
  double learning_rate = 0.1;
};

// Full-batch gradient descent on mean logistic loss, starting from w = 0, b = 0.
LogisticModel fit_logistic(const Matrix& x, std::span<const int> labels, const LogisticConfig& config);
double predict_logistic(const LogisticModel& model, std::span<const double> x);
double logistic_loss(const LogisticModel& model, const Matrix& x, std::span<const int> labels);

// A base learner is one of the three model families, selected by its config type.
using BaseConfig = std::variant<trees::ForestParams, trees::GbtParams, nn::AnnConfig>;
using BaseModel = std::variant<trees::ForestModel, trees::GbtModel, nn::MlpModel>;

// Random forest, GBT exact, GBT histogram, MLP.
std::array<BaseConfig, kBaseModels> default_base_configs();
std::array<std::string, kBaseModels> default_base_names();

BaseModel fit_base(const BaseConfig& config, const Matrix& x, std::span<const int> labels);
// Positive-class (unstable) probability for every row of `x`.
std::vector<double> base_probabilities(const BaseModel& model, const Matrix& x);

// Stratified fold id in [0, k) for every row. Throws TooFewRows when N < k and
// FoldDegenerate when a class has fewer than k rows (some fold would then train on one class).
std::vector<int> stratified_folds(std::span<const int> labels, int k, std::uint64_t seed);

struct OofResult {
  Matrix meta;              // N x number of base configs
  std::vector<int> fold;    // fold id per row
};

using ProgressFn = std::function<void(std::string_view)>;

OofResult oof_predictions(const Matrix& x, std::span<const int> labels, std::span<const BaseConfig> configs,
                          int k, std::uint64_t seed, const ProgressFn& progress = {});

struct StackingConfig {
  std::array<BaseConfig, kBaseModels> bases = default_base_configs();
  std::array<std::string, kBaseModels> names = default_base_names();
  int folds = 5;
  std::uint64_t seed = 0;
  LogisticConfig meta;
};

struct StackingModel {
  std::array<std::string, kBaseModels> names;
  std::vector<BaseModel> bases;  // refit on the full training set
  LogisticModel meta;
  int folds = 5;
  std::uint64_t seed = 0;

  bool trained() const noexcept { return bases.size() == kBaseModels && meta.weights.size() == kBaseModels; }
};

// `x` is expected to be standardized already.
StackingModel fit_stacking(const Matrix& x, std::span<const int> labels, const StackingConfig& config,
                           const ProgressFn& progress = {});

struct StackingPrediction {
  int label = 0;
  double probability = 0.5;  // P(unstable)
};

// Threshold 0.5; a probability of exactly 0.5 is labelled stable.
StackingPrediction predict_from_meta(const LogisticModel& meta, std::span<const double> base_probs);
StackingPrediction predict_stacking(const StackingModel& model, std::span<const double> x);
std::vector<StackingPrediction> predict_stacking(const StackingModel& model, const Matrix& x);
// Rows x 4 matrix of base-model probabilities used as meta features.
Matrix stacking_meta_features(const StackingModel& model, const Matrix& x);

nlohmann::json to_json(const LogisticModel& model);
LogisticModel logistic_from_json(const nlohmann::json& j);

// Writes `manifest` (meta weights plus references to one file per base model,
// stored next to it) and returns the paths written.
std::vector<std::filesystem::path> save_stacking(const StackingModel& model, const std::filesystem::path& manifest);
StackingModel load_stacking(const std::filesystem::path& manifest);

}  // namespace gridstab::stacking
