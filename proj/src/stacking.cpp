#include "gridstab/stacking.hpp"

#include <algorithm>
#include <cmath>

#include "gridstab/error.hpp"
#include "gridstab/json_io.hpp"
#include "gridstab/random.hpp"

namespace gridstab::stacking {

namespace {

constexpr int kFormatVersion = 1;
constexpr std::uint64_t kFoldStage = 0x666f6c64;  // "fold"

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double dot(const LogisticModel& m, std::span<const double> x) {
  double z = m.bias;
  for (std::size_t i = 0; i < x.size(); ++i) z += m.weights[i] * x[i];
  return z;
}

void require_binary(std::span<const int> labels) {
  for (int y : labels) {
    if (y != 0 && y != 1) throw Error(ErrorCode::InvalidConfig, "labels must be 0 or 1");
  }
}

// Same family, different seed: each fold model gets its own stream.
BaseConfig reseed(BaseConfig config, std::uint64_t seed) {
  std::visit([&](auto& c) { c.seed = seed; }, config);
  return config;
}

std::uint64_t seed_of(const BaseConfig& config) {
  return std::visit([](const auto& c) { return c.seed; }, config);
}

std::string_view kind_of(const BaseModel& model) {
  switch (model.index()) {
    case 0: return "forest";
    case 1: return "gbt";
    default: return "mlp";
  }
}

}  // namespace

LogisticModel fit_logistic(const Matrix& x, std::span<const int> labels, const LogisticConfig& config) {
  if (labels.size() != x.rows) throw Error(ErrorCode::ShapeMismatch, "label count differs from row count");
  if (config.steps < 0 || !(config.learning_rate > 0.0)) {
    throw Error(ErrorCode::InvalidConfig, "steps >= 0 and learning_rate > 0 required");
  }
  require_binary(labels);
  LogisticModel m{std::vector<double>(x.cols, 0.0), 0.0};
  if (x.rows == 0) return m;
  const double inv_n = 1.0 / static_cast<double>(x.rows);
  std::vector<double> grad_w(x.cols);
  for (int step = 0; step < config.steps; ++step) {
    std::fill(grad_w.begin(), grad_w.end(), 0.0);
    double grad_b = 0.0;
    for (std::size_t r = 0; r < x.rows; ++r) {
      const auto row = x.row(r);
      const double err = sigmoid(dot(m, row)) - labels[r];
      for (std::size_t c = 0; c < x.cols; ++c) grad_w[c] += err * row[c];
      grad_b += err;
    }
    for (std::size_t c = 0; c < x.cols; ++c) m.weights[c] -= config.learning_rate * grad_w[c] * inv_n;
    m.bias -= config.learning_rate * grad_b * inv_n;
  }
  return m;
}

double predict_logistic(const LogisticModel& model, std::span<const double> x) {
  if (x.size() != model.weights.size()) throw Error(ErrorCode::ShapeMismatch, "meta feature count differs");
  return sigmoid(dot(model, x));
}

double logistic_loss(const LogisticModel& model, const Matrix& x, std::span<const int> labels) {
  if (labels.size() != x.rows) throw Error(ErrorCode::ShapeMismatch, "label count differs from row count");
  if (x.rows == 0) return 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < x.rows; ++r) {
    const double z = dot(model, x.row(r));
    // log(1 + e^z) - y z, computed without overflow.
    total += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - labels[r] * z;
  }
  return total / static_cast<double>(x.rows);
}

std::array<BaseConfig, kBaseModels> default_base_configs() {
  trees::GbtParams exact;
  trees::GbtParams histogram;
  histogram.split_mode = trees::SplitMode::Histogram;
  return {trees::ForestParams{}, exact, histogram, nn::AnnConfig{}};
}

std::array<std::string, kBaseModels> default_base_names() {
  return {"random_forest", "gbt_exact", "gbt_histogram", "mlp"};
}

BaseModel fit_base(const BaseConfig& config, const Matrix& x, std::span<const int> labels) {
  if (const auto* forest = std::get_if<trees::ForestParams>(&config)) return trees::fit_forest(x, labels, *forest);
  if (const auto* gbt = std::get_if<trees::GbtParams>(&config)) {
    if (gbt->loss != trees::Loss::Logistic) throw Error(ErrorCode::InvalidConfig, "base GBT must use logistic loss");
    return trees::fit_gbt(x, labels, *gbt);
  }
  return nn::train_ann_classifier(x, labels, std::get<nn::AnnConfig>(config));
}

std::vector<double> base_probabilities(const BaseModel& model, const Matrix& x) {
  if (const auto* mlp = std::get_if<nn::MlpModel>(&model)) return nn::predict_ann(*mlp, x);
  std::vector<double> out(x.rows);
  if (const auto* forest = std::get_if<trees::ForestModel>(&model)) {
    if (!forest->trained()) throw Error(ErrorCode::UntrainedModel, "forest has no trees");
    for (std::size_t r = 0; r < x.rows; ++r) out[r] = trees::predict_forest(*forest, x.row(r))[1];
  } else {
    const auto& gbt = std::get<trees::GbtModel>(model);
    for (std::size_t r = 0; r < x.rows; ++r) out[r] = trees::predict_gbt(gbt, x.row(r))[1];
  }
  return out;
}

std::vector<int> stratified_folds(std::span<const int> labels, int k, std::uint64_t seed) {
  if (k < 2) throw Error(ErrorCode::InvalidConfig, "k must be at least 2");
  if (labels.size() < static_cast<std::size_t>(k)) {
    throw Error(ErrorCode::TooFewRows, std::to_string(labels.size()) + " rows for " + std::to_string(k) + " folds");
  }
  require_binary(labels);
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  for (std::size_t c = 0; c < 2; ++c) {
    if (by_class[c].size() < static_cast<std::size_t>(k)) {
      throw Error(ErrorCode::FoldDegenerate, "class " + std::string(to_string(static_cast<Label>(c))) + " has " +
                                                 std::to_string(by_class[c].size()) + " rows, fewer than " +
                                                 std::to_string(k) + " folds");
    }
  }
  std::vector<int> fold(labels.size(), -1);
  // Round-robin continues across classes so fold sizes differ by at most one.
  std::size_t position = 0;
  for (std::size_t c = 0; c < 2; ++c) {
    Rng rng(derive_seed(seed, kFoldStage, c));
    rng.shuffle(std::span<std::size_t>(by_class[c]));
    for (std::size_t i : by_class[c]) fold[i] = static_cast<int>(position++ % static_cast<std::size_t>(k));
  }
  return fold;
}

OofResult oof_predictions(const Matrix& x, std::span<const int> labels, std::span<const BaseConfig> configs,
                          int k, std::uint64_t seed, const ProgressFn& progress) {
  if (labels.size() != x.rows) throw Error(ErrorCode::ShapeMismatch, "label count differs from row count");
  OofResult result{Matrix(x.rows, configs.size()), stratified_folds(labels, k, seed)};
  for (int f = 0; f < k; ++f) {
    std::vector<std::size_t> train_rows, held_rows;
    for (std::size_t i = 0; i < x.rows; ++i) (result.fold[i] == f ? held_rows : train_rows).push_back(i);
    const Matrix x_train = take_rows(x, train_rows);
    const Matrix x_held = take_rows(x, held_rows);
    std::vector<int> y_train;
    y_train.reserve(train_rows.size());
    for (std::size_t i : train_rows) y_train.push_back(labels[i]);
    for (std::size_t m = 0; m < configs.size(); ++m) {
      if (progress) progress("fold " + std::to_string(f + 1) + "/" + std::to_string(k) + ", base model " + std::to_string(m + 1));
      const BaseConfig fold_config = reseed(configs[m], derive_seed(seed_of(configs[m]), kFoldStage, static_cast<std::uint64_t>(f)));
      const BaseModel model = fit_base(fold_config, x_train, y_train);
      const auto probs = base_probabilities(model, x_held);
      for (std::size_t j = 0; j < held_rows.size(); ++j) result.meta(held_rows[j], m) = probs[j];
    }
  }
  return result;
}

StackingModel fit_stacking(const Matrix& x, std::span<const int> labels, const StackingConfig& config,
                           const ProgressFn& progress) {
  const OofResult oof = oof_predictions(x, labels, config.bases, config.folds, config.seed, progress);
  StackingModel model;
  model.names = config.names;
  model.folds = config.folds;
  model.seed = config.seed;
  model.meta = fit_logistic(oof.meta, labels, config.meta);
  for (std::size_t m = 0; m < kBaseModels; ++m) {
    if (progress) progress("refit " + config.names[m] + " on full training set");
    model.bases.push_back(fit_base(config.bases[m], x, labels));
  }
  return model;
}

StackingPrediction predict_from_meta(const LogisticModel& meta, std::span<const double> base_probs) {
  const double p = predict_logistic(meta, base_probs);
  return {p > 0.5 ? 1 : 0, p};
}

Matrix stacking_meta_features(const StackingModel& model, const Matrix& x) {
  if (!model.trained()) throw Error(ErrorCode::UntrainedModel, "stacking model is not fitted");
  Matrix meta(x.rows, kBaseModels);
  for (std::size_t m = 0; m < kBaseModels; ++m) {
    const auto probs = base_probabilities(model.bases[m], x);
    for (std::size_t r = 0; r < x.rows; ++r) meta(r, m) = probs[r];
  }
  return meta;
}

std::vector<StackingPrediction> predict_stacking(const StackingModel& model, const Matrix& x) {
  const Matrix meta = stacking_meta_features(model, x);
  std::vector<StackingPrediction> out(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r) out[r] = predict_from_meta(model.meta, meta.row(r));
  return out;
}

StackingPrediction predict_stacking(const StackingModel& model, std::span<const double> x) {
  Matrix one(1, x.size());
  std::copy(x.begin(), x.end(), one.values.begin());
  return predict_stacking(model, one).front();
}

nlohmann::json to_json(const LogisticModel& model) {
  return {{"format", "gridstab.logistic"}, {"version", kFormatVersion}, {"weights", model.weights}, {"bias", model.bias}};
}

LogisticModel logistic_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "gridstab.logistic" || j.value("version", 0) != kFormatVersion) {
    throw Error(ErrorCode::ParseError, "expected gridstab.logistic version 1");
  }
  return {j.at("weights").get<std::vector<double>>(), j.at("bias").get<double>()};
}

std::vector<std::filesystem::path> save_stacking(const StackingModel& model, const std::filesystem::path& manifest) {
  if (!model.trained()) throw Error(ErrorCode::UntrainedModel, "stacking model is not fitted");
  std::vector<std::filesystem::path> written;
  nlohmann::json bases = nlohmann::json::array();
  for (std::size_t m = 0; m < kBaseModels; ++m) {
    const std::string file = manifest.stem().string() + "." + model.names[m] + ".json";
    const auto path = manifest.parent_path() / file;
    std::visit([&](const auto& base) { write_json_file(path, to_json(base)); }, model.bases[m]);
    written.push_back(path);
    bases.push_back({{"name", model.names[m]}, {"kind", kind_of(model.bases[m])}, {"file", file}});
  }
  write_json_file(manifest,
                  {{"format", "gridstab.stacking"},
                   {"version", kFormatVersion},
                   {"folds", model.folds},
                   {"seed", model.seed},
                   {"meta", to_json(model.meta)},
                   {"bases", bases}},
                  2);
  written.push_back(manifest);
  return written;
}

StackingModel load_stacking(const std::filesystem::path& manifest) {
  const auto j = read_json_file(manifest);
  if (j.value("format", "") != "gridstab.stacking" || j.value("version", 0) != kFormatVersion) {
    throw Error(ErrorCode::ParseError, "expected gridstab.stacking version 1");
  }
  StackingModel model;
  model.folds = j.at("folds").get<int>();
  model.seed = j.at("seed").get<std::uint64_t>();
  model.meta = logistic_from_json(j.at("meta"));
  const auto& bases = j.at("bases");
  if (bases.size() != kBaseModels) throw Error(ErrorCode::ParseError, "stacking manifest must list 4 base models");
  for (std::size_t m = 0; m < kBaseModels; ++m) {
    const auto& entry = bases[m];
    model.names[m] = entry.at("name").get<std::string>();
    const auto kind = entry.at("kind").get<std::string>();
    const auto sub = read_json_file(manifest.parent_path() / entry.at("file").get<std::string>());
    if (kind == "forest") {
      model.bases.emplace_back(trees::forest_from_json(sub));
    } else if (kind == "gbt") {
      model.bases.emplace_back(trees::gbt_from_json(sub));
    } else if (kind == "mlp") {
      model.bases.emplace_back(nn::mlp_from_json(sub));
    } else {
      throw Error(ErrorCode::ParseError, "unknown base model kind '" + kind + "'");
    }
  }
  if (model.meta.weights.size() != kBaseModels) throw Error(ErrorCode::ParseError, "meta weight count must be 4");
  return model;
}

}  // namespace gridstab::stacking
