#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "gridstab/data.hpp"
#include "gridstab/random.hpp"

namespace gridstab::nn {

enum class OutputActivation { Sigmoid, Identity, Softmax };
enum class Mode { Train, Inference };

// Weights and biases of every dense layer; also used for gradients and Adam moments.
struct ParamSet {
  std::vector<Eigen::MatrixXd> weights;  // layer l: out x in
  std::vector<Eigen::VectorXd> biases;   // layer l: out

  ParamSet zeros_like() const;
  double squared_norm() const;
  void scale(double factor);
};

// Dense feed-forward network: rectifier hidden layers, configurable output head.
class MlpModel {
 public:
  MlpModel() = default;
  MlpModel(std::vector<int> layer_sizes, OutputActivation output, std::vector<double> dropout_rates);

  const std::vector<int>& layer_sizes() const noexcept { return layer_sizes_; }
  OutputActivation output_activation() const noexcept { return output_; }
  const std::vector<double>& dropout_rates() const noexcept { return dropout_; }
  std::size_t n_layers() const noexcept { return params_.weights.size(); }
  int input_size() const { return layer_sizes_.front(); }
  int output_size() const { return layer_sizes_.back(); }

  const ParamSet& params() const noexcept { return params_; }
  // Mutable access bumps the version so that stale forward caches are detected.
  ParamSet& mutable_params() noexcept {
    ++version_;
    return params_;
  }
  std::uint64_t version() const noexcept { return version_; }

  friend bool operator==(const MlpModel& a, const MlpModel& b);

 private:
  std::vector<int> layer_sizes_;
  OutputActivation output_ = OutputActivation::Identity;
  std::vector<double> dropout_;
  ParamSet params_;
  std::uint64_t version_ = 0;
};

// Throws InvalidArchitecture for < 2 sizes, non-positive sizes, or a dropout
// vector whose length differs from the number of hidden layers.
MlpModel init_mlp(std::vector<int> layer_sizes, OutputActivation output, std::vector<double> dropout_rates,
                  std::uint64_t seed);

std::size_t param_count(const MlpModel& model);
std::size_t param_count(std::span<const int> layer_sizes);

// Activations saved by a train-mode forward pass. Columns are samples.
struct ForwardCache {
  std::vector<Eigen::MatrixXd> inputs;  // input to layer l (post-dropout)
  std::vector<Eigen::MatrixXd> pre;     // pre-activation of layer l
  std::vector<Eigen::MatrixXd> masks;   // dropout scale applied to hidden layer l output
  Eigen::MatrixXd output;
  const MlpModel* model = nullptr;
  std::uint64_t version = 0;
  bool valid = false;  // set only by a train-mode pass
};

// `x` is input_size x batch. Inference mode never touches `rng` and applies no dropout.
Eigen::MatrixXd forward(const MlpModel& model, const Eigen::MatrixXd& x);
Eigen::MatrixXd forward(const MlpModel& model, const Eigen::MatrixXd& x, Mode mode, Rng& rng,
                        ForwardCache* cache);
Eigen::VectorXd forward_one(const MlpModel& model, std::span<const double> x);

enum class GradWrt { Output, Logits };

// Backpropagates `loss_grad` (output_size x batch), given either with respect to the
// head's output or its pre-activation logits. Throws StaleCache when the cache
// is missing or the model changed since the forward pass.
ParamSet backward(const MlpModel& model, const ForwardCache& cache, const Eigen::MatrixXd& loss_grad,
                  GradWrt wrt = GradWrt::Output);

struct AdamState {
  ParamSet m;
  ParamSet v;
  std::uint64_t step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

AdamState make_adam(const MlpModel& model, double learning_rate);
void adam_step(MlpModel& model, const ParamSet& grads, AdamState& state);

// Rescales `grads` in place so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
double clip_grad_norm(ParamSet& grads, double max_norm);

struct AnnConfig {
  std::vector<int> hidden = {64, 32};
  double dropout = 0.5;
  int epochs = 50;
  int batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

// Binary classifier [n_features, hidden..., 1] with sigmoid output trained on
// binary cross-entropy. `x` should already be standardized.
MlpModel train_ann_classifier(const Matrix& x, std::span<const int> labels, const AnnConfig& config);

// Positive-class probability per row.
std::vector<double> predict_ann(const MlpModel& model, const Matrix& x);

nlohmann::json to_json(const MlpModel& model);
MlpModel mlp_from_json(const nlohmann::json& j);

}  // namespace gridstab::nn
