#include "gridstab/mlp.hpp"

#include <cmath>
#include <numeric>

#include "gridstab/error.hpp"

namespace gridstab::nn {

namespace {

constexpr int kFormatVersion = 1;

Eigen::MatrixXd relu(const Eigen::MatrixXd& z) { return z.cwiseMax(0.0); }

Eigen::MatrixXd apply_head(OutputActivation head, const Eigen::MatrixXd& z) {
  switch (head) {
    case OutputActivation::Identity:
      return z;
    case OutputActivation::Sigmoid:
      return z.unaryExpr([](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      });
    case OutputActivation::Softmax: {
      Eigen::MatrixXd out(z.rows(), z.cols());
      for (Eigen::Index c = 0; c < z.cols(); ++c) {
        const double shift = z.col(c).maxCoeff();
        out.col(c) = (z.col(c).array() - shift).exp().matrix();
        out.col(c) /= out.col(c).sum();
      }
      return out;
    }
  }
  return z;
}

std::string_view to_string(OutputActivation a) {
  switch (a) {
    case OutputActivation::Sigmoid: return "sigmoid";
    case OutputActivation::Identity: return "identity";
    case OutputActivation::Softmax: return "softmax";
  }
  return "identity";
}

OutputActivation activation_from(const std::string& s) {
  if (s == "sigmoid") return OutputActivation::Sigmoid;
  if (s == "identity") return OutputActivation::Identity;
  if (s == "softmax") return OutputActivation::Softmax;
  throw Error(ErrorCode::ParseError, "unknown output activation '" + s + "'");
}

void require_same_shape(const ParamSet& a, const ParamSet& b) {
  bool ok = a.weights.size() == b.weights.size() && a.biases.size() == b.biases.size();
  for (std::size_t l = 0; ok && l < a.weights.size(); ++l) {
    ok = a.weights[l].rows() == b.weights[l].rows() && a.weights[l].cols() == b.weights[l].cols() &&
         a.biases[l].size() == b.biases[l].size();
  }
  if (!ok) throw Error(ErrorCode::ShapeMismatch, "parameter shapes differ");
}

}  // namespace

ParamSet ParamSet::zeros_like() const {
  ParamSet z;
  for (const auto& w : weights) z.weights.push_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
  for (const auto& b : biases) z.biases.push_back(Eigen::VectorXd::Zero(b.size()));
  return z;
}

double ParamSet::squared_norm() const {
  double s = 0.0;
  for (const auto& w : weights) s += w.squaredNorm();
  for (const auto& b : biases) s += b.squaredNorm();
  return s;
}

void ParamSet::scale(double factor) {
  for (auto& w : weights) w *= factor;
  for (auto& b : biases) b *= factor;
}

MlpModel::MlpModel(std::vector<int> layer_sizes, OutputActivation output, std::vector<double> dropout_rates)
    : layer_sizes_(std::move(layer_sizes)), output_(output), dropout_(std::move(dropout_rates)) {
  for (std::size_t l = 0; l + 1 < layer_sizes_.size(); ++l) {
    params_.weights.push_back(Eigen::MatrixXd::Zero(layer_sizes_[l + 1], layer_sizes_[l]));
    params_.biases.push_back(Eigen::VectorXd::Zero(layer_sizes_[l + 1]));
  }
}

bool operator==(const MlpModel& a, const MlpModel& b) {
  if (a.layer_sizes_ != b.layer_sizes_ || a.output_ != b.output_ || a.dropout_ != b.dropout_) return false;
  for (std::size_t l = 0; l < a.params_.weights.size(); ++l) {
    if (a.params_.weights[l] != b.params_.weights[l] || a.params_.biases[l] != b.params_.biases[l]) return false;
  }
  return true;
}

MlpModel init_mlp(std::vector<int> layer_sizes, OutputActivation output, std::vector<double> dropout_rates,
                  std::uint64_t seed) {
  if (layer_sizes.size() < 2) throw Error(ErrorCode::InvalidArchitecture, "need at least input and output sizes");
  for (int s : layer_sizes) {
    if (s <= 0) throw Error(ErrorCode::InvalidArchitecture, "layer sizes must be positive");
  }
  const std::size_t hidden = layer_sizes.size() - 2;
  if (dropout_rates.empty()) dropout_rates.assign(hidden, 0.0);
  if (dropout_rates.size() != hidden) {
    throw Error(ErrorCode::InvalidArchitecture, "expected " + std::to_string(hidden) + " dropout rates");
  }
  for (double r : dropout_rates) {
    if (!(r >= 0.0 && r < 1.0)) throw Error(ErrorCode::InvalidArchitecture, "dropout rate must lie in [0, 1)");
  }

  MlpModel model(std::move(layer_sizes), output, std::move(dropout_rates));
  Rng rng(seed);
  auto& params = model.mutable_params();
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    auto& w = params.weights[l];
    const bool last = l + 1 == params.weights.size();
    // He-uniform ahead of rectifiers, LeCun-uniform for the head.
    const double limit = std::sqrt((last ? 3.0 : 6.0) / static_cast<double>(w.cols()));
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-limit, limit);
    }
  }
  return model;
}

std::size_t param_count(std::span<const int> layer_sizes) {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    n += static_cast<std::size_t>(layer_sizes[l]) * static_cast<std::size_t>(layer_sizes[l + 1]) +
         static_cast<std::size_t>(layer_sizes[l + 1]);
  }
  return n;
}

std::size_t param_count(const MlpModel& model) { return param_count(model.layer_sizes()); }

Eigen::MatrixXd forward(const MlpModel& model, const Eigen::MatrixXd& x) {
  if (x.rows() != model.input_size()) {
    throw Error(ErrorCode::ShapeMismatch, "input has " + std::to_string(x.rows()) + " rows, expected " +
                                              std::to_string(model.input_size()));
  }
  const auto& p = model.params();
  Eigen::MatrixXd a = x;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    Eigen::MatrixXd z = p.weights[l] * a;
    z.colwise() += p.biases[l];
    a = l + 1 == p.weights.size() ? apply_head(model.output_activation(), z) : relu(z);
  }
  return a;
}

Eigen::MatrixXd forward(const MlpModel& model, const Eigen::MatrixXd& x, Mode mode, Rng& rng, ForwardCache* cache) {
  if (mode == Mode::Inference && cache == nullptr) return forward(model, x);
  if (x.rows() != model.input_size()) {
    throw Error(ErrorCode::ShapeMismatch, "input has " + std::to_string(x.rows()) + " rows, expected " +
                                              std::to_string(model.input_size()));
  }
  const auto& p = model.params();
  const std::size_t n_layers = p.weights.size();
  if (cache != nullptr) {
    cache->inputs.assign(n_layers, {});
    cache->pre.assign(n_layers, {});
    cache->masks.assign(n_layers > 0 ? n_layers - 1 : 0, {});
  }
  Eigen::MatrixXd a = x;
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (cache != nullptr) cache->inputs[l] = a;
    Eigen::MatrixXd z = p.weights[l] * a;
    z.colwise() += p.biases[l];
    if (l + 1 == n_layers) {
      a = apply_head(model.output_activation(), z);
    } else {
      a = relu(z);
      const double rate = model.dropout_rates()[l];
      Eigen::MatrixXd mask = Eigen::MatrixXd::Ones(a.rows(), a.cols());
      if (mode == Mode::Train && rate > 0.0) {
        const double keep_scale = 1.0 / (1.0 - rate);
        for (Eigen::Index c = 0; c < mask.cols(); ++c) {
          for (Eigen::Index r = 0; r < mask.rows(); ++r) mask(r, c) = rng.uniform() < rate ? 0.0 : keep_scale;
        }
        a = a.cwiseProduct(mask);
      }
      if (cache != nullptr) cache->masks[l] = std::move(mask);
    }
    if (cache != nullptr) cache->pre[l] = std::move(z);
  }
  if (cache != nullptr) {
    cache->output = a;
    cache->model = &model;
    cache->version = model.version();
    cache->valid = mode == Mode::Train;
  }
  return a;
}

Eigen::VectorXd forward_one(const MlpModel& model, std::span<const double> x) {
  Eigen::MatrixXd col(static_cast<Eigen::Index>(x.size()), 1);
  for (std::size_t i = 0; i < x.size(); ++i) col(static_cast<Eigen::Index>(i), 0) = x[i];
  return forward(model, col).col(0);
}

ParamSet backward(const MlpModel& model, const ForwardCache& cache, const Eigen::MatrixXd& loss_grad, GradWrt wrt) {
  if (!cache.valid || cache.model != &model || cache.version != model.version()) {
    throw Error(ErrorCode::StaleCache, "backward needs a train-mode forward pass of the current parameters");
  }
  if (loss_grad.rows() != cache.output.rows() || loss_grad.cols() != cache.output.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "loss gradient shape differs from network output");
  }
  const auto& p = model.params();
  const std::size_t n_layers = p.weights.size();

  Eigen::MatrixXd delta;  // d loss / d pre-activation of the current layer
  if (wrt == GradWrt::Logits) {
    delta = loss_grad;
  } else {
    const Eigen::MatrixXd& y = cache.output;
    switch (model.output_activation()) {
      case OutputActivation::Identity:
        delta = loss_grad;
        break;
      case OutputActivation::Sigmoid:
        delta = loss_grad.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix()));
        break;
      case OutputActivation::Softmax: {
        delta.resize(y.rows(), y.cols());
        for (Eigen::Index c = 0; c < y.cols(); ++c) {
          const double dot = loss_grad.col(c).dot(y.col(c));
          delta.col(c) = y.col(c).cwiseProduct((loss_grad.col(c).array() - dot).matrix());
        }
        break;
      }
    }
  }

  ParamSet grads = p.zeros_like();
  for (std::size_t l = n_layers; l-- > 0;) {
    grads.weights[l] = delta * cache.inputs[l].transpose();
    grads.biases[l] = delta.rowwise().sum();
    if (l == 0) break;
    Eigen::MatrixXd upstream = p.weights[l].transpose() * delta;
    // Through dropout (mask) then the rectifier of layer l-1.
    upstream = upstream.cwiseProduct(cache.masks[l - 1]);
    const Eigen::MatrixXd& z = cache.pre[l - 1];
    delta = upstream.cwiseProduct(z.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; }));
  }
  return grads;
}

AdamState make_adam(const MlpModel& model, double learning_rate) {
  AdamState s;
  s.m = model.params().zeros_like();
  s.v = model.params().zeros_like();
  s.learning_rate = learning_rate;
  return s;
}

void adam_step(MlpModel& model, const ParamSet& grads, AdamState& state) {
  require_same_shape(model.params(), grads);
  require_same_shape(model.params(), state.m);
  require_same_shape(model.params(), state.v);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  auto& p = model.mutable_params();
  auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
    param.array() -= state.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + state.epsilon);
  };
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    update(p.weights[l], grads.weights[l], state.m.weights[l], state.v.weights[l]);
    update(p.biases[l], grads.biases[l], state.m.biases[l], state.v.biases[l]);
  }
}

double clip_grad_norm(ParamSet& grads, double max_norm) {
  const double norm = std::sqrt(grads.squared_norm());
  if (norm > max_norm && norm > 0.0) grads.scale(max_norm / norm);
  return norm;
}

MlpModel train_ann_classifier(const Matrix& x, std::span<const int> labels, const AnnConfig& config) {
  if (x.rows == 0) throw Error(ErrorCode::EmptyInput, "no training rows");
  if (labels.size() != x.rows) throw Error(ErrorCode::ShapeMismatch, "label count differs from row count");
  if (config.epochs < 0 || config.batch_size < 1 || !(config.learning_rate > 0.0)) {
    throw Error(ErrorCode::InvalidConfig, "epochs >= 0, batch_size >= 1 and learning_rate > 0 required");
  }
  std::vector<int> sizes{static_cast<int>(x.cols)};
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(1);
  MlpModel model = init_mlp(sizes, OutputActivation::Sigmoid,
                            std::vector<double>(config.hidden.size(), config.dropout),
                            derive_seed(config.seed, 0x696e6974));
  AdamState adam = make_adam(model, config.learning_rate);
  Rng rng(derive_seed(config.seed, 0x74726169));

  std::vector<std::size_t> order(x.rows);
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(config.batch_size);
  ForwardCache cache;
  Eigen::MatrixXd xb, grad;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t n = std::min(batch, order.size() - start);
      xb.resize(static_cast<Eigen::Index>(x.cols), static_cast<Eigen::Index>(n));
      for (std::size_t k = 0; k < n; ++k) {
        const auto row = x.row(order[start + k]);
        for (std::size_t f = 0; f < x.cols; ++f) xb(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(k)) = row[f];
      }
      const Eigen::MatrixXd out = forward(model, xb, Mode::Train, rng, &cache);
      grad.resize(1, static_cast<Eigen::Index>(n));
      for (std::size_t k = 0; k < n; ++k) {
        // BCE with sigmoid: d loss / d logit = p - y.
        grad(0, static_cast<Eigen::Index>(k)) = (out(0, static_cast<Eigen::Index>(k)) - labels[order[start + k]]) / static_cast<double>(n);
      }
      adam_step(model, backward(model, cache, grad, GradWrt::Logits), adam);
    }
  }
  return model;
}

std::vector<double> predict_ann(const MlpModel& model, const Matrix& x) {
  if (static_cast<int>(x.cols) != model.input_size()) {
    throw Error(ErrorCode::ShapeMismatch, "feature count differs from network input");
  }
  std::vector<double> out(x.rows);
  constexpr std::size_t kChunk = 1024;
  for (std::size_t start = 0; start < x.rows; start += kChunk) {
    const std::size_t n = std::min(kChunk, x.rows - start);
    Eigen::MatrixXd xb(static_cast<Eigen::Index>(x.cols), static_cast<Eigen::Index>(n));
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t f = 0; f < x.cols; ++f) xb(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(k)) = x(start + k, f);
    }
    const Eigen::MatrixXd p = forward(model, xb);
    for (std::size_t k = 0; k < n; ++k) out[start + k] = p(0, static_cast<Eigen::Index>(k));
  }
  return out;
}

nlohmann::json to_json(const MlpModel& model) {
  nlohmann::json weights = nlohmann::json::array(), biases = nlohmann::json::array();
  for (std::size_t l = 0; l < model.n_layers(); ++l) {
    const auto& w = model.params().weights[l];
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(w.size()));
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) flat.push_back(w(r, c));
    }
    weights.push_back(flat);
    const auto& b = model.params().biases[l];
    biases.push_back(std::vector<double>(b.data(), b.data() + b.size()));
  }
  return {{"format", "gridstab.mlp"},
          {"version", kFormatVersion},
          {"layer_sizes", model.layer_sizes()},
          {"output_activation", to_string(model.output_activation())},
          {"dropout_rates", model.dropout_rates()},
          {"weights", weights},
          {"biases", biases}};
}

MlpModel mlp_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "gridstab.mlp" || j.value("version", 0) != kFormatVersion) {
    throw Error(ErrorCode::ParseError, "expected gridstab.mlp version 1");
  }
  MlpModel model = init_mlp(j.at("layer_sizes").get<std::vector<int>>(),
                            activation_from(j.at("output_activation").get<std::string>()),
                            j.at("dropout_rates").get<std::vector<double>>(), 0);
  auto& p = model.mutable_params();
  const auto& weights = j.at("weights");
  const auto& biases = j.at("biases");
  if (weights.size() != p.weights.size() || biases.size() != p.biases.size()) {
    throw Error(ErrorCode::ParseError, "layer count mismatch");
  }
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    const auto flat = weights[l].get<std::vector<double>>();
    auto& w = p.weights[l];
    if (flat.size() != static_cast<std::size_t>(w.size())) throw Error(ErrorCode::ParseError, "weight size mismatch");
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = flat[k++];
    }
    const auto b = biases[l].get<std::vector<double>>();
    if (b.size() != static_cast<std::size_t>(p.biases[l].size())) throw Error(ErrorCode::ParseError, "bias size mismatch");
    for (std::size_t i = 0; i < b.size(); ++i) p.biases[l](static_cast<Eigen::Index>(i)) = b[i];
  }
  return model;
}

}  // namespace gridstab::nn
