#include "gridstab/grid_env.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "gridstab/error.hpp"

namespace gridstab::env {

namespace {

constexpr double kProducerMin = 0.75;
constexpr double kProducerMax = 7.5;
constexpr double kConsumerMin = -2.0;
constexpr double kConsumerMax = -0.5;
constexpr double kGainMin = 0.05;
constexpr double kGainMax = 1.0;
constexpr double kRewardMagnitude = 20.0;

EnvState from_record(const GridRecord& r) {
  EnvState s;
  s.tau = r.tau;
  s.p = r.p;
  s.g = r.g;
  s.stab = r.stab;
  return s;
}

}  // namespace

std::array<double, kFeatures> EnvState::features() const noexcept {
  std::array<double, kFeatures> f{};
  for (std::size_t i = 0; i < kNodes; ++i) {
    f[i] = tau[i];
    f[kNodes + i] = p[i];
    f[2 * kNodes + i] = g[i];
  }
  return f;
}

std::array<double, kStateSize> EnvState::vector() const noexcept {
  std::array<double, kStateSize> v{};
  const auto f = features();
  std::copy(f.begin(), f.end(), v.begin());
  v[kFeatures] = stab;
  return v;
}

double LinearOracle::margin(std::span<const double, kFeatures> features) const {
  double m = bias_;
  for (std::size_t i = 0; i < kFeatures; ++i) m += weights_[i] * features[i];
  return m;
}

std::shared_ptr<const StabilityOracle> linear_test_oracle(std::array<double, kFeatures> weights, double bias) {
  return std::make_shared<LinearOracle>(weights, bias);
}

double SurrogateOracle::margin(std::span<const double, kFeatures> features) const {
  return -trees::predict_gbt_value(model_, features);
}

trees::GbtParams SurrogateConfig::default_surrogate_params() {
  trees::GbtParams p;
  p.loss = trees::Loss::Squared;
  p.split_mode = trees::SplitMode::Histogram;
  p.n_stages = 600;
  p.learning_rate = 0.1;
  p.max_depth = 8;
  return p;
}

std::shared_ptr<const SurrogateOracle> fit_surrogate_oracle(const Dataset& train, const SurrogateConfig& config) {
  if (train.empty()) throw Error(ErrorCode::EmptyInput, "surrogate oracle needs training rows");
  auto params = config.gbt;
  params.loss = trees::Loss::Squared;
  return std::make_shared<SurrogateOracle>(trees::fit_gbt(train.feature_matrix(), train.stab_values(), params));
}

double oracle_rmse(const StabilityOracle& oracle, const Dataset& ds) {
  if (ds.empty()) throw Error(ErrorCode::EmptyInput, "no rows to score");
  double sum = 0.0;
  for (const auto& r : ds.records()) {
    const auto f = r.features();
    const double err = -oracle.margin(f) - r.stab;
    sum += err * err;
  }
  return std::sqrt(sum / static_cast<double>(ds.size()));
}

void validate(const EpisodeConfig& config) {
  if (config.max_steps < 1) throw Error(ErrorCode::InvalidConfig, "max_steps must be at least 1");
  if (!(config.delta > 0.0 && config.delta < 1.0)) throw Error(ErrorCode::InvalidConfig, "delta must lie in (0, 1)");
  if (!(config.eps_stab >= 0.0)) throw Error(ErrorCode::InvalidConfig, "eps_stab must be non-negative");
}

EnvState apply_action(const EnvState& s, Action a, const EpisodeConfig& config) {
  if (a == Action::MaintainPower) return s;
  const double factor = a == Action::IncreasePower ? 1.0 + config.delta : 1.0 - config.delta;
  EnvState next = s;
  if (config.target == ActionTarget::PowerResponse) {
    for (double& g : next.g) g = std::clamp(g * factor, kGainMin, kGainMax);
    return next;
  }
  const double producer = std::clamp(s.p[0] * factor, kProducerMin, kProducerMax);
  const double scale = producer / s.p[0];
  double consumers = 0.0;
  for (std::size_t j = 1; j < kNodes; ++j) {
    next.p[j] = std::clamp(s.p[j] * scale, kConsumerMin, kConsumerMax);
    consumers += next.p[j];
  }
  next.p[0] = -consumers;
  return next;
}

GridEnv::GridEnv(std::shared_ptr<const StabilityOracle> oracle, EpisodeConfig config, std::vector<GridRecord> pool)
    : oracle_(std::move(oracle)), config_(config), pool_(std::move(pool)) {
  if (!oracle_) throw Error(ErrorCode::InvalidConfig, "environment needs an oracle");
  validate(config_);
}

std::size_t GridEnv::unstable_pool_size() const {
  if (!unstable_) {
    unstable_.emplace();
    for (std::size_t i = 0; i < pool_.size(); ++i) {
      const auto f = pool_[i].features();
      if (oracle_->margin(f) <= 0.0) unstable_->push_back(i);
    }
  }
  return unstable_->size();
}

void GridEnv::refresh_stab(EnvState& s) const {
  const auto f = s.features();
  s.stab = -oracle_->margin(f);
}

const EnvState& GridEnv::reset(Rng& rng) {
  if (unstable_pool_size() == 0) throw Error(ErrorCode::NotUnstable, "start pool has no oracle-unstable rows");
  const std::size_t pick = (*unstable_)[rng.below(unstable_->size())];
  return reset(pool_[pick]);
}

const EnvState& GridEnv::reset(const GridRecord& record, bool allow_stable) {
  EnvState s = from_record(record);
  refresh_stab(s);
  if (s.margin() > 0.0 && !allow_stable) {
    throw Error(ErrorCode::NotUnstable, "start record is stable under the oracle (margin " + std::to_string(s.margin()) + ")");
  }
  state_ = s;
  steps_ = 0;
  done_ = false;
  return state_;
}

Transition GridEnv::step(Action action) {
  if (done_) throw Error(ErrorCode::EpisodeFinished, "reset the environment before stepping");
  const int id = static_cast<int>(action);
  if (id < 0 || id >= kActions) throw Error(ErrorCode::InvalidConfig, "unknown action " + std::to_string(id));
  Transition t;
  t.state = state_.vector();
  t.action = action;
  const double m_old = state_.margin();
  EnvState next = apply_action(state_, action, config_);
  refresh_stab(next);
  const double m_new = next.margin();
  if (m_new > m_old + config_.eps_stab) {
    t.reward = kRewardMagnitude;
  } else if (m_new < m_old - config_.eps_stab) {
    t.reward = -kRewardMagnitude;
  }
  state_ = next;
  ++steps_;
  t.success = m_new > 0.0;
  t.done = t.success || steps_ >= config_.max_steps;
  done_ = t.done;
  t.next_state = state_.vector();
  return t;
}

EpisodeResult run_episode(GridEnv& env, const PolicyFn& policy) {
  EpisodeResult result;
  while (!env.done()) {
    Transition t = env.step(policy(env.state()));
    result.total_reward += t.reward;
    result.success = t.success;
    result.trajectory.push_back(t);
  }
  result.steps = static_cast<int>(result.trajectory.size());
  return result;
}

PolicyFn constant_policy(Action a) {
  return [a](const EnvState&) { return a; };
}

void write_trajectory_header(std::ostream& out) {
  out << "episode,step";
  for (std::size_t c = 0; c < kStateSize; ++c) out << ',' << csv_columns()[c];
  out << ",action,reward,done\n";
}

void write_trajectory(std::ostream& out, std::size_t episode, std::span<const Transition> trajectory) {
  char buf[32];
  for (std::size_t i = 0; i < trajectory.size(); ++i) {
    const auto& t = trajectory[i];
    out << episode << ',' << i;
    for (double v : t.state) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      out << buf;
    }
    std::snprintf(buf, sizeof buf, ",%d,%g,%d\n", static_cast<int>(t.action), t.reward, t.done ? 1 : 0);
    out << buf;
  }
}

}  // namespace gridstab::env
