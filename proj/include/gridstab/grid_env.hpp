#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "gridstab/data.hpp"
#include "gridstab/random.hpp"
#include "gridstab/tree.hpp"

namespace gridstab::env {

inline constexpr std::size_t kStateSize = 13;
inline constexpr int kActions = 3;

enum class Action : int { DecreasePower = 0, MaintainPower = 1, IncreasePower = 2 };

struct EnvState {
  std::array<double, kNodes> tau{};
  std::array<double, kNodes> p{};
  std::array<double, kNodes> g{};
  double stab = 0.0;  // = -margin

  std::array<double, kFeatures> features() const noexcept;
  // tau1..4, p1..4, g1..4, stab
  std::array<double, kStateSize> vector() const noexcept;
  double margin() const noexcept { return -stab; }

  friend bool operator==(const EnvState&, const EnvState&) = default;
};

// Margin m(features) with m > 0 meaning stable.
class StabilityOracle {
 public:
  virtual ~StabilityOracle() = default;
  virtual double margin(std::span<const double, kFeatures> features) const = 0;
};

class LinearOracle final : public StabilityOracle {
 public:
  LinearOracle(std::array<double, kFeatures> weights, double bias) : weights_(weights), bias_(bias) {}
  double margin(std::span<const double, kFeatures> features) const override;

 private:
  std::array<double, kFeatures> weights_;
  double bias_;
};

std::shared_ptr<const StabilityOracle> linear_test_oracle(std::array<double, kFeatures> weights, double bias);

// Squared-loss GBT regressor on stab; margin = -prediction.
class SurrogateOracle final : public StabilityOracle {
 public:
  explicit SurrogateOracle(trees::GbtModel model) : model_(std::move(model)) {}
  double margin(std::span<const double, kFeatures> features) const override;
  const trees::GbtModel& model() const noexcept { return model_; }

 private:
  trees::GbtModel model_;
};

struct SurrogateConfig {
  trees::GbtParams gbt = default_surrogate_params();
  static trees::GbtParams default_surrogate_params();
};

std::shared_ptr<const SurrogateOracle> fit_surrogate_oracle(const Dataset& train, const SurrogateConfig& config = {});
// Root-mean-square error of the oracle's stab prediction (-margin) on `ds`.
double oracle_rmse(const StabilityOracle& oracle, const Dataset& ds);

// What the three actions scale. ProducerPower: p[0] by (1 ± delta) with
// proportional consumer rescaling. PowerResponse: every node's elasticity g by
// (1 ± delta), clamped to the dataset range.
enum class ActionTarget { ProducerPower, PowerResponse };

struct EpisodeConfig {
  int max_steps = 50;
  double delta = 0.05;
  double eps_stab = 1e-4;
  ActionTarget target = ActionTarget::ProducerPower;
};

void validate(const EpisodeConfig& config);

struct Transition {
  std::array<double, kStateSize> state{};
  Action action = Action::MaintainPower;
  double reward = 0.0;
  std::array<double, kStateSize> next_state{};
  bool done = false;
  bool success = false;  // done because the margin became positive
};

// Applies one action to the grid variables (no oracle involved).
EnvState apply_action(const EnvState& s, Action a, const EpisodeConfig& config);

class GridEnv {
 public:
  // `pool` holds candidate start records for seeded resets; only those the oracle
  // rates unstable (margin <= 0) are used.
  GridEnv(std::shared_ptr<const StabilityOracle> oracle, EpisodeConfig config, std::vector<GridRecord> pool = {});

  // Seeded draw from the unstable part of the pool. Throws NotUnstable if it is empty.
  const EnvState& reset(Rng& rng);
  // Throws NotUnstable if the oracle rates `record` stable, unless `allow_stable`.
  const EnvState& reset(const GridRecord& record, bool allow_stable = false);

  // Throws EpisodeFinished after a terminal transition or before any reset.
  Transition step(Action action);

  const EnvState& state() const noexcept { return state_; }
  int steps() const noexcept { return steps_; }
  bool done() const noexcept { return done_; }
  const EpisodeConfig& config() const noexcept { return config_; }
  const StabilityOracle& oracle() const noexcept { return *oracle_; }
  std::size_t unstable_pool_size() const;

 private:
  void refresh_stab(EnvState& s) const;

  std::shared_ptr<const StabilityOracle> oracle_;
  EpisodeConfig config_;
  std::vector<GridRecord> pool_;
  mutable std::optional<std::vector<std::size_t>> unstable_;  // computed on first use
  EnvState state_;
  int steps_ = 0;
  bool done_ = true;
};

using EnvFactory = std::function<GridEnv()>;
using PolicyFn = std::function<Action(const EnvState&)>;

struct EpisodeResult {
  bool success = false;
  int steps = 0;
  double total_reward = 0.0;
  std::vector<Transition> trajectory;
};

// Runs `policy` from the env's current (freshly reset) state until done.
EpisodeResult run_episode(GridEnv& env, const PolicyFn& policy);

PolicyFn constant_policy(Action a);

// Columns: episode, step, tau1..4, p1..4, g1..4, stab, action, reward, done.
void write_trajectory_header(std::ostream& out);
void write_trajectory(std::ostream& out, std::size_t episode, std::span<const Transition> trajectory);

}  // namespace gridstab::env
