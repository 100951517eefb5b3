#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "gridstab/grid_env.hpp"
#include "gridstab/mlp.hpp"
#include "gridstab/random.hpp"

namespace gridstab::rl {

// Tabular Bellman update: q + alpha * (r + gamma * max_q_next - q).
double q_update(double q, double reward, double max_q_next, double alpha, double gamma);
// Clipped surrogate term: min(r * A, clip(r, 1 - eps, 1 + eps) * A).
double ppo_objective(double ratio, double advantage, double clip_eps);
// sum_k gamma^k r_k + gamma^n v_terminal - v_s. Throws EmptyInput for no rewards.
double advantage_nstep(std::span<const double> rewards, double v_terminal, double v_s, double gamma);

enum class Algorithm { Dqn, A2c, Ppo };
std::string_view to_string(Algorithm a) noexcept;
Algorithm algorithm_from(std::string_view name);  // "dqn" | "a2c" | "ppo"; throws InvalidConfig

struct DqnParams {
  std::size_t replay_capacity = 10000;
  int target_sync_interval = 250;  // environment steps
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  double epsilon_decay_fraction = 0.6;  // of the episode budget
  int learning_starts = 64;             // transitions before the first update
};

struct A2cParams {
  int n_step = 5;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
};

struct PpoParams {
  double clip_eps = 0.2;
  int rollout_length = 512;
  int epochs_per_update = 4;
  int n_step = 5;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
};

struct AgentConfig {
  Algorithm algorithm = Algorithm::Dqn;
  double learning_rate = 3e-4;
  double gamma = 0.99;
  int batch_size = 64;  // dqn and ppo
  std::vector<int> hidden = {64, 64};
  double max_grad_norm = 0.5;  // policy-gradient trainers
  int episodes = 150;
  std::uint64_t seed = 0;
  DqnParams dqn;
  A2cParams a2c;
  PpoParams ppo;
};

void validate(const AgentConfig& config);

// Fixed affine map of the 12 features onto roughly [-1, 1] using the dataset's value ranges;
// stab goes through tanh(10 * stab) so oracles with a wider margin scale stay bounded.
std::array<double, env::kStateSize> normalize_observation(const std::array<double, env::kStateSize>& state);

// DQN: q_net only. A2C/PPO: actor (softmax head) and critic (scalar head).
struct Policy {
  Algorithm algorithm = Algorithm::Dqn;
  nn::MlpModel q_net;
  nn::MlpModel actor;
  nn::MlpModel critic;

  // Q-values (dqn) or action probabilities (a2c/ppo).
  std::array<double, env::kActions> action_values(const env::EnvState& s) const;
  // Argmax, ties toward the lower action index.
  env::Action greedy(const env::EnvState& s) const;
  env::PolicyFn greedy_fn() const;
};

std::array<double, env::kActions> action_probabilities(const nn::MlpModel& actor, const env::EnvState& s);
int argmax_action(std::span<const double> values);

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  void push(const env::Transition& t);
  std::size_t size() const noexcept { return items_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }
  // Uniform with replacement. Throws InvalidConfig when size() < batch.
  std::vector<const env::Transition*> sample(std::size_t batch, Rng& rng) const;
  const std::deque<env::Transition>& items() const noexcept { return items_; }

 private:
  std::size_t capacity_;
  std::deque<env::Transition> items_;
};

struct LearningCurve {
  std::vector<double> rewards;
  std::vector<bool> successes;
  std::vector<double> cumulative_seconds;
  std::vector<int> steps;

  std::size_t size() const noexcept { return rewards.size(); }
  double total_seconds() const noexcept { return cumulative_seconds.empty() ? 0.0 : cumulative_seconds.back(); }
};

void write_curve_csv(const LearningCurve& curve, const std::filesystem::path& path);

struct TrainResult {
  Policy policy;
  LearningCurve curve;
  std::uint64_t env_steps = 0;
  std::uint64_t gradient_updates = 0;
};

// Observer called after every DQN environment step (tests use it to watch the target network).
struct DqnProbe {
  std::uint64_t step = 0;
  const nn::MlpModel* q_net = nullptr;
  const nn::MlpModel* target = nullptr;
};
using DqnObserver = std::function<void(const DqnProbe&)>;

// One PPO training sample with its behaviour-policy statistics.
struct PpoSample {
  std::array<double, env::kStateSize> obs{};  // normalized
  int action = 0;
  double logp_old = 0.0;
  double advantage = 0.0;
  double return_target = 0.0;
};

struct PpoStepStats {
  std::vector<double> ratios;
  double clipped_objective = 0.0;  // mean over the batch, before normalization of advantages
  double entropy = 0.0;
  double value_loss = 0.0;
};

// One clipped-objective gradient step on actor and critic. Advantages are used as given.
PpoStepStats ppo_update_minibatch(nn::MlpModel& actor, nn::MlpModel& critic, std::span<const PpoSample> batch,
                                  const AgentConfig& config, nn::AdamState& actor_opt, nn::AdamState& critic_opt);

// Training episodes start from `env.reset(rng)` draws of the environment's pool.
TrainResult train_dqn(const env::EnvFactory& make_env, const AgentConfig& config, const DqnObserver& observer = {});
TrainResult train_a2c(const env::EnvFactory& make_env, const AgentConfig& config);
TrainResult train_ppo(const env::EnvFactory& make_env, const AgentConfig& config);
TrainResult train_agent(const env::EnvFactory& make_env, const AgentConfig& config);

struct Evaluation {
  double success_rate = 0.0;
  double mean_steps = 0.0;
  double mean_reward = 0.0;
  int episodes = 0;
  std::vector<std::vector<env::Transition>> trajectories;  // the first `keep_trajectories` episodes
};

// Episode i starts from a draw seeded by derive_seed(seed, ..., i).
Evaluation evaluate_policy(const env::EnvFactory& make_env, const env::PolicyFn& policy, int n_episodes,
                           std::uint64_t seed, int keep_trajectories = 0);

inline constexpr int kNotConverged = -1;

// First episode whose trailing-window mean reward reaches threshold_fraction of the best
// trailing-window mean; kNotConverged when none does. Throws CurveTooShort.
int episodes_to_convergence(std::span<const double> rewards, int window = 10, double threshold_fraction = 0.9);

nlohmann::json to_json(const Policy& policy);
Policy policy_from_json(const nlohmann::json& j);

}  // namespace gridstab::rl
