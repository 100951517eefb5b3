#include "gridstab/rl.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "gridstab/error.hpp"

namespace gridstab::rl {

namespace {

constexpr int kFormatVersion = 1;
constexpr std::uint64_t kInitStage = 0x696e6974;
constexpr std::uint64_t kEnvStage = 0x656e7673;
constexpr std::uint64_t kActStage = 0x61637473;
constexpr std::uint64_t kEvalStage = 0x6576616c;

using Obs = std::array<double, env::kStateSize>;
using Clock = std::chrono::steady_clock;

Eigen::MatrixXd obs_matrix(std::span<const Obs> batch) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(env::kStateSize), static_cast<Eigen::Index>(batch.size()));
  for (std::size_t c = 0; c < batch.size(); ++c) {
    for (std::size_t r = 0; r < env::kStateSize; ++r) {
      x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = batch[c][r];
    }
  }
  return x;
}

Eigen::VectorXd forward_obs(const nn::MlpModel& model, const Obs& obs) { return nn::forward_one(model, obs); }

std::vector<int> network_sizes(const AgentConfig& config, int outputs) {
  std::vector<int> sizes{static_cast<int>(env::kStateSize)};
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(outputs);
  return sizes;
}

nn::MlpModel make_net(const AgentConfig& config, int outputs, nn::OutputActivation head, std::uint64_t index) {
  nn::MlpModel net = nn::init_mlp(network_sizes(config, outputs), head,
                                  std::vector<double>(config.hidden.size(), 0.0),
                                  derive_seed(config.seed, kInitStage, index));
  // Small policy head: the initial policy is close to uniform.
  if (head == nn::OutputActivation::Softmax) net.mutable_params().weights.back() *= 0.01;
  return net;
}

int sample_action(const std::array<double, env::kActions>& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (int a = 0; a < env::kActions - 1; ++a) {
    acc += probs[static_cast<std::size_t>(a)];
    if (u < acc) return a;
  }
  return env::kActions - 1;
}

// Shared global norm over actor and critic gradients.
void clip_joint(nn::ParamSet& a, nn::ParamSet& b, double max_norm) {
  const double norm = std::sqrt(a.squared_norm() + b.squared_norm());
  if (norm > max_norm && norm > 0.0) {
    a.scale(max_norm / norm);
    b.scale(max_norm / norm);
  }
}

struct EpisodeClock {
  Clock::time_point start = Clock::now();
  double seconds() const { return std::chrono::duration<double>(Clock::now() - start).count(); }
};

void record_episode(LearningCurve& curve, double reward, bool success, int steps, const EpisodeClock& clock) {
  curve.rewards.push_back(reward);
  curve.successes.push_back(success);
  curve.steps.push_back(steps);
  curve.cumulative_seconds.push_back(clock.seconds());
}

// Per-sample logits gradient of -(A * log pi(a)) - beta * H(pi), before averaging.
void policy_logit_grad(const Eigen::Ref<const Eigen::VectorXd>& probs, int action, double weight, double entropy_coef,
                       Eigen::Ref<Eigen::VectorXd> out) {
  double entropy = 0.0;
  for (Eigen::Index j = 0; j < probs.size(); ++j) {
    if (probs(j) > 0.0) entropy -= probs(j) * std::log(probs(j));
  }
  for (Eigen::Index j = 0; j < probs.size(); ++j) {
    const double onehot = j == action ? 1.0 : 0.0;
    out(j) = weight * (probs(j) - onehot);
    if (probs(j) > 0.0) out(j) += entropy_coef * probs(j) * (std::log(probs(j)) + entropy);
  }
}

double entropy_of(const Eigen::Ref<const Eigen::VectorXd>& probs) {
  double h = 0.0;
  for (Eigen::Index j = 0; j < probs.size(); ++j) {
    if (probs(j) > 0.0) h -= probs(j) * std::log(probs(j));
  }
  return h;
}

}  // namespace

double q_update(double q, double reward, double max_q_next, double alpha, double gamma) {
  return q + alpha * (reward + gamma * max_q_next - q);
}

double ppo_objective(double ratio, double advantage, double clip_eps) {
  const double clipped = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
  return std::min(ratio * advantage, clipped * advantage);
}

double advantage_nstep(std::span<const double> rewards, double v_terminal, double v_s, double gamma) {
  if (rewards.empty()) throw Error(ErrorCode::EmptyInput, "n-step advantage needs at least one reward");
  double ret = 0.0;
  double discount = 1.0;
  for (double r : rewards) {
    ret += discount * r;
    discount *= gamma;
  }
  return ret + discount * v_terminal - v_s;
}

std::string_view to_string(Algorithm a) noexcept {
  switch (a) {
    case Algorithm::Dqn: return "dqn";
    case Algorithm::A2c: return "a2c";
    case Algorithm::Ppo: return "ppo";
  }
  return "dqn";
}

Algorithm algorithm_from(std::string_view name) {
  if (name == "dqn") return Algorithm::Dqn;
  if (name == "a2c") return Algorithm::A2c;
  if (name == "ppo") return Algorithm::Ppo;
  throw Error(ErrorCode::InvalidConfig, "unknown algorithm '" + std::string(name) + "' (expected dqn, a2c or ppo)");
}

void validate(const AgentConfig& c) {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidConfig, msg); };
  if (!(c.gamma > 0.0 && c.gamma <= 1.0)) fail("gamma must lie in (0, 1]");
  if (!(c.learning_rate > 0.0)) fail("learning_rate must be positive");
  if (c.batch_size < 1) fail("batch_size must be at least 1");
  if (c.episodes < 1) fail("episodes must be at least 1");
  if (c.hidden.empty()) fail("at least one hidden layer required");
  if (!(c.max_grad_norm > 0.0)) fail("max_grad_norm must be positive");
  if (c.dqn.replay_capacity < 1) fail("replay_capacity must be at least 1");
  if (c.dqn.target_sync_interval < 1) fail("target_sync_interval must be at least 1");
  if (!(c.dqn.epsilon_decay_fraction > 0.0 && c.dqn.epsilon_decay_fraction <= 1.0)) fail("epsilon_decay_fraction must lie in (0, 1]");
  if (c.a2c.n_step < 1 || c.ppo.n_step < 1) fail("n_step must be at least 1");
  if (!(c.ppo.clip_eps > 0.0 && c.ppo.clip_eps < 1.0)) fail("clip_eps must lie in (0, 1)");
  if (c.ppo.rollout_length < 1 || c.ppo.epochs_per_update < 1) fail("rollout_length and epochs_per_update must be positive");
}

Obs normalize_observation(const Obs& s) {
  Obs out{};
  for (std::size_t i = 0; i < kNodes; ++i) {
    out[i] = (s[i] - 5.25) / 4.75;
    out[kNodes + i] = i == 0 ? (s[kNodes] - 3.75) / 2.25 : (s[kNodes + i] + 1.25) / 0.75;
    out[2 * kNodes + i] = (s[2 * kNodes + i] - 0.525) / 0.475;
  }
  out[kFeatures] = std::tanh(s[kFeatures] * 10.0);
  return out;
}

std::array<double, env::kActions> action_probabilities(const nn::MlpModel& actor, const env::EnvState& s) {
  const Eigen::VectorXd p = forward_obs(actor, normalize_observation(s.vector()));
  return {p(0), p(1), p(2)};
}

int argmax_action(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorCode::EmptyInput, "no action values");
  int best = 0;
  for (std::size_t a = 1; a < values.size(); ++a) {
    if (values[a] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(a);
  }
  return best;
}

std::array<double, env::kActions> Policy::action_values(const env::EnvState& s) const {
  if (algorithm == Algorithm::Dqn) {
    if (q_net.n_layers() == 0) throw Error(ErrorCode::UntrainedModel, "policy has no Q-network");
    const Eigen::VectorXd q = forward_obs(q_net, normalize_observation(s.vector()));
    return {q(0), q(1), q(2)};
  }
  if (actor.n_layers() == 0) throw Error(ErrorCode::UntrainedModel, "policy has no actor network");
  return action_probabilities(actor, s);
}

env::Action Policy::greedy(const env::EnvState& s) const {
  const auto v = action_values(s);
  return static_cast<env::Action>(argmax_action(v));
}

env::PolicyFn Policy::greedy_fn() const {
  return [self = *this](const env::EnvState& s) { return self.greedy(s); };
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw Error(ErrorCode::InvalidConfig, "replay capacity must be positive");
}

void ReplayBuffer::push(const env::Transition& t) {
  if (items_.size() == capacity_) items_.pop_front();
  items_.push_back(t);
}

std::vector<const env::Transition*> ReplayBuffer::sample(std::size_t batch, Rng& rng) const {
  if (items_.size() < batch || batch == 0) {
    throw Error(ErrorCode::InvalidConfig, "cannot sample " + std::to_string(batch) + " from " +
                                              std::to_string(items_.size()) + " transitions");
  }
  std::vector<const env::Transition*> out(batch);
  for (auto& p : out) p = &items_[rng.below(items_.size())];
  return out;
}

void write_curve_csv(const LearningCurve& curve, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  out << "episode,reward,success,cumulative_seconds\n";
  char buf[96];
  for (std::size_t i = 0; i < curve.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%g,%d,%.6f\n", i, curve.rewards[i], curve.successes[i] ? 1 : 0,
                  curve.cumulative_seconds[i]);
    out << buf;
  }
}

TrainResult train_dqn(const env::EnvFactory& make_env, const AgentConfig& config, const DqnObserver& observer) {
  validate(config);
  const auto& p = config.dqn;
  env::GridEnv env = make_env();
  Rng env_rng(derive_seed(config.seed, kEnvStage));
  Rng act_rng(derive_seed(config.seed, kActStage));

  TrainResult result;
  result.policy.algorithm = Algorithm::Dqn;
  nn::MlpModel& q = result.policy.q_net;
  q = make_net(config, env::kActions, nn::OutputActivation::Identity, 0);
  nn::MlpModel target = q;
  nn::AdamState adam = nn::make_adam(q, config.learning_rate);
  ReplayBuffer buffer(p.replay_capacity);
  nn::ForwardCache cache;
  const auto batch = static_cast<std::size_t>(config.batch_size);
  const std::size_t warm = std::max(batch, static_cast<std::size_t>(std::max(p.learning_starts, 0)));
  const double decay_episodes = p.epsilon_decay_fraction * config.episodes;

  std::vector<Obs> states(batch), next_states(batch);
  Eigen::MatrixXd grad(env::kActions, static_cast<Eigen::Index>(batch));
  EpisodeClock clock;
  for (int episode = 0; episode < config.episodes; ++episode) {
    const double frac = std::min(1.0, episode / decay_episodes);
    const double epsilon = p.epsilon_start + (p.epsilon_end - p.epsilon_start) * frac;
    env.reset(env_rng);
    double total = 0.0;
    bool success = false;
    while (!env.done()) {
      int action;
      if (act_rng.uniform() < epsilon) {
        action = static_cast<int>(act_rng.below(env::kActions));
      } else {
        const Eigen::VectorXd qs = forward_obs(q, normalize_observation(env.state().vector()));
        action = argmax_action(std::span<const double>(qs.data(), env::kActions));
      }
      const env::Transition t = env.step(static_cast<env::Action>(action));
      total += t.reward;
      success = t.success;
      buffer.push(t);
      ++result.env_steps;

      if (buffer.size() >= warm) {
        const auto sampled = buffer.sample(batch, act_rng);
        for (std::size_t i = 0; i < batch; ++i) {
          states[i] = normalize_observation(sampled[i]->state);
          next_states[i] = normalize_observation(sampled[i]->next_state);
        }
        const Eigen::MatrixXd q_next = nn::forward(target, obs_matrix(next_states));
        const Eigen::MatrixXd q_now = nn::forward(q, obs_matrix(states), nn::Mode::Train, act_rng, &cache);
        grad.setZero();
        for (std::size_t i = 0; i < batch; ++i) {
          const auto col = static_cast<Eigen::Index>(i);
          // Only reaching stability is terminal; a timeout still bootstraps.
          const double bootstrap = sampled[i]->success ? 0.0 : q_next.col(col).maxCoeff();
          const double y = sampled[i]->reward + config.gamma * bootstrap;
          const int a = static_cast<int>(sampled[i]->action);
          grad(a, col) = (q_now(a, col) - y) / static_cast<double>(batch);
        }
        nn::adam_step(q, nn::backward(q, cache, grad), adam);
        ++result.gradient_updates;
      }
      if (result.env_steps % static_cast<std::uint64_t>(p.target_sync_interval) == 0) target = q;
      if (observer) observer({result.env_steps, &q, &target});
    }
    record_episode(result.curve, total, success, env.steps(), clock);
  }
  return result;
}

TrainResult train_a2c(const env::EnvFactory& make_env, const AgentConfig& config) {
  validate(config);
  const auto& p = config.a2c;
  env::GridEnv env = make_env();
  Rng env_rng(derive_seed(config.seed, kEnvStage));
  Rng act_rng(derive_seed(config.seed, kActStage));

  TrainResult result;
  result.policy.algorithm = Algorithm::A2c;
  nn::MlpModel& actor = result.policy.actor;
  nn::MlpModel& critic = result.policy.critic;
  actor = make_net(config, env::kActions, nn::OutputActivation::Softmax, 1);
  critic = make_net(config, 1, nn::OutputActivation::Identity, 2);
  nn::AdamState actor_opt = nn::make_adam(actor, config.learning_rate);
  nn::AdamState critic_opt = nn::make_adam(critic, config.learning_rate);
  nn::ForwardCache actor_cache, critic_cache;

  std::vector<Obs> seg_obs;
  std::vector<int> seg_actions;
  std::vector<double> seg_rewards;
  EpisodeClock clock;
  for (int episode = 0; episode < config.episodes; ++episode) {
    env.reset(env_rng);
    double total = 0.0;
    bool success = false;
    while (!env.done()) {
      seg_obs.clear();
      seg_actions.clear();
      seg_rewards.clear();
      bool terminal = false;
      Obs last_next{};
      while (static_cast<int>(seg_obs.size()) < p.n_step && !env.done()) {
        const Obs obs = normalize_observation(env.state().vector());
        const Eigen::VectorXd probs = forward_obs(actor, obs);
        const int action = sample_action({probs(0), probs(1), probs(2)}, act_rng);
        const env::Transition t = env.step(static_cast<env::Action>(action));
        seg_obs.push_back(obs);
        seg_actions.push_back(action);
        seg_rewards.push_back(t.reward);
        total += t.reward;
        success = t.success;
        terminal = t.success;
        last_next = normalize_observation(t.next_state);
        ++result.env_steps;
      }
      const std::size_t n = seg_obs.size();
      const double v_boot = terminal ? 0.0 : forward_obs(critic, last_next)(0);
      const Eigen::MatrixXd x = obs_matrix(seg_obs);
      const Eigen::MatrixXd probs = nn::forward(actor, x, nn::Mode::Train, act_rng, &actor_cache);
      const Eigen::MatrixXd values = nn::forward(critic, x, nn::Mode::Train, act_rng, &critic_cache);
      Eigen::MatrixXd actor_grad(env::kActions, static_cast<Eigen::Index>(n));
      Eigen::MatrixXd critic_grad(1, static_cast<Eigen::Index>(n));
      for (std::size_t i = 0; i < n; ++i) {
        const auto col = static_cast<Eigen::Index>(i);
        const double v = values(0, col);
        const double adv = advantage_nstep(std::span<const double>(seg_rewards).subspan(i), v_boot, v, config.gamma);
        const double ret = adv + v;
        policy_logit_grad(probs.col(col), seg_actions[i], adv / static_cast<double>(n),
                          p.entropy_coef / static_cast<double>(n), actor_grad.col(col));
        critic_grad(0, col) = p.value_coef * 2.0 * (v - ret) / static_cast<double>(n);
      }
      nn::ParamSet ga = nn::backward(actor, actor_cache, actor_grad, nn::GradWrt::Logits);
      nn::ParamSet gc = nn::backward(critic, critic_cache, critic_grad);
      clip_joint(ga, gc, config.max_grad_norm);
      nn::adam_step(actor, ga, actor_opt);
      nn::adam_step(critic, gc, critic_opt);
      ++result.gradient_updates;
    }
    record_episode(result.curve, total, success, env.steps(), clock);
  }
  return result;
}

PpoStepStats ppo_update_minibatch(nn::MlpModel& actor, nn::MlpModel& critic, std::span<const PpoSample> batch,
                                  const AgentConfig& config, nn::AdamState& actor_opt, nn::AdamState& critic_opt) {
  if (batch.empty()) throw Error(ErrorCode::EmptyInput, "empty PPO minibatch");
  const auto& p = config.ppo;
  const std::size_t n = batch.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<Obs> obs(n);
  for (std::size_t i = 0; i < n; ++i) obs[i] = batch[i].obs;
  const Eigen::MatrixXd x = obs_matrix(obs);
  Rng unused(0);  // no dropout in RL networks
  nn::ForwardCache actor_cache, critic_cache;
  const Eigen::MatrixXd probs = nn::forward(actor, x, nn::Mode::Train, unused, &actor_cache);
  const Eigen::MatrixXd values = nn::forward(critic, x, nn::Mode::Train, unused, &critic_cache);

  PpoStepStats stats;
  stats.ratios.resize(n);
  Eigen::MatrixXd actor_grad(env::kActions, static_cast<Eigen::Index>(n));
  Eigen::MatrixXd critic_grad(1, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    const auto& s = batch[i];
    const double pi_a = probs(s.action, col);
    const double ratio = std::exp(std::log(pi_a) - s.logp_old);
    stats.ratios[i] = ratio;
    const double a = s.advantage;
    stats.clipped_objective += ppo_objective(ratio, a, p.clip_eps) * inv_n;
    stats.entropy += entropy_of(probs.col(col)) * inv_n;
    // d(ratio * A)/d logits = A * ratio * (onehot - pi); the clipped branch is constant in the parameters.
    const double clipped = std::clamp(ratio, 1.0 - p.clip_eps, 1.0 + p.clip_eps);
    const bool unclipped_active = ratio * a <= clipped * a;
    const double weight = unclipped_active ? a * ratio * inv_n : 0.0;
    policy_logit_grad(probs.col(col), s.action, weight, p.entropy_coef * inv_n, actor_grad.col(col));
    const double err = values(0, col) - s.return_target;
    stats.value_loss += err * err * inv_n;
    critic_grad(0, col) = p.value_coef * 2.0 * err * inv_n;
  }
  nn::ParamSet ga = nn::backward(actor, actor_cache, actor_grad, nn::GradWrt::Logits);
  nn::ParamSet gc = nn::backward(critic, critic_cache, critic_grad);
  clip_joint(ga, gc, config.max_grad_norm);
  nn::adam_step(actor, ga, actor_opt);
  nn::adam_step(critic, gc, critic_opt);
  return stats;
}

TrainResult train_ppo(const env::EnvFactory& make_env, const AgentConfig& config) {
  validate(config);
  const auto& p = config.ppo;
  env::GridEnv env = make_env();
  Rng env_rng(derive_seed(config.seed, kEnvStage));
  Rng act_rng(derive_seed(config.seed, kActStage));

  TrainResult result;
  result.policy.algorithm = Algorithm::Ppo;
  nn::MlpModel& actor = result.policy.actor;
  nn::MlpModel& critic = result.policy.critic;
  actor = make_net(config, env::kActions, nn::OutputActivation::Softmax, 1);
  critic = make_net(config, 1, nn::OutputActivation::Identity, 2);
  nn::AdamState actor_opt = nn::make_adam(actor, config.learning_rate);
  nn::AdamState critic_opt = nn::make_adam(critic, config.learning_rate);

  struct Step {
    Obs obs;
    int action;
    double logp;
    double value;
    double reward;
    bool success;
    bool episode_end;  // success or timeout
    Obs next_obs;
  };
  std::vector<Step> rollout;
  std::vector<PpoSample> samples;
  std::vector<std::size_t> order;
  std::vector<PpoSample> minibatch;
  EpisodeClock clock;

  int episode = 0;
  double total = 0.0;
  env.reset(env_rng);
  while (episode < config.episodes) {
    rollout.clear();
    while (static_cast<int>(rollout.size()) < p.rollout_length && episode < config.episodes) {
      Step s;
      s.obs = normalize_observation(env.state().vector());
      const Eigen::VectorXd probs = forward_obs(actor, s.obs);
      s.action = sample_action({probs(0), probs(1), probs(2)}, act_rng);
      s.logp = std::log(probs(s.action));
      s.value = forward_obs(critic, s.obs)(0);
      const env::Transition t = env.step(static_cast<env::Action>(s.action));
      s.reward = t.reward;
      s.success = t.success;
      s.episode_end = t.done;
      s.next_obs = normalize_observation(t.next_state);
      rollout.push_back(s);
      total += t.reward;
      ++result.env_steps;
      if (t.done) {
        record_episode(result.curve, total, t.success, env.steps(), clock);
        ++episode;
        total = 0.0;
        if (episode < config.episodes) env.reset(env_rng);
      }
    }

    // n-step advantages, truncated at episode ends and at the rollout boundary.
    samples.clear();
    std::vector<double> rewards;
    for (std::size_t t = 0; t < rollout.size(); ++t) {
      rewards.clear();
      std::size_t k = t;
      while (true) {
        rewards.push_back(rollout[k].reward);
        if (rollout[k].episode_end || rewards.size() == static_cast<std::size_t>(p.n_step) || k + 1 == rollout.size()) break;
        ++k;
      }
      double v_boot = 0.0;
      if (!rollout[k].success) {
        v_boot = (k + 1 < rollout.size() && !rollout[k].episode_end) ? rollout[k + 1].value
                                                                    : forward_obs(critic, rollout[k].next_obs)(0);
      }
      const double adv = advantage_nstep(rewards, v_boot, rollout[t].value, config.gamma);
      samples.push_back({rollout[t].obs, rollout[t].action, rollout[t].logp, adv, adv + rollout[t].value});
    }

    order.resize(samples.size());
    std::iota(order.begin(), order.end(), 0);
    const auto mb = static_cast<std::size_t>(config.batch_size);
    for (int epoch = 0; epoch < p.epochs_per_update; ++epoch) {
      act_rng.shuffle(std::span<std::size_t>(order));
      for (std::size_t start = 0; start < order.size(); start += mb) {
        const std::size_t end = std::min(order.size(), start + mb);
        minibatch.clear();
        for (std::size_t i = start; i < end; ++i) minibatch.push_back(samples[order[i]]);
        // Per-minibatch advantage normalization.
        double mean = 0.0, sq = 0.0;
        for (const auto& s : minibatch) mean += s.advantage;
        mean /= static_cast<double>(minibatch.size());
        for (const auto& s : minibatch) sq += (s.advantage - mean) * (s.advantage - mean);
        const double sd = std::sqrt(sq / static_cast<double>(minibatch.size()));
        if (minibatch.size() > 1) {
          for (auto& s : minibatch) s.advantage = (s.advantage - mean) / (sd + 1e-8);
        }
        ppo_update_minibatch(actor, critic, minibatch, config, actor_opt, critic_opt);
        ++result.gradient_updates;
      }
    }
  }
  return result;
}

TrainResult train_agent(const env::EnvFactory& make_env, const AgentConfig& config) {
  switch (config.algorithm) {
    case Algorithm::Dqn: return train_dqn(make_env, config);
    case Algorithm::A2c: return train_a2c(make_env, config);
    case Algorithm::Ppo: return train_ppo(make_env, config);
  }
  throw Error(ErrorCode::InvalidConfig, "unknown algorithm");
}

Evaluation evaluate_policy(const env::EnvFactory& make_env, const env::PolicyFn& policy, int n_episodes,
                           std::uint64_t seed, int keep_trajectories) {
  if (n_episodes < 1) throw Error(ErrorCode::InvalidConfig, "n_episodes must be at least 1");
  env::GridEnv env = make_env();
  Evaluation ev;
  ev.episodes = n_episodes;
  int successes = 0;
  double steps = 0.0, reward = 0.0;
  for (int i = 0; i < n_episodes; ++i) {
    Rng rng(derive_seed(seed, kEvalStage, static_cast<std::uint64_t>(i)));
    env.reset(rng);
    env::EpisodeResult r = env::run_episode(env, policy);
    if (i < keep_trajectories) ev.trajectories.push_back(std::move(r.trajectory));
    successes += r.success ? 1 : 0;
    steps += r.steps;
    reward += r.total_reward;
  }
  ev.success_rate = static_cast<double>(successes) / n_episodes;
  ev.mean_steps = steps / n_episodes;
  ev.mean_reward = reward / n_episodes;
  return ev;
}

int episodes_to_convergence(std::span<const double> rewards, int window, double threshold_fraction) {
  if (window < 1) throw Error(ErrorCode::InvalidConfig, "window must be at least 1");
  const auto w = static_cast<std::size_t>(window);
  if (rewards.size() < w) {
    throw Error(ErrorCode::CurveTooShort, std::to_string(rewards.size()) + " episodes, window " + std::to_string(window));
  }
  std::vector<double> means;
  double sum = std::accumulate(rewards.begin(), rewards.begin() + static_cast<std::ptrdiff_t>(w), 0.0);
  means.push_back(sum / window);
  for (std::size_t i = w; i < rewards.size(); ++i) {
    sum += rewards[i] - rewards[i - w];
    means.push_back(sum / window);
  }
  const double best = *std::max_element(means.begin(), means.end());
  // For a negative best the fraction is taken of its magnitude, so a constant curve converges at once.
  const double threshold = best - (1.0 - threshold_fraction) * std::abs(best);
  for (std::size_t i = 0; i < means.size(); ++i) {
    if (means[i] >= threshold - 1e-12 * std::max(1.0, std::abs(best))) return static_cast<int>(i + w - 1);
  }
  return kNotConverged;
}

nlohmann::json to_json(const Policy& policy) {
  nlohmann::json j{{"format", "gridstab.policy"}, {"version", kFormatVersion}, {"algorithm", to_string(policy.algorithm)}};
  if (policy.algorithm == Algorithm::Dqn) {
    j["q_net"] = nn::to_json(policy.q_net);
  } else {
    j["actor"] = nn::to_json(policy.actor);
    j["critic"] = nn::to_json(policy.critic);
  }
  return j;
}

Policy policy_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "gridstab.policy" || j.value("version", 0) != kFormatVersion) {
    throw Error(ErrorCode::ParseError, "expected gridstab.policy version 1");
  }
  Policy p;
  p.algorithm = algorithm_from(j.at("algorithm").get<std::string>());
  if (p.algorithm == Algorithm::Dqn) {
    p.q_net = nn::mlp_from_json(j.at("q_net"));
  } else {
    p.actor = nn::mlp_from_json(j.at("actor"));
    p.critic = nn::mlp_from_json(j.at("critic"));
  }
  return p;
}

}  // namespace gridstab::rl
