#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "gridstab/error.hpp"
#include "gridstab/rl.hpp"
#include "support.hpp"

using namespace gridstab;
using namespace gridstab::rl;
using env::Action;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::IoFailure;
}

std::vector<GridRecord> random_pool(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GridRecord> pool;
  for (std::size_t i = 0; i < n; ++i) pool.push_back(testing::random_record(rng, 0.0));
  return pool;
}

// margin = p[0] - 3: raising producer power is the forced optimum.
env::EnvFactory producer_env(const std::vector<GridRecord>& pool, double bias = -3.0) {
  std::array<double, kFeatures> w{};
  w[4] = 1.0;
  auto oracle = env::linear_test_oracle(w, bias);
  env::EpisodeConfig cfg;
  cfg.target = env::ActionTarget::ProducerPower;
  return [oracle, cfg, &pool] { return env::GridEnv(oracle, cfg, pool); };
}

env::Transition dummy_transition(double tag) {
  env::Transition t;
  t.state[0] = tag;
  t.reward = tag;
  return t;
}

// Fraction of sampled unstable states from which the policy picks IncreasePower.
double increase_share(const Policy& policy, const env::EnvFactory& make_env, int samples) {
  auto e = make_env();
  Rng rng(99);
  int inc = 0;
  for (int i = 0; i < samples; ++i) inc += policy.greedy(e.reset(rng)) == Action::IncreasePower;
  return static_cast<double>(inc) / samples;
}

}  // namespace

TEST_SUITE("rl_agents") {
  TEST_CASE("q_update examples") {
    CHECK(std::abs(q_update(0.0, 20.0, 10.0, 0.5, 0.99) - 14.95) < 1e-12);
    CHECK(q_update(7.25, 20.0, 10.0, 0.0, 0.99) == 7.25);
    CHECK(std::abs(q_update(1.0, -20.0, 1.0, 0.0003, 0.99) - 0.993997) < 1e-12);
  }

  TEST_CASE("ppo_objective examples") {
    CHECK(std::abs(ppo_objective(1.5, 2.0, 0.2) - 2.4) < 1e-12);
    CHECK(std::abs(ppo_objective(0.5, -1.0, 0.2) - (-0.8)) < 1e-12);
    for (double eps : {0.05, 0.2, 0.6}) {
      for (double a : {-3.0, 0.0, 0.7}) CHECK(ppo_objective(1.0, a, eps) == a);
    }
  }

  TEST_CASE("advantage_nstep examples") {
    CHECK(advantage_nstep(std::vector<double>{20.0}, 0.0, 0.0, 0.99) == 20.0);
    CHECK(std::abs(advantage_nstep(std::vector<double>{0.0, 0.0}, 10.0, 9.8, 0.99) - 0.001) < 1e-12);
    CHECK(advantage_nstep(std::vector<double>{0.0}, 4.0, 4.0, 1.0) == 0.0);
    CHECK(code_of([] { advantage_nstep(std::vector<double>{}, 0, 0, 0.9); }) == ErrorCode::EmptyInput);
  }

  TEST_CASE("tabular q_update converges to value-iteration Q* on a 3-state MDP") {
    // Deterministic toy MDP: next state and reward per (state, action).
    const int next[3][3] = {{1, 0, 2}, {2, 0, 1}, {0, 2, 1}};
    const double reward[3][3] = {{0.0, 1.0, -1.0}, {2.0, 0.0, 0.5}, {-0.5, 1.5, 0.0}};
    const double gamma = 0.99;

    // Oracle: value iteration to machine precision.
    double qstar[3][3] = {};
    for (int it = 0; it < 100000; ++it) {
      double change = 0.0;
      double fresh[3][3];
      for (int s = 0; s < 3; ++s) {
        for (int a = 0; a < 3; ++a) {
          const int n = next[s][a];
          fresh[s][a] = reward[s][a] + gamma * std::max({qstar[n][0], qstar[n][1], qstar[n][2]});
          change = std::max(change, std::abs(fresh[s][a] - qstar[s][a]));
        }
      }
      std::copy(&fresh[0][0], &fresh[0][0] + 9, &qstar[0][0]);
      if (change < 1e-13) break;
    }

    double q[3][3] = {};
    for (int sweep = 0; sweep < 20000; ++sweep) {
      for (int s = 0; s < 3; ++s) {
        for (int a = 0; a < 3; ++a) {
          const int n = next[s][a];
          q[s][a] = q_update(q[s][a], reward[s][a], std::max({q[n][0], q[n][1], q[n][2]}), 0.5, gamma);
        }
      }
    }
    for (int s = 0; s < 3; ++s) {
      for (int a = 0; a < 3; ++a) CHECK(std::abs(q[s][a] - qstar[s][a]) < 1e-6);
    }
  }

  TEST_CASE("episodes_to_convergence examples") {
    CHECK(episodes_to_convergence(std::vector<double>(40, 5.0), 10, 0.9) == 9);
    std::vector<double> step(80, 0.0);
    std::fill(step.begin() + 30, step.end(), 100.0);
    const int c = episodes_to_convergence(step, 10, 0.9);
    CHECK(c >= 30);
    CHECK(c <= 40);
    std::vector<double> down(50);
    for (int i = 0; i < 50; ++i) down[i] = 100.0 - i;
    CHECK(episodes_to_convergence(down, 10, 0.9) == 9);
    CHECK(code_of([] { episodes_to_convergence(std::vector<double>(5, 1.0), 10, 0.9); }) == ErrorCode::CurveTooShort);
  }

  TEST_CASE("replay buffer is a bounded FIFO") {
    ReplayBuffer buf(5);
    for (int i = 0; i < 8; ++i) {
      buf.push(dummy_transition(i));
      CHECK(buf.size() <= 5);
    }
    CHECK(buf.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) CHECK(buf.items()[i].reward == 3.0 + static_cast<double>(i));
    Rng a(1), b(1);
    const auto sa = buf.sample(4, a);
    const auto sb = buf.sample(4, b);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(sa[i] == sb[i]);
      CHECK(sa[i]->reward >= 3.0);
    }
    Rng r(0);
    CHECK(code_of([&] { buf.sample(6, r); }) == ErrorCode::InvalidConfig);
  }

  TEST_CASE("policy heads: probabilities sum to one, greedy ties go low") {
    CHECK(argmax_action(std::vector<double>{1.0, 1.0, 0.0}) == 0);
    CHECK(argmax_action(std::vector<double>{0.0, 2.0, 2.0}) == 1);
    const auto actor = nn::init_mlp({13, 64, 64, 3}, nn::OutputActivation::Softmax, {0.0, 0.0}, 4);
    const auto pool = random_pool(20, 1);
    for (const auto& r : pool) {
      env::EnvState s;
      s.tau = r.tau;
      s.p = r.p;
      s.g = r.g;
      s.stab = 0.03;
      const auto p = action_probabilities(actor, s);
      CHECK(std::abs(p[0] + p[1] + p[2] - 1.0) < 1e-9);
    }
  }

  TEST_CASE("agent config validation") {
    AgentConfig c;
    CHECK_NOTHROW(validate(c));
    auto bad = c;
    bad.gamma = 0.0;
    CHECK(code_of([&] { validate(bad); }) == ErrorCode::InvalidConfig);
    bad = c;
    bad.gamma = 1.01;
    CHECK(code_of([&] { validate(bad); }) == ErrorCode::InvalidConfig);
    bad = c;
    bad.learning_rate = 0.0;
    CHECK(code_of([&] { validate(bad); }) == ErrorCode::InvalidConfig);
    bad = c;
    bad.ppo.clip_eps = 1.0;
    CHECK(code_of([&] { validate(bad); }) == ErrorCode::InvalidConfig);
    CHECK(code_of([] { algorithm_from("sarsa"); }) == ErrorCode::InvalidConfig);
    CHECK(algorithm_from("ppo") == Algorithm::Ppo);
  }

  TEST_CASE("target network stays frozen between syncs") {
    const auto pool = random_pool(100, 2);
    AgentConfig cfg;
    cfg.algorithm = Algorithm::Dqn;
    cfg.episodes = 12;
    cfg.dqn.target_sync_interval = 37;
    cfg.dqn.learning_starts = 16;
    cfg.batch_size = 16;
    cfg.seed = 5;
    std::optional<nn::MlpModel> snapshot;
    int syncs = 0;
    bool q_moved = false;
    const auto result = train_dqn(producer_env(pool, -6.0), cfg, [&](const DqnProbe& p) {
      if (!snapshot) snapshot = *p.target;
      if (p.step % 37 == 0) {
        CHECK(p.target->params().weights == p.q_net->params().weights);
        snapshot = *p.target;
        ++syncs;
      } else {
        CHECK(p.target->params().weights == snapshot->params().weights);
        CHECK(p.target->params().biases == snapshot->params().biases);
        q_moved |= p.q_net->params().weights != p.target->params().weights;
      }
    });
    CHECK(syncs == static_cast<int>(result.env_steps / 37));
    CHECK(q_moved);
  }

  TEST_CASE("PPO: ratios are 1 on the first pass and zero advantages leave the actor to entropy") {
    AgentConfig cfg;
    cfg.algorithm = Algorithm::Ppo;
    auto actor = nn::init_mlp({13, 64, 64, 3}, nn::OutputActivation::Softmax, {0.0, 0.0}, 1);
    auto critic = nn::init_mlp({13, 64, 64, 1}, nn::OutputActivation::Identity, {0.0, 0.0}, 2);
    Rng rng(3);
    std::vector<PpoSample> batch(64);
    for (auto& s : batch) {
      for (auto& v : s.obs) v = rng.uniform(-1, 1);
      s.action = static_cast<int>(rng.below(3));
      Eigen::VectorXd col = Eigen::Map<const Eigen::VectorXd>(s.obs.data(), 13);
      s.logp_old = std::log(nn::forward(actor, col)(s.action, 0));
      s.advantage = rng.uniform(-5, 5);
      s.return_target = rng.uniform(-20, 20);
    }
    {
      auto a = actor;
      auto c = critic;
      auto ao = nn::make_adam(a, cfg.learning_rate), co = nn::make_adam(c, cfg.learning_rate);
      const auto stats = ppo_update_minibatch(a, c, batch, cfg, ao, co);
      double mean_adv = 0.0;
      for (const auto& s : batch) mean_adv += s.advantage;
      mean_adv /= 64.0;
      for (double r : stats.ratios) CHECK(std::abs(r - 1.0) < 1e-12);
      CHECK(std::abs(stats.clipped_objective - mean_adv) < 1e-12);
    }
    for (auto& s : batch) s.advantage = 0.0;
    {
      auto a = actor;
      auto c = critic;
      auto ao = nn::make_adam(a, cfg.learning_rate), co = nn::make_adam(c, cfg.learning_rate);
      auto no_entropy = cfg;
      no_entropy.ppo.entropy_coef = 0.0;
      ppo_update_minibatch(a, c, batch, no_entropy, ao, co);
      CHECK(a == actor);
      CHECK(!(c == critic));
    }
    {
      auto a = actor;
      auto c = critic;
      auto ao = nn::make_adam(a, cfg.learning_rate), co = nn::make_adam(c, cfg.learning_rate);
      ppo_update_minibatch(a, c, batch, cfg, ao, co);
      CHECK(!(a == actor));
    }
  }

  TEST_CASE("scripted policies: always-Increase succeeds, always-Maintain fails, evaluation repeats") {
    const auto pool = random_pool(300, 3);
    const auto make_env = producer_env(pool);
    const auto inc = evaluate_policy(make_env, env::constant_policy(Action::IncreasePower), 100, 4);
    CHECK(inc.success_rate == 1.0);
    CHECK(inc.episodes == 100);
    const auto keep = evaluate_policy(make_env, env::constant_policy(Action::MaintainPower), 100, 4);
    CHECK(keep.success_rate == 0.0);
    CHECK(keep.mean_steps == 50.0);
    const auto again = evaluate_policy(make_env, env::constant_policy(Action::IncreasePower), 100, 4, 3);
    CHECK(again.mean_steps == inc.mean_steps);
    CHECK(again.mean_reward == inc.mean_reward);
    CHECK(again.trajectories.size() == 3);
  }

  TEST_CASE("DQN with gamma 0 ranks IncreasePower highest") {
    const auto pool = random_pool(300, 5);
    const auto make_env = producer_env(pool, -6.0);
    AgentConfig cfg;
    cfg.algorithm = Algorithm::Dqn;
    cfg.gamma = 1e-9;  // gamma must stay positive; this is a one-step bandit in all but name
    cfg.episodes = 40;
    cfg.learning_rate = 1e-3;
    cfg.seed = 6;
    const auto result = train_dqn(make_env, cfg);
    CHECK(increase_share(result.policy, make_env, 200) >= 0.99);
  }

  TEST_CASE("all agents learn the forced IncreasePower optimum") {
    const auto pool = random_pool(600, 7);
    const auto make_env = producer_env(pool);
    for (auto algo : {Algorithm::Dqn, Algorithm::A2c, Algorithm::Ppo}) {
      AgentConfig cfg;
      cfg.algorithm = algo;
      cfg.seed = 8;
      const auto result = train_agent(make_env, cfg);
      CAPTURE(to_string(algo));
      CHECK(increase_share(result.policy, make_env, 300) >= 0.99);
      CHECK(result.curve.size() == static_cast<std::size_t>(cfg.episodes));
      CHECK(result.curve.successes.size() == result.curve.rewards.size());
      CHECK(std::is_sorted(result.curve.cumulative_seconds.begin(), result.curve.cumulative_seconds.end()));
    }
  }

  TEST_CASE("a dominant entropy bonus keeps the A2C policy near uniform") {
    // The entropy-regularized optimum is softmax(reward / coef); with +-20 rewards it sits
    // far from uniform, so the environment here gives no reward signal at all.
    const auto pool = random_pool(300, 9);
    std::array<double, kFeatures> w{};
    w[4] = 1.0;
    env::EpisodeConfig flat;
    flat.target = env::ActionTarget::ProducerPower;
    flat.eps_stab = 1e9;
    const auto oracle = env::linear_test_oracle(w, -3.0);
    const env::EnvFactory make_env = [&] { return env::GridEnv(oracle, flat, pool); };
    AgentConfig cfg;
    cfg.algorithm = Algorithm::A2c;
    cfg.a2c.entropy_coef = 10.0;
    cfg.episodes = 30;
    cfg.seed = 10;
    const auto result = train_a2c(make_env, cfg);
    CHECK(result.curve.rewards.front() == 0.0);
    auto e = make_env();
    Rng rng(11);
    for (int i = 0; i < 50; ++i) {
      const auto p = action_probabilities(result.policy.actor, e.reset(rng));
      for (double v : p) CHECK((v >= 0.2 && v <= 0.47));
    }
  }

  TEST_CASE("training is deterministic per seed and policies round-trip") {
    const auto pool = random_pool(200, 12);
    const auto make_env = producer_env(pool);
    for (auto algo : {Algorithm::Dqn, Algorithm::A2c, Algorithm::Ppo}) {
      AgentConfig cfg;
      cfg.algorithm = algo;
      cfg.episodes = 8;
      cfg.seed = 13;
      cfg.ppo.rollout_length = 128;
      const auto a = train_agent(make_env, cfg);
      const auto b = train_agent(make_env, cfg);
      CHECK(a.curve.rewards == b.curve.rewards);
      CHECK(a.curve.steps == b.curve.steps);
      CHECK(a.env_steps == b.env_steps);
      const auto back = policy_from_json(nlohmann::json::parse(to_json(a.policy).dump()));
      CHECK(back.algorithm == algo);
      auto e = make_env();
      Rng rng(14);
      for (int i = 0; i < 10; ++i) {
        const auto& s = e.reset(rng);
        CHECK(back.action_values(s) == a.policy.action_values(s));
      }
    }
  }

  TEST_CASE("learning curve CSV") {
    LearningCurve curve;
    curve.rewards = {20.0, -20.0};
    curve.successes = {true, false};
    curve.cumulative_seconds = {0.1, 0.25};
    curve.steps = {1, 50};
    const auto dir = testing::scratch_dir("curve");
    write_curve_csv(curve, dir / "c.csv");
    std::ifstream in(dir / "c.csv");
    std::string header, first;
    std::getline(in, header);
    std::getline(in, first);
    CHECK(header == "episode,reward,success,cumulative_seconds");
    CHECK(first.rfind("0,20,1,", 0) == 0);
  }
}
