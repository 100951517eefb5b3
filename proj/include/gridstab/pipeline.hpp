#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "gridstab/data.hpp"
#include "gridstab/grid_env.hpp"
#include "gridstab/metrics.hpp"
#include "gridstab/rl.hpp"
#include "gridstab/stacking.hpp"

namespace gridstab::pipeline {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kReportSchemaVersion = 1;

// Stage ids for seed fan-out: stage seed = derive_seed(master, id). Fixed forever,
// so changing one stage's settings never moves another stage's random streams.
enum class Stage : std::uint64_t {
  Synthesize = 1,
  Split = 2,
  Ml = 3,
  Oracle = 4,
  Dqn = 5,
  A2c = 6,
  Ppo = 7,
  Evaluate = 8,
};
std::uint64_t stage_seed(std::uint64_t master, Stage stage);
Stage agent_stage(rl::Algorithm algorithm);

enum class OracleKind { Surrogate, Linear };

struct ExperimentConfig {
  std::filesystem::path dataset;  // empty: generate a synthetic fixture
  std::size_t synthetic_rows = 10000;
  std::filesystem::path output_dir = "runs/default";
  std::uint64_t seed = 2024;
  double test_fraction = 0.2;

  stacking::StackingConfig ml;

  OracleKind oracle = OracleKind::Surrogate;
  trees::GbtParams surrogate = env::SurrogateConfig::default_surrogate_params();
  std::array<double, kFeatures> linear_weights{};
  double linear_bias = 0.0;

  env::EpisodeConfig episode = default_episode();
  std::vector<rl::Algorithm> algorithms = {rl::Algorithm::Dqn, rl::Algorithm::A2c, rl::Algorithm::Ppo};
  rl::AgentConfig agent;  // shared settings; algorithm and seed are filled per run
  int eval_episodes = 100;
  int convergence_seeds = 5;
  int convergence_window = 10;
  double convergence_fraction = 0.9;
  int trajectory_episodes = 10;  // evaluation episodes dumped to CSV per agent

  std::size_t hybrid_max_records = 0;  // 0: every test record

  static env::EpisodeConfig default_episode();
};

// Strict: unknown keys and wrong types throw InvalidConfig naming the key path.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& config);
// "a.b.c=value"; value parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& j, std::string_view assignment);
ExperimentConfig load_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides);

// Output directory layout.
struct Layout {
  std::filesystem::path root;

  std::filesystem::path datasets() const { return root / "datasets"; }
  std::filesystem::path models() const { return root / "models"; }
  std::filesystem::path curves() const { return root / "curves"; }
  std::filesystem::path stages() const { return root / "stages"; }
  std::filesystem::path report_json() const { return root / "report.json"; }
  std::filesystem::path report_text() const { return root / "report.txt"; }
  std::filesystem::path metrics_csv() const { return root / "metrics.csv"; }
  std::filesystem::path lock() const { return root / ".lock"; }
};

// Exclusive lock on an output directory for the lifetime of the object.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& root);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

using Progress = std::function<void(std::string_view)>;

// Individual stages. Each reads its inputs from and writes its outputs to the
// output directory, and returns the stage summary it stored under stages/.
nlohmann::json prep_data(const ExperimentConfig& config, const Progress& progress = {});
nlohmann::json train_ml(const ExperimentConfig& config, const Progress& progress = {});
nlohmann::json eval_ml(const ExperimentConfig& config, const Progress& progress = {});
nlohmann::json fit_oracle(const ExperimentConfig& config, const Progress& progress = {});
nlohmann::json train_rl(const ExperimentConfig& config, rl::Algorithm algorithm, const Progress& progress = {});
nlohmann::json eval_rl(const ExperimentConfig& config, const Progress& progress = {});
nlohmann::json hybrid(const ExperimentConfig& config, const Progress& progress = {});

ScalerParams load_scaler(const std::filesystem::path& path);
void save_scaler(const ScalerParams& params, const std::filesystem::path& path);
std::shared_ptr<const env::StabilityOracle> load_oracle(const std::filesystem::path& path);

// Stage-1 gate plus stage-2 controller.
struct HybridModel {
  std::shared_ptr<const stacking::StackingModel> classifier;
  std::shared_ptr<const rl::Policy> policy;
  std::shared_ptr<const env::StabilityOracle> oracle;
  env::EpisodeConfig episode;
  ScalerParams scaler;
};

struct HybridOutcome {
  Label gate = Label::Stable;
  double probability = 0.0;  // classifier P(unstable)
  bool ran_episode = false;
  bool success = false;
  int env_steps = 0;
  double total_reward = 0.0;
};

// Throws UntrainedComponent when any part is missing.
HybridOutcome run_hybrid(const HybridModel& model, const GridRecord& record);
// Same, with an externally supplied controller (used for scripted baselines).
HybridOutcome run_hybrid(const HybridModel& model, const GridRecord& record, const env::PolicyFn& controller);

struct DataSummary {
  std::size_t raw_rows = 0;
  std::size_t augmented_rows = 0;
  std::size_t train_rows = 0;
  std::size_t test_rows = 0;
  bool label_invariant = false;
  bool synthetic = false;
  double prep_seconds = 0.0;
};

struct AgentSummary {
  std::string algorithm;
  double success_rate = 0.0;
  double mean_steps = 0.0;
  double mean_reward = 0.0;
  std::vector<int> convergence_by_seed;
  double median_convergence = 0.0;
  double train_seconds = 0.0;  // summed over convergence seeds
  std::uint64_t env_steps = 0;
  std::string curve;           // relative path of the seed-0 learning curve
};

struct HybridSummary {
  std::string pipeline;
  std::size_t records = 0;
  std::size_t gate_stable = 0;
  std::size_t gate_unstable = 0;
  std::size_t stable_env_steps = 0;  // environment steps spent on stable-gated records
  std::size_t successes = 0;
  double success_rate = 0.0;  // over unstable-gated records
  double mean_steps = 0.0;
};

struct HybridReport {
  nlohmann::json config;
  DataSummary data;
  std::vector<metrics::ClassificationReport> classifiers;
  std::optional<double> oracle_rmse_test;
  std::optional<double> oracle_rmse_train;
  std::vector<AgentSummary> agents;
  std::vector<HybridSummary> hybrid;
};

// Assembles the report from the stage summaries in the output directory; the
// RL and hybrid sections are empty when those stages have not run.
HybridReport collect_report(const ExperimentConfig& config);

enum class ReportFormat { Human, Machine };
nlohmann::json to_json(const HybridReport& report);
std::string format_human(const HybridReport& report);
// Writes report.json / report.txt (and metrics.csv with the machine form). Throws
// IoFailure, including when an artifact named in the report is missing.
std::vector<std::filesystem::path> emit_report(const HybridReport& report, ReportFormat format,
                                               const Layout& layout);

// Every stage in order, then both report formats.
HybridReport run_experiment(const ExperimentConfig& config, const Progress& progress = {});

// Drops every "*_seconds" key, recursively; used to compare runs.
nlohmann::json strip_timing(const nlohmann::json& j);

}  // namespace gridstab::pipeline
