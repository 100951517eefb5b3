#include "gridstab/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "gridstab/error.hpp"
#include "gridstab/json_io.hpp"
#include "gridstab/synth.hpp"

namespace gridstab::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kScalerVersion = 1;
constexpr int kOracleVersion = 1;

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void note(const Progress& progress, const std::string& msg) {
  if (progress) progress(msg);
}

// Re-raises a failure with the name of the stage it happened in.
class StageError : public Error {
 public:
  StageError(const std::string& stage, const Error& cause)
      : Error(Verbatim{}, cause.code(), "stage '" + stage + "': " + cause.what()) {}
};

void ensure_layout(const Layout& layout) {
  for (const auto& dir : {layout.datasets(), layout.models(), layout.curves(), layout.stages()}) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
  }
}

template <typename F>
auto guarded(const Layout& layout, const std::string& stage, F&& body) {
  try {
    ensure_layout(layout);
    return body();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    try {
      write_json_file(layout.stages() / "FAILED.json", {{"stage", stage}, {"error", e.what()}}, 2);
    } catch (const Error&) {
      // The original failure matters more than the marker.
    }
    throw StageError(stage, e);
  } catch (const std::exception& e) {
    throw StageError(stage, Error(ErrorCode::IoFailure, e.what()));
  }
}

// Strict reader for one JSON object: every key must be consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw Error(ErrorCode::InvalidConfig, "config key '" + path_ + key + "' has the wrong type");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  Reader child(const char* key) {
    seen_.insert(key);
    return Reader(j_.at(key), path_ + key + ".");
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw Error(ErrorCode::InvalidConfig, "unknown config key '" + path_ + item.key() + "'");
    }
  }

  [[noreturn]] void fail(const std::string& msg) const {
    const std::string where = path_.empty() ? std::string("<root>") : path_.substr(0, path_.size() - 1);
    throw Error(ErrorCode::InvalidConfig, "config section '" + where + "': " + msg);
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string target_name(env::ActionTarget t) {
  return t == env::ActionTarget::PowerResponse ? "power_response" : "producer_power";
}

env::ActionTarget target_from(const std::string& s) {
  if (s == "power_response") return env::ActionTarget::PowerResponse;
  if (s == "producer_power") return env::ActionTarget::ProducerPower;
  throw Error(ErrorCode::InvalidConfig, "env.action_target must be 'power_response' or 'producer_power'");
}

json forest_json(const trees::ForestParams& p) {
  return {{"n_trees", p.n_trees},
          {"max_depth", p.max_depth},
          {"features_per_split", p.features_per_split},
          {"min_samples_leaf", p.min_samples_leaf},
          {"voting", p.voting == trees::Voting::Soft ? "soft" : "hard"}};
}

void read_forest(Reader r, trees::ForestParams& p) {
  r.get("n_trees", p.n_trees);
  r.get("max_depth", p.max_depth);
  r.get("features_per_split", p.features_per_split);
  r.get("min_samples_leaf", p.min_samples_leaf);
  std::string voting = p.voting == trees::Voting::Soft ? "soft" : "hard";
  r.get("voting", voting);
  if (voting != "soft" && voting != "hard") r.fail("voting must be 'soft' or 'hard'");
  p.voting = voting == "soft" ? trees::Voting::Soft : trees::Voting::Hard;
  r.finish();
}

json gbt_json(const trees::GbtParams& p) {
  return {{"n_stages", p.n_stages},
          {"learning_rate", p.learning_rate},
          {"max_depth", p.max_depth},
          {"min_samples_leaf", p.min_samples_leaf},
          {"split_mode", p.split_mode == trees::SplitMode::Exact ? "exact" : "histogram"},
          {"n_bins", p.n_bins}};
}

void read_gbt(Reader r, trees::GbtParams& p) {
  r.get("n_stages", p.n_stages);
  r.get("learning_rate", p.learning_rate);
  r.get("max_depth", p.max_depth);
  r.get("min_samples_leaf", p.min_samples_leaf);
  std::string mode = p.split_mode == trees::SplitMode::Exact ? "exact" : "histogram";
  r.get("split_mode", mode);
  if (mode != "exact" && mode != "histogram") r.fail("split_mode must be 'exact' or 'histogram'");
  p.split_mode = mode == "exact" ? trees::SplitMode::Exact : trees::SplitMode::Histogram;
  r.get("n_bins", p.n_bins);
  r.finish();
}

json ann_json(const nn::AnnConfig& c) {
  return {{"hidden", c.hidden},
          {"dropout", c.dropout},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate}};
}

void read_ann(Reader r, nn::AnnConfig& c) {
  r.get("hidden", c.hidden);
  r.get("dropout", c.dropout);
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.get("learning_rate", c.learning_rate);
  r.finish();
}

const char* const kBaseKeys[stacking::kBaseModels] = {"random_forest", "gbt_exact", "gbt_histogram", "mlp"};

std::string display_name(const std::string& base) {
  if (base == "random_forest") return "Random Forest";
  if (base == "gbt_exact") return "GBT (exact)";
  if (base == "gbt_histogram") return "GBT (histogram)";
  if (base == "mlp") return "ANN";
  return base;
}

std::string pipeline_name(const std::string& algorithm) {
  std::string upper = algorithm;
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  return "Stacking + " + upper;
}

Dataset load_split(const Layout& layout, const char* which) {
  return load_csv(layout.datasets() / (std::string(which) + ".csv"));
}

std::optional<json> read_stage(const Layout& layout, const std::string& name) {
  const auto path = layout.stages() / (name + ".json");
  if (!fs::exists(path)) return std::nullopt;
  return read_json_file(path);
}

json store_stage(const Layout& layout, const std::string& name, json summary) {
  summary["stage"] = name;
  write_json_file(layout.stages() / (name + ".json"), summary, 2);
  return summary;
}

std::shared_ptr<const stacking::StackingModel> load_classifier(const Layout& layout) {
  return std::make_shared<const stacking::StackingModel>(stacking::load_stacking(layout.models() / "stacking.json"));
}

fs::path policy_path(const Layout& layout, rl::Algorithm a) {
  return layout.models() / ("policy_" + std::string(rl::to_string(a)) + ".json");
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::uint64_t stage_seed(std::uint64_t master, Stage stage) {
  return derive_seed(master, static_cast<std::uint64_t>(stage));
}

Stage agent_stage(rl::Algorithm algorithm) {
  switch (algorithm) {
    case rl::Algorithm::Dqn: return Stage::Dqn;
    case rl::Algorithm::A2c: return Stage::A2c;
    case rl::Algorithm::Ppo: return Stage::Ppo;
  }
  return Stage::Dqn;
}

env::EpisodeConfig ExperimentConfig::default_episode() {
  env::EpisodeConfig c;
  c.target = env::ActionTarget::PowerResponse;
  return c;
}

json to_json(const ExperimentConfig& c) {
  json bases = json::object();
  bases[kBaseKeys[0]] = forest_json(std::get<trees::ForestParams>(c.ml.bases[0]));
  bases[kBaseKeys[1]] = gbt_json(std::get<trees::GbtParams>(c.ml.bases[1]));
  bases[kBaseKeys[2]] = gbt_json(std::get<trees::GbtParams>(c.ml.bases[2]));
  bases[kBaseKeys[3]] = ann_json(std::get<nn::AnnConfig>(c.ml.bases[3]));
  json ml = {{"folds", c.ml.folds}, {"meta", {{"steps", c.ml.meta.steps}, {"learning_rate", c.ml.meta.learning_rate}}}};
  ml.update(bases);

  std::vector<std::string> algorithms;
  for (auto a : c.algorithms) algorithms.emplace_back(rl::to_string(a));
  const auto& a = c.agent;
  return {
      {"schema_version", kConfigSchemaVersion},
      {"dataset", c.dataset.string()},
      {"synthetic_rows", c.synthetic_rows},
      {"output_dir", c.output_dir.string()},
      {"seed", c.seed},
      {"test_fraction", c.test_fraction},
      {"ml", ml},
      {"oracle",
       {{"kind", c.oracle == OracleKind::Surrogate ? "surrogate" : "linear"},
        {"surrogate", gbt_json(c.surrogate)},
        {"linear_weights", c.linear_weights},
        {"linear_bias", c.linear_bias}}},
      {"env",
       {{"max_steps", c.episode.max_steps},
        {"delta", c.episode.delta},
        {"eps_stab", c.episode.eps_stab},
        {"action_target", target_name(c.episode.target)}}},
      {"rl",
       {{"algorithms", algorithms},
        {"episodes", a.episodes},
        {"learning_rate", a.learning_rate},
        {"gamma", a.gamma},
        {"batch_size", a.batch_size},
        {"hidden", a.hidden},
        {"max_grad_norm", a.max_grad_norm},
        {"eval_episodes", c.eval_episodes},
        {"convergence_seeds", c.convergence_seeds},
        {"convergence_window", c.convergence_window},
        {"convergence_fraction", c.convergence_fraction},
        {"trajectory_episodes", c.trajectory_episodes},
        {"dqn",
         {{"replay_capacity", a.dqn.replay_capacity},
          {"target_sync_interval", a.dqn.target_sync_interval},
          {"epsilon_start", a.dqn.epsilon_start},
          {"epsilon_end", a.dqn.epsilon_end},
          {"epsilon_decay_fraction", a.dqn.epsilon_decay_fraction},
          {"learning_starts", a.dqn.learning_starts}}},
        {"a2c", {{"n_step", a.a2c.n_step}, {"entropy_coef", a.a2c.entropy_coef}, {"value_coef", a.a2c.value_coef}}},
        {"ppo",
         {{"clip_eps", a.ppo.clip_eps},
          {"rollout_length", a.ppo.rollout_length},
          {"epochs_per_update", a.ppo.epochs_per_update},
          {"n_step", a.ppo.n_step},
          {"entropy_coef", a.ppo.entropy_coef},
          {"value_coef", a.ppo.value_coef}}}}},
      {"hybrid", {{"max_records", c.hybrid_max_records}}},
  };
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Reader root(j, "");
  int version = kConfigSchemaVersion;
  root.get("schema_version", version);
  if (version != kConfigSchemaVersion) root.fail("unsupported schema_version " + std::to_string(version));
  std::string dataset = c.dataset.string(), output = c.output_dir.string();
  root.get("dataset", dataset);
  root.get("output_dir", output);
  c.dataset = dataset;
  c.output_dir = output;
  root.get("synthetic_rows", c.synthetic_rows);
  root.get("seed", c.seed);
  root.get("test_fraction", c.test_fraction);
  if (!(c.test_fraction > 0.0 && c.test_fraction < 1.0)) root.fail("test_fraction must lie in (0, 1)");
  if (c.output_dir.empty()) root.fail("output_dir must not be empty");

  if (root.has("ml")) {
    Reader ml = root.child("ml");
    ml.get("folds", c.ml.folds);
    if (ml.has("meta")) {
      Reader meta = ml.child("meta");
      meta.get("steps", c.ml.meta.steps);
      meta.get("learning_rate", c.ml.meta.learning_rate);
      meta.finish();
    }
    if (ml.has(kBaseKeys[0])) read_forest(ml.child(kBaseKeys[0]), std::get<trees::ForestParams>(c.ml.bases[0]));
    if (ml.has(kBaseKeys[1])) read_gbt(ml.child(kBaseKeys[1]), std::get<trees::GbtParams>(c.ml.bases[1]));
    if (ml.has(kBaseKeys[2])) read_gbt(ml.child(kBaseKeys[2]), std::get<trees::GbtParams>(c.ml.bases[2]));
    if (ml.has(kBaseKeys[3])) read_ann(ml.child(kBaseKeys[3]), std::get<nn::AnnConfig>(c.ml.bases[3]));
    ml.finish();
    if (c.ml.folds < 2) root.fail("ml.folds must be at least 2");
  }

  if (root.has("oracle")) {
    Reader o = root.child("oracle");
    std::string kind = "surrogate";
    o.get("kind", kind);
    if (kind != "surrogate" && kind != "linear") o.fail("kind must be 'surrogate' or 'linear'");
    c.oracle = kind == "surrogate" ? OracleKind::Surrogate : OracleKind::Linear;
    if (o.has("surrogate")) read_gbt(o.child("surrogate"), c.surrogate);
    o.get("linear_weights", c.linear_weights);
    o.get("linear_bias", c.linear_bias);
    o.finish();
  }

  if (root.has("env")) {
    Reader e = root.child("env");
    e.get("max_steps", c.episode.max_steps);
    e.get("delta", c.episode.delta);
    e.get("eps_stab", c.episode.eps_stab);
    std::string target = target_name(c.episode.target);
    e.get("action_target", target);
    c.episode.target = target_from(target);
    e.finish();
    env::validate(c.episode);
  }

  if (root.has("rl")) {
    Reader r = root.child("rl");
    auto& a = c.agent;
    if (r.has("algorithms")) {
      std::vector<std::string> names;
      r.get("algorithms", names);
      c.algorithms.clear();
      for (const auto& n : names) {
        const auto alg = rl::algorithm_from(n);
        if (std::find(c.algorithms.begin(), c.algorithms.end(), alg) != c.algorithms.end()) r.fail("duplicate algorithm " + n);
        c.algorithms.push_back(alg);
      }
    }
    r.get("episodes", a.episodes);
    r.get("learning_rate", a.learning_rate);
    r.get("gamma", a.gamma);
    r.get("batch_size", a.batch_size);
    r.get("hidden", a.hidden);
    r.get("max_grad_norm", a.max_grad_norm);
    r.get("eval_episodes", c.eval_episodes);
    r.get("convergence_seeds", c.convergence_seeds);
    r.get("convergence_window", c.convergence_window);
    r.get("convergence_fraction", c.convergence_fraction);
    r.get("trajectory_episodes", c.trajectory_episodes);
    if (r.has("dqn")) {
      Reader d = r.child("dqn");
      d.get("replay_capacity", a.dqn.replay_capacity);
      d.get("target_sync_interval", a.dqn.target_sync_interval);
      d.get("epsilon_start", a.dqn.epsilon_start);
      d.get("epsilon_end", a.dqn.epsilon_end);
      d.get("epsilon_decay_fraction", a.dqn.epsilon_decay_fraction);
      d.get("learning_starts", a.dqn.learning_starts);
      d.finish();
    }
    if (r.has("a2c")) {
      Reader d = r.child("a2c");
      d.get("n_step", a.a2c.n_step);
      d.get("entropy_coef", a.a2c.entropy_coef);
      d.get("value_coef", a.a2c.value_coef);
      d.finish();
    }
    if (r.has("ppo")) {
      Reader d = r.child("ppo");
      d.get("clip_eps", a.ppo.clip_eps);
      d.get("rollout_length", a.ppo.rollout_length);
      d.get("epochs_per_update", a.ppo.epochs_per_update);
      d.get("n_step", a.ppo.n_step);
      d.get("entropy_coef", a.ppo.entropy_coef);
      d.get("value_coef", a.ppo.value_coef);
      d.finish();
    }
    r.finish();
    rl::validate(a);
    if (c.eval_episodes < 1 || c.convergence_seeds < 1 || c.convergence_window < 1) {
      r.fail("eval_episodes, convergence_seeds and convergence_window must be positive");
    }
    if (c.convergence_window > a.episodes) r.fail("convergence_window exceeds the episode budget");
  }

  if (root.has("hybrid")) {
    Reader h = root.child("hybrid");
    h.get("max_records", c.hybrid_max_records);
    h.finish();
  }
  root.finish();
  return c;
}

void apply_override(json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw Error(ErrorCode::InvalidConfig, "override '" + std::string(assignment) + "' must look like key.path=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw Error(ErrorCode::InvalidConfig, "empty component in override key '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part)) (*node)[part] = json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw Error(ErrorCode::InvalidConfig, "override key '" + key + "' descends into a non-object");
    start = dot + 1;
  }
}

ExperimentConfig load_config(const std::optional<fs::path>& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (path) {
    try {
      j = read_json_file(*path);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::ParseError) throw Error(ErrorCode::InvalidConfig, e.what());
      throw;
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

DirectoryLock::DirectoryLock(const fs::path& root) : path_(Layout{root}.lock()) {
  fs::create_directories(root);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw Error(ErrorCode::IoFailure, "output directory " + root.string() + " is locked by another run (" + path_.string() + ")");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

ScalerParams load_scaler(const fs::path& path) {
  const auto j = read_json_file(path);
  if (j.value("format", "") != "gridstab.scaler" || j.value("version", 0) != kScalerVersion) {
    throw Error(ErrorCode::ParseError, "expected gridstab.scaler version 1 in " + path.string());
  }
  return {j.at("mean").get<std::vector<double>>(), j.at("stddev").get<std::vector<double>>()};
}

void save_scaler(const ScalerParams& params, const fs::path& path) {
  write_json_file(path, {{"format", "gridstab.scaler"}, {"version", kScalerVersion}, {"mean", params.mean}, {"stddev", params.stddev}});
}

std::shared_ptr<const env::StabilityOracle> load_oracle(const fs::path& path) {
  const auto j = read_json_file(path);
  if (j.value("format", "") != "gridstab.oracle" || j.value("version", 0) != kOracleVersion) {
    throw Error(ErrorCode::ParseError, "expected gridstab.oracle version 1 in " + path.string());
  }
  if (j.at("kind") == "linear") {
    return env::linear_test_oracle(j.at("weights").get<std::array<double, kFeatures>>(), j.at("bias").get<double>());
  }
  return std::make_shared<env::SurrogateOracle>(trees::gbt_from_json(j.at("model")));
}

json prep_data(const ExperimentConfig& config, const Progress& progress) {
  const Layout layout{config.output_dir};
  json summary;
  Dataset raw = guarded(layout, "load", [&] {
    if (config.dataset.empty()) {
      note(progress, "generating " + std::to_string(config.synthetic_rows) + " synthetic rows");
      const auto start = std::chrono::steady_clock::now();
      Dataset ds = synth::generate(config.synthetic_rows, stage_seed(config.seed, Stage::Synthesize));
      summary["synth_seconds"] = seconds_since(start);
      write_csv(ds, layout.datasets() / "raw.csv");
      return ds;
    }
    note(progress, "loading " + config.dataset.string());
    return load_csv(config.dataset);
  });
  summary["synthetic"] = config.dataset.empty();
  summary["dataset"] = config.dataset.empty() ? (layout.datasets() / "raw.csv").string() : config.dataset.string();

  const auto start = std::chrono::steady_clock::now();
  const Dataset augmented = guarded(layout, "augment", [&] {
    note(progress, "augmenting " + std::to_string(raw.size()) + " rows");
    return augment_permutations(raw);
  });
  bool invariant = augmented.size() == 6 * raw.size();
  for (std::size_t i = 0; invariant && i < augmented.size(); ++i) {
    invariant = augmented[i].stabf == raw[i / 6].stabf && augmented[i].stab == raw[i / 6].stab;
  }
  auto [train, test] = guarded(layout, "split", [&] {
    return split(augmented, config.test_fraction, stage_seed(config.seed, Stage::Split));
  });
  guarded(layout, "write-datasets", [&] {
    write_csv(augmented, layout.datasets() / "augmented.csv");
    write_csv(train, layout.datasets() / "train.csv");
    write_csv(test, layout.datasets() / "test.csv");
    return 0;
  });
  summary["prep_seconds"] = seconds_since(start);

  guarded(layout, "eda", [&] {
    note(progress, "writing correlation matrix and scatter exports");
    metrics::write_correlation_csv(metrics::correlation_matrix(raw), layout.datasets() / "correlation.csv");
    for (std::size_t c = 0; c < kFeatures; ++c) {
      const std::string name(csv_columns()[c]);
      metrics::write_scatter_csv(raw, name, layout.datasets() / "scatter" / (name + ".csv"));
    }
    return 0;
  });

  summary["raw_rows"] = raw.size();
  summary["augmented_rows"] = augmented.size();
  summary["train_rows"] = train.size();
  summary["test_rows"] = test.size();
  summary["label_invariant"] = invariant;
  summary["label_rule_violations"] = check_label_consistency(raw);
  return store_stage(layout, "prep", summary);
}

json train_ml(const ExperimentConfig& config, const Progress& progress) {
  const Layout layout{config.output_dir};
  return guarded(layout, "train-ml", [&] {
    const Dataset train = load_split(layout, "train");
    const ScalerParams scaler = standardize_fit(train);
    const Matrix x = standardize_apply(train, scaler);
    stacking::StackingConfig sc = config.ml;
    const std::uint64_t ml_seed = stage_seed(config.seed, Stage::Ml);
    sc.seed = ml_seed;
    for (std::size_t m = 0; m < stacking::kBaseModels; ++m) {
      std::visit([&](auto& c) { c.seed = derive_seed(ml_seed, 0x62617365, m); }, sc.bases[m]);
    }
    const auto start = std::chrono::steady_clock::now();
    const auto model = stacking::fit_stacking(x, train.labels(), sc, [&](std::string_view s) { note(progress, std::string(s)); });
    const double elapsed = seconds_since(start);
    save_scaler(scaler, layout.models() / "scaler.json");
    stacking::save_stacking(model, layout.models() / "stacking.json");
    return store_stage(layout, "train_ml",
                       {{"train_rows", train.size()},
                        {"train_seconds", elapsed},
                        {"meta_weights", model.meta.weights},
                        {"meta_bias", model.meta.bias}});
  });
}

json eval_ml(const ExperimentConfig& config, const Progress& progress) {
  const Layout layout{config.output_dir};
  return guarded(layout, "eval-ml", [&] {
    const Dataset test = load_split(layout, "test");
    const auto classifier = load_classifier(layout);
    const Matrix x = standardize_apply(test, load_scaler(layout.models() / "scaler.json"));
    note(progress, "scoring " + std::to_string(test.size()) + " held-out rows");
    const Matrix meta = stacking::stacking_meta_features(*classifier, x);
    std::vector<metrics::ClassificationReport> reports;
    std::vector<int> predicted(test.size());
    for (std::size_t m = 0; m < stacking::kBaseModels; ++m) {
      for (std::size_t r = 0; r < test.size(); ++r) predicted[r] = meta(r, m) > 0.5 ? 1 : 0;
      reports.push_back(metrics::classification_report(display_name(classifier->names[m]), test.labels(), predicted));
    }
    for (std::size_t r = 0; r < test.size(); ++r) predicted[r] = stacking::predict_from_meta(classifier->meta, meta.row(r)).label;
    reports.push_back(metrics::classification_report("Stacking", test.labels(), predicted));
    metrics::write_reports_csv(reports, layout.root / "classifier_metrics.csv");
    json list = json::array();
    for (const auto& r : reports) list.push_back(metrics::to_json(r));
    return store_stage(layout, "eval_ml", {{"test_rows", test.size()}, {"classifiers", list}});
  });
}

json fit_oracle(const ExperimentConfig& config, const Progress& progress) {
  const Layout layout{config.output_dir};
  return guarded(layout, "fit-oracle", [&] {
    const Dataset train = load_split(layout, "train");
    const Dataset test = load_split(layout, "test");
    json stored;
    std::shared_ptr<const env::StabilityOracle> oracle;
    const auto start = std::chrono::steady_clock::now();
    if (config.oracle == OracleKind::Surrogate) {
      note(progress, "fitting surrogate stability regressor");
      env::SurrogateConfig sc;
      sc.gbt = config.surrogate;
      sc.gbt.seed = stage_seed(config.seed, Stage::Oracle);
      auto fitted = env::fit_surrogate_oracle(train, sc);
      stored = {{"kind", "surrogate"}, {"model", trees::to_json(fitted->model())}};
      oracle = fitted;
    } else {
      stored = {{"kind", "linear"}, {"weights", config.linear_weights}, {"bias", config.linear_bias}};
      oracle = env::linear_test_oracle(config.linear_weights, config.linear_bias);
    }
    const double elapsed = seconds_since(start);
    stored["format"] = "gridstab.oracle";
    stored["version"] = kOracleVersion;
    write_json_file(layout.models() / "oracle.json", stored);
    return store_stage(layout, "fit_oracle",
                       {{"kind", config.oracle == OracleKind::Surrogate ? "surrogate" : "linear"},
                        {"rmse_train", env::oracle_rmse(*oracle, train)},
                        {"rmse_test", env::oracle_rmse(*oracle, test)},
                        {"fit_seconds", elapsed}});
  });
}

json train_rl(const ExperimentConfig& config, rl::Algorithm algorithm, const Progress& progress) {
  const Layout layout{config.output_dir};
  const std::string name(rl::to_string(algorithm));
  return guarded(layout, "train-rl:" + name, [&] {
    const auto oracle = load_oracle(layout.models() / "oracle.json");
    const Dataset train = load_split(layout, "train");
    // Index the oracle-unstable start rows once, outside every seed's training clock.
    env::GridEnv prototype(oracle, config.episode, train.records());
    prototype.unstable_pool_size();
    const auto make_env = [&] { return prototype; };
    json seeds = json::array();
    double total_seconds = 0.0;
    std::uint64_t total_steps = 0;
    for (int k = 0; k < config.convergence_seeds; ++k) {
      rl::AgentConfig ac = config.agent;
      ac.algorithm = algorithm;
      ac.seed = derive_seed(stage_seed(config.seed, agent_stage(algorithm)), static_cast<std::uint64_t>(k));
      note(progress, "training " + name + " (seed " + std::to_string(k + 1) + "/" + std::to_string(config.convergence_seeds) + ")");
      const auto result = rl::train_agent(make_env, ac);
      const auto curve_file = fs::path("curves") / (name + "_seed" + std::to_string(k) + ".csv");
      rl::write_curve_csv(result.curve, layout.root / curve_file);
      if (k == 0) write_json_file(policy_path(layout, algorithm), rl::to_json(result.policy));
      total_seconds += result.curve.total_seconds();
      total_steps += result.env_steps;
      seeds.push_back({{"index", k},
                       {"curve", curve_file.string()},
                       {"env_steps", result.env_steps},
                       {"gradient_updates", result.gradient_updates},
                       {"train_seconds", result.curve.total_seconds()},
                       {"convergence_episode",
                        rl::episodes_to_convergence(result.curve.rewards, config.convergence_window,
                                                    config.convergence_fraction)}});
    }
    return store_stage(layout, "train_rl_" + name,
                       {{"algorithm", name}, {"seeds", seeds}, {"env_steps", total_steps}, {"train_seconds", total_seconds}});
  });
}

json eval_rl(const ExperimentConfig& config, const Progress& progress) {
  const Layout layout{config.output_dir};
  return guarded(layout, "eval-rl", [&] {
    const auto oracle = load_oracle(layout.models() / "oracle.json");
    const Dataset test = load_split(layout, "test");
    env::GridEnv prototype(oracle, config.episode, test.records());
    prototype.unstable_pool_size();
    const auto make_env = [&] { return prototype; };
    json agents = json::array();
    for (auto algorithm : config.algorithms) {
      const std::string name(rl::to_string(algorithm));
      const auto path = policy_path(layout, algorithm);
      if (!fs::exists(path)) throw Error(ErrorCode::UntrainedComponent, "no trained " + name + " policy at " + path.string());
      const rl::Policy policy = rl::policy_from_json(read_json_file(path));
      note(progress, "evaluating " + name + " over " + std::to_string(config.eval_episodes) + " episodes");
      const auto ev = rl::evaluate_policy(make_env, policy.greedy_fn(), config.eval_episodes,
                                          stage_seed(config.seed, Stage::Evaluate), config.trajectory_episodes);
      const auto traj_file = fs::path("curves") / ("trajectories_" + name + ".csv");
      {
        const auto full = layout.root / traj_file;
        fs::create_directories(full.parent_path());
        std::ofstream out(full);
        if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + full.string());
        env::write_trajectory_header(out);
        for (std::size_t e = 0; e < ev.trajectories.size(); ++e) env::write_trajectory(out, e, ev.trajectories[e]);
      }
      agents.push_back({{"algorithm", name},
                        {"episodes", ev.episodes},
                        {"success_rate", ev.success_rate},
                        {"mean_steps", ev.mean_steps},
                        {"mean_reward", ev.mean_reward},
                        {"trajectories", traj_file.string()}});
    }
    return store_stage(layout, "eval_rl", {{"agents", agents}});
  });
}

HybridOutcome run_hybrid(const HybridModel& model, const GridRecord& record, const env::PolicyFn& controller) {
  if (!model.classifier || !model.classifier->trained()) throw Error(ErrorCode::UntrainedComponent, "hybrid model has no classifier");
  if (!model.oracle) throw Error(ErrorCode::UntrainedComponent, "hybrid model has no stability oracle");
  if (model.scaler.mean.size() != kFeatures) throw Error(ErrorCode::UntrainedComponent, "hybrid model has no scaler");
  if (!controller) throw Error(ErrorCode::UntrainedComponent, "hybrid model has no controller");
  Matrix row(1, kFeatures);
  const auto f = record.features();
  std::copy(f.begin(), f.end(), row.values.begin());
  const auto pred = stacking::predict_stacking(*model.classifier, standardize_apply(row, model.scaler)).front();
  HybridOutcome out;
  out.gate = static_cast<Label>(pred.label);
  out.probability = pred.probability;
  if (out.gate == Label::Stable) return out;
  env::GridEnv env(model.oracle, model.episode);
  // The gate, not the oracle, decides that control is needed.
  env.reset(record, /*allow_stable=*/true);
  const auto episode = env::run_episode(env, controller);
  out.ran_episode = true;
  out.success = episode.success;
  out.env_steps = episode.steps;
  out.total_reward = episode.total_reward;
  return out;
}

HybridOutcome run_hybrid(const HybridModel& model, const GridRecord& record) {
  if (!model.policy) throw Error(ErrorCode::UntrainedComponent, "hybrid model has no policy");
  const rl::Policy& policy = *model.policy;
  return run_hybrid(model, record, [&policy](const env::EnvState& s) { return policy.greedy(s); });
}

json hybrid(const ExperimentConfig& config, const Progress& progress) {
  const Layout layout{config.output_dir};
  return guarded(layout, "hybrid", [&] {
    const Dataset test = load_split(layout, "test");
    HybridModel model;
    model.classifier = load_classifier(layout);
    model.oracle = load_oracle(layout.models() / "oracle.json");
    model.scaler = load_scaler(layout.models() / "scaler.json");
    model.episode = config.episode;
    const std::size_t n = config.hybrid_max_records == 0 ? test.size() : std::min(test.size(), config.hybrid_max_records);
    json rows = json::array();
    for (auto algorithm : config.algorithms) {
      const std::string name(rl::to_string(algorithm));
      const auto path = policy_path(layout, algorithm);
      if (!fs::exists(path)) throw Error(ErrorCode::UntrainedComponent, "no trained " + name + " policy at " + path.string());
      model.policy = std::make_shared<const rl::Policy>(rl::policy_from_json(read_json_file(path)));
      note(progress, "running " + pipeline_name(name) + " over " + std::to_string(n) + " test records");
      HybridSummary s;
      s.pipeline = pipeline_name(name);
      s.records = n;
      std::size_t steps = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto o = run_hybrid(model, test[i]);
        if (o.gate == Label::Stable) {
          ++s.gate_stable;
          s.stable_env_steps += static_cast<std::size_t>(o.env_steps);
        } else {
          ++s.gate_unstable;
          s.successes += o.success ? 1 : 0;
          steps += static_cast<std::size_t>(o.env_steps);
        }
      }
      s.success_rate = s.gate_unstable == 0 ? 0.0 : static_cast<double>(s.successes) / static_cast<double>(s.gate_unstable);
      s.mean_steps = s.gate_unstable == 0 ? 0.0 : static_cast<double>(steps) / static_cast<double>(s.gate_unstable);
      rows.push_back({{"pipeline", s.pipeline},
                      {"algorithm", name},
                      {"records", s.records},
                      {"gate_stable", s.gate_stable},
                      {"gate_unstable", s.gate_unstable},
                      {"stable_env_steps", s.stable_env_steps},
                      {"successes", s.successes},
                      {"success_rate", s.success_rate},
                      {"mean_steps", s.mean_steps}});
    }
    return store_stage(layout, "hybrid", {{"pipelines", rows}});
  });
}

HybridReport collect_report(const ExperimentConfig& config) {
  const Layout layout{config.output_dir};
  return guarded(layout, "report", [&] {
    HybridReport report;
    report.config = to_json(config);
    if (const auto prep = read_stage(layout, "prep")) {
      report.data.raw_rows = prep->at("raw_rows");
      report.data.augmented_rows = prep->at("augmented_rows");
      report.data.train_rows = prep->at("train_rows");
      report.data.test_rows = prep->at("test_rows");
      report.data.label_invariant = prep->at("label_invariant");
      report.data.synthetic = prep->at("synthetic");
      report.data.prep_seconds = prep->at("prep_seconds");
    }
    if (const auto ml = read_stage(layout, "eval_ml")) {
      for (const auto& r : ml->at("classifiers")) report.classifiers.push_back(metrics::report_from_json(r));
    }
    if (const auto o = read_stage(layout, "fit_oracle")) {
      report.oracle_rmse_test = o->at("rmse_test").get<double>();
      report.oracle_rmse_train = o->at("rmse_train").get<double>();
    }
    const auto ev = read_stage(layout, "eval_rl");
    for (auto algorithm : config.algorithms) {
      const std::string name(rl::to_string(algorithm));
      const auto tr = read_stage(layout, "train_rl_" + name);
      if (!tr) continue;
      AgentSummary a;
      a.algorithm = name;
      a.train_seconds = tr->at("train_seconds");
      a.env_steps = tr->at("env_steps");
      std::vector<double> conv;
      for (const auto& s : tr->at("seeds")) {
        const int c = s.at("convergence_episode");
        a.convergence_by_seed.push_back(c);
        // A run that never converged counts as the full budget.
        conv.push_back(c == rl::kNotConverged ? config.agent.episodes : c);
      }
      a.median_convergence = median(conv);
      a.curve = tr->at("seeds").at(0).at("curve");
      if (ev) {
        for (const auto& e : ev->at("agents")) {
          if (e.at("algorithm") != name) continue;
          a.success_rate = e.at("success_rate");
          a.mean_steps = e.at("mean_steps");
          a.mean_reward = e.at("mean_reward");
        }
      }
      report.agents.push_back(a);
    }
    if (const auto h = read_stage(layout, "hybrid")) {
      for (const auto& row : h->at("pipelines")) {
        HybridSummary s;
        s.pipeline = row.at("pipeline");
        s.records = row.at("records");
        s.gate_stable = row.at("gate_stable");
        s.gate_unstable = row.at("gate_unstable");
        s.stable_env_steps = row.at("stable_env_steps");
        s.successes = row.at("successes");
        s.success_rate = row.at("success_rate");
        s.mean_steps = row.at("mean_steps");
        report.hybrid.push_back(s);
      }
    }
    return report;
  });
}

json to_json(const HybridReport& report) {
  json classifiers = json::array();
  for (const auto& r : report.classifiers) classifiers.push_back(metrics::to_json(r));
  json agents = json::array();
  for (const auto& a : report.agents) {
    agents.push_back({{"algorithm", a.algorithm},
                      {"success_rate", a.success_rate},
                      {"mean_steps", a.mean_steps},
                      {"mean_reward", a.mean_reward},
                      {"convergence_by_seed", a.convergence_by_seed},
                      {"median_convergence", a.median_convergence},
                      {"train_seconds", a.train_seconds},
                      {"env_steps", a.env_steps},
                      {"curve", a.curve}});
  }
  json hybrid = json::array();
  for (const auto& s : report.hybrid) {
    hybrid.push_back({{"pipeline", s.pipeline},
                      {"records", s.records},
                      {"gate_stable", s.gate_stable},
                      {"gate_unstable", s.gate_unstable},
                      {"stable_env_steps", s.stable_env_steps},
                      {"successes", s.successes},
                      {"success_rate", s.success_rate},
                      {"mean_steps", s.mean_steps}});
  }
  json oracle = json::object();
  if (report.oracle_rmse_test) oracle = {{"rmse_test", *report.oracle_rmse_test}, {"rmse_train", *report.oracle_rmse_train}};
  return {{"schema", "gridstab.report"},
          {"schema_version", kReportSchemaVersion},
          {"config", report.config},
          {"data",
           {{"raw_rows", report.data.raw_rows},
            {"augmented_rows", report.data.augmented_rows},
            {"train_rows", report.data.train_rows},
            {"test_rows", report.data.test_rows},
            {"label_invariant", report.data.label_invariant},
            {"synthetic", report.data.synthetic},
            {"prep_seconds", report.data.prep_seconds}}},
          {"classifiers", classifiers},
          {"oracle", oracle},
          {"agents", agents},
          {"hybrid", hybrid}};
}

std::string format_human(const HybridReport& report) {
  std::ostringstream out;
  char line[256];
  out << "Grid stability experiment report (seed " << report.config.value("seed", 0ULL) << ")\n\n";
  const auto& d = report.data;
  out << "Data\n";
  std::snprintf(line, sizeof line, "  rows: %zu raw, %zu augmented, %zu train, %zu test%s\n", d.raw_rows,
                d.augmented_rows, d.train_rows, d.test_rows, d.synthetic ? " (synthetic fixture)" : "");
  out << line;
  out << "  labels invariant under permutation: " << (d.label_invariant ? "yes" : "NO") << '\n';
  std::snprintf(line, sizeof line, "  preparation time: %.3f seconds\n\n", d.prep_seconds);
  out << line;

  if (!report.classifiers.empty()) {
    out << "Classifier accuracy on the held-out split\n";
    std::snprintf(line, sizeof line, "  %-18s %10s %10s\n", "model", "accuracy", "macro F1");
    out << line;
    for (const auto& r : report.classifiers) {
      std::snprintf(line, sizeof line, "  %-18s %10.4f %10.4f\n", r.model.c_str(), r.accuracy, r.macro_f1);
      out << line;
    }
    out << "\nPer-class metrics\n" << metrics::format_reports(report.classifiers);
  }
  if (report.oracle_rmse_test) {
    std::snprintf(line, sizeof line, "Stability oracle RMSE: %.6f held-out, %.6f train\n\n", *report.oracle_rmse_test,
                  *report.oracle_rmse_train);
    out << line;
  }
  if (!report.agents.empty()) {
    out << "RL agents\n";
    std::snprintf(line, sizeof line, "  %-6s %12s %11s %12s %19s  %s\n", "agent", "success rate", "mean steps",
                  "mean reward", "median convergence", "convergence by seed");
    out << line;
    for (const auto& a : report.agents) {
      std::string by_seed;
      for (int c : a.convergence_by_seed) by_seed += (by_seed.empty() ? "" : " ") + std::to_string(c);
      std::snprintf(line, sizeof line, "  %-6s %12.4f %11.4f %12.4f %19.1f  %s\n", a.algorithm.c_str(), a.success_rate,
                    a.mean_steps, a.mean_reward, a.median_convergence, by_seed.c_str());
      out << line;
    }
    out << "\nTraining time (all convergence seeds)\n";
    for (const auto& a : report.agents) {
      std::snprintf(line, sizeof line, "  %-6s %10.3f seconds, %llu environment steps\n", a.algorithm.c_str(),
                    a.train_seconds, static_cast<unsigned long long>(a.env_steps));
      out << line;
    }
    out << '\n';
  }
  if (!report.hybrid.empty()) {
    out << "Hybrid pipelines\n";
    std::snprintf(line, sizeof line, "  %-16s %8s %13s %15s %16s %13s %11s\n", "pipeline", "records", "gated stable",
                  "gated unstable", "steps on stable", "success rate", "mean steps");
    out << line;
    for (const auto& s : report.hybrid) {
      std::snprintf(line, sizeof line, "  %-16s %8zu %13zu %15zu %16zu %13.4f %11.4f\n", s.pipeline.c_str(), s.records,
                    s.gate_stable, s.gate_unstable, s.stable_env_steps, s.success_rate, s.mean_steps);
      out << line;
    }
  }
  return out.str();
}

std::vector<fs::path> emit_report(const HybridReport& report, ReportFormat format, const Layout& layout) {
  for (const auto& a : report.agents) {
    if (!fs::exists(layout.root / a.curve)) throw Error(ErrorCode::IoFailure, "report references missing artifact " + a.curve);
  }
  std::vector<fs::path> written;
  if (format == ReportFormat::Human) {
    const auto path = layout.report_text();
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
    out << format_human(report);
    if (!out) throw Error(ErrorCode::IoFailure, "write failed: " + path.string());
    written.push_back(path);
    return written;
  }
  write_json_file(layout.report_json(), to_json(report), 2);
  written.push_back(layout.report_json());

  std::ofstream csv(layout.metrics_csv());
  if (!csv) throw Error(ErrorCode::IoFailure, "cannot write " + layout.metrics_csv().string());
  csv << "section,name,metric,value\n";
  char buf[64];
  auto row = [&](const char* section, const std::string& name, const char* metric, double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    csv << section << ',' << name << ',' << metric << ',' << buf << '\n';
  };
  for (const auto& r : report.classifiers) {
    row("classifier", r.model, "accuracy", r.accuracy);
    for (std::size_t c = 0; c < 2; ++c) {
      const std::string cls(to_string(static_cast<Label>(c)));
      row("classifier", r.model, (cls + "_precision").c_str(), r.per_class[c].precision);
      row("classifier", r.model, (cls + "_recall").c_str(), r.per_class[c].recall);
      row("classifier", r.model, (cls + "_f1").c_str(), r.per_class[c].f1);
    }
  }
  if (report.oracle_rmse_test) row("oracle", "surrogate", "rmse_test", *report.oracle_rmse_test);
  for (const auto& a : report.agents) {
    row("agent", a.algorithm, "success_rate", a.success_rate);
    row("agent", a.algorithm, "mean_steps", a.mean_steps);
    row("agent", a.algorithm, "median_convergence", a.median_convergence);
    row("agent", a.algorithm, "train_seconds", a.train_seconds);
  }
  for (const auto& s : report.hybrid) {
    row("hybrid", s.pipeline, "success_rate", s.success_rate);
    row("hybrid", s.pipeline, "stable_env_steps", static_cast<double>(s.stable_env_steps));
  }
  written.push_back(layout.metrics_csv());
  return written;
}

HybridReport run_experiment(const ExperimentConfig& config, const Progress& progress) {
  const Layout layout{config.output_dir};
  DirectoryLock lock(layout.root);
  std::error_code ec;
  fs::remove(layout.stages() / "FAILED.json", ec);
  write_json_file(layout.root / "config.json", to_json(config), 2);
  prep_data(config, progress);
  train_ml(config, progress);
  eval_ml(config, progress);
  fit_oracle(config, progress);
  for (auto a : config.algorithms) train_rl(config, a, progress);
  if (!config.algorithms.empty()) {
    eval_rl(config, progress);
    hybrid(config, progress);
  }
  HybridReport report = collect_report(config);
  guarded(layout, "report", [&] {
    emit_report(report, ReportFormat::Machine, layout);
    emit_report(report, ReportFormat::Human, layout);
    return 0;
  });
  return report;
}

json strip_timing(const json& j) {
  if (j.is_object()) {
    json out = json::object();
    for (const auto& item : j.items()) {
      const std::string& k = item.key();
      if (k.size() >= 8 && k.compare(k.size() - 8, 8, "_seconds") == 0) continue;
      out[k] = strip_timing(item.value());
    }
    return out;
  }
  if (j.is_array()) {
    json out = json::array();
    for (const auto& v : j) out.push_back(strip_timing(v));
    return out;
  }
  return j;
}

}  // namespace gridstab::pipeline
