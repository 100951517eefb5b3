#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "gridstab/error.hpp"
#include "gridstab/pipeline.hpp"

namespace {

using namespace gridstab;

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string output;
  std::string dataset;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("-c,--config", opts.config, "JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("-s,--set", opts.overrides, "Override a config value, e.g. rl.episodes=200")->take_all();
  cmd->add_option("--seed", opts.seed, "Master seed");
  cmd->add_option("-o,--output", opts.output, "Output directory");
  cmd->add_option("-d,--dataset", opts.dataset, "Input CSV (omit for a synthetic fixture)");
  cmd->add_flag("-q,--quiet", opts.quiet, "Suppress progress messages");
}

pipeline::ExperimentConfig resolve(const CommonOptions& opts) {
  std::vector<std::string> overrides = opts.overrides;
  // Dedicated flags win over --set.
  if (opts.seed) overrides.push_back("seed=" + std::to_string(*opts.seed));
  if (!opts.output.empty()) overrides.push_back("output_dir=" + nlohmann::json(opts.output).dump());
  if (!opts.dataset.empty()) overrides.push_back("dataset=" + nlohmann::json(opts.dataset).dump());
  std::optional<std::filesystem::path> path;
  if (!opts.config.empty()) path = opts.config;
  return pipeline::load_config(path, overrides);
}

pipeline::Progress progress_sink(bool quiet) {
  if (quiet) return {};
  return [](std::string_view msg) { std::fprintf(stderr, "[gridstab] %.*s\n", static_cast<int>(msg.size()), msg.data()); };
}

void print_written(const std::vector<std::filesystem::path>& paths) {
  for (const auto& p : paths) std::cout << "wrote " << p.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grid stability classification and control experiments"};
  app.require_subcommand(1);
  CommonOptions opts;

  auto* prep = app.add_subcommand("prep-data", "Load or synthesize data, augment, split, write EDA exports");
  auto* train_ml = app.add_subcommand("train-ml", "Train the stacking classifier");
  auto* eval_ml = app.add_subcommand("eval-ml", "Score every classifier on the held-out split");
  auto* fit_oracle = app.add_subcommand("fit-oracle", "Fit the stability oracle used by the environment");
  auto* train_rl = app.add_subcommand("train-rl", "Train one RL agent");
  auto* eval_rl = app.add_subcommand("eval-rl", "Evaluate trained RL agents");
  auto* hybrid = app.add_subcommand("hybrid", "Run classifier-gated control over the test records");
  auto* report = app.add_subcommand("report", "Write the human and machine reports");
  auto* run_all = app.add_subcommand("run-all", "Run every stage and write the reports");
  auto* show = app.add_subcommand("show-config", "Print the resolved config as JSON");

  std::string algo;
  train_rl->add_option("--algo", algo, "dqn, a2c or ppo")->required()->check(CLI::IsMember({"dqn", "a2c", "ppo"}));
  std::string format = "both";
  report->add_option("--format", format, "human, machine or both")->check(CLI::IsMember({"human", "machine", "both"}));

  for (auto* cmd : {prep, train_ml, eval_ml, fit_oracle, train_rl, eval_rl, hybrid, report, run_all, show}) {
    add_common(cmd, opts);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    const auto config = resolve(opts);
    const auto progress = progress_sink(opts.quiet);
    const pipeline::Layout layout{config.output_dir};

    if (show->parsed()) {
      std::cout << pipeline::to_json(config).dump(2) << '\n';
      return 0;
    }
    if (run_all->parsed()) {
      const auto result = pipeline::run_experiment(config, progress);
      std::cout << pipeline::format_human(result);
      return 0;
    }

    pipeline::DirectoryLock lock(layout.root);
    nlohmann::json summary;
    if (prep->parsed()) summary = pipeline::prep_data(config, progress);
    else if (train_ml->parsed()) summary = pipeline::train_ml(config, progress);
    else if (eval_ml->parsed()) summary = pipeline::eval_ml(config, progress);
    else if (fit_oracle->parsed()) summary = pipeline::fit_oracle(config, progress);
    else if (train_rl->parsed()) summary = pipeline::train_rl(config, rl::algorithm_from(algo), progress);
    else if (eval_rl->parsed()) summary = pipeline::eval_rl(config, progress);
    else if (hybrid->parsed()) summary = pipeline::hybrid(config, progress);
    else if (report->parsed()) {
      const auto r = pipeline::collect_report(config);
      if (format != "human") print_written(pipeline::emit_report(r, pipeline::ReportFormat::Machine, layout));
      if (format != "machine") print_written(pipeline::emit_report(r, pipeline::ReportFormat::Human, layout));
      return 0;
    }
    std::cout << summary.dump(2) << '\n';
    return 0;
  } catch (const Error& e) {
    std::cerr << "gridstab: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "gridstab: unexpected failure: " << e.what() << '\n';
    return 1;
  }
}
