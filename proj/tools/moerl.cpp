#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "moerl/config.hpp"
#include "moerl/error.hpp"
#include "moerl/pipeline.hpp"

namespace {

constexpr const char* kDescriptions[][2] = {
    {"simulate", "generate the synthetic cohort (or copy cohort_csv)"},
    {"preprocess", "split patients, fit feature transforms and dose bins"},
    {"train-encoder", "train the recurrent and sparse state autoencoders"},
    {"train-reward", "train the mortality predictor that defines rewards"},
    {"train-dqn", "train the dueling double DQN per encoding"},
    {"fit-kernel", "build neighbor indexes, kernel and behavior policies"},
    {"fit-moe", "optimize the gate between the kernel and DQN experts"},
    {"evaluate", "score every policy on the test set with WDR"},
    {"bootstrap", "bootstrap the MoE minus physician difference"},
    {"report", "write report.json, tables and figures"},
    {"all", "run every stage in order"},
    {"verify", "recompute the policy values from stored models and compare"},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-experts offline RL pipeline"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path, scale, out;
  std::uint64_t seed = 0;
  bool tv = false;
  auto* config_opt = app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "master seed");
  auto* scale_opt = app.add_option("--scale", scale, "preset")->check(CLI::IsMember({"desk", "paper"}));
  auto* out_opt = app.add_option("--out", out, "output directory");
  app.add_flag("--tv-agreement", tv, "policy agreement as 1 - total variation instead of argmax matches");
  for (const auto& [name, help] : kDescriptions) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    moerl::CliOverrides cli;
    if (*config_opt) cli.config_path = config_path;
    if (*seed_opt) cli.seed = seed;
    if (*scale_opt) cli.scale = moerl::scale_from_string(scale);
    if (*out_opt) cli.out = out;
    auto config = moerl::resolve_config(cli, moerl::process_environment());
    if (tv) config.agreement = moerl::AgreementMetric::total_variation;
    moerl::pipeline::run(app.get_subcommands().front()->get_name(), config, std::cout);
  } catch (const moerl::Error& e) {
    std::cerr << "error (" << moerl::to_string(e.kind()) << "): " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
