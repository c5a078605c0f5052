#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moerl/ddqn.hpp"
#include "moerl/kernel_policy.hpp"
#include "moerl/moe_gate.hpp"
#include "moerl/reward_model.hpp"
#include "moerl/state_encoder.hpp"

namespace moerl {

enum class Scale { desk, paper };

std::string_view to_string(Scale scale);
Scale scale_from_string(std::string_view name);

enum class AgreementMetric { argmax, total_variation };

struct PipelineConfig {
  Scale scale = Scale::desk;
  std::uint64_t seed = 0;
  std::filesystem::path out = "run";
  /// Raw cohort CSV; empty means the simulator generates the cohort.
  std::filesystem::path cohort_csv;
  int patients = 2000;
  double train_ratio = 0.75;
  double discount = 0.99;

  EncoderConfig encoder;
  RewardConfig reward;
  DqnConfig dqn;

  int kernel_k = kDefaultNeighbors;
  int behavior_k = kDefaultNeighbors;
  bool cross_validate_k = true;
  std::vector<int> k_candidates = default_k_candidates();

  GateConfig gate;

  int bootstrap = 200;
  AgreementMetric agreement = AgreementMetric::argmax;

  /// ConfigError naming the offending key path (for example `discount`).
  void validate() const;
};

/// Defaults for a preset, before any file, environment or flag overrides.
PipelineConfig preset(Scale scale);

/// Dotted-key JSON view; every key accepted by config_from_json appears here.
nlohmann::json to_json(const PipelineConfig& config);

/// Overlays `overrides` on the preset named by its "scale" key (or `base`
/// when absent). Unknown keys and ill-typed values raise ConfigError with the
/// key path.
PipelineConfig config_from_json(const nlohmann::json& overrides, std::optional<Scale> base = std::nullopt);

/// MOERL_<SECTION>__<KEY>=value pairs as a JSON override object. Values parse
/// as JSON when possible and as strings otherwise.
nlohmann::json env_overrides(const std::map<std::string, std::string>& environment);
std::map<std::string, std::string> process_environment();

struct CliOverrides {
  std::optional<std::filesystem::path> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<Scale> scale;
  std::optional<std::filesystem::path> out;
};

/// Preset < config file < environment < command-line flags, then validate().
PipelineConfig resolve_config(const CliOverrides& cli, const std::map<std::string, std::string>& environment);

/// Stable 16-hex-digit FNV-1a hash of the canonical JSON (output path excluded).
std::string config_hash(const PipelineConfig& config);

}  // namespace moerl
