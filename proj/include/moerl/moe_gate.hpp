#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "moerl/data_pipeline.hpp"
#include "moerl/neighbor_index.hpp"
#include "moerl/ope_wdr.hpp"
#include "moerl/types.hpp"

namespace moerl {

inline constexpr int kGateFeatureCount = 9;

using GatingFeatures = std::array<double, kGateFeatureCount>;

/// age, Elixhauser, SOFA, FiO2, BUN, GCS, Albumin, trajectory_length,
/// max_neighbor_distance.
std::span<const std::string_view, kGateFeatureCount> gating_feature_names();

/// Clinical features come from the preprocessed observation of the current
/// step; trajectory_length counts the steps so far; the last entry is the
/// distance to the k-th nearest neighbor.
GatingFeatures gating_features(const data::Observation& o, int trajectory_length, double kth_distance);

struct GatingFeatureStats {
  GatingFeatures mean{};
  GatingFeatures stddev{};  // 1 where the training spread is zero

  GatingFeatures standardize(const GatingFeatures& x) const;
};

/// Population mean and standard deviation over the training rows.
GatingFeatureStats fit_gating_stats(const std::vector<GatingFeatures>& train);

struct GatingParams {
  GatingFeatures w{};
  double b = 0.0;
};

/// (p_k, p_d) with p_k = sigmoid(w.x + b) on standardized features.
std::pair<double, double> gate_probability(const GatingParams& params, const GatingFeatures& x);

/// p_k * kernel + (1 - p_k) * dqn, where dqn is already restricted.
PolicyDistribution mixture_policy(double p_k, const PolicyDistribution& kernel, const PolicyDistribution& dqn);

/// Frozen per-step inputs of the gate objective. Probabilities refer to the
/// logged action; x is standardized.
struct GateStep {
  GatingFeatures x{};
  double pi_k = 0.0;
  double pi_d = 0.0;
  double pi_b = 1.0;
  double reward = 0.0;
  double q_hat = 0.0;
  double v_hat = 0.0;
};

struct GateDataset {
  std::vector<std::vector<GateStep>> trajectories;
  double discount = 0.99;
};

/// The dataset scored for the mixture policy under `params`. `dpi`, if given,
/// receives d pi_m(a_t) / d (w, b), one (T_i x 10) matrix per patient.
EvaluationDataset gate_evaluation(const GateDataset& data, const GatingParams& params,
                                  const std::vector<std::size_t>* patients = nullptr,
                                  std::vector<nn::Matrix>* dpi = nullptr);

/// WDR of the mixture policy, with its gradient over (w, b) when asked.
double gate_objective(const GateDataset& data, const GatingParams& params, nn::Vector* grad = nullptr,
                      const std::vector<std::size_t>* patients = nullptr);

struct GateConfig {
  int minibatch = 256;
  int restarts = 1000;  // including the two corner starts
  double learning_rate = 1e-4;
  int epochs = 50;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RestartRecord {
  int index = 0;
  double initial_objective = 0.0;
  double best_objective = 0.0;
  int best_epoch = 0;  // 0 = the initialization itself
  bool discarded = false;
};

struct GateResult {
  GatingParams params;
  GatingFeatureStats stats;
  double objective = 0.0;  // full training WDR of params
  int best_restart = 0;
  std::uint64_t seed = 0;
  std::vector<RestartRecord> restarts;
  std::vector<std::string> log;
};

/// Restart 0 starts at b = +20 (pure kernel), restart 1 at b = -20 (pure DQN),
/// the rest at w ~ U(-1,1), b ~ U(-2,2). Each runs Adam ascent on minibatch
/// WDR for the configured epochs; the best full-training WDR seen at any
/// epoch boundary wins. Restart r draws from RNG stream mix_seed(seed, r).
GateResult optimize_gate(const GateDataset& train, const GateConfig& config);

nlohmann::json to_json(const GateResult& gate);
GateResult gate_from_json(const nlohmann::json& j);

}  // namespace moerl
