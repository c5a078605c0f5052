#pragma once

#include <filesystem>
#include <iosfwd>
#include <vector>

#include "moerl/data_pipeline.hpp"
#include "moerl/nn/adam.hpp"
#include "moerl/nn/network.hpp"

namespace moerl {

struct RewardConfig {
  nn::TrainingConfig training{};
  /// Weight of the L1 norm of d logit / d observation.
  double input_gradient_weight = 1e-3;

  void validate() const;
};

/// f(o): dense 45 -> 64 -> 32 -> 1 with tanh hidden units; the network emits
/// the mortality logit and the probability is its sigmoid.
struct MortalityPredictor {
  nn::NetworkSpec spec;
  nn::ModelParams params;
  double input_gradient_weight = 0.0;
  double test_accuracy = -1.0;  // -1 until evaluated
  std::vector<double> loss_log;
};

nn::NetworkSpec mortality_network_spec(std::uint64_t init_seed);

/// Observations as columns (45 x N) with the owning trajectory's outcome
/// (1 = non-survivor) as labels.
struct LabeledObservations {
  nn::Matrix x;
  std::vector<int> labels;
};

LabeledObservations label_observations(const std::vector<data::ProcessedTrajectory>& cohort);

/// Balanced minibatches (half per class, drawn with replacement) minimizing
/// BCE + weight * mean L1 norm of the input gradient of the logit.
/// DataError when only one class is present.
MortalityPredictor train_mortality_predictor(const LabeledObservations& train, const RewardConfig& config);

/// Loss of one batch (labels as a 1 x B matrix) and optionally its parameter
/// gradient, including the double-backpropagated penalty term.
double predictor_loss(const nn::NetworkSpec& spec, const nn::ModelParams& params, const nn::Matrix& x,
                      const nn::Matrix& labels, double input_gradient_weight, nn::Vector* grad = nullptr);

/// Logits (1 x N).
nn::Matrix mortality_logits(const MortalityPredictor& predictor, const nn::Matrix& x);
double predict_mortality(const MortalityPredictor& predictor, const data::Observation& o);
/// Probabilities (1 x N).
nn::Matrix predict_mortality(const MortalityPredictor& predictor, const nn::Matrix& x);

/// d logit / d observation, one column per sample (45 x N).
nn::Matrix input_gradients(const MortalityPredictor& predictor, const nn::Matrix& x);

/// Fraction of correct labels at threshold 0.5.
double accuracy(const MortalityPredictor& predictor, const LabeledObservations& data);

/// logit(f(o)) - logit(f(o_next)), with f clamped to [1e-12, 1 - 1e-12].
double compute_reward(const MortalityPredictor& predictor, const data::Observation& o, const data::Observation& o_next);

/// Per-step rewards of a trajectory: step t earns compute_reward(o_t, o_{t+1});
/// the final step earns 0 and ends the episode.
std::vector<double> trajectory_rewards(const MortalityPredictor& predictor, const data::ProcessedTrajectory& trajectory);

struct LogOddsHistogram {
  std::vector<double> edges;  // bins + 1
  std::vector<std::size_t> survivor_counts;
  std::vector<std::size_t> non_survivor_counts;
  std::vector<double> survivor_logits;
  std::vector<double> non_survivor_logits;
};

LogOddsHistogram log_odds_histogram(const MortalityPredictor& predictor, const LabeledObservations& data,
                                    int bins = 40);
void write_histogram_csv(std::ostream& out, const LogOddsHistogram& h);

struct InputGradientReport {
  nn::Matrix values;     // N x 45
  nn::Matrix gradients;  // N x 45
  std::vector<double> abs_correlation;  // per feature; 0 when either side is constant
};

InputGradientReport mortality_input_gradients(const MortalityPredictor& predictor, const nn::Matrix& x);
/// Rows: sample, feature, value, gradient.
void write_gradients_csv(std::ostream& out, const InputGradientReport& report);

void save_predictor(const std::filesystem::path& path, const MortalityPredictor& predictor);
MortalityPredictor load_predictor(const std::filesystem::path& path);

}  // namespace moerl
