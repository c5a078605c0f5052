#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moerl/nn/activation.hpp"

namespace moerl {

/// Logged quantities of one patient: per step the reward, the evaluated and
/// behavior probabilities of the logged action, and the control variates.
struct EvalTrajectory {
  std::vector<double> rewards;
  std::vector<double> pi_e;
  std::vector<double> pi_b;
  std::vector<double> q_hat;  // empty when the dataset declares zero variates
  std::vector<double> v_hat;

  std::size_t length() const { return rewards.size(); }
};

/// Past its own length a trajectory sits in an absorbing state: its ratio is
/// frozen and reward and variates are zero. T is the longest trajectory.
struct EvaluationDataset {
  std::vector<EvalTrajectory> trajectories;
  double discount = 0.99;
  /// Must be set to evaluate without control variates.
  bool zero_variates = false;

  /// UsageError when variates are missing without zero_variates, DataError on
  /// inconsistent lengths or probabilities (pi_b must be > 0, pi_e >= 0).
  void validate() const;
  std::size_t horizon() const;
};

/// w(i, t) = rho_t^i / sum_j rho_t^j with rho_t^i the product of pi_e / pi_b up
/// to min(t, T_i - 1). Computed in log space. NumericalError naming t when
/// every ratio is zero at some step.
nn::Matrix importance_weights(const EvaluationDataset& data);

/// sum_i sum_t gamma^t [w_t^i (r_t^i - Q_t^i) + w_{t-1}^i V_t^i], w_{-1}^i = 1/I.
double wdr_estimate(const EvaluationDataset& data);
double wdr_from_weights(const EvaluationDataset& data, const nn::Matrix& weights);

/// WDR and its gradient with respect to parameters that move pi_e.
/// dpi_e[i] is (T_i x P): row t holds d pi_e(a_t | s_t) / d theta. Patients
/// whose ratio is zero contribute no gradient.
double wdr_with_gradient(const EvaluationDataset& data, const std::vector<nn::Matrix>& dpi_e, nn::Vector* grad);

struct WeightDiagnostics {
  double fraction_nonzero = 0.0;        // over all (i, t)
  double fraction_nonzero_final = 0.0;  // w at each patient's own last step
  /// "0", "<1e-12", "[1e-12,1e-11)", ..., "[1e-1,1]"
  std::vector<std::string> bin_labels;
  std::vector<std::size_t> counts;  // sums to I * T
};

WeightDiagnostics weight_diagnostics(const EvaluationDataset& data, const nn::Matrix& weights);
WeightDiagnostics weight_diagnostics(const EvaluationDataset& data);

nlohmann::json to_json(const WeightDiagnostics& d);

/// Patient indices for one bootstrap replicate.
using Resampler = std::function<std::vector<std::size_t>(std::size_t patients, int replicate)>;

struct BootstrapResult {
  double original_difference = 0.0;
  std::vector<double> differences;  // replicate order, skipped ones left out
  std::size_t skipped = 0;
  std::size_t requested = 0;
  double mean = 0.0;
  double p025 = 0.0;
  double p975 = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::size_t negative = 0;
};

/// WDR(a) - WDR(b) over n patient resamples drawn with replacement. Replicate r
/// uses RNG stream mix_seed(seed, r) unless `resampler` is given. Both
/// datasets must describe the same patients in the same order. A replicate
/// whose weights degenerate is skipped and counted.
BootstrapResult bootstrap_difference(const EvaluationDataset& a, const EvaluationDataset& b, int n,
                                     std::uint64_t seed, const Resampler& resampler = nullptr);

EvaluationDataset subset(const EvaluationDataset& data, const std::vector<std::size_t>& patients);

nlohmann::json to_json(const BootstrapResult& r);
/// One difference per row under a "difference" header.
void write_bootstrap_csv(const std::filesystem::path& path, const BootstrapResult& r);

}  // namespace moerl
