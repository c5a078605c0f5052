#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moerl/types.hpp"

namespace moerl::sim {

/// Row-major [latent x action] probability table.
using PolicyTable = std::vector<double>;

/// Known-parameter latent MDP that stands in for the ICU cohort.
///
/// Latent states are either transient (they emit observations) or absorbing
/// (death / discharge). Every emitted step carries the 45 raw features and the
/// two raw doses of the treatment drawn from `behavior_policy_table`.
struct SimMDP {
  int latent_state_count = 0;
  int action_count = kActionCount;
  /// [s * A * S + a * S + s'].
  std::vector<double> transition_tensor;
  /// [s * 45 + j] mean and spread of raw feature j in latent state s.
  std::vector<double> emission_mean;
  std::vector<double> emission_spread;
  /// Lag-one correlation of a patient's standardized emission noise. The
  /// per-state marginal stays Gaussian with the configured spread.
  double emission_autocorrelation = 0.0;
  /// Physiological clip range per feature.
  std::array<double, kFeatureCount> feature_lo{};
  std::array<double, kFeatureCount> feature_hi{};
  /// Features drawn once per patient (from the start state's parameters).
  std::array<bool, kFeatureCount> patient_static{};
  /// Mortality log-odds per latent state; decides the outcome of trajectories
  /// that reach the horizon without being absorbed.
  std::vector<double> mortality_logit_weights;
  PolicyTable behavior_policy_table;
  std::vector<double> start_distribution;
  /// Latent index of the death / discharge absorbing states (-1 if absent).
  int death_state = -1;
  int discharge_state = -1;
  /// [s * A * S + a * S + s'] reward for the oracle process; empty means zero.
  std::vector<double> reward_table;
  /// Upper edges of nonzero dose bins 1..4; bin b covers (edge[b-1], edge[b]].
  std::array<double, 4> iv_dose_edges{50.0, 180.0, 530.0, 1500.0};
  std::array<double, 4> vaso_dose_edges{0.08, 0.22, 0.45, 1.2};
  /// Maximum steps per trajectory; 0 means unbounded (oracle use only).
  int horizon_max = 12;
  double discount = 0.99;

  /// Throws ConfigError naming the first offending row or field.
  void validate() const;

  bool is_absorbing(int s) const { return s == death_state || s == discharge_state; }
  double transition(int s, int a, int next) const;
  double reward(int s, int a, int next) const;
  double behavior(int s, int a) const;
};

struct RawStep {
  std::array<double, kFeatureCount> features{};
  double iv_dose = 0.0;    // mL / 4h
  double vaso_dose = 0.0;  // mcg/kg/min
};

struct RawTrajectory {
  std::string patient_id;
  std::vector<RawStep> steps;
  Outcome outcome = Outcome::survivor;
  /// Simulator only: latent state at each step plus the state reached after
  /// the last step (size steps + 1). Empty for ingested data.
  std::vector<int> latent_trace;
  /// Simulator only: action index whose dose bins generated each step.
  std::vector<int> intended_actions;
};

/// The default 8-state cohort: six severity levels (0 mildest) plus death (6)
/// and discharge (7).
SimMDP default_sepsis_mdp();

/// Compact oracle MDP: `transient` chain states followed by death and
/// discharge, with randomized but seed-determined dynamics, a behavior policy
/// that covers every action, and rewards equal to the change in negative
/// mortality log-odds between transient states.
SimMDP chain_mdp(int transient, int horizon, std::uint64_t seed);

/// Patient i uses RNG stream mix_seed(seed, i); output is bit-identical per seed.
std::vector<RawTrajectory> generate_cohort(const SimMDP& mdp, int n_patients, std::uint64_t seed);

/// Time-indexed (finite horizon) or stationary (horizon 0) exact values.
struct ExactValues {
  /// [t][s]; one row when stationary.
  std::vector<std::vector<double>> state_value;
  /// [t][s * A + a].
  std::vector<std::vector<double>> action_value;
  double start_value = 0.0;
  bool stationary = false;

  double v(int t, int s) const;
  double q(int t, int s, int a) const;
};

/// Bellman expectation solved exactly: backward induction over the horizon,
/// or fixed-point sweeps until the sup-norm residual drops below 1e-12
/// (NumericalError after 10^6 sweeps) when the horizon is unbounded.
ExactValues exact_values(const SimMDP& mdp, const PolicyTable& policy, double discount);
double exact_policy_value(const SimMDP& mdp, const PolicyTable& policy, double discount);

/// Probability that a trajectory ends as a non-survivor under the behavior
/// policy, by forward propagation of the latent state distribution.
double exact_mortality_rate(const SimMDP& mdp);

/// Discounted sum of oracle rewards along a generated trajectory.
double latent_return(const SimMDP& mdp, const RawTrajectory& trajectory, double discount);

/// Every action equally likely in every state.
PolicyTable uniform_policy(const SimMDP& mdp);

/// Ground-truth sidecar: MDP summary, latent traces, intended actions and the
/// exact behavior value / mortality rate.
nlohmann::json ground_truth_json(const SimMDP& mdp, const std::vector<RawTrajectory>& cohort);

}  // namespace moerl::sim
