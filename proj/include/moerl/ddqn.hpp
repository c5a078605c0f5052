#pragma once

#include <cstdint>
#include <filesystem>
#include <string_view>
#include <utility>
#include <vector>

#include "moerl/data_pipeline.hpp"
#include "moerl/nn/adam.hpp"
#include "moerl/nn/network.hpp"
#include "moerl/replay_buffer.hpp"
#include "moerl/types.hpp"

namespace moerl {

/// Offline transitions, one column per transition.
struct TransitionSet {
  nn::Matrix states;
  nn::Matrix next_states;  // zero columns for terminal transitions
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<std::uint8_t> terminal;

  std::size_t size() const { return actions.size(); }
  /// ShapeError / DataError on inconsistent columns or out-of-range actions.
  void validate() const;
};

/// Step t of patient i goes to encoded[i].col(t + 1); the last step of every
/// trajectory is terminal.
TransitionSet build_transitions(const std::vector<nn::Matrix>& encoded,
                                const std::vector<std::vector<double>>& rewards,
                                const std::vector<data::ProcessedTrajectory>& cohort);

struct DqnConfig {
  /// steps, batch_size, learning_rate, discount, seed; regularization is the
  /// weight of the penalty on |Q| above reward_bound.
  nn::TrainingConfig training{30, 0, 20000, 1e-4, 0.99, 1.0, 0};
  double reward_bound = 3.0;
  int target_sync = 1000;
  int trunk_hidden = 128;
  int head_hidden = 64;
  double temperature = 1.0;
  ReplayConfig replay{};

  void validate() const;
};

/// Shared trunk (in -> h -> h, relu), value head (h -> 64 -> 1) and advantage
/// head (h -> 64 -> 25); Q = V + A - mean(A).
struct DuelingSpec {
  nn::NetworkSpec trunk;
  nn::NetworkSpec value;
  nn::NetworkSpec advantage;
};

DuelingSpec dueling_spec(int input_dim, int trunk_hidden, int head_hidden, std::uint64_t seed);

struct DuelingParams {
  nn::ModelParams trunk;
  nn::ModelParams value;
  nn::ModelParams advantage;

  static DuelingParams glorot_uniform(const DuelingSpec& spec);
  std::size_t size() const { return trunk.size() + value.size() + advantage.size(); }
  /// trunk, value, advantage concatenated.
  nn::Vector flat() const;
  void set_flat(const nn::Vector& values);
};

struct QNetwork {
  DuelingSpec spec;
  DuelingParams online;
  DuelingParams target;
  long steps_trained = 0;
  /// Exponential moving average of the batch loss, sampled every 100 steps.
  std::vector<double> loss_log;
  double temperature = 1.0;
};

QNetwork make_qnetwork(int input_dim, const DqnConfig& config);

struct DuelingOutput {
  nn::Matrix value;      // 1 x B
  nn::Matrix advantage;  // 25 x B
  nn::Matrix q;          // 25 x B
};

DuelingOutput dueling_forward(const DuelingSpec& spec, const DuelingParams& params, const nn::Matrix& states);
nn::Matrix q_values(const QNetwork& net, const nn::Matrix& states);
nn::Matrix advantages(const QNetwork& net, const nn::Matrix& states);

/// r + discount * Q_target(s', argmax_a Q_online(s', a)), or r when terminal.
std::vector<double> double_q_targets(const QNetwork& net, const TransitionSet& data,
                                     const std::vector<std::size_t>& batch, double discount);
/// Same with a single network selecting and evaluating the action.
std::vector<double> single_q_targets(const QNetwork& net, const TransitionSet& data,
                                     const std::vector<std::size_t>& batch, double discount);

struct TdLoss {
  double value = 0.0;
  std::vector<double> td_errors;  // target - Q(s, a)
};

/// mean_j weight_j * ((y_j - Q(s_j, a_j))^2 + penalty * max(|Q(s_j, a_j)| - bound, 0))
/// over the online network, with targets held fixed. `grad`, if given,
/// receives the gradient over the online parameters in DuelingParams::flat order.
TdLoss td_loss(const DuelingSpec& spec, const DuelingParams& params, const TransitionSet& data,
               const std::vector<std::size_t>& batch, const std::vector<double>& targets,
               const std::vector<double>& weights, double penalty, double bound, nn::Vector* grad = nullptr);

/// Prioritized double-DQN training. NumericalError naming the step on a
/// non-finite loss.
QNetwork train_ddqn(const TransitionSet& data, const DqnConfig& config);

/// Softmax of the advantage stream at the given temperature.
PolicyDistribution dqn_policy(const QNetwork& net, const nn::Vector& state, double temperature = 1.0);
std::vector<PolicyDistribution> dqn_policies(const QNetwork& net, const nn::Matrix& states, double temperature = 1.0);

enum class VariateMode { dqn_value, behavior_value };

std::string_view to_string(VariateMode mode);

/// Q(s, a) and V(s) per column: V is max_a Q for dqn_value and mean_a Q for
/// behavior_value.
std::pair<std::vector<double>, std::vector<double>> control_variates(const QNetwork& net, VariateMode mode,
                                                                     const nn::Matrix& states,
                                                                     const std::vector<int>& actions);

void save_qnetwork(const std::filesystem::path& path, const QNetwork& net);
QNetwork load_qnetwork(const std::filesystem::path& path);

}  // namespace moerl
