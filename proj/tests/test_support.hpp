#pragma once

#include <random>
#include <vector>

#include "moerl/cohort_sim.hpp"
#include "moerl/data_pipeline.hpp"
#include "moerl/ddqn.hpp"
#include "moerl/moe_gate.hpp"
#include "moerl/ope_wdr.hpp"

namespace moerl::fixtures {

struct ProcessedSplit {
  std::vector<data::ProcessedTrajectory> train, test;
  data::PreprocessStats stats;
  data::ActionSpace space;
};

inline ProcessedSplit processed_sim_cohort(int n, std::uint64_t seed) {
  auto raw = sim::generate_cohort(sim::default_sepsis_mdp(), n, seed);
  auto [train, test] = data::split_cohort(raw, 0.75, seed);
  ProcessedSplit out;
  out.stats = data::fit_preprocess(train);
  out.space = data::fit_action_space(train);
  out.train = data::process_all(out.stats, out.space, train);
  out.test = data::process_all(out.stats, out.space, test);
  return out;
}

inline data::Observation random_observation(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  data::Observation o;
  for (auto& v : o.values) v = u(rng);
  return o;
}

/// Deterministic 5-state chain. In state s the action (7s + 3) mod 25 earns +1
/// and moves right (off the end is terminal); every other action earns -0.5
/// and stays. States are one-hot.
struct ChainMdp {
  static constexpr int states = 5;
  double discount = 0.9;

  static int best_action(int s) { return (7 * s + 3) % kActionCount; }

  TransitionSet transitions() const {
    TransitionSet d;
    const int n = states * kActionCount;
    d.states = nn::Matrix::Zero(states, n);
    d.next_states = nn::Matrix::Zero(states, n);
    int j = 0;
    for (int s = 0; s < states; ++s) {
      for (int a = 0; a < kActionCount; ++a, ++j) {
        d.states(s, j) = 1.0;
        d.actions.push_back(a);
        const bool good = a == best_action(s);
        d.rewards.push_back(good ? 1.0 : -0.5);
        const int next = good ? s + 1 : s;
        d.terminal.push_back(next == states ? 1 : 0);
        if (next < states) d.next_states(next, j) = 1.0;
      }
    }
    return d;
  }

  /// Q* by value iteration, states x actions.
  nn::Matrix q_star() const {
    nn::Matrix q = nn::Matrix::Zero(states, kActionCount);
    for (int sweep = 0; sweep < 2000; ++sweep) {
      nn::Matrix next = q;
      for (int s = 0; s < states; ++s) {
        for (int a = 0; a < kActionCount; ++a) {
          const bool good = a == best_action(s);
          const int ns = good ? s + 1 : s;
          const double v = ns == states ? 0.0 : q.row(ns).maxCoeff();
          next(s, a) = (good ? 1.0 : -0.5) + discount * v;
        }
      }
      q = next;
    }
    return q;
  }
};

/// OPE oracle on the 6-state chain (4 transient states plus death and
/// discharge): an evaluation policy tilted away from behavior, with exact
/// time-indexed values for it.
struct OracleOpe {
  sim::SimMDP mdp;
  sim::PolicyTable pi_e;
  sim::ExactValues exact;

  OracleOpe(int horizon, std::uint64_t seed, double tilt = 0.5) : mdp(sim::chain_mdp(4, horizon, seed)) {
    std::mt19937_64 rng(seed + 1000);
    std::normal_distribution<double> g;
    const int A = mdp.action_count;
    pi_e.assign(mdp.behavior_policy_table.size(), 0.0);
    for (int s = 0; s < mdp.latent_state_count; ++s) {
      double total = 0.0;
      for (int a = 0; a < A; ++a) {
        const auto k = static_cast<std::size_t>(s * A + a);
        pi_e[k] = mdp.behavior_policy_table[k] * std::exp(tilt * g(rng));
        total += pi_e[k];
      }
      for (int a = 0; a < A; ++a) pi_e[static_cast<std::size_t>(s * A + a)] /= total;
    }
    exact = sim::exact_values(mdp, pi_e, mdp.discount);
  }

  double value() const { return exact.start_value; }

  /// Behavior-generated trajectories scored for pi_e (or for the behavior
  /// policy itself when on_policy). Variates are exact values, or absent.
  EvaluationDataset dataset(int patients, std::uint64_t seed, bool exact_variates, bool on_policy = false) const {
    const auto cohort = sim::generate_cohort(mdp, patients, seed);
    EvaluationDataset d;
    d.discount = mdp.discount;
    d.zero_variates = !exact_variates;
    const auto& target = on_policy ? mdp.behavior_policy_table : pi_e;
    const auto values = on_policy ? sim::exact_values(mdp, target, mdp.discount) : exact;
    for (const auto& tr : cohort) {
      EvalTrajectory e;
      for (std::size_t t = 0; t < tr.steps.size(); ++t) {
        const int s = tr.latent_trace[t];
        const int a = tr.intended_actions[t];
        e.rewards.push_back(mdp.reward(s, a, tr.latent_trace[t + 1]));
        e.pi_e.push_back(target[static_cast<std::size_t>(s * mdp.action_count + a)]);
        e.pi_b.push_back(mdp.behavior(s, a));
        if (exact_variates) {
          e.q_hat.push_back(values.q(static_cast<int>(t), s, a));
          e.v_hat.push_back(values.v(static_cast<int>(t), s));
        }
      }
      d.trajectories.push_back(std::move(e));
    }
    return d;
  }
};

/// Random trajectories with lengths 1..max_len and probabilities in (0, 1].
inline EvaluationDataset random_eval_dataset(std::mt19937_64& rng, int patients, int max_len, bool variates) {
  std::uniform_int_distribution<int> len(1, max_len);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g;
  EvaluationDataset d;
  d.discount = 0.9 + 0.1 * u(rng);
  d.zero_variates = !variates;
  for (int i = 0; i < patients; ++i) {
    EvalTrajectory e;
    const int n = len(rng);
    for (int t = 0; t < n; ++t) {
      e.rewards.push_back(g(rng));
      e.pi_e.push_back(0.01 + 0.99 * u(rng));
      e.pi_b.push_back(0.01 + 0.99 * u(rng));
      if (variates) {
        e.q_hat.push_back(g(rng));
        e.v_hat.push_back(g(rng));
      }
    }
    d.trajectories.push_back(std::move(e));
  }
  return d;
}

/// Gate inputs where the better expert depends on the first feature: the
/// kernel expert's logged-action probability is high when x0 > 0 and the
/// reward follows whichever expert matches the logged action.
inline GateDataset random_gate_dataset(std::mt19937_64& rng, int patients, int max_len) {
  std::uniform_int_distribution<int> len(1, max_len);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g;
  GateDataset d;
  d.discount = 0.95;
  for (int i = 0; i < patients; ++i) {
    std::vector<GateStep> steps(static_cast<std::size_t>(len(rng)));
    for (auto& s : steps) {
      for (auto& x : s.x) x = g(rng);
      // the expert trusted on this side of x0 tracks the outcome; the other is noise
      const bool kernel_side = s.x[0] > 0.0;
      const bool good = u(rng) < 0.5;
      const double informed = good ? 0.5 + 0.4 * u(rng) : 0.02 + 0.1 * u(rng);
      const double noise = 0.1 + 0.4 * u(rng);
      s.pi_k = kernel_side ? informed : noise;
      s.pi_d = kernel_side ? noise : informed;
      s.pi_b = 0.05 + 0.5 * u(rng);
      s.reward = (good ? 1.0 : -0.5) + 0.3 * g(rng);
      s.q_hat = 0.2 * g(rng);
      s.v_hat = 0.2 * g(rng);
    }
    d.trajectories.push_back(std::move(steps));
  }
  return d;
}

}  // namespace moerl::fixtures
