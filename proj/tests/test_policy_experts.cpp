#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "moerl/ddqn.hpp"
#include "moerl/error.hpp"
#include "moerl/kernel_policy.hpp"
#include "moerl/neighbor_index.hpp"
#include "moerl/nn/grad_check.hpp"
#include "moerl/replay_buffer.hpp"
#include "test_support.hpp"

using namespace moerl;
using nn::Matrix;
using nn::Vector;

namespace {

NeighborIndex random_index(int n, int dim, std::uint64_t seed, std::vector<NeighborEntry>* out_entries = nullptr) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::uniform_int_distribution<int> action(0, kActionCount - 1);
  std::bernoulli_distribution dies(0.3);
  Matrix states(dim, n);
  for (int j = 0; j < n; ++j) {
    for (int r = 0; r < dim; ++r) states(r, j) = g(rng);
  }
  std::vector<NeighborEntry> entries;
  for (int j = 0; j < n; ++j) {
    char id[16];
    std::snprintf(id, sizeof id, "P%04d", j / 5);
    entries.push_back({action(rng), dies(rng) ? Outcome::non_survivor : Outcome::survivor, id, j % 5});
  }
  if (out_entries) *out_entries = entries;
  return NeighborIndex(states, entries);
}

// Reference ordering by a plain loop over every stored point.
std::vector<std::size_t> brute_force(const NeighborIndex& index, const Vector& q, int k) {
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t i = 0; i < index.size(); ++i) {
    double s = 0.0;
    for (int r = 0; r < index.dim(); ++r) {
      const double diff = index.states()(r, static_cast<Eigen::Index>(i)) - q[r];
      s += diff * diff;
    }
    d.emplace_back(s, i);
  }
  std::stable_sort(d.begin(), d.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    const auto& ea = index.entry(a.second);
    const auto& eb = index.entry(b.second);
    if (ea.patient_id != eb.patient_id) return ea.patient_id < eb.patient_id;
    return ea.t < eb.t;
  });
  std::vector<std::size_t> out;
  for (int j = 0; j < k; ++j) out.push_back(d[static_cast<std::size_t>(j)].second);
  return out;
}

NeighborIndex labelled_index(const std::vector<std::pair<int, Outcome>>& labels) {
  Matrix states(2, static_cast<Eigen::Index>(labels.size()));
  std::vector<NeighborEntry> entries;
  for (std::size_t j = 0; j < labels.size(); ++j) {
    states(0, static_cast<Eigen::Index>(j)) = static_cast<double>(j);
    states(1, static_cast<Eigen::Index>(j)) = 0.0;
    entries.push_back({labels[j].first, labels[j].second, "P" + std::to_string(1000 + j), 0});
  }
  return NeighborIndex(states, entries);
}

PolicyDistribution random_distribution(std::mt19937_64& rng, double zero_fraction) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PolicyDistribution p;
  double total = 0.0;
  for (auto& v : p.probs) {
    v = u(rng) < zero_fraction ? 0.0 : std::pow(u(rng), 3.0);
    total += v;
  }
  if (total == 0.0) return PolicyDistribution::uniform();
  for (auto& v : p.probs) v /= total;
  return p;
}

DqnConfig small_dqn(long steps, double lr, std::uint64_t seed) {
  DqnConfig c;
  c.training.steps = steps;
  c.training.learning_rate = lr;
  c.training.seed = seed;
  return c;
}

// Single absorbing-free state looping on itself with a constant reward.
TransitionSet self_loop(double reward) {
  TransitionSet d;
  d.states = Matrix::Ones(1, kActionCount);
  d.next_states = Matrix::Ones(1, kActionCount);
  for (int a = 0; a < kActionCount; ++a) {
    d.actions.push_back(a);
    d.rewards.push_back(reward);
    d.terminal.push_back(0);
  }
  return d;
}

}  // namespace

// ---- neighbor index --------------------------------------------------------

TEST(NeighborIndex, StoredPointComesBackFirstAtDistanceZero) {
  const auto index = random_index(200, 16, 1);
  for (std::size_t i : {0u, 57u, 199u}) {
    const auto nb = index.query(index.states().col(static_cast<Eigen::Index>(i)), 3);
    EXPECT_EQ(nb.front().index, i);
    EXPECT_EQ(nb.front().distance, 0.0);
  }
}

TEST(NeighborIndex, MatchesLinearScanOnRandom128dPoints) {
  const auto index = random_index(1000, 128, 2);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 20; ++trial) {
    Vector q(128);
    for (auto& v : q) v = g(rng);
    const auto nb = index.query(q, 300);
    const auto ref = brute_force(index, q, 300);
    ASSERT_EQ(nb.size(), 300u);
    for (std::size_t j = 0; j < 300; ++j) ASSERT_EQ(nb[j].index, ref[j]) << "rank " << j;
    for (std::size_t j = 1; j < 300; ++j) ASSERT_LE(nb[j - 1].distance, nb[j].distance);
  }
}

TEST(NeighborIndex, DuplicatesOrderedByPatientThenStep) {
  Matrix states = Matrix::Zero(3, 4);
  std::vector<NeighborEntry> entries{
      {1, Outcome::survivor, "P2", 1}, {2, Outcome::survivor, "P1", 3}, {3, Outcome::survivor, "P2", 0},
      {4, Outcome::survivor, "P1", 0}};
  const NeighborIndex index(states, entries);
  const auto nb = index.query(Vector::Zero(3), 4);
  std::vector<std::size_t> order;
  for (const auto& n : nb) order.push_back(n.index);
  EXPECT_EQ(order, (std::vector<std::size_t>{3, 1, 2, 0}));
  EXPECT_EQ(index.query(Vector::Ones(3), 4).front().index, 3u);
}

TEST(NeighborIndex, RejectsOversizedKAndHonorsExclusion) {
  const auto index = random_index(50, 4, 4);
  EXPECT_THROW(index.query(Vector::Zero(4), 51), UsageError);
  EXPECT_THROW(index.query(Vector::Zero(4), 0), UsageError);
  EXPECT_THROW(index.query(Vector::Zero(3), 5), ShapeError);
  // patient P0003 owns entries 15..19
  const auto nb = index.query(index.states().col(15), 45, "P0003");
  for (const auto& n : nb) EXPECT_NE(index.entry(n.index).patient_id, "P0003");
  EXPECT_THROW(index.query(Vector::Zero(4), 46, "P0003"), UsageError);
  EXPECT_THROW(NeighborIndex(Matrix(4, 0), {}), UsageError);
}

TEST(NeighborIndex, BuildsFromCohortAndRoundTrips) {
  const auto split = fixtures::processed_sim_cohort(40, 5);
  std::vector<Matrix> encoded;
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g;
  for (const auto& t : split.train) {
    Matrix m(8, static_cast<Eigen::Index>(t.steps.size()));
    for (auto& v : m.reshaped()) v = g(rng);
    encoded.push_back(m);
  }
  const auto index = build_neighbor_index(encoded, split.train);
  std::size_t steps = 0;
  for (const auto& t : split.train) steps += t.steps.size();
  ASSERT_EQ(index.size(), steps);
  EXPECT_EQ(index.entry(0).action, split.train[0].steps[0].action);

  const auto path = std::filesystem::temp_directory_path() / "moerl_test_index.ckpt";
  save_neighbor_index(path, index);
  const auto back = load_neighbor_index(path);
  std::filesystem::remove(path);
  ASSERT_EQ(back.size(), index.size());
  const Vector q = index.states().col(7) * 0.5;
  const auto a = index.query(q, 20);
  const auto b = back.query(q, 20);
  for (std::size_t j = 0; j < 20; ++j) {
    const auto& ea = index.entry(a[j].index);
    const auto& eb = back.entry(b[j].index);
    EXPECT_EQ(ea.patient_id, eb.patient_id);
    EXPECT_EQ(ea.t, eb.t);
    EXPECT_EQ(ea.action, eb.action);
    EXPECT_EQ(a[j].distance, b[j].distance);
  }
}

// ---- kernel and behavior policies -------------------------------------------

TEST(KernelPolicy, AllSurvivorsOnOneAction) {
  const auto index = labelled_index(std::vector<std::pair<int, Outcome>>(300, {0, Outcome::survivor}));
  const auto p = kernel_policy(index, Vector::Zero(2), 300);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_TRUE(p.is_valid());
}

TEST(KernelPolicy, EvenSplitAmongSurvivors) {
  std::vector<std::pair<int, Outcome>> labels;
  for (int j = 0; j < 300; ++j) labels.push_back({j % 2 ? 7 : 3, Outcome::survivor});
  for (int j = 0; j < 50; ++j) labels.push_back({12, Outcome::non_survivor});
  const auto index = labelled_index(labels);
  const auto p = kernel_policy(index, Vector::Zero(2), 350);
  EXPECT_DOUBLE_EQ(p[3], 0.5);
  EXPECT_DOUBLE_EQ(p[7], 0.5);
  EXPECT_EQ(p[12], 0.0);
}

TEST(KernelPolicy, FallsBackToAllNeighborsWithoutSurvivors) {
  std::vector<std::pair<int, Outcome>> labels;
  for (int j = 0; j < 10; ++j) labels.push_back({j < 4 ? 1 : 2, Outcome::non_survivor});
  const auto p = kernel_policy(labelled_index(labels), Vector::Zero(2), 10);
  EXPECT_DOUBLE_EQ(p[1], 0.4);
  EXPECT_DOUBLE_EQ(p[2], 0.6);
}

TEST(KernelPolicy, MatchesRecountFromRawNeighborLists) {
  std::vector<NeighborEntry> entries;
  const auto index = random_index(1000, 128, 7, &entries);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 10; ++trial) {
    Vector q(128);
    for (auto& v : q) v = g(rng);
    const auto ref = brute_force(index, q, 300);
    std::array<double, kActionCount> surv{}, all{};
    double ns = 0;
    for (auto i : ref) {
      all[static_cast<std::size_t>(entries[i].action)] += 1;
      if (entries[i].outcome == Outcome::survivor) {
        surv[static_cast<std::size_t>(entries[i].action)] += 1;
        ns += 1;
      }
    }
    const auto kp = kernel_policy(index, q, 300);
    const auto bp = behavior_policy(index, q, 300);
    for (int a = 0; a < kActionCount; ++a) {
      EXPECT_EQ(kp[a], surv[static_cast<std::size_t>(a)] / ns);
      EXPECT_EQ(bp[a], (all[static_cast<std::size_t>(a)] / 300.0 + 1e-3) / (1.0 + 25e-3));
    }
    EXPECT_TRUE(kp.is_valid());
    EXPECT_TRUE(bp.is_valid());
  }
}

TEST(BehaviorPolicy, SmoothingArithmetic) {
  const auto index = labelled_index(std::vector<std::pair<int, Outcome>>(300, {5, Outcome::non_survivor}));
  const auto p = behavior_policy(index, Vector::Zero(2), 300);
  EXPECT_NEAR(p[5], (1 + 1e-3) / (1 + 25e-3), 1e-15);
  EXPECT_NEAR(p[5], 0.9766, 1e-4);
  EXPECT_NEAR(p[0], 1e-3 / (1 + 25e-3), 1e-15);
  for (int a = 0; a < kActionCount; ++a) EXPECT_GT(p[a], 0.0);
  EXPECT_TRUE(p.is_valid());

  std::vector<std::pair<int, Outcome>> labels;
  for (int j = 0; j < 300; ++j) labels.push_back({j % kActionCount, Outcome::survivor});
  const auto u = behavior_policy(labelled_index(labels), Vector::Zero(2), 300);
  for (int a = 0; a < kActionCount; ++a) EXPECT_NEAR(u[a], 1.0 / kActionCount, 1e-15);
}

// ---- restriction ---------------------------------------------------------------

TEST(RestrictActions, UniformBehaviorLeavesPolicyUnchanged) {
  std::mt19937_64 rng(9);
  const auto p = random_distribution(rng, 0.2);
  const auto r = restrict_actions(p, PolicyDistribution::uniform());
  for (int a = 0; a < kActionCount; ++a) EXPECT_NEAR(r[a], p[a], 1e-15);
}

TEST(RestrictActions, SingleAllowedAction) {
  const auto r = restrict_actions(PolicyDistribution::uniform(), PolicyDistribution::point_mass(0));
  EXPECT_EQ(r[0], 1.0);
  EXPECT_TRUE(r.is_valid());
}

TEST(RestrictActions, AllMassRemovedFallsBackToBehaviorArgmax) {
  PolicyDistribution behavior;
  behavior[4] = 0.6;
  behavior[9] = 0.4;
  const auto r = restrict_actions(PolicyDistribution::point_mass(0), behavior);
  EXPECT_EQ(r[4], 1.0);
}

TEST(RestrictActions, PropertyScanOnRandomPairs) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 10000; ++trial) {
    const auto p = random_distribution(rng, 0.3);
    const auto b = random_distribution(rng, 0.5);
    const auto r = restrict_actions(p, b);
    ASSERT_TRUE(r.is_valid());
    for (int a = 0; a < kActionCount; ++a) {
      if (b[a] < 0.01) {
        ASSERT_EQ(r[a], 0.0);
      }
    }
  }
}

// ---- k selection ----------------------------------------------------------------

TEST(CrossValidateK, SingleCandidate) {
  EXPECT_EQ(cross_validate_k({450}, [](int) { return 1.0; }), 450);
}

TEST(CrossValidateK, TiesGoTo300) {
  EXPECT_EQ(cross_validate_k(default_k_candidates(), [](int) { return 2.5; }), 300);
  EXPECT_EQ(cross_validate_k({200, 250, 350, 400}, [](int) { return 2.5; }), 250);
}

TEST(CrossValidateK, PicksArgmaxOfRecomputedTable) {
  const auto f = [](int k) { return -std::pow((k - 410.0) / 100.0, 2.0); };
  std::vector<double> scores;
  const int k = cross_validate_k(default_k_candidates(), f, &scores);
  const auto ks = default_k_candidates();
  ASSERT_EQ(scores.size(), ks.size());
  const auto best = std::max_element(scores.begin(), scores.end()) - scores.begin();
  EXPECT_EQ(k, ks[static_cast<std::size_t>(best)]);
  EXPECT_EQ(k, 400);
  for (std::size_t i = 0; i < ks.size(); ++i) EXPECT_EQ(scores[i], f(ks[i]));
}

// ---- prioritized replay ------------------------------------------------------------

TEST(Replay, SumTreeTotalsAndLookup) {
  SumTree t(5);
  for (std::size_t i = 0; i < 5; ++i) t.set(i, static_cast<double>(i + 1));
  EXPECT_DOUBLE_EQ(t.total(), 15.0);
  EXPECT_EQ(t.find(0.0), 0u);
  EXPECT_EQ(t.find(0.999), 0u);
  EXPECT_EQ(t.find(1.0), 1u);
  EXPECT_EQ(t.find(14.99), 4u);
  EXPECT_EQ(t.find(100.0), 4u);
  t.set(4, 0.0);
  EXPECT_EQ(t.find(14.99), 3u);
}

TEST(Replay, SamplingFollowsPriorityPowerAlpha) {
  PrioritizedReplay r(4, ReplayConfig{});
  r.update({0, 1, 2, 3}, {1.0, 2.0, 4.0, 0.0});
  std::vector<double> expect{1.0, std::pow(2.0, 0.6), std::pow(4.0, 0.6), std::pow(1e-6, 0.6)};
  const double total = std::accumulate(expect.begin(), expect.end(), 0.0);
  std::mt19937_64 rng(11);
  std::vector<double> counts(4, 0.0);
  const int draws = 20000;
  for (int k = 0; k < draws / 20; ++k) {
    const auto b = r.sample(20, 0.0, rng);
    for (auto i : b.indices) counts[i] += 1;
    EXPECT_DOUBLE_EQ(*std::max_element(b.weights.begin(), b.weights.end()), 1.0);
  }
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(r.probability(i), expect[i] / total, 1e-12);
    EXPECT_NEAR(counts[i] / draws, expect[i] / total, 0.01);
  }
  EXPECT_DOUBLE_EQ(r.beta(0.0), 0.4);
  EXPECT_DOUBLE_EQ(r.beta(0.5), 0.7);
  EXPECT_DOUBLE_EQ(r.beta(1.0), 1.0);
}

TEST(Replay, ImportanceWeightsCorrectSkew) {
  PrioritizedReplay r(2, ReplayConfig{1.0, 1.0, 1.0, 1e-6});
  r.update({0, 1}, {3.0, 1.0});
  std::mt19937_64 rng(12);
  // four strata of mass 1 over priorities (3, 1)
  const auto b = r.sample(4, 1.0, rng);
  // P = 0.75 / 0.25, beta = 1: weights (2*0.75)^-1 and (2*0.25)^-1, scaled by the max
  EXPECT_EQ(b.indices, (std::vector<std::size_t>{0, 0, 0, 1}));
  EXPECT_NEAR(b.weights[0], 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(b.weights[3], 1.0, 1e-12);
}

// ---- DQN policy and variates -----------------------------------------------------------

namespace {

// A network whose advantage head returns `adv` and value head returns `v`
// for every input.
QNetwork constant_network(const Vector& adv, double v) {
  DqnConfig c;
  c.trunk_hidden = 4;
  c.head_hidden = 3;
  QNetwork net = make_qnetwork(2, c);
  for (auto* p : {&net.online.trunk, &net.online.value, &net.online.advantage}) p->mutable_values().setZero();
  net.online.value.dense(1).bias[0] = v;
  net.online.advantage.dense(1).bias = adv;
  net.target = net.online;
  return net;
}

}  // namespace

TEST(DqnPolicy, SoftmaxArithmetic) {
  const auto flat = dqn_policy(constant_network(Vector::Constant(kActionCount, 0.3), 1.0), Vector::Zero(2));
  for (int a = 0; a < kActionCount; ++a) EXPECT_NEAR(flat[a], 1.0 / kActionCount, 1e-15);

  Vector adv = Vector::Zero(kActionCount);
  adv[6] = 10.0;
  const auto p = dqn_policy(constant_network(adv, 0.0), Vector::Zero(2), 1.0);
  EXPECT_NEAR(p[6], std::exp(10.0) / (std::exp(10.0) + 24.0), 1e-12);
  EXPECT_NEAR(p[6], 0.99891, 1e-5);
}

TEST(DqnPolicy, ArgmaxMatchesQOnRandomStates) {
  DqnConfig c;
  c.training.seed = 13;
  const auto net = make_qnetwork(6, c);
  std::mt19937_64 rng(14);
  std::normal_distribution<double> g;
  Matrix s(6, 200);
  for (auto& v : s.reshaped()) v = g(rng);
  const Matrix q = q_values(net, s);
  const auto pol = dqn_policies(net, s, 0.7);
  for (Eigen::Index j = 0; j < s.cols(); ++j) {
    Eigen::Index best = 0;
    q.col(j).maxCoeff(&best);
    EXPECT_EQ(pol[static_cast<std::size_t>(j)].argmax(), best);
    EXPECT_TRUE(pol[static_cast<std::size_t>(j)].is_valid());
  }
}

TEST(ControlVariates, ModesDifferOnlyInStateValue) {
  const auto flat_net = constant_network(Vector::Constant(kActionCount, -2.0), 1.5);
  const Matrix s = Matrix::Zero(2, 3);
  for (auto mode : {VariateMode::dqn_value, VariateMode::behavior_value}) {
    const auto [q, v] = control_variates(flat_net, mode, s, {0, 5, 24});
    for (double x : q) EXPECT_NEAR(x, 1.5, 1e-14);
    for (double x : v) EXPECT_NEAR(x, 1.5, 1e-14);
  }

  // advantages (1, 0, ..., 0) - mean and value 1/25 give Q = (1, 0, ..., 0)
  Vector adv = Vector::Zero(kActionCount);
  adv[0] = 1.0;
  const auto net = constant_network(adv, 1.0 / kActionCount);
  const auto [q_max, v_max] = control_variates(net, VariateMode::dqn_value, s, {0, 3, 24});
  const auto [q_mean, v_mean] = control_variates(net, VariateMode::behavior_value, s, {0, 3, 24});
  EXPECT_NEAR(v_max[0], 1.0, 1e-14);
  EXPECT_NEAR(v_mean[0], 1.0 / kActionCount, 1e-14);
  EXPECT_EQ(q_max, q_mean);
  EXPECT_NEAR(q_max[0], 1.0, 1e-14);
  EXPECT_NEAR(q_max[1], 0.0, 1e-14);
}

// ---- DDQN training --------------------------------------------------------------------

TEST(Ddqn, TdLossGradientMatchesFiniteDifferences) {
  DqnConfig c;
  c.trunk_hidden = 7;
  c.head_hidden = 5;
  c.training.seed = 15;
  const auto net = make_qnetwork(4, c);
  std::mt19937_64 rng(16);
  std::normal_distribution<double> g;
  TransitionSet d;
  d.states.resize(4, 12);
  d.next_states.resize(4, 12);
  for (auto& v : d.states.reshaped()) v = g(rng);
  for (auto& v : d.next_states.reshaped()) v = g(rng);
  for (int j = 0; j < 12; ++j) {
    d.actions.push_back((j * 7) % kActionCount);
    d.rewards.push_back(g(rng));
    d.terminal.push_back(j % 4 == 0);
  }
  std::vector<std::size_t> batch{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 3};
  std::vector<double> weights;
  std::uniform_real_distribution<double> u(0.2, 1.0);
  for (std::size_t j = 0; j < batch.size(); ++j) weights.push_back(u(rng));
  const auto targets = double_q_targets(net, d, batch, 0.99);
  // small bound so the penalty is active for part of the batch
  const double penalty = 0.7;
  const double bound = 0.05;
  Vector grad;
  td_loss(net.spec, net.online, d, batch, targets, weights, penalty, bound, &grad);
  DuelingParams probe = net.online;
  const auto loss = [&](const Vector& x) {
    probe.set_flat(x);
    return td_loss(net.spec, probe, d, batch, targets, weights, penalty, bound).value;
  };
  EXPECT_LT(nn::grad_check(loss, grad, net.online.flat()), 1e-4);
}

TEST(Ddqn, DoubleTargetUsesTargetNetworkForEvaluation) {
  const auto d = fixtures::ChainMdp{}.transitions();
  DqnConfig c;
  c.training.seed = 17;
  auto net = make_qnetwork(fixtures::ChainMdp::states, c);
  std::vector<std::size_t> batch(d.size());
  std::iota(batch.begin(), batch.end(), std::size_t{0});
  const auto same_double = double_q_targets(net, d, batch, 0.9);
  const auto same_single = single_q_targets(net, d, batch, 0.9);
  for (std::size_t j = 0; j < batch.size(); ++j) EXPECT_DOUBLE_EQ(same_double[j], same_single[j]);

  Vector theta = net.target.flat();
  for (auto& v : theta) v *= 1.5;
  net.target.set_flat(theta);
  const auto dbl = double_q_targets(net, d, batch, 0.9);
  const auto single = single_q_targets(net, d, batch, 0.9);
  const Matrix q_online = q_values(net, d.next_states);
  const Matrix q_target = dueling_forward(net.spec, net.target, d.next_states).q;
  double max_gap = 0.0;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    if (d.terminal[j]) {
      EXPECT_EQ(dbl[j], d.rewards[j]);
      continue;
    }
    Eigen::Index best = 0;
    q_online.col(static_cast<Eigen::Index>(j)).maxCoeff(&best);
    EXPECT_NEAR(dbl[j], d.rewards[j] + 0.9 * q_target(best, static_cast<Eigen::Index>(j)), 1e-12);
    max_gap = std::max(max_gap, std::abs(dbl[j] - single[j]));
  }
  EXPECT_GT(max_gap, 1e-6);
}

TEST(Ddqn, ChainMdpReachesValueIterationOptimum) {
  const fixtures::ChainMdp chain;
  const auto d = chain.transitions();
  auto c = small_dqn(20000, 1e-3, 18);
  c.training.discount = chain.discount;
  c.training.regularization = 0.0;
  const auto net = train_ddqn(d, c);
  const Matrix q = q_values(net, Matrix::Identity(chain.states, chain.states));
  const Matrix q_star = chain.q_star();
  double max_err = 0.0;
  for (int s = 0; s < chain.states; ++s) {
    Eigen::Index best = 0;
    q.col(s).maxCoeff(&best);
    EXPECT_EQ(best, fixtures::ChainMdp::best_action(s)) << "state " << s;
    for (int a = 0; a < kActionCount; ++a) max_err = std::max(max_err, std::abs(q(a, s) - q_star(s, a)));
  }
  EXPECT_LT(max_err, 0.1);
  EXPECT_EQ(net.steps_trained, 20000);
  EXPECT_EQ(net.loss_log.size(), 200u);
}

TEST(Ddqn, ZeroRewardsDriveQToZero) {
  const auto net = train_ddqn(self_loop(0.0), small_dqn(4000, 1e-3, 19));
  EXPECT_LT(q_values(net, Matrix::Ones(1, 1)).cwiseAbs().maxCoeff(), 0.05);
}

TEST(Ddqn, LargePenaltyCapsQ) {
  auto c = small_dqn(6000, 1e-3, 20);
  c.training.regularization = 10.0;
  const auto net = train_ddqn(self_loop(1.0), c);
  // unpenalized Q* would be 1 / (1 - 0.99) = 100
  EXPECT_LE(q_values(net, Matrix::Ones(1, 1)).cwiseAbs().maxCoeff(), c.reward_bound + 0.1);
}

TEST(Ddqn, NonFiniteLossNamesTheStep) {
  auto d = self_loop(0.0);
  d.states(0, 3) = std::numeric_limits<double>::infinity();
  try {
    train_ddqn(d, small_dqn(100, 1e-3, 21));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("at step"), std::string::npos);
  }
}

TEST(Ddqn, DeterministicAndCheckpointRoundTrip) {
  const auto d = fixtures::ChainMdp{}.transitions();
  const auto a = train_ddqn(d, small_dqn(300, 1e-3, 22));
  const auto b = train_ddqn(d, small_dqn(300, 1e-3, 22));
  EXPECT_EQ(a.online.flat(), b.online.flat());
  const auto path = std::filesystem::temp_directory_path() / "moerl_test_qnet.ckpt";
  save_qnetwork(path, a);
  const auto back = load_qnetwork(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.online.flat(), a.online.flat());
  EXPECT_EQ(back.target.flat(), a.target.flat());
  EXPECT_EQ(back.loss_log, a.loss_log);
  EXPECT_EQ(q_values(back, d.states), q_values(a, d.states));
}

TEST(Ddqn, BuildTransitionsMarksLastStepTerminal) {
  const auto split = fixtures::processed_sim_cohort(20, 23);
  std::vector<Matrix> encoded;
  std::vector<std::vector<double>> rewards;
  for (const auto& t : split.train) {
    const auto n = static_cast<Eigen::Index>(t.steps.size());
    Matrix m(3, n);
    for (Eigen::Index j = 0; j < n; ++j) m.col(j).setConstant(static_cast<double>(j));
    encoded.push_back(m);
    rewards.emplace_back(t.steps.size(), 0.25);
  }
  const auto d = build_transitions(encoded, rewards, split.train);
  d.validate();
  std::size_t j = 0;
  for (const auto& t : split.train) {
    for (std::size_t s = 0; s < t.steps.size(); ++s, ++j) {
      const bool last = s + 1 == t.steps.size();
      EXPECT_EQ(d.terminal[j], last ? 1 : 0);
      EXPECT_EQ(d.actions[j], t.steps[s].action);
      EXPECT_EQ(d.next_states(0, static_cast<Eigen::Index>(j)), last ? 0.0 : static_cast<double>(s + 1));
    }
  }
  EXPECT_EQ(j, d.size());
}

TEST(Ddqn, ConfigValidation) {
  DqnConfig c;
  EXPECT_NO_THROW(c.validate());
  c.target_sync = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DqnConfig{};
  c.replay.priority_floor = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DqnConfig{};
  c.training.discount = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
}
