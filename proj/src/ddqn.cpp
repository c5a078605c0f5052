#include "moerl/ddqn.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "moerl/error.hpp"
#include "moerl/nn/checkpoint.hpp"

namespace moerl {

using nn::Matrix;
using nn::Vector;

void TransitionSet::validate() const {
  const auto n = static_cast<Eigen::Index>(actions.size());
  if (n == 0) throw UsageError("transition set is empty");
  if (states.cols() != n || next_states.cols() != n || next_states.rows() != states.rows() ||
      rewards.size() != actions.size() || terminal.size() != actions.size()) {
    throw ShapeError("transition set columns are inconsistent");
  }
  for (std::size_t j = 0; j < actions.size(); ++j) {
    if (actions[j] < 0 || actions[j] >= kActionCount) {
      throw DataError("transition " + std::to_string(j) + " has action " + std::to_string(actions[j]));
    }
    if (!std::isfinite(rewards[j])) throw DataError("transition " + std::to_string(j) + " has a non-finite reward");
  }
}

TransitionSet build_transitions(const std::vector<Matrix>& encoded, const std::vector<std::vector<double>>& rewards,
                                const std::vector<data::ProcessedTrajectory>& cohort) {
  if (encoded.size() != cohort.size() || rewards.size() != cohort.size()) {
    throw ShapeError("encoded states, rewards and cohort differ in patient count");
  }
  std::size_t n = 0;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const auto len = cohort[i].steps.size();
    if (static_cast<std::size_t>(encoded[i].cols()) != len || rewards[i].size() != len) {
      throw ShapeError("transitions of " + cohort[i].patient_id + " do not match its length");
    }
    n += len;
  }
  if (n == 0) throw UsageError("transition set is empty");
  const auto dim = encoded.front().rows();
  TransitionSet out;
  out.states.resize(dim, static_cast<Eigen::Index>(n));
  out.next_states = Matrix::Zero(dim, static_cast<Eigen::Index>(n));
  Eigen::Index col = 0;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const auto len = static_cast<Eigen::Index>(cohort[i].steps.size());
    for (Eigen::Index t = 0; t < len; ++t, ++col) {
      out.states.col(col) = encoded[i].col(t);
      const bool last = t + 1 == len;
      if (!last) out.next_states.col(col) = encoded[i].col(t + 1);
      out.actions.push_back(cohort[i].steps[static_cast<std::size_t>(t)].action);
      out.rewards.push_back(rewards[i][static_cast<std::size_t>(t)]);
      out.terminal.push_back(last ? 1 : 0);
    }
  }
  return out;
}

void DqnConfig::validate() const {
  training.validate();
  if (!(reward_bound >= 0.0)) throw ConfigError("dqn.reward_bound must be >= 0");
  if (target_sync < 1) throw ConfigError("dqn.target_sync must be >= 1");
  if (trunk_hidden < 1 || head_hidden < 1) throw ConfigError("dqn hidden sizes must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("dqn.temperature must be > 0");
  replay.validate();
}

DuelingSpec dueling_spec(int input_dim, int trunk_hidden, int head_hidden, std::uint64_t seed) {
  using nn::Activation;
  DuelingSpec s;
  s.trunk = {{nn::dense_layer(input_dim, trunk_hidden, Activation::relu),
              nn::dense_layer(trunk_hidden, trunk_hidden, Activation::relu)},
             mix_seed(seed, 31)};
  s.value = {{nn::dense_layer(trunk_hidden, head_hidden, Activation::relu),
              nn::dense_layer(head_hidden, 1, Activation::identity)},
             mix_seed(seed, 32)};
  s.advantage = {{nn::dense_layer(trunk_hidden, head_hidden, Activation::relu),
                  nn::dense_layer(head_hidden, kActionCount, Activation::identity)},
                 mix_seed(seed, 33)};
  s.trunk.validate();
  s.value.validate();
  s.advantage.validate();
  return s;
}

DuelingParams DuelingParams::glorot_uniform(const DuelingSpec& spec) {
  return {nn::ModelParams::glorot_uniform(spec.trunk), nn::ModelParams::glorot_uniform(spec.value),
          nn::ModelParams::glorot_uniform(spec.advantage)};
}

Vector DuelingParams::flat() const {
  Vector v(static_cast<Eigen::Index>(size()));
  v << trunk.values(), value.values(), advantage.values();
  return v;
}

void DuelingParams::set_flat(const Vector& values) {
  if (values.size() != static_cast<Eigen::Index>(size())) throw ShapeError("dueling parameter vector has wrong size");
  const auto nt = static_cast<Eigen::Index>(trunk.size());
  const auto nv = static_cast<Eigen::Index>(value.size());
  trunk.set_values(values.segment(0, nt));
  value.set_values(values.segment(nt, nv));
  advantage.set_values(values.segment(nt + nv, static_cast<Eigen::Index>(advantage.size())));
}

QNetwork make_qnetwork(int input_dim, const DqnConfig& config) {
  QNetwork net;
  net.spec = dueling_spec(input_dim, config.trunk_hidden, config.head_hidden, config.training.seed);
  net.online = DuelingParams::glorot_uniform(net.spec);
  net.target = net.online;
  net.temperature = config.temperature;
  return net;
}

namespace {

Matrix combine(const Matrix& value, const Matrix& advantage) {
  Matrix q = advantage;
  q.rowwise() -= advantage.colwise().mean();
  q.rowwise() += value.row(0);
  return q;
}

struct DuelingPass {
  nn::ForwardCache trunk, value, advantage;
  Matrix q;
};

DuelingPass dueling_pass(const DuelingSpec& spec, const DuelingParams& params, const Matrix& states) {
  DuelingPass p;
  p.trunk = nn::forward(params.trunk, spec.trunk, {states});
  const Matrix& h = p.trunk.output[0];
  p.value = nn::forward(params.value, spec.value, {h});
  p.advantage = nn::forward(params.advantage, spec.advantage, {h});
  p.q = combine(p.value.output[0], p.advantage.output[0]);
  return p;
}

Vector dueling_backward(const DuelingSpec& spec, const DuelingParams& params, const DuelingPass& pass,
                        const Matrix& dq) {
  const Matrix col_sum = dq.colwise().sum();
  Matrix da = dq;
  da.rowwise() -= col_sum.row(0) / static_cast<double>(kActionCount);
  const auto gv = nn::backward(params.value, spec.value, pass.value, {col_sum});
  const auto ga = nn::backward(params.advantage, spec.advantage, pass.advantage, {da});
  const auto gt = nn::backward(params.trunk, spec.trunk, pass.trunk, {gv.input[0] + ga.input[0]});
  Vector g(gt.params.size() + gv.params.size() + ga.params.size());
  g << gt.params, gv.params, ga.params;
  return g;
}

Matrix gather(const Matrix& m, const std::vector<std::size_t>& cols) {
  Matrix out(m.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = m.col(static_cast<Eigen::Index>(cols[j]));
  return out;
}

std::vector<double> targets_from(const QNetwork& net, const TransitionSet& data, const std::vector<std::size_t>& batch,
                                 double discount, bool decoupled) {
  const Matrix next = gather(data.next_states, batch);
  const Matrix q_online = dueling_forward(net.spec, net.online, next).q;
  const Matrix q_eval = decoupled ? dueling_forward(net.spec, net.target, next).q : q_online;
  std::vector<double> y(batch.size());
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const auto i = batch[j];
    y[j] = data.rewards[i];
    if (data.terminal[i]) continue;
    Eigen::Index best = 0;
    q_online.col(static_cast<Eigen::Index>(j)).maxCoeff(&best);
    y[j] += discount * q_eval(best, static_cast<Eigen::Index>(j));
  }
  return y;
}

void adam_segments(DuelingParams& p, const Vector& g, const nn::AdamConfig& adam) {
  const auto nt = static_cast<Eigen::Index>(p.trunk.size());
  const auto nv = static_cast<Eigen::Index>(p.value.size());
  nn::adam_step(p.trunk, g.segment(0, nt), adam);
  nn::adam_step(p.value, g.segment(nt, nv), adam);
  nn::adam_step(p.advantage, g.segment(nt + nv, static_cast<Eigen::Index>(p.advantage.size())), adam);
}

}  // namespace

DuelingOutput dueling_forward(const DuelingSpec& spec, const DuelingParams& params, const Matrix& states) {
  DuelingOutput out;
  const Matrix h = nn::predict(params.trunk, spec.trunk, states);
  out.value = nn::predict(params.value, spec.value, h);
  out.advantage = nn::predict(params.advantage, spec.advantage, h);
  out.q = combine(out.value, out.advantage);
  return out;
}

Matrix q_values(const QNetwork& net, const Matrix& states) { return dueling_forward(net.spec, net.online, states).q; }

Matrix advantages(const QNetwork& net, const Matrix& states) {
  return dueling_forward(net.spec, net.online, states).advantage;
}

std::vector<double> double_q_targets(const QNetwork& net, const TransitionSet& data,
                                     const std::vector<std::size_t>& batch, double discount) {
  return targets_from(net, data, batch, discount, true);
}

std::vector<double> single_q_targets(const QNetwork& net, const TransitionSet& data,
                                     const std::vector<std::size_t>& batch, double discount) {
  return targets_from(net, data, batch, discount, false);
}

TdLoss td_loss(const DuelingSpec& spec, const DuelingParams& params, const TransitionSet& data,
               const std::vector<std::size_t>& batch, const std::vector<double>& targets,
               const std::vector<double>& weights, double penalty, double bound, Vector* grad) {
  if (batch.empty() || targets.size() != batch.size() || weights.size() != batch.size()) {
    throw ShapeError("td_loss: batch, targets and weights must have the same nonzero length");
  }
  const auto pass = dueling_pass(spec, params, gather(data.states, batch));
  const double b = static_cast<double>(batch.size());
  TdLoss out;
  out.td_errors.resize(batch.size());
  Matrix dq = Matrix::Zero(pass.q.rows(), pass.q.cols());
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const auto col = static_cast<Eigen::Index>(j);
    const auto a = static_cast<Eigen::Index>(data.actions[batch[j]]);
    const double q = pass.q(a, col);
    const double diff = targets[j] - q;
    const double excess = std::abs(q) - bound;
    out.td_errors[j] = diff;
    out.value += weights[j] * (diff * diff + penalty * std::max(excess, 0.0)) / b;
    double d = -2.0 * diff;
    if (excess > 0.0) d += penalty * (q > 0.0 ? 1.0 : -1.0);
    dq(a, col) = weights[j] * d / b;
  }
  if (grad) *grad = dueling_backward(spec, params, pass, dq);
  return out;
}

QNetwork train_ddqn(const TransitionSet& data, const DqnConfig& config) {
  config.validate();
  data.validate();
  const auto& tc = config.training;
  QNetwork net = make_qnetwork(static_cast<int>(data.states.rows()), config);
  PrioritizedReplay replay(data.size(), config.replay);
  std::mt19937_64 rng(mix_seed(tc.seed, 34));
  const auto adam = tc.adam();
  const auto batch_size = static_cast<std::size_t>(tc.batch_size);
  double ema = 0.0;
  Vector grad;
  for (long step = 0; step < tc.steps; ++step) {
    const double progress = tc.steps > 1 ? static_cast<double>(step) / static_cast<double>(tc.steps - 1) : 1.0;
    const auto batch = replay.sample(batch_size, progress, rng);
    const auto targets = double_q_targets(net, data, batch.indices, tc.discount);
    const auto loss = td_loss(net.spec, net.online, data, batch.indices, targets, batch.weights, tc.regularization,
                              config.reward_bound, &grad);
    if (!std::isfinite(loss.value) || !grad.allFinite()) {
      throw NumericalError("DQN loss is not finite at step " + std::to_string(step));
    }
    adam_segments(net.online, grad, adam);
    replay.update(batch.indices, loss.td_errors);
    if ((step + 1) % config.target_sync == 0) net.target = net.online;
    ema = step == 0 ? loss.value : 0.99 * ema + 0.01 * loss.value;
    if ((step + 1) % 100 == 0) net.loss_log.push_back(ema);
    ++net.steps_trained;
  }
  return net;
}

PolicyDistribution dqn_policy(const QNetwork& net, const Vector& state, double temperature) {
  return dqn_policies(net, Matrix(state), temperature).front();
}

std::vector<PolicyDistribution> dqn_policies(const QNetwork& net, const Matrix& states, double temperature) {
  const Matrix adv = advantages(net, states);
  std::vector<PolicyDistribution> out(static_cast<std::size_t>(adv.cols()));
  for (Eigen::Index j = 0; j < adv.cols(); ++j) {
    const Vector p = nn::softmax(adv.col(j), temperature);
    for (int a = 0; a < kActionCount; ++a) out[static_cast<std::size_t>(j)][a] = p[a];
  }
  return out;
}

std::string_view to_string(VariateMode mode) {
  return mode == VariateMode::dqn_value ? "dqn_value" : "behavior_value";
}

std::pair<std::vector<double>, std::vector<double>> control_variates(const QNetwork& net, VariateMode mode,
                                                                     const Matrix& states,
                                                                     const std::vector<int>& actions) {
  if (static_cast<std::size_t>(states.cols()) != actions.size()) {
    throw ShapeError("control_variates: state and action counts differ");
  }
  const Matrix q = q_values(net, states);
  std::pair<std::vector<double>, std::vector<double>> out;
  out.first.reserve(actions.size());
  out.second.reserve(actions.size());
  for (std::size_t j = 0; j < actions.size(); ++j) {
    const auto col = static_cast<Eigen::Index>(j);
    out.first.push_back(q(actions[j], col));
    out.second.push_back(mode == VariateMode::dqn_value ? q.col(col).maxCoeff() : q.col(col).mean());
  }
  return out;
}

void save_qnetwork(const std::filesystem::path& path, const QNetwork& net) {
  nn::Checkpoint c;
  c.header = {{"type", "qnetwork"},
              {"trunk_spec", nn::to_json(net.spec.trunk)},
              {"value_spec", nn::to_json(net.spec.value)},
              {"advantage_spec", nn::to_json(net.spec.advantage)},
              {"steps_trained", net.steps_trained},
              {"temperature", net.temperature},
              {"loss_log", net.loss_log}};
  c.blocks = {net.online.flat(), net.target.flat()};
  nn::save_checkpoint(path, c);
}

QNetwork load_qnetwork(const std::filesystem::path& path) {
  auto c = nn::load_checkpoint(path);
  QNetwork net;
  try {
    if (c.header.at("type") != "qnetwork") throw IoError(path.string() + " is not a Q-network checkpoint");
    net.spec.trunk = nn::network_spec_from_json(c.header.at("trunk_spec"));
    net.spec.value = nn::network_spec_from_json(c.header.at("value_spec"));
    net.spec.advantage = nn::network_spec_from_json(c.header.at("advantage_spec"));
    net.steps_trained = c.header.at("steps_trained").get<long>();
    net.temperature = c.header.at("temperature").get<double>();
    net.loss_log = c.header.at("loss_log").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed Q-network header: " + e.what());
  }
  if (c.blocks.size() != 2) throw IoError(path.string() + ": Q-network checkpoint needs two parameter blocks");
  for (auto* p : {&net.online, &net.target}) {
    *p = {nn::ModelParams(net.spec.trunk), nn::ModelParams(net.spec.value), nn::ModelParams(net.spec.advantage)};
  }
  net.online.set_flat(c.blocks[0]);
  net.target.set_flat(c.blocks[1]);
  return net;
}

}  // namespace moerl
