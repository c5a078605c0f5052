#include "moerl/moe_gate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "moerl/error.hpp"
#include "moerl/nn/adam.hpp"

namespace moerl {

using nn::Matrix;
using nn::Vector;

namespace {

constexpr std::array<std::string_view, kGateFeatureCount> kGateNames{
    "age", "Elixhauser", "SOFA", "FiO2", "BUN", "GCS", "Albumin", "trajectory_length", "max_neighbor_distance"};

constexpr int kParamCount = kGateFeatureCount + 1;

const std::array<int, 7>& clinical_columns() {
  static const std::array<int, 7> cols{feature_index("age"),    feature_index("Elixhauser"), feature_index("SOFA"),
                                       feature_index("FiO2_1"), feature_index("BUN"),        feature_index("GCS"),
                                       feature_index("Albumin")};
  return cols;
}

double linear(const GatingParams& p, const GatingFeatures& x) {
  double z = p.b;
  for (int j = 0; j < kGateFeatureCount; ++j) z += p.w[static_cast<std::size_t>(j)] * x[static_cast<std::size_t>(j)];
  return z;
}

Vector to_vector(const GatingParams& p) {
  Vector v(kParamCount);
  for (int j = 0; j < kGateFeatureCount; ++j) v[j] = p.w[static_cast<std::size_t>(j)];
  v[kGateFeatureCount] = p.b;
  return v;
}

GatingParams from_vector(const Vector& v) {
  GatingParams p;
  for (int j = 0; j < kGateFeatureCount; ++j) p.w[static_cast<std::size_t>(j)] = v[j];
  p.b = v[kGateFeatureCount];
  return p;
}

}  // namespace

std::span<const std::string_view, kGateFeatureCount> gating_feature_names() { return kGateNames; }

GatingFeatures gating_features(const data::Observation& o, int trajectory_length, double kth_distance) {
  GatingFeatures x{};
  const auto& cols = clinical_columns();
  for (std::size_t j = 0; j < cols.size(); ++j) x[j] = o.values[static_cast<std::size_t>(cols[j])];
  x[7] = trajectory_length;
  x[8] = kth_distance;
  return x;
}

GatingFeatures GatingFeatureStats::standardize(const GatingFeatures& x) const {
  GatingFeatures out{};
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = (x[j] - mean[j]) / stddev[j];
  return out;
}

GatingFeatureStats fit_gating_stats(const std::vector<GatingFeatures>& train) {
  if (train.empty()) throw DataError("gating statistics need at least one training row");
  GatingFeatureStats s;
  const double n = static_cast<double>(train.size());
  for (const auto& x : train) {
    for (std::size_t j = 0; j < x.size(); ++j) s.mean[j] += x[j];
  }
  for (auto& m : s.mean) m /= n;
  GatingFeatures var{};
  for (const auto& x : train) {
    for (std::size_t j = 0; j < x.size(); ++j) var[j] += (x[j] - s.mean[j]) * (x[j] - s.mean[j]) / n;
  }
  for (std::size_t j = 0; j < var.size(); ++j) {
    if (!std::isfinite(s.mean[j]) || !std::isfinite(var[j])) {
      throw DataError("gating feature " + std::string(kGateNames[j]) + " is not finite");
    }
    const double floor = 1e-24 * std::max(1.0, s.mean[j] * s.mean[j]);
    s.stddev[j] = var[j] > floor ? std::sqrt(var[j]) : 1.0;
  }
  return s;
}

std::pair<double, double> gate_probability(const GatingParams& params, const GatingFeatures& x) {
  const double p = nn::sigmoid(linear(params, x));
  return {p, 1.0 - p};
}

PolicyDistribution mixture_policy(double p_k, const PolicyDistribution& kernel, const PolicyDistribution& dqn) {
  PolicyDistribution out;
  const double p_d = 1.0 - p_k;
  for (int a = 0; a < kActionCount; ++a) out[a] = p_k * kernel[a] + p_d * dqn[a];
  return out;
}

EvaluationDataset gate_evaluation(const GateDataset& data, const GatingParams& params,
                                  const std::vector<std::size_t>* patients, std::vector<Matrix>* dpi) {
  EvaluationDataset out;
  out.discount = data.discount;
  const auto count = patients ? patients->size() : data.trajectories.size();
  out.trajectories.reserve(count);
  if (dpi) {
    dpi->clear();
    dpi->reserve(count);
  }
  for (std::size_t k = 0; k < count; ++k) {
    const auto& steps = data.trajectories.at(patients ? (*patients)[k] : k);
    EvalTrajectory e;
    e.rewards.reserve(steps.size());
    e.pi_e.reserve(steps.size());
    e.pi_b.reserve(steps.size());
    e.q_hat.reserve(steps.size());
    e.v_hat.reserve(steps.size());
    Matrix d(static_cast<Eigen::Index>(steps.size()), dpi ? kParamCount : 0);
    for (std::size_t t = 0; t < steps.size(); ++t) {
      const auto& s = steps[t];
      const double p = nn::sigmoid(linear(params, s.x));
      e.rewards.push_back(s.reward);
      e.pi_e.push_back(p * s.pi_k + (1.0 - p) * s.pi_d);
      e.pi_b.push_back(s.pi_b);
      e.q_hat.push_back(s.q_hat);
      e.v_hat.push_back(s.v_hat);
      if (dpi) {
        const double scale = (s.pi_k - s.pi_d) * p * (1.0 - p);
        const auto row = static_cast<Eigen::Index>(t);
        for (int j = 0; j < kGateFeatureCount; ++j) d(row, j) = scale * s.x[static_cast<std::size_t>(j)];
        d(row, kGateFeatureCount) = scale;
      }
    }
    out.trajectories.push_back(std::move(e));
    if (dpi) dpi->push_back(std::move(d));
  }
  return out;
}

double gate_objective(const GateDataset& data, const GatingParams& params, Vector* grad,
                      const std::vector<std::size_t>* patients) {
  if (!grad) return wdr_estimate(gate_evaluation(data, params, patients));
  std::vector<Matrix> dpi;
  const auto d = gate_evaluation(data, params, patients, &dpi);
  return wdr_with_gradient(d, dpi, grad);
}

void GateConfig::validate() const {
  if (minibatch < 1) throw ConfigError("gate.minibatch must be >= 1");
  if (restarts < 2) throw ConfigError("gate.restarts must be >= 2 (the two corner starts)");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("gate.learning_rate must be > 0");
  if (epochs < 0) throw ConfigError("gate.epochs must be >= 0");
}

GateResult optimize_gate(const GateDataset& train, const GateConfig& config) {
  config.validate();
  if (train.trajectories.empty()) throw DataError("gate training set is empty");
  GateResult result;
  result.seed = config.seed;
  result.objective = -std::numeric_limits<double>::infinity();
  result.best_restart = -1;
  const auto n = train.trajectories.size();
  const nn::AdamConfig adam{config.learning_rate};

  for (int r = 0; r < config.restarts; ++r) {
    std::mt19937_64 rng(mix_seed(config.seed, static_cast<std::uint64_t>(r)));
    GatingParams init;
    if (r == 0) {
      init.b = 20.0;
    } else if (r == 1) {
      init.b = -20.0;
    } else {
      std::uniform_real_distribution<double> uw(-1.0, 1.0);
      std::uniform_real_distribution<double> ub(-2.0, 2.0);
      for (auto& w : init.w) w = uw(rng);
      init.b = ub(rng);
    }

    RestartRecord rec;
    rec.index = r;
    Vector theta = to_vector(init);
    Vector best_theta = theta;
    double best = -std::numeric_limits<double>::infinity();
    try {
      best = gate_objective(train, init);
      if (!std::isfinite(best)) throw NumericalError("objective is not finite");
      rec.initial_objective = best;
      Vector m, v, grad;
      std::uint64_t steps = 0;
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      const auto mb = static_cast<std::size_t>(config.minibatch);
      for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < n; start += mb) {
          const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                               order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + mb)));
          double value = 0.0;
          try {
            value = gate_objective(train, from_vector(theta), &grad, &batch);
          } catch (const NumericalError&) {
            continue;  // every ratio in the minibatch vanished at some step
          }
          if (!std::isfinite(value) || !grad.allFinite()) continue;
          const Vector ascent = -grad;
          nn::adam_step(theta, m, v, steps, ascent, adam);
        }
        const double full = gate_objective(train, from_vector(theta));
        if (!std::isfinite(full)) throw NumericalError("objective is not finite at epoch " + std::to_string(epoch));
        if (full > best) {
          best = full;
          best_theta = theta;
          rec.best_epoch = epoch;
        }
      }
    } catch (const NumericalError& e) {
      rec.discarded = true;
      result.log.push_back("restart " + std::to_string(r) + " discarded: " + e.what());
    }
    rec.best_objective = best;
    if (!rec.discarded && best > result.objective) {
      result.objective = best;
      result.params = from_vector(best_theta);
      result.best_restart = r;
    }
    result.restarts.push_back(rec);
  }
  if (result.best_restart < 0) throw NumericalError("every gate restart was discarded");
  return result;
}

nlohmann::json to_json(const GateResult& gate) {
  nlohmann::json features = nlohmann::json::array();
  for (auto name : kGateNames) features.push_back(std::string(name));
  nlohmann::json restarts = nlohmann::json::array();
  for (const auto& r : gate.restarts) {
    restarts.push_back({{"index", r.index},
                        {"initial_objective", r.initial_objective},
                        {"best_objective", r.best_objective},
                        {"best_epoch", r.best_epoch},
                        {"discarded", r.discarded}});
  }
  return {{"w", gate.params.w},
          {"b", gate.params.b},
          {"feature_stats", {{"names", features}, {"mean", gate.stats.mean}, {"stddev", gate.stats.stddev}}},
          {"seed", gate.seed},
          {"best_restart_index", gate.best_restart},
          {"objective", gate.objective},
          {"restarts", restarts},
          {"log", gate.log}};
}

GateResult gate_from_json(const nlohmann::json& j) {
  GateResult g;
  try {
    g.params.w = j.at("w").get<GatingFeatures>();
    g.params.b = j.at("b").get<double>();
    g.stats.mean = j.at("feature_stats").at("mean").get<GatingFeatures>();
    g.stats.stddev = j.at("feature_stats").at("stddev").get<GatingFeatures>();
    g.seed = j.at("seed").get<std::uint64_t>();
    g.best_restart = j.at("best_restart_index").get<int>();
    g.objective = j.at("objective").get<double>();
    for (const auto& r : j.value("restarts", nlohmann::json::array())) {
      g.restarts.push_back({r.at("index").get<int>(), r.at("initial_objective").get<double>(),
                            r.at("best_objective").get<double>(), r.at("best_epoch").get<int>(),
                            r.at("discarded").get<bool>()});
    }
    g.log = j.value("log", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed gate JSON: ") + e.what());
  }
  for (double s : g.stats.stddev) {
    if (!(s > 0.0)) throw IoError("gate feature stddev must be > 0");
  }
  return g;
}

}  // namespace moerl
