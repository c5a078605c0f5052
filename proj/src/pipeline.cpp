#include "moerl/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "moerl/cohort_sim.hpp"
#include "moerl/data_pipeline.hpp"
#include "moerl/ddqn.hpp"
#include "moerl/error.hpp"
#include "moerl/kernel_policy.hpp"
#include "moerl/moe_gate.hpp"
#include "moerl/neighbor_index.hpp"
#include "moerl/nn/checkpoint.hpp"
#include "moerl/ope_wdr.hpp"
#include "moerl/report.hpp"
#include "moerl/reward_model.hpp"
#include "moerl/state_encoder.hpp"

namespace moerl::pipeline {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::Matrix;
using nn::Vector;

constexpr int kFormatVersion = 1;
constexpr double kVerifyTolerance = 1e-9;

constexpr std::array<EncoderKind, 2> kEncodings{EncoderKind::sparse, EncoderKind::recurrent};
constexpr std::array<VariateMode, 2> kModes{VariateMode::dqn_value, VariateMode::behavior_value};
constexpr std::array<std::string_view, 4> kPolicies{"physician", "kernel", "dqn", "moe"};

// rows of the per-step evaluation table
enum EvalRow : int { kReward, kPiB, kQ, kVd, kVb, kPhysician, kKernel, kDqn, kMoeVd, kMoeVb, kEvalRows };

std::string_view encoding_label(EncoderKind k) { return k == EncoderKind::recurrent ? "recurrent" : "non_recurrent"; }
std::string_view mode_label(VariateMode m) { return m == VariateMode::dqn_value ? "V_d" : "V_b"; }
std::string_view mode_tag(VariateMode m) { return m == VariateMode::dqn_value ? "vd" : "vb"; }

std::size_t encoding_index(EncoderKind k) { return k == EncoderKind::sparse ? 0 : 1; }
std::size_t mode_index(VariateMode m) { return m == VariateMode::dqn_value ? 0 : 1; }

std::uint64_t stage_seed(const PipelineConfig& c, std::uint64_t stream) { return mix_seed(c.seed, 100 + stream); }

struct Paths {
  fs::path root;

  fs::path cohort() const { return root / "cohort.csv"; }
  fs::path ground_truth() const { return root / "ground_truth.json"; }
  fs::path preprocess() const { return root / "preprocess.json"; }
  fs::path processed(bool train) const { return root / (train ? "train.csv" : "test.csv"); }
  fs::path encoder(EncoderKind k) const { return root / ("encoder_" + std::string(to_string(k)) + ".ckpt"); }
  fs::path encoder_summary() const { return root / "encoder.json"; }
  fs::path predictor() const { return root / "predictor.ckpt"; }
  fs::path reward_summary() const { return root / "reward.json"; }
  fs::path log_odds() const { return root / "log_odds.csv"; }
  fs::path dqn(EncoderKind k) const { return root / ("dqn_" + std::string(to_string(k)) + ".ckpt"); }
  fs::path dqn_summary() const { return root / "dqn.json"; }
  fs::path neighbors(EncoderKind k) const { return root / ("neighbors_" + std::string(to_string(k)) + ".ckpt"); }
  fs::path policies(EncoderKind k, bool train) const {
    return root / ("policies_" + std::string(to_string(k)) + (train ? "_train.ckpt" : "_test.ckpt"));
  }
  fs::path kernel_summary() const { return root / "kernel.json"; }
  fs::path gate(EncoderKind k, VariateMode m) const {
    return root / ("gate_" + std::string(to_string(k)) + "_" + std::string(mode_tag(m)) + ".json");
  }
  fs::path evaluation() const { return root / "evaluation.json"; }
  fs::path eval_table(EncoderKind k) const { return root / ("eval_" + std::string(to_string(k)) + ".ckpt"); }
  fs::path test_policies(EncoderKind k) const {
    return root / ("test_policies_" + std::string(to_string(k)) + ".ckpt");
  }
  fs::path bootstrap_csv(EncoderKind k, VariateMode m) const {
    return root / ("bootstrap_" + std::string(to_string(k)) + "_" + std::string(mode_tag(m)) + ".csv");
  }
  fs::path bootstrap_summary() const { return root / "bootstrap.json"; }
  fs::path report() const { return root / "report.json"; }
  fs::path timings() const { return root / "timings.json"; }
  fs::path resolved_config() const { return root / "config.json"; }
};

void require(const fs::path& path, std::string_view producer) {
  if (!fs::exists(path)) {
    throw DependencyError("missing artifact " + path.string() + "; run `moerl " + std::string(producer) + "` first");
  }
}

json read_json(const fs::path& path, std::string_view producer) {
  require(path, producer);
  json j = json::parse(nn::read_file(path), nullptr, false);
  if (j.is_discarded()) throw IoError("malformed JSON in " + path.string());
  return j;
}

void write_json(const fs::path& path, const json& j) { nn::write_file_atomic(path, j.dump(2) + "\n"); }

Matrix hstack(const std::vector<Matrix>& parts) {
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.empty() ? 0 : parts.front().rows();
  for (const auto& p : parts) cols += p.cols();
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p;
    at += p.cols();
  }
  return out;
}

std::vector<int> flat_actions(const std::vector<data::ProcessedTrajectory>& cohort) {
  std::vector<int> out;
  for (const auto& t : cohort) {
    for (const auto& s : t.steps) out.push_back(s.action);
  }
  return out;
}

std::size_t step_count(const std::vector<data::ProcessedTrajectory>& cohort) {
  std::size_t n = 0;
  for (const auto& t : cohort) n += t.steps.size();
  return n;
}

Matrix pack(const std::vector<PolicyDistribution>& policies) {
  Matrix m(kActionCount, static_cast<Eigen::Index>(policies.size()));
  for (std::size_t j = 0; j < policies.size(); ++j) {
    for (int a = 0; a < kActionCount; ++a) m(a, static_cast<Eigen::Index>(j)) = policies[j][a];
  }
  return m;
}

std::vector<PolicyDistribution> unpack(const Matrix& m, Eigen::Index first_row) {
  std::vector<PolicyDistribution> out(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (int a = 0; a < kActionCount; ++a) out[static_cast<std::size_t>(j)][a] = m(first_row + a, j);
  }
  return out;
}

// Per-step expert inputs produced by fit-kernel.
struct StepPolicies {
  std::vector<PolicyDistribution> behavior;
  std::vector<PolicyDistribution> kernel;
  std::vector<double> kth_distance;
  int k = kDefaultNeighbors;
};

constexpr Eigen::Index kPolicyRows = 2 * kActionCount + 1;

// Lazily loaded run state; every getter names the subcommand that produces
// what it needs.
class Run {
 public:
  Run(const PipelineConfig& config, std::ostream& log) : config_(config), paths_{config.out}, log_(log) {}

  const PipelineConfig& config() const { return config_; }
  const Paths& paths() const { return paths_; }
  std::ostream& log() { return log_; }

  const std::vector<data::RawTrajectory>& raw() {
    if (!raw_) {
      require(paths_.cohort(), "simulate");
      raw_ = data::read_cohort_csv(paths_.cohort());
    }
    return *raw_;
  }

  const std::vector<data::ProcessedTrajectory>& cohort(bool train) {
    auto& slot = train ? train_ : test_;
    if (!slot) {
      require(paths_.processed(train), "preprocess");
      slot = data::read_processed_csv(paths_.processed(train));
    }
    return *slot;
  }

  const EncoderModel& encoder(EncoderKind k) {
    auto& slot = encoders_[encoding_index(k)];
    if (!slot) {
      require(paths_.encoder(k), "train-encoder");
      slot = load_encoder(paths_.encoder(k));
    }
    return *slot;
  }

  // one (dim x T_i) matrix per patient
  const std::vector<Matrix>& encoded(EncoderKind k, bool train) {
    auto& slot = encoded_[encoding_index(k)][train ? 0 : 1];
    if (!slot) slot = encode_cohort(encoder(k), cohort(train));
    return *slot;
  }

  const Matrix& states(EncoderKind k, bool train) {
    auto& slot = flat_states_[encoding_index(k)][train ? 0 : 1];
    if (!slot) slot = hstack(encoded(k, train));
    return *slot;
  }

  const MortalityPredictor& predictor() {
    if (!predictor_) {
      require(paths_.predictor(), "train-reward");
      predictor_ = load_predictor(paths_.predictor());
    }
    return *predictor_;
  }

  const std::vector<std::vector<double>>& rewards(bool train) {
    auto& slot = rewards_[train ? 0 : 1];
    if (!slot) {
      std::vector<std::vector<double>> r;
      for (const auto& t : cohort(train)) r.push_back(trajectory_rewards(predictor(), t));
      slot = std::move(r);
    }
    return *slot;
  }

  std::vector<double> flat_rewards(bool train) {
    std::vector<double> out;
    for (const auto& r : rewards(train)) out.insert(out.end(), r.begin(), r.end());
    return out;
  }

  const QNetwork& qnet(EncoderKind k) {
    auto& slot = qnets_[encoding_index(k)];
    if (!slot) {
      require(paths_.dqn(k), "train-dqn");
      slot = load_qnetwork(paths_.dqn(k));
    }
    return *slot;
  }

  const StepPolicies& policies(EncoderKind k, bool train) {
    auto& slot = policies_[encoding_index(k)][train ? 0 : 1];
    if (!slot) {
      require(paths_.policies(k, train), "fit-kernel");
      json header;
      const Matrix m = nn::load_matrix(paths_.policies(k, train), &header);
      if (m.rows() != kPolicyRows || m.cols() != static_cast<Eigen::Index>(step_count(cohort(train)))) {
        throw DataError(paths_.policies(k, train).string() + " does not match the processed cohort; rerun fit-kernel");
      }
      StepPolicies p;
      p.behavior = unpack(m, 0);
      p.kernel = unpack(m, kActionCount);
      p.kth_distance.assign(m.row(2 * kActionCount).begin(), m.row(2 * kActionCount).end());
      p.k = header.at("k").get<int>();
      slot = std::move(p);
    }
    return *slot;
  }

  GateResult gate(EncoderKind k, VariateMode m) {
    return gate_from_json(read_json(paths_.gate(k, m), "fit-moe"));
  }

  /// Restricted DQN policy per step.
  std::vector<PolicyDistribution> dqn_restricted(EncoderKind k, bool train) {
    auto pi = dqn_policies(qnet(k), states(k, train), config_.dqn.temperature);
    const auto& behavior = policies(k, train).behavior;
    for (std::size_t j = 0; j < pi.size(); ++j) pi[j] = restrict_actions(pi[j], behavior[j]);
    return pi;
  }

  /// Raw (unstandardized) gating features per step.
  std::vector<GatingFeatures> gating_rows(EncoderKind k, bool train) {
    const auto& pol = policies(k, train);
    std::vector<GatingFeatures> rows;
    std::size_t j = 0;
    for (const auto& t : cohort(train)) {
      for (std::size_t s = 0; s < t.steps.size(); ++s, ++j) {
        rows.push_back(gating_features(t.steps[s].observation, static_cast<int>(s) + 1, pol.kth_distance[j]));
      }
    }
    return rows;
  }

 private:
  PipelineConfig config_;
  Paths paths_;
  std::ostream& log_;
  std::optional<std::vector<data::RawTrajectory>> raw_;
  std::optional<std::vector<data::ProcessedTrajectory>> train_, test_;
  std::array<std::optional<EncoderModel>, 2> encoders_;
  std::array<std::array<std::optional<std::vector<Matrix>>, 2>, 2> encoded_;
  std::array<std::array<std::optional<Matrix>, 2>, 2> flat_states_;
  std::optional<MortalityPredictor> predictor_;
  std::array<std::optional<std::vector<std::vector<double>>>, 2> rewards_;
  std::array<std::optional<QNetwork>, 2> qnets_;
  std::array<std::array<std::optional<StepPolicies>, 2>, 2> policies_;
};

// Per-patient evaluation datasets sharing rewards, pi_b and Q; pi_e and V
// chosen per call.
EvaluationDataset eval_dataset(const std::vector<data::ProcessedTrajectory>& cohort, double discount,
                               const std::vector<double>& rewards, const std::vector<double>& pi_e,
                               const std::vector<double>& pi_b, const std::vector<double>& q,
                               const std::vector<double>& v) {
  EvaluationDataset d;
  d.discount = discount;
  std::size_t j = 0;
  for (const auto& t : cohort) {
    EvalTrajectory e;
    const auto n = t.steps.size();
    const auto span = [&](const std::vector<double>& src) {
      return std::vector<double>(src.begin() + static_cast<std::ptrdiff_t>(j),
                                 src.begin() + static_cast<std::ptrdiff_t>(j + n));
    };
    e.rewards = span(rewards);
    e.pi_e = span(pi_e);
    e.pi_b = span(pi_b);
    e.q_hat = span(q);
    e.v_hat = span(v);
    d.trajectories.push_back(std::move(e));
    j += n;
  }
  return d;
}

std::vector<double> logged(const std::vector<PolicyDistribution>& pi, const std::vector<int>& actions) {
  std::vector<double> out(actions.size());
  for (std::size_t j = 0; j < actions.size(); ++j) out[j] = pi[j][actions[j]];
  return out;
}

// ---------------------------------------------------------------------------

void stage_simulate(Run& run) {
  const auto& c = run.config();
  fs::create_directories(run.paths().root);
  std::vector<data::RawTrajectory> cohort;
  if (!c.cohort_csv.empty()) {
    cohort = data::read_cohort_csv(c.cohort_csv);
    run.log() << "read " << cohort.size() << " patients from " << c.cohort_csv.string() << '\n';
    fs::remove(run.paths().ground_truth());
  } else {
    const auto mdp = sim::default_sepsis_mdp();
    cohort = sim::generate_cohort(mdp, c.patients, stage_seed(c, 0));
    write_json(run.paths().ground_truth(), sim::ground_truth_json(mdp, cohort));
    run.log() << "simulated " << cohort.size() << " patients\n";
  }
  data::write_cohort_csv(run.paths().cohort(), cohort);
}

void stage_preprocess(Run& run) {
  const auto& c = run.config();
  const auto& raw = run.raw();
  if (raw.size() < 2) throw DataError("cohort needs at least two patients to split");
  const auto [train, test] = data::split_cohort(raw, c.train_ratio, stage_seed(c, 1));
  const auto stats = data::fit_preprocess(train);
  const auto space = data::fit_action_space(train);
  data::write_processed_csv(run.paths().processed(true), data::process_all(stats, space, train));
  data::write_processed_csv(run.paths().processed(false), data::process_all(stats, space, test));
  json ids_train = json::array(), ids_test = json::array();
  for (const auto& t : train) ids_train.push_back(t.patient_id);
  for (const auto& t : test) ids_test.push_back(t.patient_id);
  write_json(run.paths().preprocess(), {{"format_version", kFormatVersion},
                                        {"train_ratio", c.train_ratio},
                                        {"stats", to_json(stats)},
                                        {"action_space", to_json(space)},
                                        {"train_patients", ids_train},
                                        {"test_patients", ids_test}});
  for (const auto& w : stats.warnings) run.log() << "warning: " << w << '\n';
  run.log() << "split " << train.size() << " train / " << test.size() << " test patients\n";
}

void stage_train_encoder(Run& run) {
  const auto& c = run.config();
  const auto& train = run.cohort(true);
  const auto& test = run.cohort(false);
  json summary = {{"format_version", kFormatVersion}};
  for (auto kind : kEncodings) {
    EncoderConfig ec = c.encoder;
    ec.training.seed = stage_seed(c, 2 + encoding_index(kind));
    const auto model = kind == EncoderKind::recurrent ? train_recurrent_autoencoder(train, ec)
                                                      : train_sparse_autoencoder(flatten_observations(train), ec);
    save_encoder(run.paths().encoder(kind), model);
    const double train_mse = reconstruction_mse(model, train);
    const double test_mse = reconstruction_mse(model, test);
    summary[std::string(to_string(kind))] = {
        {"train_mse", train_mse}, {"test_mse", test_mse}, {"loss_log", model.loss_log}};
    run.log() << to_string(kind) << " encoder: test reconstruction MSE " << test_mse << '\n';
  }
  write_json(run.paths().encoder_summary(), summary);
}

void stage_train_reward(Run& run) {
  const auto& c = run.config();
  RewardConfig rc = c.reward;
  rc.training.seed = stage_seed(c, 4);
  const auto train = label_observations(run.cohort(true));
  const auto test = label_observations(run.cohort(false));
  auto predictor = train_mortality_predictor(train, rc);
  predictor.test_accuracy = accuracy(predictor, test);
  save_predictor(run.paths().predictor(), predictor);

  const auto hist = log_odds_histogram(predictor, test);
  {
    std::ostringstream csv;
    write_histogram_csv(csv, hist);
    nn::write_file_atomic(run.paths().log_odds(), csv.str());
  }
  std::size_t total = 0, inside = 0;
  for (bool split : {true, false}) {
    for (const auto& t : run.cohort(split)) {
      for (double r : trajectory_rewards(predictor, t)) {
        ++total;
        inside += std::abs(r) <= 3.0 ? 1 : 0;
      }
    }
  }
  const auto grads = mortality_input_gradients(predictor, test.x);
  json corr = json::object();
  for (int j = 0; j < kFeatureCount; ++j) {
    corr[std::string(feature_catalog()[static_cast<std::size_t>(j)].name)] = grads.abs_correlation[static_cast<std::size_t>(j)];
  }
  const double max_corr = *std::max_element(grads.abs_correlation.begin(), grads.abs_correlation.end());
  write_json(run.paths().reward_summary(),
             {{"format_version", kFormatVersion},
              {"test_accuracy", predictor.test_accuracy},
              {"rewards_in_bounds", total ? static_cast<double>(inside) / static_cast<double>(total) : 0.0},
              {"reward_count", total},
              {"log_odds", {{"edges", hist.edges},
                            {"survivor_counts", hist.survivor_counts},
                            {"non_survivor_counts", hist.non_survivor_counts}}},
              {"input_gradient_abs_correlation", corr},
              {"max_abs_correlation", max_corr},
              {"loss_log", predictor.loss_log}});
  run.log() << "mortality predictor: test accuracy " << predictor.test_accuracy << ", rewards in [-3, 3]: "
            << inside << "/" << total << '\n';
}

void stage_train_dqn(Run& run) {
  const auto& c = run.config();
  json summary = {{"format_version", kFormatVersion}};
  for (auto kind : kEncodings) {
    const auto data = build_transitions(run.encoded(kind, true), run.rewards(true), run.cohort(true));
    DqnConfig dc = c.dqn;
    dc.training.discount = c.discount;
    dc.training.seed = stage_seed(c, 5 + encoding_index(kind));
    const auto net = train_ddqn(data, dc);
    save_qnetwork(run.paths().dqn(kind), net);
    summary[std::string(to_string(kind))] = {{"steps", net.steps_trained},
                                             {"transitions", data.size()},
                                             {"final_loss", net.loss_log.empty() ? 0.0 : net.loss_log.back()},
                                             {"loss_log", net.loss_log}};
    run.log() << to_string(kind) << " DQN: " << net.steps_trained << " steps on " << data.size()
              << " transitions\n";
  }
  write_json(run.paths().dqn_summary(), summary);
}

void save_policies(const fs::path& path, const StepPolicies& p, EncoderKind kind, bool train, int behavior_k) {
  Matrix m(kPolicyRows, static_cast<Eigen::Index>(p.behavior.size()));
  m.topRows(kActionCount) = pack(p.behavior);
  m.middleRows(kActionCount, kActionCount) = pack(p.kernel);
  for (std::size_t j = 0; j < p.kth_distance.size(); ++j) m(2 * kActionCount, static_cast<Eigen::Index>(j)) = p.kth_distance[j];
  nn::save_matrix(path, m,
                  {{"encoding", std::string(to_string(kind))},
                   {"split", train ? "train" : "test"},
                   {"k", p.k},
                   {"behavior_k", behavior_k},
                   {"rows", "behavior[25], kernel[25], kth_distance"}});
}

void stage_fit_kernel(Run& run) {
  const auto& c = run.config();
  json summary = {{"format_version", kFormatVersion}};
  for (auto kind : kEncodings) {
    const auto& train = run.cohort(true);
    const auto index = build_neighbor_index(run.encoded(kind, true), train);
    save_neighbor_index(run.paths().neighbors(kind), index);

    std::vector<int> candidates = c.cross_validate_k ? c.k_candidates : std::vector<int>{c.kernel_k};
    const int kmax = std::max(c.behavior_k, *std::max_element(candidates.begin(), candidates.end()));

    // training states query without their own patient
    const auto& states = run.states(kind, true);
    std::vector<PolicyDistribution> behavior;
    std::vector<std::vector<PolicyDistribution>> kernels(candidates.size());
    std::vector<std::vector<double>> kth(candidates.size());
    Eigen::Index col = 0;
    for (const auto& t : train) {
      for (std::size_t s = 0; s < t.steps.size(); ++s, ++col) {
        const auto nb = index.query(states.col(col), kmax, t.patient_id);
        behavior.push_back(behavior_policy(index, nb, c.behavior_k));
        for (std::size_t q = 0; q < candidates.size(); ++q) {
          kernels[q].push_back(kernel_policy(index, nb, candidates[q]));
          kth[q].push_back(nb[static_cast<std::size_t>(candidates[q] - 1)].distance);
        }
      }
    }

    std::vector<double> scores;
    int chosen = candidates.front();
    if (c.cross_validate_k) {
      const auto actions = flat_actions(train);
      const auto [q, v] = control_variates(run.qnet(kind), VariateMode::dqn_value, states, actions);
      const auto rewards = run.flat_rewards(true);
      const auto pi_b = logged(behavior, actions);
      const auto objective = [&](int k) {
        const auto pos = static_cast<std::size_t>(std::find(candidates.begin(), candidates.end(), k) - candidates.begin());
        try {
          return wdr_estimate(eval_dataset(train, c.discount, rewards, logged(kernels[pos], actions), pi_b, q, v));
        } catch (const NumericalError&) {
          return -std::numeric_limits<double>::infinity();
        }
      };
      chosen = cross_validate_k(candidates, objective, &scores);
    }
    const auto pos = static_cast<std::size_t>(std::find(candidates.begin(), candidates.end(), chosen) - candidates.begin());
    StepPolicies train_pol{std::move(behavior), std::move(kernels[pos]), std::move(kth[pos]), chosen};
    save_policies(run.paths().policies(kind, true), train_pol, kind, true, c.behavior_k);

    StepPolicies test_pol;
    test_pol.k = chosen;
    const auto& test_states = run.states(kind, false);
    const int kq = std::max(c.behavior_k, chosen);
    for (Eigen::Index j = 0; j < test_states.cols(); ++j) {
      const auto nb = index.query(test_states.col(j), kq);
      test_pol.behavior.push_back(behavior_policy(index, nb, c.behavior_k));
      test_pol.kernel.push_back(kernel_policy(index, nb, chosen));
      test_pol.kth_distance.push_back(nb[static_cast<std::size_t>(chosen - 1)].distance);
    }
    save_policies(run.paths().policies(kind, false), test_pol, kind, false, c.behavior_k);

    json score_json = json::array();
    for (double s : scores) score_json.push_back(std::isfinite(s) ? json(s) : json(nullptr));
    summary[std::string(to_string(kind))] = {
        {"k", chosen}, {"cross_validated", c.cross_validate_k}, {"candidates", candidates}, {"train_wdr", score_json}};
    run.log() << to_string(kind) << " kernel: k = " << chosen << '\n';
  }
  write_json(run.paths().kernel_summary(), summary);
}

void stage_fit_moe(Run& run) {
  const auto& c = run.config();
  const auto& train = run.cohort(true);
  const auto actions = flat_actions(train);
  const auto rewards = run.flat_rewards(true);
  for (auto kind : kEncodings) {
    const auto& pol = run.policies(kind, true);
    const auto dqn = run.dqn_restricted(kind, true);
    const auto rows = run.gating_rows(kind, true);
    const auto stats = fit_gating_stats(rows);
    for (auto mode : kModes) {
      const auto [q, v] = control_variates(run.qnet(kind), mode, run.states(kind, true), actions);
      GateDataset data;
      data.discount = c.discount;
      std::size_t j = 0;
      for (const auto& t : train) {
        std::vector<GateStep> steps;
        for (std::size_t s = 0; s < t.steps.size(); ++s, ++j) {
          const int a = actions[j];
          steps.push_back({stats.standardize(rows[j]), pol.kernel[j][a], dqn[j][a], pol.behavior[j][a], rewards[j],
                           q[j], v[j]});
        }
        data.trajectories.push_back(std::move(steps));
      }
      GateConfig gc = c.gate;
      gc.seed = stage_seed(c, 7 + 2 * encoding_index(kind) + mode_index(mode));
      auto result = optimize_gate(data, gc);
      result.stats = stats;
      json out = to_json(result);
      out["format_version"] = kFormatVersion;
      out["encoding"] = std::string(to_string(kind));
      out["variates"] = std::string(mode_label(mode));
      json experts = json::object();
      for (const auto& [name, b] : {std::pair{"kernel", 1e3}, std::pair{"dqn", -1e3}}) {
        GatingParams corner;
        corner.b = b;
        try {
          experts[name] = gate_objective(data, corner);
        } catch (const NumericalError&) {
          experts[name] = nullptr;
        }
      }
      out["train_expert_wdr"] = experts;
      write_json(run.paths().gate(kind, mode), out);
      run.log() << to_string(kind) << " gate (" << mode_label(mode) << "): train WDR " << result.objective
                << " from restart " << result.best_restart << '\n';
    }
  }
}

// Everything evaluate derives for one encoding.
struct EncodingEvaluation {
  Matrix table;  // kEvalRows x steps
  Matrix test_policies;  // 5 * 25 x steps: physician, kernel, dqn, moe V_d, moe V_b
  std::array<std::array<double, 4>, 2> values{};  // [mode][policy], NaN when not estimable
  std::vector<std::string> unestimable;
  int k = 0;
};

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

EvaluationDataset dataset_from_table(const std::vector<data::ProcessedTrajectory>& cohort, double discount,
                                     const Matrix& table, int pi_row, VariateMode mode) {
  const auto row = [&](int r) { return std::vector<double>(table.row(r).begin(), table.row(r).end()); };
  return eval_dataset(cohort, discount, row(kReward), row(pi_row), row(kPiB), row(kQ),
                      row(mode == VariateMode::dqn_value ? kVd : kVb));
}

json policy_names() {
  json out = json::array();
  for (auto p : kPolicies) out.push_back(std::string(p));
  return out;
}

int policy_row(std::size_t policy, VariateMode mode) {
  switch (policy) {
    case 0: return kPhysician;
    case 1: return kKernel;
    case 2: return kDqn;
    default: return mode == VariateMode::dqn_value ? kMoeVd : kMoeVb;
  }
}

EncodingEvaluation evaluate_encoding(Run& run, EncoderKind kind) {
  const auto& c = run.config();
  const auto& test = run.cohort(false);
  const auto actions = flat_actions(test);
  const auto n = static_cast<Eigen::Index>(actions.size());
  const auto& pol = run.policies(kind, false);
  const auto dqn = run.dqn_restricted(kind, false);
  const auto rows = run.gating_rows(kind, false);

  std::array<std::vector<PolicyDistribution>, 2> moe;
  for (auto mode : kModes) {
    const auto gate = run.gate(kind, mode);
    auto& out = moe[mode_index(mode)];
    for (std::size_t j = 0; j < rows.size(); ++j) {
      const double pk = gate_probability(gate.params, gate.stats.standardize(rows[j])).first;
      out.push_back(mixture_policy(pk, pol.kernel[j], dqn[j]));
    }
  }

  EncodingEvaluation e;
  e.k = pol.k;
  e.test_policies.resize(5 * kActionCount, n);
  e.test_policies.middleRows(0, kActionCount) = pack(pol.behavior);
  e.test_policies.middleRows(kActionCount, kActionCount) = pack(pol.kernel);
  e.test_policies.middleRows(2 * kActionCount, kActionCount) = pack(dqn);
  e.test_policies.middleRows(3 * kActionCount, kActionCount) = pack(moe[0]);
  e.test_policies.middleRows(4 * kActionCount, kActionCount) = pack(moe[1]);

  const auto [q, vd] = control_variates(run.qnet(kind), VariateMode::dqn_value, run.states(kind, false), actions);
  const auto vb = control_variates(run.qnet(kind), VariateMode::behavior_value, run.states(kind, false), actions).second;
  const auto rewards = run.flat_rewards(false);
  e.table.resize(kEvalRows, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto s = static_cast<std::size_t>(j);
    const int a = actions[s];
    e.table(kReward, j) = rewards[s];
    e.table(kPiB, j) = pol.behavior[s][a];
    e.table(kQ, j) = q[s];
    e.table(kVd, j) = vd[s];
    e.table(kVb, j) = vb[s];
    e.table(kPhysician, j) = pol.behavior[s][a];
    e.table(kKernel, j) = pol.kernel[s][a];
    e.table(kDqn, j) = dqn[s][a];
    e.table(kMoeVd, j) = moe[0][s][a];
    e.table(kMoeVb, j) = moe[1][s][a];
  }
  for (auto mode : kModes) {
    for (std::size_t p = 0; p < kPolicies.size(); ++p) {
      try {
        e.values[mode_index(mode)][p] =
            wdr_estimate(dataset_from_table(test, c.discount, e.table, policy_row(p, mode), mode));
      } catch (const NumericalError& err) {
        e.values[mode_index(mode)][p] = std::numeric_limits<double>::quiet_NaN();
        e.unestimable.push_back(std::string(kPolicies[p]) + " (" + std::string(mode_label(mode)) + "): " + err.what());
      }
    }
  }
  return e;
}

json values_json(const EncodingEvaluation& e) {
  json out = json::object();
  for (auto mode : kModes) {
    json row = json::object();
    for (std::size_t p = 0; p < kPolicies.size(); ++p) row[std::string(kPolicies[p])] = number_or_null(e.values[mode_index(mode)][p]);
    out[std::string(mode_label(mode))] = row;
  }
  return out;
}

void stage_evaluate(Run& run) {
  const auto& c = run.config();
  const auto& test = run.cohort(false);
  json encodings = json::object();
  for (auto kind : kEncodings) {
    const auto e = evaluate_encoding(run, kind);
    json lengths = json::array();
    for (const auto& t : test) lengths.push_back(t.steps.size());
    nn::save_matrix(run.paths().eval_table(kind), e.table,
                    {{"encoding", std::string(to_string(kind))},
                     {"rows", {"reward", "pi_b", "q_hat", "v_hat_d", "v_hat_b", "physician", "kernel", "dqn",
                               "moe_vd", "moe_vb"}},
                     {"lengths", lengths},
                     {"discount", c.discount}});
    nn::save_matrix(run.paths().test_policies(kind), e.test_policies,
                    {{"encoding", std::string(to_string(kind))},
                     {"rows", "physician, kernel, dqn, moe_vd, moe_vb; 25 each"}});

    // the V_d mixture stands in for the MoE in grids and agreement
    std::vector<std::vector<PolicyDistribution>> policies;
    for (int p = 0; p < 4; ++p) policies.push_back(unpack(e.test_policies, p * kActionCount));
    const auto agree = agreement_matrix(policies, c.agreement);
    json matrix = json::array();
    for (Eigen::Index i = 0; i < agree.rows(); ++i) {
      json r = json::array();
      for (Eigen::Index j = 0; j < agree.cols(); ++j) r.push_back(agree(i, j));
      matrix.push_back(r);
    }
    std::size_t neither = 0;
    for (std::size_t j = 0; j < policies[3].size(); ++j) {
      const int m = policies[3][j].argmax();
      neither += (m != policies[1][j].argmax() && m != policies[2][j].argmax()) ? 1 : 0;
    }
    json grids = json::object(), diagnostics = json::object();
    for (std::size_t p = 0; p < kPolicies.size(); ++p) {
      grids[std::string(kPolicies[p])] = to_json(action_distribution(policies[p]));
      try {
        diagnostics[std::string(kPolicies[p])] = to_json(
            weight_diagnostics(dataset_from_table(test, c.discount, e.table, policy_row(p, VariateMode::dqn_value),
                                                  VariateMode::dqn_value)));
      } catch (const NumericalError& err) {
        diagnostics[std::string(kPolicies[p])] = {{"error", err.what()}};
      }
    }
    encodings[std::string(encoding_label(kind))] = {
        {"k", e.k},
        {"values", values_json(e)},
        {"agreement",
         {{"metric", c.agreement == AgreementMetric::argmax ? "argmax" : "total_variation"},
          {"policies", policy_names()},
          {"matrix", matrix},
          {"moe_follows_neither", static_cast<double>(neither) / static_cast<double>(policies[3].size())}}},
        {"action_distribution", grids},
        {"weight_diagnostics", diagnostics},
        {"unestimable", e.unestimable}};
    for (const auto& u : e.unestimable) run.log() << encoding_label(kind) << ": not estimable: " << u << '\n';
    run.log() << encoding_label(kind) << ": physician " << e.values[0][0] << ", kernel " << e.values[0][1] << ", dqn "
              << e.values[0][2] << ", moe " << e.values[0][3] << " (V_d)\n";
  }
  write_json(run.paths().evaluation(), {{"format_version", kFormatVersion},
                                        {"config_hash", config_hash(c)},
                                        {"seed", c.seed},
                                        {"scale", std::string(to_string(c.scale))},
                                        {"discount", c.discount},
                                        {"test_patients", test.size()},
                                        {"test_steps", step_count(test)},
                                        {"encodings", encodings}});
}

void stage_bootstrap(Run& run) {
  const auto& c = run.config();
  require(run.paths().evaluation(), "evaluate");
  const auto& test = run.cohort(false);
  json summary = {{"format_version", kFormatVersion}, {"resamples", c.bootstrap}, {"comparison", "moe - physician"}};
  for (auto kind : kEncodings) {
    require(run.paths().eval_table(kind), "evaluate");
    const Matrix table = nn::load_matrix(run.paths().eval_table(kind));
    json per_mode = json::object();
    for (auto mode : kModes) {
      const auto moe = dataset_from_table(test, c.discount, table, policy_row(3, mode), mode);
      const auto physician = dataset_from_table(test, c.discount, table, kPhysician, mode);
      BootstrapResult r;
      try {
        r = bootstrap_difference(moe, physician, c.bootstrap,
                                 stage_seed(c, 11 + 2 * encoding_index(kind) + mode_index(mode)));
      } catch (const NumericalError& err) {
        per_mode[std::string(mode_label(mode))] = {{"error", err.what()}, {"requested", c.bootstrap}, {"completed", 0}};
        run.log() << encoding_label(kind) << " " << mode_label(mode) << ": no bootstrap, " << err.what() << '\n';
        continue;
      }
      write_bootstrap_csv(run.paths().bootstrap_csv(kind, mode), r);
      json j = to_json(r);
      j["csv"] = run.paths().bootstrap_csv(kind, mode).filename().string();
      per_mode[std::string(mode_label(mode))] = j;
      run.log() << encoding_label(kind) << " " << mode_label(mode) << ": difference " << r.original_difference
                << ", bootstrap [" << r.min << ", " << r.max << "], negative in " << r.negative << "/"
                << r.differences.size() << '\n';
    }
    summary[std::string(encoding_label(kind))] = per_mode;
  }
  write_json(run.paths().bootstrap_summary(), summary);
}

void stage_report(Run& run) {
  const auto& paths = run.paths();
  const json eval = read_json(paths.evaluation(), "evaluate");
  json report = {{"format_version", kFormatVersion},
                 {"provenance",
                  {{"config_hash", eval.at("config_hash")},
                   {"seed", eval.at("seed")},
                   {"scale", eval.at("scale")},
                   {"discount", eval.at("discount")},
                   {"test_patients", eval.at("test_patients")},
                   {"test_steps", eval.at("test_steps")}}}};
  json skipped = json::array();
  json files = json::array();
  const auto emit = [&](const std::string& name, const std::string& contents) {
    nn::write_file_atomic(paths.root / name, contents);
    files.push_back(name);
  };

  // policy value table
  json table = json::array();
  std::ostringstream csv;
  csv << "encoding,variates";
  for (auto p : kPolicies) csv << ',' << p;
  csv << '\n';
  for (auto kind : kEncodings) {
    const auto& enc = eval.at("encodings").at(std::string(encoding_label(kind)));
    for (auto mode : kModes) {
      const auto& v = enc.at("values").at(std::string(mode_label(mode)));
      json row = {{"encoding", std::string(encoding_label(kind))}, {"variates", std::string(mode_label(mode))}};
      csv << encoding_label(kind) << ',' << mode_label(mode);
      for (auto p : kPolicies) {
        const auto& x = v.at(std::string(p));
        row[std::string(p)] = x;
        csv << ',' << (x.is_null() ? std::string("nan") : format_number(x.get<double>()));
      }
      csv << '\n';
      table.push_back(row);
    }
  }
  report["policy_values"] = table;
  emit("policy_values.csv", csv.str());

  json agreement = json::object(), grids = json::object(), diagnostics = json::object(), kernel = json::object();
  for (auto kind : kEncodings) {
    const auto label = std::string(encoding_label(kind));
    const auto tag = std::string(to_string(kind));
    const auto& enc = eval.at("encodings").at(label);
    agreement[label] = enc.at("agreement");
    std::ostringstream a;
    a << "policy";
    for (auto p : kPolicies) a << ',' << p;
    a << '\n';
    const auto& m = enc.at("agreement").at("matrix");
    for (std::size_t i = 0; i < kPolicies.size(); ++i) {
      a << kPolicies[i];
      for (std::size_t j = 0; j < kPolicies.size(); ++j) a << ',' << format_number(m.at(i).at(j).get<double>());
      a << '\n';
    }
    emit("agreement_" + tag + ".csv", a.str());

    grids[label] = enc.at("action_distribution");
    for (auto p : kPolicies) {
      const auto grid = action_grid_from_json(enc.at("action_distribution").at(std::string(p)));
      emit("actions_" + std::string(p) + "_" + tag + ".csv", action_grid_csv(grid));
      emit("actions_" + std::string(p) + "_" + tag + ".svg",
           action_grid_svg(grid, std::string(p) + " (" + label + ")"));
    }
    diagnostics[label] = enc.at("weight_diagnostics");
    const auto& moe_diag = enc.at("weight_diagnostics").at("moe");
    if (!moe_diag.contains("histogram")) {
      skipped.push_back("MoE weight histogram for " + label + " (" + moe_diag.value("error", std::string()) + ")");
      kernel[label] = {{"k", enc.at("k")}};
      continue;
    }
    std::vector<std::string> bins;
    std::vector<double> counts;
    for (const auto& b : moe_diag.at("histogram")) {
      bins.push_back(b.at("bin").get<std::string>());
      counts.push_back(b.at("count").get<double>());
    }
    emit("weights_moe_" + tag + ".svg", bar_chart_svg(bins, counts, "MoE importance weights (" + label + ")"));
    kernel[label] = {{"k", enc.at("k")}};
  }
  report["agreement"] = agreement;
  report["action_distribution"] = grids;
  report["weight_diagnostics"] = diagnostics;
  json unestimable = json::object();
  for (auto kind : kEncodings) {
    const auto label = std::string(encoding_label(kind));
    const auto& enc = eval.at("encodings").at(label);
    if (enc.contains("unestimable") && !enc.at("unestimable").empty()) unestimable[label] = enc.at("unestimable");
  }
  report["unestimable"] = unestimable;

  if (fs::exists(paths.bootstrap_summary())) {
    report["bootstrap"] = read_json(paths.bootstrap_summary(), "bootstrap");
  } else {
    skipped.push_back("bootstrap (run `moerl bootstrap`)");
  }

  json gates = json::object();
  for (auto kind : kEncodings) {
    for (auto mode : kModes) {
      if (!fs::exists(paths.gate(kind, mode))) {
        skipped.push_back("gate summary " + paths.gate(kind, mode).filename().string());
        continue;
      }
      const json g = read_json(paths.gate(kind, mode), "fit-moe");
      gates[std::string(encoding_label(kind))][std::string(mode_label(mode))] = {
          {"w", g.at("w")},
          {"b", g.at("b")},
          {"best_restart_index", g.at("best_restart_index")},
          {"train_wdr", g.at("objective")},
          {"train_expert_wdr", g.value("train_expert_wdr", json::object())}};
    }
  }
  report["gates"] = gates;

  if (fs::exists(paths.kernel_summary())) {
    const json k = read_json(paths.kernel_summary(), "fit-kernel");
    for (auto kind : kEncodings) {
      const auto tag = std::string(to_string(kind));
      if (k.contains(tag)) kernel[std::string(encoding_label(kind))] = k.at(tag);
    }
  }
  report["kernel"] = kernel;

  if (fs::exists(paths.reward_summary())) {
    const json r = read_json(paths.reward_summary(), "train-reward");
    report["reward_model"] = {{"test_accuracy", r.at("test_accuracy")},
                              {"rewards_in_bounds", r.at("rewards_in_bounds")},
                              {"max_abs_input_gradient_correlation", r.at("max_abs_correlation")}};
    const auto& lo = r.at("log_odds");
    std::vector<double> surv, dead;
    for (const auto& v : lo.at("survivor_counts")) surv.push_back(v.get<double>());
    for (const auto& v : lo.at("non_survivor_counts")) dead.push_back(v.get<double>());
    emit("log_odds.svg", paired_histogram_svg(lo.at("edges").get<std::vector<double>>(), surv, dead, "survivors",
                                              "non-survivors", "Mortality log-odds on the test set"));
  } else {
    skipped.push_back("log-odds histogram (run `moerl train-reward`)");
  }

  if (fs::exists(paths.timings())) {
    const json t = read_json(paths.timings(), "all");
    std::ostringstream tc;
    tc << "stage,seconds\n";
    for (auto stage : kStages) {
      if (t.contains(std::string(stage))) tc << stage << ',' << format_number(t.at(std::string(stage)).get<double>()) << '\n';
    }
    nn::write_file_atomic(paths.root / "timing.csv", tc.str());
    report["timing_table"] = "timing.csv";
  } else {
    skipped.push_back("timing table (no timings.json)");
  }

  report["files"] = files;
  report["skipped"] = skipped;
  write_json(paths.report(), report);
  for (const auto& s : skipped) run.log() << "skipped: " << s.get<std::string>() << '\n';
  run.log() << "wrote " << paths.report().string() << '\n';
}

void record_timing(const Paths& paths, std::string_view stage, double seconds) {
  json t = json::object();
  if (fs::exists(paths.timings())) {
    t = json::parse(nn::read_file(paths.timings()), nullptr, false);
    if (!t.is_object()) t = json::object();
  }
  t[std::string(stage)] = std::round(seconds * 1000.0) / 1000.0;
  write_json(paths.timings(), t);
}

void run_stage(std::string_view name, Run& run) {
  if (name == "simulate") return stage_simulate(run);
  if (name == "preprocess") return stage_preprocess(run);
  if (name == "train-encoder") return stage_train_encoder(run);
  if (name == "train-reward") return stage_train_reward(run);
  if (name == "train-dqn") return stage_train_dqn(run);
  if (name == "fit-kernel") return stage_fit_kernel(run);
  if (name == "fit-moe") return stage_fit_moe(run);
  if (name == "evaluate") return stage_evaluate(run);
  if (name == "bootstrap") return stage_bootstrap(run);
  if (name == "report") return stage_report(run);
  throw UsageError("unknown subcommand '" + std::string(name) + "'");
}

}  // namespace

bool is_subcommand(std::string_view name) {
  return name == "all" || name == "verify" || std::find(kStages.begin(), kStages.end(), name) != kStages.end();
}

void run(std::string_view name, const PipelineConfig& config, std::ostream& log) {
  if (!is_subcommand(name)) throw UsageError("unknown subcommand '" + std::string(name) + "'");
  config.validate();
  if (name == "verify") {
    verify(config, log);
    return;
  }
  fs::create_directories(config.out);
  write_json(Paths{config.out}.resolved_config(), to_json(config));
  Run state(config, log);
  const auto stages = name == "all" ? std::vector<std::string_view>(kStages.begin(), kStages.end())
                                    : std::vector<std::string_view>{name};
  for (auto stage : stages) {
    log << "[" << stage << "]\n";
    const auto start = std::chrono::steady_clock::now();
    run_stage(stage, state);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    // report reads the timings, so its own time never feeds back into it
    if (stage != "report") record_timing(state.paths(), stage, seconds);
  }
}

double verify(const PipelineConfig& config, std::ostream& log) {
  config.validate();
  Run state(config, log);
  const auto& paths = state.paths();
  json stored;
  std::string source;
  if (fs::exists(paths.report())) {
    const json report = read_json(paths.report(), "report");
    for (const auto& row : report.at("policy_values")) {
      for (auto p : kPolicies) {
        stored[row.at("encoding").get<std::string>()][row.at("variates").get<std::string>()][std::string(p)] =
            row.at(std::string(p));
      }
    }
    source = "report.json";
  } else {
    const json eval = read_json(paths.evaluation(), "evaluate");
    for (auto kind : kEncodings) {
      const auto label = std::string(encoding_label(kind));
      stored[label] = eval.at("encodings").at(label).at("values");
    }
    source = "evaluation.json";
  }
  double worst = 0.0;
  for (auto kind : kEncodings) {
    const auto e = evaluate_encoding(state, kind);
    const auto label = std::string(encoding_label(kind));
    for (auto mode : kModes) {
      for (std::size_t p = 0; p < kPolicies.size(); ++p) {
        const auto& stored_value = stored.at(label).at(std::string(mode_label(mode))).at(std::string(kPolicies[p]));
        const double want = stored_value.is_null() ? std::numeric_limits<double>::quiet_NaN() : stored_value.get<double>();
        const double got = e.values[mode_index(mode)][p];
        // both sides not estimable counts as agreement
        const double diff = std::isnan(want) && std::isnan(got) ? 0.0 : std::abs(want - got);
        worst = std::max(worst, std::isfinite(diff) ? diff : std::numeric_limits<double>::infinity());
        log << label << ' ' << mode_label(mode) << ' ' << kPolicies[p] << ": stored " << want << ", recomputed " << got
            << '\n';
      }
    }
  }
  if (!(worst <= kVerifyTolerance)) {
    throw NumericalError("verify: recomputed policy values differ from " + source + " by " + std::to_string(worst));
  }
  log << "verify: all 16 policy values match " << source << " (max difference " << worst << ")\n";
  return worst;
}

}  // namespace moerl::pipeline
