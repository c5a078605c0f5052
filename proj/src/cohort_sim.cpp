#include "moerl/cohort_sim.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "moerl/error.hpp"
#include "moerl/nn/activation.hpp"

namespace moerl::sim {

namespace {

struct FeatureProfile {
  double healthy, sick, spread, lo, hi;
  bool patient_static;
};

// Raw-unit emission profile per catalog feature (same order as feature_catalog()).
constexpr std::array<FeatureProfile, kFeatureCount> kProfiles{{
    {60, 60, 15, 18, 91, true},            // age
    {80, 80, 15, 40, 200, true},           // Weight_kg
    {15, 8, 2, 3, 15, false},              // GCS
    {80, 115, 12, 30, 200, false},         // HR
    {125, 95, 15, 50, 220, false},         // SysBP
    {85, 62, 10, 30, 150, false},          // MeanBP
    {65, 50, 10, 20, 120, false},          // DiaBP
    {16, 26, 4, 5, 50, false},             // RR
    {37.0, 38.3, 0.6, 34, 42, false},      // Temp_C
    {0.3, 0.55, 0.1, 0.21, 1.0, false},    // FiO2_1
    {4.0, 4.5, 0.5, 2, 7, false},          // Potassium
    {139, 137, 4, 120, 160, false},        // Sodium
    {104, 106, 5, 85, 125, false},         // Chloride
    {120, 150, 35, 40, 400, false},        // Glucose
    {2.0, 1.9, 0.3, 0.8, 4, false},        // Magnesium
    {8.7, 8.0, 0.6, 6, 11, false},         // Calcium
    {11, 9, 1.5, 5, 17, false},            // Hb
    {10, 16, 5, 0.5, 50, false},           // WBC_count
    {220, 140, 70, 10, 600, false},        // Platelets_count
    {32, 45, 8, 20, 120, false},           // PTT
    {14, 18, 3, 10, 50, false},            // PT
    {7.40, 7.30, 0.05, 6.9, 7.7, false},   // Arterial_pH
    {110, 85, 30, 40, 400, false},         // paO2
    {40, 38, 7, 20, 80, false},            // paCO2
    {0, -6, 3, -25, 15, false},            // Arterial_BE
    {24, 19, 3, 8, 40, false},             // HCO3
    {1.5, 4.5, 1.2, 0.3, 15, false},       // Arterial_lactate
    {3, 11, 2, 0, 24, false},              // SOFA
    {1.5, 3, 0.8, 0, 4, false},            // SIRS
    {0.7, 1.1, 0.15, 0.3, 2.5, false},     // Shock_Index
    {330, 190, 70, 50, 600, false},        // PaO2_FiO2
    {1500, 5000, 2000, -5000, 20000, false},  // cumulated_balance_tev
    {4, 4, 3, 0, 20, true},                // Elixhauser
    {3.2, 2.5, 0.5, 1, 5, false},          // Albumin
    {24, 20, 3, 8, 40, false},             // CO2_mEqL
    {97, 93, 2, 70, 100, false},           // SpO2
    {20, 45, 15, 2, 150, false},           // BUN
    {1.0, 2.5, 0.8, 0.2, 10, false},       // Creatinine
    {40, 150, 80, 5, 2000, false},         // SGOT
    {35, 110, 60, 5, 2000, false},         // SGPT
    {0.8, 2.5, 1.2, 0.1, 30, false},       // Total_bili
    {1.2, 1.8, 0.3, 0.8, 8, false},        // INR
    {2000, 6000, 2000, 0, 30000, false},   // input_total_tev
    {1500, 1200, 700, 0, 15000, false},    // output_total
    {300, 150, 150, 0, 3000, false},       // output_4hourly
}};

constexpr double kEmissionNoise = 0.8;

void fill_emissions(SimMDP& mdp, const std::vector<double>& severity) {
  const auto S = static_cast<std::size_t>(mdp.latent_state_count);
  mdp.emission_mean.assign(S * kFeatureCount, 0.0);
  mdp.emission_spread.assign(S * kFeatureCount, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t j = 0; j < kFeatureCount; ++j) {
      const auto& p = kProfiles[j];
      mdp.emission_mean[s * kFeatureCount + j] = p.healthy + severity[s] * (p.sick - p.healthy);
      mdp.emission_spread[s * kFeatureCount + j] = p.spread * kEmissionNoise;
    }
  }
  for (std::size_t j = 0; j < kFeatureCount; ++j) {
    mdp.feature_lo[j] = kProfiles[j].lo;
    mdp.feature_hi[j] = kProfiles[j].hi;
    mdp.patient_static[j] = kProfiles[j].patient_static;
  }
}

std::size_t tindex(const SimMDP& m, int s, int a, int next) {
  return (static_cast<std::size_t>(s) * static_cast<std::size_t>(m.action_count) + static_cast<std::size_t>(a)) *
             static_cast<std::size_t>(m.latent_state_count) +
         static_cast<std::size_t>(next);
}

void fill_log_odds_rewards(SimMDP& mdp) {
  const int S = mdp.latent_state_count;
  mdp.reward_table.assign(static_cast<std::size_t>(S) * mdp.action_count * S, 0.0);
  for (int s = 0; s < S; ++s) {
    if (mdp.is_absorbing(s)) continue;
    for (int a = 0; a < mdp.action_count; ++a) {
      for (int n = 0; n < S; ++n) {
        if (mdp.is_absorbing(n)) continue;
        mdp.reward_table[tindex(mdp, s, a, n)] =
            mdp.mortality_logit_weights[static_cast<std::size_t>(s)] -
            mdp.mortality_logit_weights[static_cast<std::size_t>(n)];
      }
    }
  }
}

int sample_discrete(std::mt19937_64& rng, const double* probs, int n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x = u(rng);
  for (int i = 0; i < n; ++i) {
    x -= probs[i];
    if (x < 0.0) return i;
  }
  // Rounding slack: return the last state with positive mass.
  for (int i = n - 1; i >= 0; --i)
    if (probs[i] > 0.0) return i;
  return n - 1;
}

double draw_dose(std::mt19937_64& rng, int bin, const std::array<double, 4>& edges) {
  if (bin == 0) return 0.0;
  const double lo = bin == 1 ? 0.0 : edges[static_cast<std::size_t>(bin - 2)];
  const double hi = edges[static_cast<std::size_t>(bin - 1)];
  std::uniform_real_distribution<double> u(0.0, 1.0);
  // (lo, hi]: never exactly zero, may hit the upper edge
  return hi - u(rng) * (hi - lo);
}

}  // namespace

// ---------------------------------------------------------------------------

double SimMDP::transition(int s, int a, int next) const { return transition_tensor[tindex(*this, s, a, next)]; }

double SimMDP::reward(int s, int a, int next) const {
  return reward_table.empty() ? 0.0 : reward_table[tindex(*this, s, a, next)];
}

double SimMDP::behavior(int s, int a) const {
  return behavior_policy_table[static_cast<std::size_t>(s) * static_cast<std::size_t>(action_count) +
                               static_cast<std::size_t>(a)];
}

void SimMDP::validate() const {
  if (latent_state_count < 1) throw ConfigError("latent_state_count must be positive");
  if (action_count != kActionCount) throw ConfigError("action_count must be 25");
  const auto S = static_cast<std::size_t>(latent_state_count);
  const auto A = static_cast<std::size_t>(action_count);
  if (transition_tensor.size() != S * A * S) throw ConfigError("transition_tensor has wrong size");
  if (behavior_policy_table.size() != S * A) throw ConfigError("behavior_policy_table has wrong size");
  if (start_distribution.size() != S) throw ConfigError("start_distribution has wrong size");
  if (mortality_logit_weights.size() != S) throw ConfigError("mortality_logit_weights has wrong size");
  if (emission_mean.size() != S * kFeatureCount || emission_spread.size() != S * kFeatureCount) {
    throw ConfigError("emission parameters must cover 45 features per latent state");
  }
  if (!reward_table.empty() && reward_table.size() != S * A * S) throw ConfigError("reward_table has wrong size");
  if (horizon_max < 0) throw ConfigError("horizon_max must be >= 0");
  if (!(emission_autocorrelation >= 0.0 && emission_autocorrelation < 1.0)) {
    throw ConfigError("emission_autocorrelation must lie in [0, 1)");
  }
  if (!(discount > 0.0 && discount <= 1.0)) throw ConfigError("discount must lie in (0,1]");
  for (int s = 0; s < latent_state_count; ++s) {
    for (int a = 0; a < action_count; ++a) {
      double sum = 0.0;
      for (int n = 0; n < latent_state_count; ++n) {
        const double p = transition(s, a, n);
        if (!(p >= 0.0)) {
          throw ConfigError("transition row (state " + std::to_string(s) + ", action " + std::to_string(a) +
                            ") has a negative entry");
        }
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-12) {
        std::ostringstream msg;
        msg.precision(17);
        msg << "transition row (state " << s << ", action " << a << ") sums to " << sum;
        throw ConfigError(msg.str());
      }
    }
    double sum = 0.0;
    for (int a = 0; a < action_count; ++a) {
      const double p = behavior(s, a);
      if (!(p >= 0.0)) throw ConfigError("behavior_policy_table row " + std::to_string(s) + " has a negative entry");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
      std::ostringstream msg;
      msg.precision(17);
      msg << "behavior_policy_table row " << s << " sums to " << sum;
      throw ConfigError(msg.str());
    }
  }
  double start = 0.0;
  for (int s = 0; s < latent_state_count; ++s) {
    const double p = start_distribution[static_cast<std::size_t>(s)];
    if (!(p >= 0.0)) throw ConfigError("start_distribution has a negative entry");
    if (p > 0.0 && is_absorbing(s)) throw ConfigError("start_distribution puts mass on an absorbing state");
    start += p;
  }
  if (std::abs(start - 1.0) > 1e-12) throw ConfigError("start_distribution does not sum to 1");
  for (std::size_t b = 1; b < 4; ++b) {
    if (!(iv_dose_edges[b] > iv_dose_edges[b - 1]) || !(vaso_dose_edges[b] > vaso_dose_edges[b - 1])) {
      throw ConfigError("dose edges must be strictly increasing");
    }
  }
  if (!(iv_dose_edges[0] > 0.0) || !(vaso_dose_edges[0] > 0.0)) throw ConfigError("dose edges must be positive");
}

// ---------------------------------------------------------------------------

SimMDP default_sepsis_mdp() {
  SimMDP m;
  m.latent_state_count = 8;
  m.death_state = 6;
  m.discharge_state = 7;
  m.horizon_max = 12;
  m.discount = 0.99;
  constexpr int kTransient = 6;
  constexpr std::array<int, kTransient> ideal_iv{0, 1, 2, 3, 3, 4};
  constexpr std::array<int, kTransient> ideal_vaso{0, 0, 0, 1, 2, 3};
  // Clinicians' habitual choice: systematically under-dosed in sicker states.
  constexpr std::array<int, kTransient> usual_iv{1, 1, 2, 2, 2, 3};
  constexpr std::array<int, kTransient> usual_vaso{0, 0, 0, 0, 1, 1};
  constexpr std::array<double, kTransient> death_base{0.0, 0.0, 0.002, 0.007, 0.02, 0.05};

  const int S = m.latent_state_count;
  const int A = m.action_count;
  m.transition_tensor.assign(static_cast<std::size_t>(S * A * S), 0.0);
  m.behavior_policy_table.assign(static_cast<std::size_t>(S * A), 0.0);
  for (int s = 0; s < S; ++s) {
    if (m.is_absorbing(s)) {
      for (int a = 0; a < A; ++a) {
        m.transition_tensor[tindex(m, s, a, s)] = 1.0;
        m.behavior_policy_table[static_cast<std::size_t>(s * A + a)] = 1.0 / A;
      }
      continue;
    }
    const auto si = static_cast<std::size_t>(s);
    double bsum = 0.0;
    for (int a = 0; a < A; ++a) {
      const int iv = a / kBinsPerDrug;
      const int vaso = a % kBinsPerDrug;
      const double q = std::exp(-0.6 * (std::abs(iv - ideal_iv[si]) + std::abs(vaso - ideal_vaso[si])));
      const double improve = 0.08 + 0.42 * q;
      const double worsen = 0.26 - 0.20 * q;
      const double die = death_base[si] * (1.6 - q);
      auto& row = m.transition_tensor;
      if (s == 0) {
        row[tindex(m, s, a, m.discharge_state)] += 0.25 + 0.45 * q;
      } else {
        row[tindex(m, s, a, s - 1)] += improve;
        if (s == 1) row[tindex(m, s, a, m.discharge_state)] += 0.05 + 0.05 * q;
      }
      if (s == kTransient - 1) {
        row[tindex(m, s, a, m.death_state)] += 0.5 * worsen;
      } else {
        row[tindex(m, s, a, s + 1)] += worsen;
      }
      row[tindex(m, s, a, m.death_state)] += die;
      double out = 0.0;
      for (int n = 0; n < S; ++n)
        if (n != s) out += row[tindex(m, s, a, n)];
      row[tindex(m, s, a, s)] = 1.0 - out;

      const double b = std::exp(-1.0 * (std::abs(iv - usual_iv[si]) + std::abs(vaso - usual_vaso[si])));
      m.behavior_policy_table[static_cast<std::size_t>(s * A + a)] = b;
      bsum += b;
    }
    for (int a = 0; a < A; ++a) m.behavior_policy_table[static_cast<std::size_t>(s * A + a)] /= bsum;
  }
  m.start_distribution = {0.22, 0.32, 0.24, 0.12, 0.07, 0.03, 0.0, 0.0};
  m.mortality_logit_weights = {-5.0, -4.0, -3.0, -2.0, -1.0, 0.0, 6.0, -6.0};
  fill_emissions(m, {0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 0.0});
  m.emission_autocorrelation = 0.6;
  fill_log_odds_rewards(m);
  m.validate();
  return m;
}

SimMDP chain_mdp(int transient, int horizon, std::uint64_t seed) {
  if (transient < 1) throw ConfigError("chain_mdp needs at least one transient state");
  SimMDP m;
  m.latent_state_count = transient + 2;
  m.death_state = transient;
  m.discharge_state = transient + 1;
  m.horizon_max = horizon;
  m.discount = 0.95;
  const int S = m.latent_state_count;
  const int A = m.action_count;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  m.transition_tensor.assign(static_cast<std::size_t>(S * A * S), 0.0);
  m.behavior_policy_table.assign(static_cast<std::size_t>(S * A), 0.0);
  for (int s = 0; s < S; ++s) {
    double bsum = 0.0;
    for (int a = 0; a < A; ++a) {
      if (m.is_absorbing(s)) {
        m.transition_tensor[tindex(m, s, a, s)] = 1.0;
        m.behavior_policy_table[static_cast<std::size_t>(s * A + a)] = 1.0 / A;
        continue;
      }
      const int down = s == 0 ? m.discharge_state : s - 1;
      const int up = s == transient - 1 ? m.death_state : s + 1;
      const double w_down = 0.2 + u(rng);
      const double w_stay = 0.2 + u(rng);
      const double w_up = 0.2 + u(rng);
      const double w_die = 0.05 * u(rng);
      const double total = w_down + w_stay + w_up + w_die;
      m.transition_tensor[tindex(m, s, a, down)] += w_down / total;
      m.transition_tensor[tindex(m, s, a, up)] += w_up / total;
      m.transition_tensor[tindex(m, s, a, m.death_state)] += w_die / total;
      double out = 0.0;
      for (int n = 0; n < S; ++n)
        if (n != s) out += m.transition_tensor[tindex(m, s, a, n)];
      m.transition_tensor[tindex(m, s, a, s)] = 1.0 - out;
      const double b = 0.2 + u(rng);
      m.behavior_policy_table[static_cast<std::size_t>(s * A + a)] = b;
      bsum += b;
    }
    if (!m.is_absorbing(s))
      for (int a = 0; a < A; ++a) m.behavior_policy_table[static_cast<std::size_t>(s * A + a)] /= bsum;
  }
  m.start_distribution.assign(static_cast<std::size_t>(S), 0.0);
  for (int s = 0; s < transient; ++s) m.start_distribution[static_cast<std::size_t>(s)] = 1.0 / transient;
  m.mortality_logit_weights.assign(static_cast<std::size_t>(S), 0.0);
  std::vector<double> severity(static_cast<std::size_t>(S), 0.0);
  for (int s = 0; s < transient; ++s) {
    const double frac = transient == 1 ? 0.5 : static_cast<double>(s) / (transient - 1);
    m.mortality_logit_weights[static_cast<std::size_t>(s)] = -3.0 + 3.0 * frac;
    severity[static_cast<std::size_t>(s)] = frac;
  }
  m.mortality_logit_weights[static_cast<std::size_t>(m.death_state)] = 6.0;
  m.mortality_logit_weights[static_cast<std::size_t>(m.discharge_state)] = -6.0;
  severity[static_cast<std::size_t>(m.death_state)] = 1.0;
  fill_emissions(m, severity);
  fill_log_odds_rewards(m);
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------

std::vector<RawTrajectory> generate_cohort(const SimMDP& mdp, int n_patients, std::uint64_t seed) {
  mdp.validate();
  if (n_patients < 1) throw UsageError("n_patients must be >= 1");
  if (mdp.horizon_max < 1) throw ConfigError("generate_cohort needs a finite horizon_max >= 1");
  const int S = mdp.latent_state_count;
  const int A = mdp.action_count;
  std::vector<RawTrajectory> cohort(static_cast<std::size_t>(n_patients));
  const int width = static_cast<int>(std::to_string(n_patients - 1).size());
  for (int i = 0; i < n_patients; ++i) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    auto& traj = cohort[static_cast<std::size_t>(i)];
    std::string id = std::to_string(i);
    traj.patient_id = "P" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(id.size()))), '0') + id;

    int s = sample_discrete(rng, mdp.start_distribution.data(), S);
    std::array<double, kFeatureCount> static_values{};
    for (std::size_t j = 0; j < kFeatureCount; ++j) {
      if (!mdp.patient_static[j]) continue;
      const std::size_t k = static_cast<std::size_t>(s) * kFeatureCount + j;
      static_values[j] = std::clamp(mdp.emission_mean[k] + mdp.emission_spread[k] * normal(rng), mdp.feature_lo[j],
                                    mdp.feature_hi[j]);
    }
    traj.latent_trace.push_back(s);
    const double rho = mdp.emission_autocorrelation;
    const double innovation = std::sqrt(1.0 - rho * rho);
    std::array<double, kFeatureCount> z{};
    for (int t = 0; t < mdp.horizon_max; ++t) {
      RawStep step;
      for (std::size_t j = 0; j < kFeatureCount; ++j) {
        if (mdp.patient_static[j]) {
          step.features[j] = static_values[j];
          continue;
        }
        const std::size_t k = static_cast<std::size_t>(s) * kFeatureCount + j;
        z[j] = t == 0 ? normal(rng) : rho * z[j] + innovation * normal(rng);
        step.features[j] = std::clamp(mdp.emission_mean[k] + mdp.emission_spread[k] * z[j],
                                      mdp.feature_lo[j], mdp.feature_hi[j]);
      }
      const int a = sample_discrete(rng, &mdp.behavior_policy_table[static_cast<std::size_t>(s * A)], A);
      step.iv_dose = draw_dose(rng, a / kBinsPerDrug, mdp.iv_dose_edges);
      step.vaso_dose = draw_dose(rng, a % kBinsPerDrug, mdp.vaso_dose_edges);
      traj.steps.push_back(step);
      traj.intended_actions.push_back(a);
      const int next = sample_discrete(rng, &mdp.transition_tensor[tindex(mdp, s, a, 0)], S);
      traj.latent_trace.push_back(next);
      if (mdp.is_absorbing(next)) {
        traj.outcome = next == mdp.death_state ? Outcome::non_survivor : Outcome::survivor;
        break;
      }
      if (t + 1 == mdp.horizon_max) {
        const double p = nn::sigmoid(mdp.mortality_logit_weights[static_cast<std::size_t>(next)]);
        traj.outcome = uni(rng) < p ? Outcome::non_survivor : Outcome::survivor;
        break;
      }
      s = next;
    }
  }
  return cohort;
}

// ---------------------------------------------------------------------------

double ExactValues::v(int t, int s) const {
  const auto row = stationary ? 0 : static_cast<std::size_t>(t);
  if (row >= state_value.size()) return 0.0;
  return state_value[row][static_cast<std::size_t>(s)];
}

double ExactValues::q(int t, int s, int a) const {
  const auto row = stationary ? 0 : static_cast<std::size_t>(t);
  if (row >= action_value.size()) return 0.0;
  return action_value[row][static_cast<std::size_t>(s * kActionCount + a)];
}

namespace {

void check_policy(const SimMDP& mdp, const PolicyTable& policy) {
  const auto S = static_cast<std::size_t>(mdp.latent_state_count);
  const auto A = static_cast<std::size_t>(mdp.action_count);
  if (policy.size() != S * A) throw UsageError("policy table must be [latent x 25]");
  for (std::size_t s = 0; s < S; ++s) {
    double sum = 0.0;
    for (std::size_t a = 0; a < A; ++a) {
      if (!(policy[s * A + a] >= 0.0)) throw UsageError("policy row " + std::to_string(s) + " has a negative entry");
      sum += policy[s * A + a];
    }
    if (std::abs(sum - 1.0) > 1e-9) throw UsageError("policy row " + std::to_string(s) + " does not sum to 1");
  }
}

// One Bellman expectation backup of `next_v` into Q and V.
void backup(const SimMDP& mdp, const PolicyTable& policy, double discount, const std::vector<double>& next_v,
            std::vector<double>& q, std::vector<double>& v) {
  const int S = mdp.latent_state_count;
  const int A = mdp.action_count;
  q.assign(static_cast<std::size_t>(S * A), 0.0);
  v.assign(static_cast<std::size_t>(S), 0.0);
  for (int s = 0; s < S; ++s) {
    if (mdp.is_absorbing(s)) continue;
    double vs = 0.0;
    for (int a = 0; a < A; ++a) {
      double qa = 0.0;
      for (int n = 0; n < S; ++n) {
        const double p = mdp.transition(s, a, n);
        if (p == 0.0) continue;
        const double cont = mdp.is_absorbing(n) ? 0.0 : next_v[static_cast<std::size_t>(n)];
        qa += p * (mdp.reward(s, a, n) + discount * cont);
      }
      q[static_cast<std::size_t>(s * A + a)] = qa;
      vs += policy[static_cast<std::size_t>(s * A + a)] * qa;
    }
    v[static_cast<std::size_t>(s)] = vs;
  }
}

}  // namespace

ExactValues exact_values(const SimMDP& mdp, const PolicyTable& policy, double discount) {
  mdp.validate();
  check_policy(mdp, policy);
  if (!(discount > 0.0 && discount <= 1.0)) throw UsageError("discount must lie in (0,1]");
  const auto S = static_cast<std::size_t>(mdp.latent_state_count);
  ExactValues out;
  if (mdp.horizon_max > 0) {
    const auto H = static_cast<std::size_t>(mdp.horizon_max);
    out.state_value.assign(H, {});
    out.action_value.assign(H, {});
    std::vector<double> next(S, 0.0);
    for (std::size_t t = H; t-- > 0;) {
      backup(mdp, policy, discount, next, out.action_value[t], out.state_value[t]);
      next = out.state_value[t];
    }
  } else {
    out.stationary = true;
    out.state_value.assign(1, std::vector<double>(S, 0.0));
    out.action_value.assign(1, {});
    std::vector<double> v(S, 0.0), q, fresh;
    bool converged = false;
    for (long sweep = 0; sweep < 1'000'000; ++sweep) {
      backup(mdp, policy, discount, v, q, fresh);
      double residual = 0.0;
      for (std::size_t s = 0; s < S; ++s) residual = std::max(residual, std::abs(fresh[s] - v[s]));
      v.swap(fresh);
      if (!std::isfinite(residual)) break;
      if (residual < 1e-12) {
        converged = true;
        break;
      }
    }
    if (!converged) throw NumericalError("policy evaluation did not converge within 10^6 sweeps");
    backup(mdp, policy, discount, v, q, fresh);
    out.state_value[0] = fresh;
    out.action_value[0] = q;
  }
  for (std::size_t s = 0; s < S; ++s) out.start_value += mdp.start_distribution[s] * out.state_value[0][s];
  return out;
}

double exact_policy_value(const SimMDP& mdp, const PolicyTable& policy, double discount) {
  return exact_values(mdp, policy, discount).start_value;
}

double exact_mortality_rate(const SimMDP& mdp) {
  mdp.validate();
  if (mdp.horizon_max < 1) throw ConfigError("exact_mortality_rate needs a finite horizon");
  const int S = mdp.latent_state_count;
  const int A = mdp.action_count;
  std::vector<double> dist = mdp.start_distribution;
  double death = 0.0;
  for (int t = 0; t < mdp.horizon_max; ++t) {
    std::vector<double> next(static_cast<std::size_t>(S), 0.0);
    for (int s = 0; s < S; ++s) {
      const double mass = dist[static_cast<std::size_t>(s)];
      if (mass == 0.0 || mdp.is_absorbing(s)) continue;
      for (int a = 0; a < A; ++a) {
        const double pa = mass * mdp.behavior(s, a);
        for (int n = 0; n < S; ++n) {
          const double p = pa * mdp.transition(s, a, n);
          if (n == mdp.death_state) {
            death += p;
          } else if (!mdp.is_absorbing(n)) {
            next[static_cast<std::size_t>(n)] += p;
          }
        }
      }
    }
    dist.swap(next);
  }
  for (int s = 0; s < S; ++s) {
    death += dist[static_cast<std::size_t>(s)] * nn::sigmoid(mdp.mortality_logit_weights[static_cast<std::size_t>(s)]);
  }
  return death;
}

double latent_return(const SimMDP& mdp, const RawTrajectory& trajectory, double discount) {
  if (trajectory.latent_trace.size() != trajectory.steps.size() + 1 ||
      trajectory.intended_actions.size() != trajectory.steps.size()) {
    throw UsageError("latent_return needs a simulator trajectory with latent trace");
  }
  double g = 0.0;
  double scale = 1.0;
  for (std::size_t t = 0; t < trajectory.steps.size(); ++t) {
    g += scale * mdp.reward(trajectory.latent_trace[t], trajectory.intended_actions[t], trajectory.latent_trace[t + 1]);
    scale *= discount;
  }
  return g;
}

PolicyTable uniform_policy(const SimMDP& mdp) {
  return PolicyTable(static_cast<std::size_t>(mdp.latent_state_count * mdp.action_count), 1.0 / mdp.action_count);
}

nlohmann::json ground_truth_json(const SimMDP& mdp, const std::vector<RawTrajectory>& cohort) {
  nlohmann::json patients = nlohmann::json::array();
  for (const auto& t : cohort) {
    patients.push_back({{"patient_id", t.patient_id},
                        {"latent_trace", t.latent_trace},
                        {"intended_actions", t.intended_actions},
                        {"outcome", static_cast<int>(t.outcome)}});
  }
  return {{"latent_state_count", mdp.latent_state_count},
          {"death_state", mdp.death_state},
          {"discharge_state", mdp.discharge_state},
          {"horizon_max", mdp.horizon_max},
          {"discount", mdp.discount},
          {"emission_autocorrelation", mdp.emission_autocorrelation},
          {"iv_dose_edges", mdp.iv_dose_edges},
          {"vaso_dose_edges", mdp.vaso_dose_edges},
          {"behavior_value", exact_policy_value(mdp, mdp.behavior_policy_table, mdp.discount)},
          {"mortality_rate", exact_mortality_rate(mdp)},
          {"patients", patients}};
}

}  // namespace moerl::sim
