#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "moerl/cohort_sim.hpp"
#include "moerl/data_pipeline.hpp"
#include "moerl/error.hpp"

using namespace moerl;
using namespace moerl::sim;

namespace {

std::string serialize(const std::vector<RawTrajectory>& c) {
  std::ostringstream out;
  data::write_cohort_csv(out, c);
  for (const auto& t : c) {
    for (int s : t.latent_trace) out << s << ' ';
    out << '\n';
  }
  return out.str();
}

// Expected discounted reward over every (action, next-state) path of length <= H.
double enumerate_paths(const SimMDP& m, const PolicyTable& pi, int s, int depth, double discount) {
  if (depth == m.horizon_max || m.is_absorbing(s)) return 0.0;
  double total = 0.0;
  for (int a = 0; a < m.action_count; ++a) {
    const double pa = pi[static_cast<std::size_t>(s * m.action_count + a)];
    if (pa == 0.0) continue;
    for (int n = 0; n < m.latent_state_count; ++n) {
      const double p = m.transition(s, a, n);
      if (p == 0.0) continue;
      total += pa * p * (m.reward(s, a, n) + discount * enumerate_paths(m, pi, n, depth + 1, discount));
    }
  }
  return total;
}

SimMDP single_state_mdp(double r, double discount) {
  SimMDP m;
  m.latent_state_count = 1;
  m.horizon_max = 0;
  m.discount = discount;
  m.transition_tensor.assign(kActionCount, 1.0);
  m.reward_table.assign(kActionCount, r);
  m.behavior_policy_table.assign(kActionCount, 1.0 / kActionCount);
  m.start_distribution = {1.0};
  m.mortality_logit_weights = {0.0};
  m.emission_mean.assign(kFeatureCount, 1.0);
  m.emission_spread.assign(kFeatureCount, 0.0);
  return m;
}

}  // namespace

TEST(DefaultMdp, Validates) {
  auto m = default_sepsis_mdp();
  EXPECT_NO_THROW(m.validate());
  EXPECT_EQ(m.latent_state_count, 8);
  EXPECT_EQ(m.action_count, 25);
}

TEST(GenerateCohort, SameSeedIsByteIdentical) {
  auto m = default_sepsis_mdp();
  EXPECT_EQ(serialize(generate_cohort(m, 10, 7)), serialize(generate_cohort(m, 10, 7)));
  EXPECT_NE(serialize(generate_cohort(m, 10, 7)), serialize(generate_cohort(m, 10, 8)));
}

TEST(GenerateCohort, CardinalityAndLengths) {
  auto m = default_sepsis_mdp();
  auto c = generate_cohort(m, 2000, 1);
  ASSERT_EQ(c.size(), 2000u);
  for (const auto& t : c) {
    EXPECT_GE(t.steps.size(), 1u);
    EXPECT_LE(t.steps.size(), static_cast<std::size_t>(m.horizon_max));
    EXPECT_EQ(t.latent_trace.size(), t.steps.size() + 1);
    EXPECT_EQ(t.intended_actions.size(), t.steps.size());
  }
}

TEST(GenerateCohort, FeaturesInsideClipRange) {
  auto m = default_sepsis_mdp();
  for (const auto& t : generate_cohort(m, 300, 4)) {
    for (const auto& s : t.steps) {
      for (std::size_t j = 0; j < kFeatureCount; ++j) {
        ASSERT_GE(s.features[j], m.feature_lo[j]);
        ASSERT_LE(s.features[j], m.feature_hi[j]);
      }
      EXPECT_GE(s.iv_dose, 0.0);
      EXPECT_GE(s.vaso_dose, 0.0);
    }
  }
}

TEST(GenerateCohort, EmissionNoiseAutocorrelationKeepsMarginal) {
  auto m = default_sepsis_mdp();
  const std::size_t hr = 3;  // never clipped
  double n = 0, sz = 0, szz = 0, pairs = 0, lag = 0, lag_a = 0, lag_b = 0, lag_aa = 0, lag_bb = 0;
  const auto z_of = [&](int s, double x) {
    const auto k = static_cast<std::size_t>(s) * kFeatureCount + hr;
    return (x - m.emission_mean[k]) / m.emission_spread[k];
  };
  for (const auto& t : generate_cohort(m, 3000, 9)) {
    for (std::size_t k = 0; k < t.steps.size(); ++k) {
      const double z = z_of(t.latent_trace[k], t.steps[k].features[hr]);
      n += 1;
      sz += z;
      szz += z * z;
      if (k == 0) continue;
      const double prev = z_of(t.latent_trace[k - 1], t.steps[k - 1].features[hr]);
      pairs += 1;
      lag += prev * z;
      lag_a += prev;
      lag_b += z;
      lag_aa += prev * prev;
      lag_bb += z * z;
    }
  }
  EXPECT_NEAR(sz / n, 0.0, 0.03);
  EXPECT_NEAR(std::sqrt(szz / n - (sz / n) * (sz / n)), 1.0, 0.03);
  const double cov = lag / pairs - (lag_a / pairs) * (lag_b / pairs);
  const double corr = cov / std::sqrt((lag_aa / pairs - std::pow(lag_a / pairs, 2)) * (lag_bb / pairs - std::pow(lag_b / pairs, 2)));
  EXPECT_NEAR(corr, m.emission_autocorrelation, 0.03);

  m.emission_autocorrelation = 1.0;
  EXPECT_THROW(m.validate(), ConfigError);
}

TEST(GenerateCohort, MortalityMatchesAbsorptionOracle) {
  auto m = default_sepsis_mdp();
  const double exact = exact_mortality_rate(m);
  EXPECT_NEAR(exact, 0.12, 0.01);
  auto c = generate_cohort(m, 20000, 3);
  double deaths = 0;
  for (const auto& t : c) deaths += t.outcome == Outcome::non_survivor ? 1 : 0;
  EXPECT_NEAR(deaths / 20000.0, exact, 0.02);
}

TEST(GenerateCohort, RowSumViolationNamesRow) {
  auto m = default_sepsis_mdp();
  m.transition_tensor[static_cast<std::size_t>((2 * 25 + 4) * 8 + 3)] += 0.01;
  try {
    generate_cohort(m, 1, 0);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("state 2, action 4"), std::string::npos);
  }
}

TEST(ExactValue, ZeroRewardIsZero) {
  auto m = default_sepsis_mdp();
  m.reward_table.clear();
  EXPECT_EQ(exact_policy_value(m, m.behavior_policy_table, 0.99), 0.0);
}

TEST(ExactValue, SingleStateGeometricSeries) {
  auto m = single_state_mdp(2.0, 0.9);
  EXPECT_NEAR(exact_policy_value(m, uniform_policy(m), 0.9), 2.0 / (1 - 0.9), 1e-9);
}

TEST(ExactValue, NonConvergenceIsNumericalError) {
  auto m = single_state_mdp(1.0, 1.0);
  EXPECT_THROW(exact_policy_value(m, uniform_policy(m), 1.0), NumericalError);
}

TEST(ExactValue, MatchesPathEnumeration) {
  auto m = chain_mdp(4, 4, 21);
  ASSERT_EQ(m.latent_state_count, 6);
  const auto pi = uniform_policy(m);
  double brute = 0.0;
  for (int s = 0; s < m.latent_state_count; ++s) {
    const double p0 = m.start_distribution[static_cast<std::size_t>(s)];
    if (p0 > 0.0) brute += p0 * enumerate_paths(m, pi, s, 0, m.discount);
  }
  EXPECT_NEAR(exact_policy_value(m, pi, m.discount), brute, 1e-12);
}

TEST(ExactValue, MonteCarloWithinThreeStandardErrors) {
  auto m = chain_mdp(4, 10, 5);
  const double exact = exact_policy_value(m, m.behavior_policy_table, m.discount);
  auto c = generate_cohort(m, 20000, 17);
  double sum = 0, sq = 0;
  for (const auto& t : c) {
    const double g = latent_return(m, t, m.discount);
    sum += g;
    sq += g * g;
  }
  const double n = static_cast<double>(c.size());
  const double mean = sum / n;
  const double se = std::sqrt((sq / n - mean * mean) / n);
  EXPECT_LT(std::abs(mean - exact), 3 * se);
}

TEST(ExactValue, DeterministicAndStationaryAgreeForLongHorizon) {
  auto m = chain_mdp(3, 0, 9);
  auto stationary = exact_policy_value(m, uniform_policy(m), m.discount);
  EXPECT_EQ(stationary, exact_policy_value(m, uniform_policy(m), m.discount));
  m.horizon_max = 2000;
  EXPECT_NEAR(exact_policy_value(m, uniform_policy(m), m.discount), stationary, 1e-10);
}

TEST(Seeds, DisjointSeedsUncorrelatedStarts) {
  auto m = default_sepsis_mdp();
  auto a = generate_cohort(m, 4000, 100);
  auto b = generate_cohort(m, 4000, 101);
  double sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i].latent_trace[0], y = b[i].latent_trace[0];
    sa += x;
    sb += y;
    sab += x * y;
    saa += x * x;
    sbb += y * y;
  }
  const double n = 4000;
  const double cov = sab / n - sa / n * sb / n;
  const double corr = cov / std::sqrt((saa / n - sa * sa / n / n) * (sbb / n - sb * sb / n / n));
  EXPECT_LT(std::abs(corr), 4.0 / std::sqrt(n));
}

TEST(GroundTruth, SidecarFields) {
  auto m = default_sepsis_mdp();
  auto c = generate_cohort(m, 5, 2);
  auto j = ground_truth_json(m, c);
  EXPECT_EQ(j.at("patients").size(), 5u);
  EXPECT_NEAR(j.at("mortality_rate").get<double>(), exact_mortality_rate(m), 1e-15);
}
