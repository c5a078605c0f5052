#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "moerl/cohort_sim.hpp"
#include "moerl/data_pipeline.hpp"
#include "moerl/error.hpp"

using namespace moerl;
using namespace moerl::data;

namespace {

RawTrajectory constant_trajectory(const std::string& id, double value, int steps) {
  RawTrajectory t;
  t.patient_id = id;
  for (int k = 0; k < steps; ++k) {
    RawStep s;
    s.features.fill(value);
    s.iv_dose = 10.0;
    s.vaso_dose = 0.1;
    t.steps.push_back(s);
  }
  return t;
}

std::vector<RawTrajectory> sim_cohort(int n, std::uint64_t seed) {
  return sim::generate_cohort(sim::default_sepsis_mdp(), n, seed);
}

}  // namespace

TEST(Schema, FortyFiveFeaturesTenLogged) {
  auto cat = feature_catalog();
  ASSERT_EQ(cat.size(), 45u);
  int logs = 0;
  std::set<std::string> names;
  for (const auto& f : cat) {
    logs += f.transform == FeatureTransform::log;
    names.insert(std::string(f.name));
  }
  EXPECT_EQ(logs, 10);
  EXPECT_EQ(names.size(), 45u);
  EXPECT_EQ(feature_index("SOFA"), 27);
}

TEST(FitPreprocess, ConstantFeatureMapsToHalf) {
  std::vector<RawTrajectory> train{constant_trajectory("a", 3.0, 2), constant_trajectory("b", 3.0, 3)};
  auto stats = fit_preprocess(train);
  EXPECT_TRUE(stats.features[0].constant);
  EXPECT_FALSE(stats.warnings.empty());
  for (const auto& o : apply_preprocess(stats, train[0])) EXPECT_EQ(o.values[0], 0.5);
}

TEST(FitPreprocess, AffineSymmetry) {
  std::vector<RawTrajectory> train{constant_trajectory("a", 0.0, 1), constant_trajectory("b", 10.0, 1),
                                   constant_trajectory("c", 20.0, 1)};
  auto stats = fit_preprocess(train);
  const int hr = feature_index("HR");
  EXPECT_NEAR(stats.apply(hr, 0.0), 0.0, 1e-15);
  EXPECT_NEAR(stats.apply(hr, 10.0), 0.5, 1e-15);
  EXPECT_NEAR(stats.apply(hr, 20.0), 1.0, 1e-15);
}

TEST(FitPreprocess, TrainingSetSpansUnitInterval) {
  auto train = sim_cohort(400, 11);
  auto stats = fit_preprocess(train);
  for (int j = 0; j < kFeatureCount; ++j) {
    double lo = 1e9, hi = -1e9;
    for (const auto& t : train)
      for (const auto& o : apply_preprocess(stats, t)) {
        lo = std::min(lo, o.values[static_cast<std::size_t>(j)]);
        hi = std::max(hi, o.values[static_cast<std::size_t>(j)]);
      }
    EXPECT_NEAR(lo, 0.0, 1e-9) << j;
    EXPECT_NEAR(hi, 1.0, 1e-9) << j;
  }
}

TEST(FitPreprocess, NegativeLogFeatureNamesFeatureAndRow) {
  std::vector<RawTrajectory> train{constant_trajectory("a", 1.0, 2), constant_trajectory("b", 2.0, 2)};
  train[1].steps[1].features[static_cast<std::size_t>(feature_index("BUN"))] = -1.0;
  try {
    fit_preprocess(train);
    FAIL();
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("BUN"), std::string::npos);
    EXPECT_NE(msg.find("patient b step 1"), std::string::npos);
  }
}

TEST(FitPreprocess, RejectsTooFewAndMissing) {
  EXPECT_THROW(fit_preprocess({constant_trajectory("a", 1.0, 2)}), DataError);
  std::vector<RawTrajectory> train{constant_trajectory("a", 1.0, 2), constant_trajectory("b", 2.0, 2)};
  train[0].steps[0].features[3] = std::nan("");
  EXPECT_THROW(fit_preprocess(train), DataError);
}

TEST(ApplyPreprocess, IdempotentClampedAndBounded) {
  auto cohort = sim_cohort(600, 12);
  auto [train, test] = split_cohort(cohort, 0.75, 5);
  auto stats = fit_preprocess(train);
  auto a = apply_preprocess(stats, train[0]);
  auto b = apply_preprocess(stats, train[0]);
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k].values, b[k].values);

  RawTrajectory big = train[0];
  big.steps[0].features[static_cast<std::size_t>(feature_index("HR"))] = 1e6;
  EXPECT_EQ(apply_preprocess(stats, big)[0].values[static_cast<std::size_t>(feature_index("HR"))], 1.0);

  for (const auto& t : test)
    for (const auto& o : apply_preprocess(stats, t))
      for (double v : o.values) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
      }
}

TEST(ApplyPreprocess, MonotoneInStandardizedFeature) {
  auto stats = fit_preprocess(sim_cohort(200, 13));
  const int hr = feature_index("HR");
  double prev = -1.0;
  for (double x = 20; x < 250; x += 3.7) {
    const double v = stats.apply(hr, x);
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(ActionSpace, QuartilesOfUniformDoses) {
  std::vector<RawTrajectory> train(1);
  train[0].patient_id = "x";
  for (int d = 1; d <= 100; ++d) {
    RawStep s;
    s.iv_dose = d;
    s.vaso_dose = d * 0.01;
    train[0].steps.push_back(s);
  }
  auto space = fit_action_space(train);
  EXPECT_NEAR(space.iv_edges[0], 25.75, 1e-12);
  EXPECT_NEAR(space.iv_edges[1], 50.5, 1e-12);
  EXPECT_NEAR(space.iv_edges[2], 75.25, 1e-12);
  EXPECT_NEAR(space.iv_edges[3], 100.0, 1e-12);
  EXPECT_EQ(discretize_action(space, 0, 0), 0);
  EXPECT_EQ(discretize_action(space, 100, 1.0), 24);
  EXPECT_EQ(discretize_action(space, 1e5, 1e5), 24);
  const int a = discretize_action(space, 0, space.vaso_edges[1]);
  EXPECT_GE(a, 1);
  EXPECT_LE(a, 4);
  EXPECT_EQ(discretize_action(space, space.iv_edges[0], 0), 5);
  EXPECT_THROW(discretize_action(space, -1, 0), DataError);
}

TEST(ActionSpace, AllZeroDrugIsConfigError) {
  std::vector<RawTrajectory> train(1);
  train[0].patient_id = "x";
  RawStep s;
  s.iv_dose = 10;
  train[0].steps.push_back(s);
  EXPECT_THROW(fit_action_space(train), ConfigError);
}

TEST(ActionSpace, SimulatorDosesRoundTrip) {
  auto mdp = sim::default_sepsis_mdp();
  auto cohort = sim::generate_cohort(mdp, 1000, 14);
  auto space = ActionSpace::from_edges(mdp.iv_dose_edges, mdp.vaso_dose_edges);
  std::size_t n = 0;
  for (const auto& t : cohort)
    for (std::size_t k = 0; k < t.steps.size(); ++k, ++n)
      ASSERT_EQ(discretize_action(space, t.steps[k].iv_dose, t.steps[k].vaso_dose), t.intended_actions[k]);
  EXPECT_GT(n, 1000u);
}

TEST(ActionSpace, MonotoneGrid) {
  auto space = ActionSpace::from_edges({1, 2, 3, 4}, {0.1, 0.2, 0.3, 0.4});
  for (double iv = 0; iv < 5; iv += 0.25)
    for (double v = 0; v < 0.5; v += 0.025) {
      const int a = discretize_action(space, iv, v);
      EXPECT_LE(a, discretize_action(space, iv + 0.25, v));
      EXPECT_LE(a, discretize_action(space, iv, v + 0.025));
    }
  EXPECT_THROW(ActionSpace::from_edges({1, 1, 3, 4}, {0.1, 0.2, 0.3, 0.4}), ConfigError);
}

TEST(Split, SizesAndDeterminism) {
  auto cohort = sim_cohort(100, 15);
  auto [train, test] = split_cohort(cohort, 0.75, 3);
  EXPECT_EQ(train.size(), 75u);
  EXPECT_EQ(test.size(), 25u);
  std::set<std::string> ids;
  for (const auto& t : train) ids.insert(t.patient_id);
  for (const auto& t : test) EXPECT_EQ(ids.count(t.patient_id), 0u);
  EXPECT_EQ(split_indices(100, 0.75, 3), split_indices(100, 0.75, 3));
  auto two = sim_cohort(2, 1);
  auto [a, b] = split_cohort(two, 0.5, 9);
  EXPECT_EQ(a.size(), 1u);
  EXPECT_EQ(b.size(), 1u);
  EXPECT_THROW(split_indices(0, 0.75, 1), DataError);
  EXPECT_THROW(split_indices(10, 1.0, 1), ConfigError);
}

TEST(Csv, RoundTripIsExact) {
  auto cohort = sim_cohort(20, 16);
  std::stringstream ss;
  write_cohort_csv(ss, cohort);
  auto back = read_cohort_csv(ss);
  ASSERT_EQ(back.size(), cohort.size());
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    EXPECT_EQ(back[i].patient_id, cohort[i].patient_id);
    EXPECT_EQ(back[i].outcome, cohort[i].outcome);
    ASSERT_EQ(back[i].steps.size(), cohort[i].steps.size());
    for (std::size_t k = 0; k < cohort[i].steps.size(); ++k) {
      EXPECT_EQ(back[i].steps[k].features, cohort[i].steps[k].features);
      EXPECT_EQ(back[i].steps[k].iv_dose, cohort[i].steps[k].iv_dose);
    }
  }
}

TEST(Csv, RejectsBadRows) {
  auto cohort = sim_cohort(2, 17);
  std::stringstream ss;
  write_cohort_csv(ss, cohort);
  std::string text = ss.str();
  {
    std::string missing = text;
    const auto pos = missing.find('\n') + 1;
    const auto comma = missing.find(',', missing.find(',', pos) + 1);
    missing.erase(comma + 1, missing.find(',', comma + 1) - comma - 1);
    std::stringstream in(missing);
    EXPECT_THROW(read_cohort_csv(in), DataError);
  }
  {
    std::stringstream in("patient_id,t\n");
    EXPECT_THROW(read_cohort_csv(in), DataError);
  }
}
