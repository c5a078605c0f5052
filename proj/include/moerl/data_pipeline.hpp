#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "moerl/cohort_sim.hpp"
#include "moerl/types.hpp"

namespace moerl::data {

using sim::RawStep;
using sim::RawTrajectory;

/// One preprocessed 4-hour window; every value in [0,1].
struct Observation {
  std::array<double, kFeatureCount> values{};
};

/// Two-drug dose grid. Bin 0 is exactly zero dose; bins 1..4 are bounded
/// above by the edges (a dose equal to an edge goes to the lower bin).
struct ActionSpace {
  std::array<double, 4> iv_edges{};
  std::array<double, 4> vaso_edges{};

  static ActionSpace from_edges(const std::array<double, 4>& iv, const std::array<double, 4>& vaso);
  /// Throws ConfigError unless both edge lists are positive and strictly increasing.
  void validate() const;
  static int dose_bin(double dose, const std::array<double, 4>& edges);
};

nlohmann::json to_json(const ActionSpace& space);
ActionSpace action_space_from_json(const nlohmann::json& j);

struct ProcessedStep {
  Observation observation;
  int action = 0;
};

struct ProcessedTrajectory {
  std::string patient_id;
  std::vector<ProcessedStep> steps;
  Outcome outcome = Outcome::survivor;
};

struct FeatureStats {
  FeatureTransform transform = FeatureTransform::standardize;
  double mean = 0.0;    // standardized features only
  double stddev = 1.0;  // standardized features only
  double min = 0.0;     // post-transform, pre-rescale
  double max = 1.0;
  bool constant = false;  // mapped to 0.5
};

struct PreprocessStats {
  std::array<FeatureStats, kFeatureCount> features{};
  std::vector<std::string> warnings;

  /// Transformed-then-rescaled value of raw feature j, clamped to [0,1].
  double apply(int feature, double raw) const;
};

nlohmann::json to_json(const PreprocessStats& stats);
PreprocessStats preprocess_stats_from_json(const nlohmann::json& j);

/// Fits on training trajectories only: log(1+x) for the log group, z-scores
/// for the rest, then min/max bounds of the transformed values.
PreprocessStats fit_preprocess(const std::vector<RawTrajectory>& train);

/// Observations of one trajectory (no actions).
std::vector<Observation> apply_preprocess(const PreprocessStats& stats, const RawTrajectory& raw);

/// Quartile edges (25/50/75/100th percentile, linear interpolation) of the
/// nonzero doses of each drug.
ActionSpace fit_action_space(const std::vector<RawTrajectory>& train);

/// 5 * iv_bin + vaso_bin. Throws DataError on a negative dose.
int discretize_action(const ActionSpace& space, double iv, double vaso);

/// Observations plus discretized actions.
ProcessedTrajectory process(const PreprocessStats& stats, const ActionSpace& space, const RawTrajectory& raw);
std::vector<ProcessedTrajectory> process_all(const PreprocessStats& stats, const ActionSpace& space,
                                             const std::vector<RawTrajectory>& raw);

/// Patient-level split; round(ratio * n) patients (kept in [1, n-1] when
/// n >= 2) go to train. Both halves keep the input order.
template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_cohort(const std::vector<T>& cohort, double ratio,
                                                       std::uint64_t seed);

/// Indices selected for the training half by split_cohort.
std::vector<std::size_t> split_indices(std::size_t n, double ratio, std::uint64_t seed);

/// Linear-interpolated percentile of sorted values, q in [0,1].
double percentile(const std::vector<double>& sorted, double q);

// CSV interfaces -----------------------------------------------------------

/// Header: patient_id,t,f_00..f_44,iv_raw,vaso_raw,outcome (1 = non-survivor).
void write_cohort_csv(std::ostream& out, const std::vector<RawTrajectory>& cohort);
void write_cohort_csv(const std::filesystem::path& path, const std::vector<RawTrajectory>& cohort);
/// Rejects missing values, non-contiguous t, and inconsistent outcomes.
std::vector<RawTrajectory> read_cohort_csv(std::istream& in);
std::vector<RawTrajectory> read_cohort_csv(const std::filesystem::path& path);

/// Header: patient_id,t,o_00..o_44,action,outcome.
void write_processed_csv(const std::filesystem::path& path, const std::vector<ProcessedTrajectory>& cohort);
std::vector<ProcessedTrajectory> read_processed_csv(const std::filesystem::path& path);

// -------------------------------------------------------------------------

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_cohort(const std::vector<T>& cohort, double ratio,
                                                       std::uint64_t seed) {
  const auto train_idx = split_indices(cohort.size(), ratio, seed);
  std::vector<bool> in_train(cohort.size(), false);
  for (auto i : train_idx) in_train[i] = true;
  std::pair<std::vector<T>, std::vector<T>> out;
  for (std::size_t i = 0; i < cohort.size(); ++i) (in_train[i] ? out.first : out.second).push_back(cohort[i]);
  return out;
}

}  // namespace moerl::data
