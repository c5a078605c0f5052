#include "moerl/types.hpp"

#include <algorithm>
#include <cmath>

#include "moerl/error.hpp"

namespace moerl {

namespace {

constexpr FeatureTransform kStd = FeatureTransform::standardize;
constexpr FeatureTransform kLog = FeatureTransform::log;

constexpr std::array<FeatureInfo, kFeatureCount> kCatalog{{
    {"age", kStd},
    {"Weight_kg", kStd},
    {"GCS", kStd},
    {"HR", kStd},
    {"SysBP", kStd},
    {"MeanBP", kStd},
    {"DiaBP", kStd},
    {"RR", kStd},
    {"Temp_C", kStd},
    {"FiO2_1", kStd},
    {"Potassium", kStd},
    {"Sodium", kStd},
    {"Chloride", kStd},
    {"Glucose", kStd},
    {"Magnesium", kStd},
    {"Calcium", kStd},
    {"Hb", kStd},
    {"WBC_count", kStd},
    {"Platelets_count", kStd},
    {"PTT", kStd},
    {"PT", kStd},
    {"Arterial_pH", kStd},
    {"paO2", kStd},
    {"paCO2", kStd},
    {"Arterial_BE", kStd},
    {"HCO3", kStd},
    {"Arterial_lactate", kStd},
    {"SOFA", kStd},
    {"SIRS", kStd},
    {"Shock_Index", kStd},
    {"PaO2_FiO2", kStd},
    {"cumulated_balance_tev", kStd},
    {"Elixhauser", kStd},
    {"Albumin", kStd},
    {"CO2_mEqL", kStd},
    {"SpO2", kLog},
    {"BUN", kLog},
    {"Creatinine", kLog},
    {"SGOT", kLog},
    {"SGPT", kLog},
    {"Total_bili", kLog},
    {"INR", kLog},
    {"input_total_tev", kLog},
    {"output_total", kLog},
    {"output_4hourly", kLog},
}};

}  // namespace

std::span<const FeatureInfo, kFeatureCount> feature_catalog() { return kCatalog; }

int feature_index(std::string_view name) {
  for (int i = 0; i < kFeatureCount; ++i) {
    if (kCatalog[static_cast<std::size_t>(i)].name == name) return i;
  }
  throw DataError("unknown feature name '" + std::string(name) + "'");
}

PolicyDistribution PolicyDistribution::uniform() {
  PolicyDistribution d;
  d.probs.fill(1.0 / kActionCount);
  return d;
}

PolicyDistribution PolicyDistribution::point_mass(int action) {
  if (action < 0 || action >= kActionCount) {
    throw UsageError("action index " + std::to_string(action) + " outside [0,24]");
  }
  PolicyDistribution d;
  d[action] = 1.0;
  return d;
}

double PolicyDistribution::sum() const {
  double s = 0.0;
  for (double p : probs) s += p;
  return s;
}

int PolicyDistribution::argmax() const {
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

bool PolicyDistribution::is_valid(double tol) const {
  for (double p : probs) {
    if (!std::isfinite(p) || p < 0.0) return false;
  }
  return std::abs(sum() - 1.0) <= tol;
}

void PolicyDistribution::validate(double tol) const {
  if (!is_valid(tol)) {
    throw NumericalError("invalid policy distribution (sum " + std::to_string(sum()) + ")");
  }
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace moerl
