#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace moerl {

inline constexpr int kFeatureCount = 45;
inline constexpr int kBinsPerDrug = 5;
inline constexpr int kActionCount = kBinsPerDrug * kBinsPerDrug;
inline constexpr int kEncodedDim = 128;

enum class Outcome : std::uint8_t { survivor = 0, non_survivor = 1 };

enum class FeatureTransform : std::uint8_t { standardize, log };

struct FeatureInfo {
  std::string_view name;
  FeatureTransform transform;
};

/// The 45 observation columns, in CSV order (f_00..f_44).
///
/// The standardized group comes first, then the log-transformed group. Three
/// attributes of the clinical attribute table are not observation columns:
/// max_dose_vaso and input_4hourly_tev are the treatments themselves (carried
/// as vaso_raw/iv_raw), and Ionised_Ca duplicates Calcium.
std::span<const FeatureInfo, kFeatureCount> feature_catalog();

/// Column index of a feature name; throws DataError for unknown names.
int feature_index(std::string_view name);

/// Probability vector over the 25 discrete treatments.
struct PolicyDistribution {
  std::array<double, kActionCount> probs{};

  static PolicyDistribution uniform();
  static PolicyDistribution point_mass(int action);

  double operator[](int action) const { return probs[static_cast<std::size_t>(action)]; }
  double& operator[](int action) { return probs[static_cast<std::size_t>(action)]; }

  double sum() const;
  /// Lowest index among maximal entries.
  int argmax() const;
  /// Nonnegative entries summing to 1 within tol.
  bool is_valid(double tol = 1e-9) const;
  /// Throws NumericalError if !is_valid(tol).
  void validate(double tol = 1e-9) const;
};

/// Deterministic 64-bit mixing (splitmix64 finalizer). Used to derive
/// independent RNG stream seeds from (seed, index) pairs.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace moerl
