#pragma once

#include <functional>
#include <span>
#include <vector>

#include "moerl/neighbor_index.hpp"
#include "moerl/types.hpp"

namespace moerl {

inline constexpr int kDefaultNeighbors = 300;
inline constexpr double kBehaviorSmoothing = 1e-3;
inline constexpr double kRestrictionThreshold = 0.01;

/// Action frequencies among the survivors of the first k neighbors, or among
/// all k when none of them survived. `neighbors` must hold at least k entries.
PolicyDistribution kernel_policy(const NeighborIndex& index, std::span<const Neighbor> neighbors, int k);
PolicyDistribution kernel_policy(const NeighborIndex& index, const nn::Vector& state, int k = kDefaultNeighbors);

/// Action frequencies of the first k neighbors with add-epsilon smoothing:
/// (freq + eps) / (1 + 25 eps).
PolicyDistribution behavior_policy(const NeighborIndex& index, std::span<const Neighbor> neighbors, int k,
                                   double smoothing = kBehaviorSmoothing);
PolicyDistribution behavior_policy(const NeighborIndex& index, const nn::Vector& state, int k = kDefaultNeighbors,
                                   double smoothing = kBehaviorSmoothing);

/// Zeroes actions whose behavior probability is below the threshold and
/// renormalizes; a point mass on the behavior argmax if nothing survives.
PolicyDistribution restrict_actions(const PolicyDistribution& policy, const PolicyDistribution& behavior,
                                    double threshold = kRestrictionThreshold);

/// 200, 250, ..., 500.
std::vector<int> default_k_candidates();

/// Candidate with the highest objective; ties (within 1e-12 relative) go to
/// the candidate closest to 300, then the smaller one. `scores`, if given,
/// receives the objective per candidate.
int cross_validate_k(const std::vector<int>& candidates, const std::function<double(int)>& objective,
                     std::vector<double>* scores = nullptr);

}  // namespace moerl
