#include "moerl/kernel_policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "moerl/error.hpp"

namespace moerl {

namespace {

void require_prefix(std::span<const Neighbor> neighbors, int k) {
  if (k <= 0 || static_cast<std::size_t>(k) > neighbors.size()) {
    throw UsageError("k = " + std::to_string(k) + " but only " + std::to_string(neighbors.size()) +
                     " neighbors were retrieved");
  }
}

}  // namespace

PolicyDistribution kernel_policy(const NeighborIndex& index, std::span<const Neighbor> neighbors, int k) {
  require_prefix(neighbors, k);
  std::array<int, kActionCount> survivors{};
  std::array<int, kActionCount> all{};
  int n_survivors = 0;
  for (int j = 0; j < k; ++j) {
    const auto& e = index.entry(neighbors[static_cast<std::size_t>(j)].index);
    ++all[static_cast<std::size_t>(e.action)];
    if (e.outcome == Outcome::survivor) {
      ++survivors[static_cast<std::size_t>(e.action)];
      ++n_survivors;
    }
  }
  const auto& counts = n_survivors > 0 ? survivors : all;
  const double n = n_survivors > 0 ? n_survivors : k;
  PolicyDistribution p;
  for (int a = 0; a < kActionCount; ++a) p[a] = counts[static_cast<std::size_t>(a)] / n;
  return p;
}

PolicyDistribution kernel_policy(const NeighborIndex& index, const nn::Vector& state, int k) {
  return kernel_policy(index, index.query(state, k), k);
}

PolicyDistribution behavior_policy(const NeighborIndex& index, std::span<const Neighbor> neighbors, int k,
                                   double smoothing) {
  require_prefix(neighbors, k);
  if (!(smoothing >= 0.0)) throw ConfigError("behavior smoothing must be >= 0");
  std::array<int, kActionCount> counts{};
  for (int j = 0; j < k; ++j) ++counts[static_cast<std::size_t>(index.entry(neighbors[static_cast<std::size_t>(j)].index).action)];
  const double denom = 1.0 + kActionCount * smoothing;
  PolicyDistribution p;
  for (int a = 0; a < kActionCount; ++a) {
    p[a] = (static_cast<double>(counts[static_cast<std::size_t>(a)]) / k + smoothing) / denom;
  }
  return p;
}

PolicyDistribution behavior_policy(const NeighborIndex& index, const nn::Vector& state, int k, double smoothing) {
  return behavior_policy(index, index.query(state, k), k, smoothing);
}

PolicyDistribution restrict_actions(const PolicyDistribution& policy, const PolicyDistribution& behavior,
                                    double threshold) {
  PolicyDistribution out;
  double total = 0.0;
  for (int a = 0; a < kActionCount; ++a) {
    if (behavior[a] >= threshold) {
      out[a] = std::max(policy[a], 0.0);
      total += out[a];
    }
  }
  if (!(total > 0.0)) return PolicyDistribution::point_mass(behavior.argmax());
  for (auto& p : out.probs) p /= total;
  return out;
}

std::vector<int> default_k_candidates() {
  std::vector<int> ks;
  for (int k = 200; k <= 500; k += 50) ks.push_back(k);
  return ks;
}

int cross_validate_k(const std::vector<int>& candidates, const std::function<double(int)>& objective,
                     std::vector<double>* scores) {
  if (candidates.empty()) throw UsageError("cross_validate_k needs at least one candidate");
  std::vector<double> values;
  values.reserve(candidates.size());
  for (int k : candidates) values.push_back(objective(k));
  if (scores) *scores = values;

  const auto better = [&](std::size_t i, std::size_t best) {
    const double a = values[i];
    const double b = values[best];
    if (!std::isfinite(a)) return false;
    if (!std::isfinite(b)) return true;
    const double tol = 1e-12 * std::max(1.0, std::max(std::abs(a), std::abs(b)));
    if (a > b + tol) return true;
    if (a < b - tol) return false;
    const int da = std::abs(candidates[i] - kDefaultNeighbors);
    const int db = std::abs(candidates[best] - kDefaultNeighbors);
    return da < db || (da == db && candidates[i] < candidates[best]);
  };
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    if (better(i, best)) best = i;
  }
  return candidates[best];
}

}  // namespace moerl
