#pragma once

#include <cstddef>
#include <random>
#include <vector>

namespace moerl {

struct ReplayConfig {
  double alpha = 0.6;
  double beta_start = 0.4;
  double beta_end = 1.0;
  double priority_floor = 1e-6;

  void validate() const;
};

/// Binary sum tree over a fixed number of leaves.
class SumTree {
 public:
  explicit SumTree(std::size_t capacity = 0);

  std::size_t size() const { return size_; }
  double total() const { return tree_.empty() ? 0.0 : tree_[1]; }
  double get(std::size_t i) const { return tree_[leaves_ + i]; }
  void set(std::size_t i, double value);
  /// Leaf whose cumulative range contains `mass` (clamped to the last
  /// nonzero leaf when rounding overshoots).
  std::size_t find(double mass) const;

 private:
  std::size_t size_ = 0;
  std::size_t leaves_ = 0;
  std::vector<double> tree_;
};

/// Prioritized sampling over a fixed transition set; every entry starts at
/// priority 1.
class PrioritizedReplay {
 public:
  PrioritizedReplay(std::size_t size, ReplayConfig config);

  struct Batch {
    std::vector<std::size_t> indices;
    std::vector<double> weights;  // importance corrections, max 1 within the batch
  };

  /// Stratified draw of `batch` indices. `progress` in [0,1] anneals beta.
  Batch sample(std::size_t batch, double progress, std::mt19937_64& rng) const;
  /// priority = max(|td|, floor) ^ alpha
  void update(const std::vector<std::size_t>& indices, const std::vector<double>& td_errors);

  double probability(std::size_t i) const { return tree_.get(i) / tree_.total(); }
  double beta(double progress) const;
  std::size_t size() const { return tree_.size(); }

 private:
  ReplayConfig config_;
  SumTree tree_;
};

}  // namespace moerl
