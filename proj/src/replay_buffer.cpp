#include "moerl/replay_buffer.hpp"

#include <algorithm>
#include <cmath>

#include "moerl/error.hpp"

namespace moerl {

void ReplayConfig::validate() const {
  if (!(alpha >= 0.0)) throw ConfigError("dqn.replay.alpha must be >= 0");
  if (!(beta_start >= 0.0 && beta_start <= 1.0)) throw ConfigError("dqn.replay.beta_start must be in [0,1]");
  if (!(beta_end >= 0.0 && beta_end <= 1.0)) throw ConfigError("dqn.replay.beta_end must be in [0,1]");
  if (!(priority_floor > 0.0)) throw ConfigError("dqn.replay.priority_floor must be > 0");
}

SumTree::SumTree(std::size_t capacity) : size_(capacity) {
  leaves_ = 1;
  while (leaves_ < capacity) leaves_ *= 2;
  tree_.assign(2 * leaves_, 0.0);
}

void SumTree::set(std::size_t i, double value) {
  if (i >= size_) throw UsageError("sum tree index out of range");
  std::size_t node = leaves_ + i;
  tree_[node] = value;
  for (node /= 2; node >= 1; node /= 2) tree_[node] = tree_[2 * node] + tree_[2 * node + 1];
}

std::size_t SumTree::find(double mass) const {
  std::size_t node = 1;
  while (node < leaves_) {
    const double left = tree_[2 * node];
    if (mass < left || tree_[2 * node + 1] <= 0.0) {
      node = 2 * node;
    } else {
      mass -= left;
      node = 2 * node + 1;
    }
  }
  std::size_t i = node - leaves_;
  while (i > 0 && (i >= size_ || tree_[leaves_ + i] <= 0.0)) --i;
  return i;
}

PrioritizedReplay::PrioritizedReplay(std::size_t size, ReplayConfig config) : config_(config), tree_(size) {
  config_.validate();
  if (size == 0) throw UsageError("replay buffer needs at least one transition");
  for (std::size_t i = 0; i < size; ++i) tree_.set(i, 1.0);
}

double PrioritizedReplay::beta(double progress) const {
  progress = std::clamp(progress, 0.0, 1.0);
  return config_.beta_start + (config_.beta_end - config_.beta_start) * progress;
}

PrioritizedReplay::Batch PrioritizedReplay::sample(std::size_t batch, double progress, std::mt19937_64& rng) const {
  Batch out;
  out.indices.reserve(batch);
  out.weights.reserve(batch);
  const double total = tree_.total();
  const double segment = total / static_cast<double>(batch);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double b = beta(progress);
  const double n = static_cast<double>(tree_.size());
  double max_w = 0.0;
  for (std::size_t j = 0; j < batch; ++j) {
    const double mass = segment * (static_cast<double>(j) + u(rng));
    const auto i = tree_.find(std::min(mass, std::nextafter(total, 0.0)));
    const double w = std::pow(n * probability(i), -b);
    out.indices.push_back(i);
    out.weights.push_back(w);
    max_w = std::max(max_w, w);
  }
  for (auto& w : out.weights) w /= max_w;
  return out;
}

void PrioritizedReplay::update(const std::vector<std::size_t>& indices, const std::vector<double>& td_errors) {
  if (indices.size() != td_errors.size()) throw UsageError("replay update: index and error counts differ");
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const double p = std::pow(std::max(std::abs(td_errors[j]), config_.priority_floor), config_.alpha);
    tree_.set(indices[j], p);
  }
}

}  // namespace moerl
