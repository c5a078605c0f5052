#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "moerl/data_pipeline.hpp"
#include "moerl/nn/activation.hpp"
#include "moerl/types.hpp"

namespace moerl {

struct NeighborEntry {
  int action = 0;
  Outcome outcome = Outcome::survivor;
  std::string patient_id;
  int t = 0;
};

struct Neighbor {
  std::size_t index = 0;  // position in the index
  double distance = 0.0;  // Euclidean
};

/// Exact k-NN over training states. Results are ordered by
/// (distance, patient_id, t), so duplicates come back in a fixed order.
/// Immutable after construction; concurrent queries are safe.
class NeighborIndex {
 public:
  NeighborIndex() = default;
  /// `states` holds one column per entry. UsageError when empty, ShapeError on
  /// a count mismatch.
  NeighborIndex(nn::Matrix states, std::vector<NeighborEntry> entries);

  std::size_t size() const { return entries_.size(); }
  int dim() const { return static_cast<int>(states_.rows()); }
  const nn::Matrix& states() const { return states_; }
  const NeighborEntry& entry(std::size_t i) const { return entries_.at(i); }
  const std::vector<NeighborEntry>& entries() const { return entries_; }

  /// The k nearest entries, skipping those of `exclude_patient` when it is not
  /// empty. UsageError if k exceeds the number of eligible entries.
  std::vector<Neighbor> query(const nn::Vector& q, int k, std::string_view exclude_patient = {}) const;

 private:
  nn::Matrix states_;
  std::vector<NeighborEntry> entries_;
  std::vector<std::string> patients_;          // sorted unique ids
  std::vector<std::uint32_t> patient_rank_;    // per entry
  std::vector<std::size_t> patient_entries_;   // entry count per rank
};

/// One entry per step of every trajectory; encoded[i] is (dim x T_i).
NeighborIndex build_neighbor_index(const std::vector<nn::Matrix>& encoded,
                                   const std::vector<data::ProcessedTrajectory>& cohort);

/// Checkpoint with the state table as one block and the metadata in the header.
void save_neighbor_index(const std::filesystem::path& path, const NeighborIndex& index);
NeighborIndex load_neighbor_index(const std::filesystem::path& path);

}  // namespace moerl
