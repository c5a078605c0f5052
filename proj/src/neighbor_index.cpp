#include "moerl/neighbor_index.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moerl/error.hpp"
#include "moerl/nn/checkpoint.hpp"

namespace moerl {

NeighborIndex::NeighborIndex(nn::Matrix states, std::vector<NeighborEntry> entries)
    : states_(std::move(states)), entries_(std::move(entries)) {
  if (entries_.empty()) throw UsageError("neighbor index needs at least one entry");
  if (static_cast<std::size_t>(states_.cols()) != entries_.size()) {
    throw ShapeError("neighbor index: " + std::to_string(states_.cols()) + " states for " +
                     std::to_string(entries_.size()) + " entries");
  }
  for (const auto& e : entries_) {
    if (e.action < 0 || e.action >= kActionCount) throw DataError("neighbor index: action out of range");
    patients_.push_back(e.patient_id);
  }
  std::sort(patients_.begin(), patients_.end());
  patients_.erase(std::unique(patients_.begin(), patients_.end()), patients_.end());
  patient_entries_.assign(patients_.size(), 0);
  patient_rank_.reserve(entries_.size());
  for (const auto& e : entries_) {
    const auto rank = static_cast<std::uint32_t>(
        std::lower_bound(patients_.begin(), patients_.end(), e.patient_id) - patients_.begin());
    patient_rank_.push_back(rank);
    ++patient_entries_[rank];
  }
}

std::vector<Neighbor> NeighborIndex::query(const nn::Vector& q, int k, std::string_view exclude_patient) const {
  if (q.size() != states_.rows()) {
    throw ShapeError("neighbor query has dimension " + std::to_string(q.size()) + ", index has " +
                     std::to_string(states_.rows()));
  }
  std::int64_t excluded = -1;
  std::size_t eligible = size();
  if (!exclude_patient.empty()) {
    const auto it = std::lower_bound(patients_.begin(), patients_.end(), exclude_patient);
    if (it != patients_.end() && *it == exclude_patient) {
      excluded = it - patients_.begin();
      eligible -= patient_entries_[static_cast<std::size_t>(excluded)];
    }
  }
  if (k <= 0 || static_cast<std::size_t>(k) > eligible) {
    throw UsageError("k = " + std::to_string(k) + " but only " + std::to_string(eligible) +
                     " eligible neighbors");
  }

  const Eigen::RowVectorXd d2 = (states_.colwise() - q).colwise().squaredNorm();
  std::vector<std::size_t> cand;
  cand.reserve(eligible);
  for (std::size_t i = 0; i < size(); ++i) {
    if (static_cast<std::int64_t>(patient_rank_[i]) != excluded) cand.push_back(i);
  }
  const auto less = [&](std::size_t a, std::size_t b) {
    const double da = d2[static_cast<Eigen::Index>(a)];
    const double db = d2[static_cast<Eigen::Index>(b)];
    if (da != db) return da < db;
    if (patient_rank_[a] != patient_rank_[b]) return patient_rank_[a] < patient_rank_[b];
    if (entries_[a].t != entries_[b].t) return entries_[a].t < entries_[b].t;
    return a < b;
  };
  const auto kth = cand.begin() + k;
  if (kth != cand.end()) std::nth_element(cand.begin(), kth - 1, cand.end(), less);
  std::sort(cand.begin(), kth, less);

  std::vector<Neighbor> out;
  out.reserve(static_cast<std::size_t>(k));
  for (auto it = cand.begin(); it != kth; ++it) {
    out.push_back({*it, std::sqrt(d2[static_cast<Eigen::Index>(*it)])});
  }
  return out;
}

NeighborIndex build_neighbor_index(const std::vector<nn::Matrix>& encoded,
                                   const std::vector<data::ProcessedTrajectory>& cohort) {
  if (encoded.size() != cohort.size()) throw ShapeError("encoded states and cohort differ in patient count");
  std::size_t n = 0;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    if (static_cast<std::size_t>(encoded[i].cols()) != cohort[i].steps.size()) {
      throw ShapeError("encoded states of " + cohort[i].patient_id + " do not match its length");
    }
    n += cohort[i].steps.size();
  }
  if (n == 0) throw UsageError("neighbor index needs at least one entry");
  nn::Matrix states(encoded.front().rows(), static_cast<Eigen::Index>(n));
  std::vector<NeighborEntry> entries;
  entries.reserve(n);
  Eigen::Index col = 0;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    for (std::size_t t = 0; t < cohort[i].steps.size(); ++t) {
      states.col(col++) = encoded[i].col(static_cast<Eigen::Index>(t));
      entries.push_back({cohort[i].steps[t].action, cohort[i].outcome, cohort[i].patient_id, static_cast<int>(t)});
    }
  }
  return NeighborIndex(std::move(states), std::move(entries));
}

void save_neighbor_index(const std::filesystem::path& path, const NeighborIndex& index) {
  // stored sorted by (patient_id, t)
  std::vector<std::size_t> order(index.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ea = index.entry(a);
    const auto& eb = index.entry(b);
    if (ea.patient_id != eb.patient_id) return ea.patient_id < eb.patient_id;
    return ea.t < eb.t;
  });
  nn::Checkpoint ckpt;
  auto& h = ckpt.header;
  h["type"] = "neighbor_index";
  h["dim"] = index.dim();
  h["size"] = index.size();
  auto& meta = h["entries"];
  meta = nlohmann::json::array();
  nn::Vector block(static_cast<Eigen::Index>(index.size()) * index.dim());
  Eigen::Index pos = 0;
  for (auto i : order) {
    const auto& e = index.entry(i);
    meta.push_back({e.patient_id, e.t, e.action, e.outcome == Outcome::non_survivor ? 1 : 0});
    block.segment(pos, index.dim()) = index.states().col(static_cast<Eigen::Index>(i));
    pos += index.dim();
  }
  ckpt.blocks.push_back(std::move(block));
  nn::save_checkpoint(path, ckpt);
}

NeighborIndex load_neighbor_index(const std::filesystem::path& path) {
  const auto ckpt = nn::load_checkpoint(path);
  const auto& h = ckpt.header;
  if (h.value("type", "") != "neighbor_index") throw IoError(path.string() + " is not a neighbor index");
  const int dim = h.at("dim").get<int>();
  const auto n = h.at("size").get<std::size_t>();
  if (ckpt.blocks.size() != 1 || ckpt.blocks[0].size() != static_cast<Eigen::Index>(n) * dim ||
      h.at("entries").size() != n) {
    throw IoError(path.string() + ": neighbor index payload does not match its header");
  }
  nn::Matrix states = Eigen::Map<const nn::Matrix>(ckpt.blocks[0].data(), dim, static_cast<Eigen::Index>(n));
  std::vector<NeighborEntry> entries;
  entries.reserve(n);
  for (const auto& e : h.at("entries")) {
    entries.push_back({e.at(2).get<int>(), e.at(3).get<int>() ? Outcome::non_survivor : Outcome::survivor,
                       e.at(0).get<std::string>(), e.at(1).get<int>()});
  }
  return NeighborIndex(std::move(states), std::move(entries));
}

}  // namespace moerl
