#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "moerl/config.hpp"
#include "moerl/nn/activation.hpp"
#include "moerl/types.hpp"

namespace moerl {

/// Argmax mode: fraction of states whose argmax actions coincide (ties go to
/// the lowest index). Total-variation mode: mean of 1 - TV(a, b).
double policy_agreement(const std::vector<PolicyDistribution>& a, const std::vector<PolicyDistribution>& b,
                        AgreementMetric metric = AgreementMetric::argmax);

/// Symmetric matrix of pairwise agreement, ones on the diagonal.
nn::Matrix agreement_matrix(const std::vector<std::vector<PolicyDistribution>>& policies,
                            AgreementMetric metric = AgreementMetric::argmax);

/// Argmax-action frequencies. cells[r][c] is action 5 * (4 - r) + c, so row 0
/// is the top of the grid and action 0 sits bottom-left.
struct ActionGrid {
  std::array<std::array<double, kBinsPerDrug>, kBinsPerDrug> cells{};

  double at_action(int action) const;
  double sum() const;
};

ActionGrid action_distribution(const std::vector<PolicyDistribution>& policy);

nlohmann::json to_json(const ActionGrid& grid);
ActionGrid action_grid_from_json(const nlohmann::json& j);

/// Rows top to bottom, labelled by IV bin; columns by vasopressor bin.
std::string action_grid_csv(const ActionGrid& grid);
std::string action_grid_svg(const ActionGrid& grid, const std::string& title);

/// Vertical bars, one per label, with counts above each bar.
std::string bar_chart_svg(const std::vector<std::string>& labels, const std::vector<double>& values,
                          const std::string& title);

/// Two overlaid series over shared bins (e.g. survivor / non-survivor).
std::string paired_histogram_svg(const std::vector<double>& edges, const std::vector<double>& first,
                                 const std::vector<double>& second, const std::string& first_name,
                                 const std::string& second_name, const std::string& title);

/// Fixed "%.6f" rendering used by every emitted table.
std::string format_number(double v);

}  // namespace moerl
