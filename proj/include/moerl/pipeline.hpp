#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <string_view>

#include "moerl/config.hpp"

namespace moerl::pipeline {

/// Stage order used by `all`.
inline constexpr std::array<std::string_view, 10> kStages{
    "simulate", "preprocess", "train-encoder", "train-reward", "train-dqn",
    "fit-kernel", "fit-moe", "evaluate", "bootstrap", "report"};

bool is_subcommand(std::string_view name);

/// Runs one subcommand (a stage, `all`, or `verify`) against config.out.
/// Missing upstream artifacts raise DependencyError naming the producing
/// subcommand. Stage wall times are recorded in timings.json.
void run(std::string_view name, const PipelineConfig& config, std::ostream& log);

/// Rebuilds the evaluation from the stored models and compares every policy
/// value with report.json (or evaluation.json before a report exists).
/// Returns the largest absolute difference; NumericalError above 1e-9.
double verify(const PipelineConfig& config, std::ostream& log);

}  // namespace moerl::pipeline
