#pragma once

#include <cstdint>

#include "moerl/nn/network.hpp"

namespace moerl::nn {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Hyperparameters shared by the training loops.
struct TrainingConfig {
  int batch_size = 128;
  int epochs = 50;
  long steps = 0;
  double learning_rate = 1e-3;
  double discount = 0.99;
  double regularization = 0.0;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  AdamConfig adam() const { return AdamConfig{learning_rate}; }
};

/// One bias-corrected Adam update, in place. Moment buffers are created
/// (zeroed) on the first call. Throws NumericalError on a non-finite gradient
/// without touching the parameters.
void adam_step(ModelParams& params, const Vector& grad, const AdamConfig& config);

/// Same update on a bare vector with caller-owned moments.
void adam_step(Vector& values, Vector& m, Vector& v, std::uint64_t& step, const Vector& grad,
               const AdamConfig& config);

}  // namespace moerl::nn
