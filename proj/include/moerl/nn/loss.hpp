#pragma once

#include "moerl/nn/activation.hpp"

namespace moerl::nn {

struct LossResult {
  double value = 0.0;
  Matrix grad;  // d value / d prediction, same shape as prediction
};

/// Mean of squared errors over all entries.
LossResult mse(const Matrix& prediction, const Matrix& target);

/// Binary cross-entropy on pre-sigmoid outputs (1 x batch), averaged over the
/// batch. Labels are 0/1.
LossResult bce_with_logits(const Matrix& logits, const Matrix& labels);

/// KL(target || mean activation) summed over hidden units, with its gradient
/// with respect to each activation in the batch.
LossResult kl_sparsity(const Matrix& activations, double target);

}  // namespace moerl::nn
