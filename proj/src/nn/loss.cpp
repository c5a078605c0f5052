#include "moerl/nn/loss.hpp"

#include <cmath>

#include "moerl/error.hpp"

namespace moerl::nn {

LossResult mse(const Matrix& prediction, const Matrix& target) {
  if (prediction.rows() != target.rows() || prediction.cols() != target.cols()) {
    throw ShapeError("mse: prediction and target shapes differ");
  }
  const double n = static_cast<double>(prediction.size());
  Matrix diff = prediction - target;
  return {diff.squaredNorm() / n, (2.0 / n) * diff};
}

LossResult bce_with_logits(const Matrix& logits, const Matrix& labels) {
  if (logits.rows() != labels.rows() || logits.cols() != labels.cols()) {
    throw ShapeError("bce: logits and labels shapes differ");
  }
  const double n = static_cast<double>(logits.size());
  LossResult r;
  r.grad.resize(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    for (Eigen::Index k = 0; k < logits.rows(); ++k) {
      const double z = logits(k, c);
      const double y = labels(k, c);
      // log(1 + e^z) - y z, written to stay finite for large |z|
      r.value += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
      r.grad(k, c) = (sigmoid(z) - y) / n;
    }
  }
  r.value /= n;
  return r;
}

LossResult kl_sparsity(const Matrix& activations, double target) {
  const double batch = static_cast<double>(activations.cols());
  Vector mean = activations.rowwise().mean();
  LossResult r;
  r.grad.resize(activations.rows(), activations.cols());
  for (Eigen::Index j = 0; j < mean.size(); ++j) {
    const double m = std::clamp(mean(j), 1e-12, 1.0 - 1e-12);
    r.value += target * std::log(target / m) + (1.0 - target) * std::log((1.0 - target) / (1.0 - m));
    const double d = (-target / m + (1.0 - target) / (1.0 - m)) / batch;
    r.grad.row(j).setConstant(d);
  }
  return r;
}

}  // namespace moerl::nn
