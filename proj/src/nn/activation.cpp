#include "moerl/nn/activation.hpp"

#include <cmath>
#include <string>

#include "moerl/error.hpp"

namespace moerl::nn {

Matrix activate(Activation act, const Matrix& pre) {
  switch (act) {
    case Activation::identity:
      return pre;
    case Activation::sigmoid:
      return (1.0 + (-pre.array()).exp()).inverse().matrix();
    case Activation::tanh:
      return pre.array().tanh().matrix();
    case Activation::relu:
      return pre.cwiseMax(0.0);
  }
  return pre;
}

Matrix activation_derivative(Activation act, const Matrix& pre, const Matrix& out) {
  switch (act) {
    case Activation::identity:
      return Matrix::Ones(pre.rows(), pre.cols());
    case Activation::sigmoid:
      return (out.array() * (1.0 - out.array())).matrix();
    case Activation::tanh:
      return (1.0 - out.array().square()).matrix();
    case Activation::relu:
      return (pre.array() > 0.0).cast<double>().matrix();
  }
  return Matrix::Ones(pre.rows(), pre.cols());
}

Matrix activation_second_derivative(Activation act, const Matrix& pre, const Matrix& out) {
  switch (act) {
    case Activation::identity:
    case Activation::relu:
      return Matrix::Zero(pre.rows(), pre.cols());
    case Activation::sigmoid: {
      auto s = out.array();
      return (s * (1.0 - s) * (1.0 - 2.0 * s)).matrix();
    }
    case Activation::tanh: {
      auto t = out.array();
      return (-2.0 * t * (1.0 - t.square())).matrix();
    }
  }
  return Matrix::Zero(pre.rows(), pre.cols());
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

Vector softmax(const Vector& logits, double temperature) {
  if (!(temperature > 0.0)) throw UsageError("softmax temperature must be positive");
  Vector scaled = logits / temperature;
  const double m = scaled.maxCoeff();
  Vector e = (scaled.array() - m).exp().matrix();
  return e / e.sum();
}

std::string_view to_string(Activation act) {
  switch (act) {
    case Activation::identity:
      return "identity";
    case Activation::sigmoid:
      return "sigmoid";
    case Activation::tanh:
      return "tanh";
    case Activation::relu:
      return "relu";
  }
  return "identity";
}

Activation activation_from_string(std::string_view name) {
  if (name == "identity") return Activation::identity;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

}  // namespace moerl::nn
