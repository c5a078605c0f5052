#pragma once

#include <string_view>

#include <Eigen/Dense>

namespace moerl::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { identity, sigmoid, tanh, relu };

Matrix activate(Activation act, const Matrix& pre);

/// Elementwise d(out)/d(pre). Takes both so sigmoid/tanh can reuse `out`.
Matrix activation_derivative(Activation act, const Matrix& pre, const Matrix& out);

/// Elementwise second derivative, needed for double backpropagation.
Matrix activation_second_derivative(Activation act, const Matrix& pre, const Matrix& out);

double sigmoid(double x);
double logit(double p);

/// Max-subtracted softmax of `logits / temperature`.
Vector softmax(const Vector& logits, double temperature = 1.0);

std::string_view to_string(Activation act);
Activation activation_from_string(std::string_view name);

}  // namespace moerl::nn
