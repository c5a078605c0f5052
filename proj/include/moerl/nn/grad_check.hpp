#pragma once

#include <functional>

#include "moerl/nn/network.hpp"

namespace moerl::nn {

/// Two-point (f(x+h) - f(x-h)) / 2h, or the fourth-order five-point stencil.
/// The latter tolerates a larger step, which matters when some gradient
/// entries sit near the roundoff floor of the loss.
enum class Stencil { three_point, five_point };

/// Max over coordinates of |g_a - g_n| / max(|g_a|, |g_n|, 1e-8), where g_n
/// is the central difference of `loss` with step `epsilon`.
double grad_check(const std::function<double(const Vector&)>& loss, const Vector& analytic,
                  const Vector& point, double epsilon = 1e-5, Stencil stencil = Stencil::three_point);

/// Checks backward() of a network under the mean-squared-error loss against
/// `target`, applied to the output of every time step.
double grad_check(const NetworkSpec& spec, const ModelParams& params, const Sequence& input,
                  const Sequence& target, double epsilon = 1e-5);

}  // namespace moerl::nn
