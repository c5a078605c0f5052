#include "moerl/nn/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "moerl/error.hpp"
#include "moerl/nn/loss.hpp"

namespace moerl::nn {

double grad_check(const std::function<double(const Vector&)>& loss, const Vector& analytic,
                  const Vector& point, double epsilon, Stencil stencil) {
  if (analytic.size() != point.size()) throw ShapeError("grad_check: gradient and point sizes differ");
  Vector x = point;
  double worst = 0.0;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double saved = x(k);
    auto at = [&](double offset) {
      x(k) = saved + offset;
      const double v = loss(x);
      x(k) = saved;
      return v;
    };
    double numeric = 0.0;
    if (stencil == Stencil::three_point) {
      numeric = (at(epsilon) - at(-epsilon)) / (2.0 * epsilon);
    } else {
      numeric = (-at(2 * epsilon) + 8 * at(epsilon) - 8 * at(-epsilon) + at(-2 * epsilon)) / (12.0 * epsilon);
    }
    const double a = analytic(k);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

namespace {

double sequence_mse(const Sequence& out, const Sequence& target, Sequence* grads) {
  double total = 0.0;
  if (grads != nullptr) grads->resize(out.size());
  for (std::size_t t = 0; t < out.size(); ++t) {
    auto r = mse(out[t], target[t]);
    total += r.value;
    if (grads != nullptr) (*grads)[t] = std::move(r.grad);
  }
  return total;
}

}  // namespace

double grad_check(const NetworkSpec& spec, const ModelParams& params, const Sequence& input,
                  const Sequence& target, double epsilon) {
  const auto cache = forward(params, spec, input);
  if (target.size() != cache.output.size()) throw ShapeError("grad_check: target length mismatch");
  Sequence out_grad;
  sequence_mse(cache.output, target, &out_grad);
  const Vector analytic = backward(params, spec, cache, out_grad).params;

  ModelParams probe = params;
  auto loss = [&](const Vector& theta) {
    probe.set_values(theta);
    return sequence_mse(forward(probe, spec, input).output, target, nullptr);
  };
  return grad_check(loss, analytic, params.values(), epsilon);
}

}  // namespace moerl::nn
