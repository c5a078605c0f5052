#include "moerl/nn/adam.hpp"

#include <cmath>
#include <string>

#include "moerl/error.hpp"

namespace moerl::nn {

void TrainingConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
  if (!(discount > 0.0 && discount <= 1.0)) throw ConfigError("discount must lie in (0,1]");
  if (!(regularization >= 0.0)) throw ConfigError("regularization must be >= 0");
}

void adam_step(Vector& values, Vector& m, Vector& v, std::uint64_t& step, const Vector& grad,
               const AdamConfig& config) {
  if (grad.size() != values.size()) {
    throw ShapeError("gradient has " + std::to_string(grad.size()) + " entries, parameters have " +
                     std::to_string(values.size()));
  }
  if (!grad.allFinite()) throw NumericalError("non-finite gradient; Adam step aborted");
  if (m.size() != values.size()) m = Vector::Zero(values.size());
  if (v.size() != values.size()) v = Vector::Zero(values.size());
  ++step;
  m = config.beta1 * m + (1.0 - config.beta1) * grad;
  v = config.beta2 * v + (1.0 - config.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  values.array() -= config.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + config.epsilon);
}

void adam_step(ModelParams& params, const Vector& grad, const AdamConfig& config) {
  if (!grad.allFinite()) throw NumericalError("non-finite gradient; Adam step aborted");
  adam_step(params.mutable_values(), params.adam_m, params.adam_v, params.adam_steps, grad, config);
}

}  // namespace moerl::nn
