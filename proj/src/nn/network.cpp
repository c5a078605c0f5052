#include "moerl/nn/network.hpp"

#include <cmath>
#include <random>
#include <string>

#include "moerl/error.hpp"

namespace moerl::nn {

LayerSpec dense_layer(int input_dim, int output_dim, Activation act) {
  return LayerSpec{LayerKind::dense, input_dim, output_dim, act};
}

LayerSpec lstm_layer(int input_dim, int hidden_dim) {
  return LayerSpec{LayerKind::lstm, input_dim, hidden_dim, Activation::identity};
}

std::size_t parameter_count(const LayerSpec& layer) {
  const auto in = static_cast<std::size_t>(layer.input_dim);
  const auto out = static_cast<std::size_t>(layer.output_dim);
  if (layer.kind == LayerKind::dense) return out * in + out;
  return 4 * out * in + 4 * out * out + 4 * out;
}

void NetworkSpec::validate() const {
  if (layers.empty()) throw ShapeError("network has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].input_dim <= 0 || layers[i].output_dim <= 0) {
      throw ShapeError("layer " + std::to_string(i) + " has non-positive dimension");
    }
    if (i > 0 && layers[i].input_dim != layers[i - 1].output_dim) {
      throw ShapeError("layer " + std::to_string(i) + " expects input width " +
                       std::to_string(layers[i].input_dim) + " but layer " + std::to_string(i - 1) +
                       " produces " + std::to_string(layers[i - 1].output_dim));
    }
  }
}

std::size_t NetworkSpec::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += nn::parameter_count(l);
  return n;
}

int NetworkSpec::input_dim() const { return layers.empty() ? 0 : layers.front().input_dim; }
int NetworkSpec::output_dim() const { return layers.empty() ? 0 : layers.back().output_dim; }

nlohmann::json to_json(const NetworkSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : spec.layers) {
    layers.push_back({{"kind", l.kind == LayerKind::dense ? "dense" : "lstm"},
                      {"input_dim", l.input_dim},
                      {"output_dim", l.output_dim},
                      {"activation", std::string(to_string(l.activation))}});
  }
  return {{"layers", layers}, {"init_seed", spec.init_seed}};
}

NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  try {
    spec.init_seed = j.at("init_seed").get<std::uint64_t>();
    for (const auto& l : j.at("layers")) {
      LayerSpec layer;
      const auto kind = l.at("kind").get<std::string>();
      if (kind == "dense") {
        layer.kind = LayerKind::dense;
      } else if (kind == "lstm") {
        layer.kind = LayerKind::lstm;
      } else {
        throw ConfigError("unknown layer kind '" + kind + "'");
      }
      layer.input_dim = l.at("input_dim").get<int>();
      layer.output_dim = l.at("output_dim").get<int>();
      layer.activation = activation_from_string(l.at("activation").get<std::string>());
      spec.layers.push_back(layer);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed network spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// ParamLayout / ModelParams

ParamLayout::ParamLayout(const NetworkSpec& spec) : layers_(spec.layers) {
  spec.validate();
  for (const auto& l : layers_) {
    offsets_.push_back(size_);
    size_ += parameter_count(l);
  }
}

void ParamLayout::require(std::size_t layer, LayerKind kind) const {
  if (layer >= layers_.size() || layers_[layer].kind != kind) {
    throw UsageError("layer " + std::to_string(layer) + " is not a " +
                     (kind == LayerKind::dense ? "dense" : "lstm") + " layer");
  }
}

DenseView ParamLayout::dense(double* base, std::size_t layer) const {
  require(layer, LayerKind::dense);
  const auto& l = layers_[layer];
  double* p = base + offsets_[layer];
  return DenseView{Eigen::Map<Matrix>(p, l.output_dim, l.input_dim),
                   Eigen::Map<Vector>(p + l.output_dim * l.input_dim, l.output_dim)};
}

ConstDenseView ParamLayout::dense(const double* base, std::size_t layer) const {
  require(layer, LayerKind::dense);
  const auto& l = layers_[layer];
  const double* p = base + offsets_[layer];
  return ConstDenseView{Eigen::Map<const Matrix>(p, l.output_dim, l.input_dim),
                        Eigen::Map<const Vector>(p + l.output_dim * l.input_dim, l.output_dim)};
}

LstmView ParamLayout::lstm(double* base, std::size_t layer) const {
  require(layer, LayerKind::lstm);
  const auto& l = layers_[layer];
  const int g = 4 * l.output_dim;
  double* p = base + offsets_[layer];
  return LstmView{Eigen::Map<Matrix>(p, g, l.input_dim),
                  Eigen::Map<Matrix>(p + g * l.input_dim, g, l.output_dim),
                  Eigen::Map<Vector>(p + g * l.input_dim + g * l.output_dim, g)};
}

ConstLstmView ParamLayout::lstm(const double* base, std::size_t layer) const {
  require(layer, LayerKind::lstm);
  const auto& l = layers_[layer];
  const int g = 4 * l.output_dim;
  const double* p = base + offsets_[layer];
  return ConstLstmView{Eigen::Map<const Matrix>(p, g, l.input_dim),
                       Eigen::Map<const Matrix>(p + g * l.input_dim, g, l.output_dim),
                       Eigen::Map<const Vector>(p + g * l.input_dim + g * l.output_dim, g)};
}

ModelParams::ModelParams(const NetworkSpec& spec)
    : layout_(spec), values_(Vector::Zero(static_cast<Eigen::Index>(layout_.size()))) {}

ModelParams ModelParams::glorot_uniform(const NetworkSpec& spec) {
  ModelParams params(spec);
  std::mt19937_64 rng(spec.init_seed);
  auto fill = [&rng](auto&& m, double fan_in, double fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = u(rng);
  };
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (l.kind == LayerKind::dense) {
      auto v = params.dense(i);
      fill(v.weight, l.input_dim, l.output_dim);
    } else {
      auto v = params.lstm(i);
      fill(v.input_weight, l.input_dim, l.output_dim);
      fill(v.recurrent_weight, l.output_dim, l.output_dim);
    }
  }
  return params;
}

void ModelParams::set_values(const Vector& values) {
  if (values.size() != values_.size()) {
    throw ShapeError("parameter vector has " + std::to_string(values.size()) + " entries, expected " +
                     std::to_string(values_.size()));
  }
  values_ = values;
  ++version_;
}

Vector& ModelParams::mutable_values() {
  ++version_;
  return values_;
}

DenseView ModelParams::dense(std::size_t layer) {
  ++version_;
  return layout_.dense(values_.data(), layer);
}
ConstDenseView ModelParams::dense(std::size_t layer) const {
  return layout_.dense(static_cast<const double*>(values_.data()), layer);
}
LstmView ModelParams::lstm(std::size_t layer) {
  ++version_;
  return layout_.lstm(values_.data(), layer);
}
ConstLstmView ModelParams::lstm(std::size_t layer) const {
  return layout_.lstm(static_cast<const double*>(values_.data()), layer);
}

// ---------------------------------------------------------------------------
// forward / backward

namespace {

void check_params(const ModelParams& params, const NetworkSpec& spec) {
  if (params.size() != spec.parameter_count()) {
    throw ShapeError("model has " + std::to_string(params.size()) + " parameters but spec implies " +
                     std::to_string(spec.parameter_count()));
  }
}

Matrix sigmoid_block(const Matrix& z) { return (1.0 + (-z.array()).exp()).inverse().matrix(); }

void lstm_forward(const ConstLstmView& w, int hidden, const Sequence& x, const Matrix& h0,
                  const Matrix& c0, LstmCache& cache) {
  const auto batch = h0.cols();
  cache.x = x;
  cache.h0 = h0;
  cache.c0 = c0;
  const std::size_t steps = x.size();
  cache.gates.resize(steps);
  cache.c.resize(steps);
  cache.tanh_c.resize(steps);
  cache.h.resize(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    const Matrix& h_prev = t == 0 ? h0 : cache.h[t - 1];
    const Matrix& c_prev = t == 0 ? c0 : cache.c[t - 1];
    Matrix z = w.recurrent_weight * h_prev;
    z.noalias() += w.input_weight * x[t];
    z.colwise() += w.bias;
    Matrix gates(4 * hidden, batch);
    gates.topRows(2 * hidden) = sigmoid_block(z.topRows(2 * hidden));
    gates.middleRows(2 * hidden, hidden) = z.middleRows(2 * hidden, hidden).array().tanh().matrix();
    gates.bottomRows(hidden) = sigmoid_block(z.bottomRows(hidden));
    auto i = gates.topRows(hidden).array();
    auto f = gates.middleRows(hidden, hidden).array();
    auto g = gates.middleRows(2 * hidden, hidden).array();
    auto o = gates.bottomRows(hidden).array();
    cache.c[t] = (f * c_prev.array() + i * g).matrix();
    cache.tanh_c[t] = cache.c[t].array().tanh().matrix();
    cache.h[t] = (o * cache.tanh_c[t].array()).matrix();
    cache.gates[t] = std::move(gates);
  }
}

// Returns dx per step; accumulates parameter gradients into `grad`.
Sequence lstm_backward(const ConstLstmView& w, LstmView grad, int hidden, const LstmCache& cache,
                       const Sequence& dh_out, Matrix* dh0_out) {
  const std::size_t steps = cache.x.size();
  const auto batch = cache.h0.cols();
  Sequence dx(steps);
  Matrix dh_next = Matrix::Zero(hidden, batch);
  Matrix dc_next = Matrix::Zero(hidden, batch);
  Matrix dz(4 * hidden, batch);
  for (std::size_t s = steps; s-- > 0;) {
    Matrix dh = dh_next;
    if (s < dh_out.size() && dh_out[s].size() > 0) dh += dh_out[s];
    const Matrix& gates = cache.gates[s];
    auto i = gates.topRows(hidden).array();
    auto f = gates.middleRows(hidden, hidden).array();
    auto g = gates.middleRows(2 * hidden, hidden).array();
    auto o = gates.bottomRows(hidden).array();
    const Matrix& c_prev = s == 0 ? cache.c0 : cache.c[s - 1];
    const Matrix& h_prev = s == 0 ? cache.h0 : cache.h[s - 1];
    auto tc = cache.tanh_c[s].array();

    Matrix dc = dc_next + (dh.array() * o * (1.0 - tc.square())).matrix();
    dz.topRows(hidden) = (dc.array() * g * i * (1.0 - i)).matrix();
    dz.middleRows(hidden, hidden) = (dc.array() * c_prev.array() * f * (1.0 - f)).matrix();
    dz.middleRows(2 * hidden, hidden) = (dc.array() * i * (1.0 - g.square())).matrix();
    dz.bottomRows(hidden) = (dh.array() * tc * o * (1.0 - o)).matrix();

    grad.input_weight.noalias() += dz * cache.x[s].transpose();
    grad.recurrent_weight.noalias() += dz * h_prev.transpose();
    grad.bias += dz.rowwise().sum();
    dx[s] = w.input_weight.transpose() * dz;
    dh_next = w.recurrent_weight.transpose() * dz;
    dc_next = (dc.array() * f).matrix();
  }
  if (dh0_out != nullptr) *dh0_out = dh_next;
  return dx;
}

}  // namespace

ForwardCache forward(const ModelParams& params, const NetworkSpec& spec, const Sequence& input,
                     const Matrix* initial_hidden) {
  check_params(params, spec);
  if (input.empty()) throw UsageError("forward called with an empty sequence");
  const auto batch = input.front().cols();
  for (const auto& x : input) {
    if (x.rows() != spec.input_dim() || x.cols() != batch) {
      throw ShapeError("layer 0 expects input of width " + std::to_string(spec.input_dim()) +
                       ", got " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()));
    }
  }
  ForwardCache cache;
  cache.source = &params;
  cache.source_version = params.version();
  cache.layers.resize(spec.layers.size());
  bool seeded = false;
  Sequence current = input;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const auto& layer = spec.layers[li];
    auto& lc = cache.layers[li];
    lc.kind = layer.kind;
    if (layer.kind == LayerKind::dense) {
      const auto w = params.dense(li);
      lc.dense.input = current;
      lc.dense.pre.resize(current.size());
      lc.dense.out.resize(current.size());
      for (std::size_t t = 0; t < current.size(); ++t) {
        Matrix pre = w.weight * current[t];
        pre.colwise() += w.bias;
        lc.dense.out[t] = activate(layer.activation, pre);
        lc.dense.pre[t] = std::move(pre);
      }
      current = lc.dense.out;
    } else {
      Matrix h0 = Matrix::Zero(layer.output_dim, batch);
      if (initial_hidden != nullptr && !seeded) {
        if (initial_hidden->rows() != layer.output_dim || initial_hidden->cols() != batch) {
          throw ShapeError("initial hidden state for layer " + std::to_string(li) + " has wrong shape");
        }
        h0 = *initial_hidden;
        seeded = true;
      }
      lstm_forward(params.lstm(li), layer.output_dim, current, h0, Matrix::Zero(layer.output_dim, batch),
                   lc.lstm);
      current = lc.lstm.h;
    }
  }
  if (initial_hidden != nullptr && !seeded) throw UsageError("initial hidden state given but no LSTM layer");
  cache.output = std::move(current);
  return cache;
}

Matrix predict(const ModelParams& params, const NetworkSpec& spec, const Matrix& input) {
  check_params(params, spec);
  if (input.rows() != spec.input_dim()) {
    throw ShapeError("layer 0 expects input of width " + std::to_string(spec.input_dim()) + ", got " +
                     std::to_string(input.rows()));
  }
  Matrix current = input;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const auto& layer = spec.layers[li];
    if (layer.kind == LayerKind::dense) {
      const auto w = params.dense(li);
      Matrix pre = w.weight * current;
      pre.colwise() += w.bias;
      current = activate(layer.activation, pre);
    } else {
      LstmCache lc;
      lstm_forward(params.lstm(li), layer.output_dim, Sequence{current},
                   Matrix::Zero(layer.output_dim, current.cols()),
                   Matrix::Zero(layer.output_dim, current.cols()), lc);
      current = lc.h.back();
    }
  }
  return current;
}

Gradients backward(const ModelParams& params, const NetworkSpec& spec, const ForwardCache& cache,
                   const Sequence& output_grad) {
  check_params(params, spec);
  if (cache.source != &params || cache.source_version != params.version()) {
    throw UsageError("stale forward cache: parameters changed since forward()");
  }
  if (cache.layers.size() != spec.layers.size()) throw UsageError("forward cache does not match spec");
  const std::size_t steps = cache.output.size();
  if (output_grad.size() != steps) {
    throw ShapeError("output gradient has " + std::to_string(output_grad.size()) + " steps, expected " +
                     std::to_string(steps));
  }
  Gradients result;
  result.params = Vector::Zero(static_cast<Eigen::Index>(params.size()));
  const ParamLayout& layout = params.layout();

  Sequence upstream(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    if (output_grad[t].size() == 0) {
      upstream[t] = Matrix::Zero(cache.output[t].rows(), cache.output[t].cols());
    } else {
      if (output_grad[t].rows() != cache.output[t].rows() || output_grad[t].cols() != cache.output[t].cols()) {
        throw ShapeError("output gradient at step " + std::to_string(t) + " has wrong shape");
      }
      upstream[t] = output_grad[t];
    }
  }

  for (std::size_t li = spec.layers.size(); li-- > 0;) {
    const auto& layer = spec.layers[li];
    const auto& lc = cache.layers[li];
    if (layer.kind == LayerKind::dense) {
      const auto w = params.dense(li);
      auto g = layout.dense(result.params.data(), li);
      for (std::size_t t = 0; t < steps; ++t) {
        Matrix dpre = (upstream[t].array() *
                       activation_derivative(layer.activation, lc.dense.pre[t], lc.dense.out[t]).array())
                          .matrix();
        g.weight.noalias() += dpre * lc.dense.input[t].transpose();
        g.bias += dpre.rowwise().sum();
        upstream[t] = w.weight.transpose() * dpre;
      }
    } else {
      Matrix dh0;
      const bool first_lstm = [&] {
        for (std::size_t k = 0; k < li; ++k)
          if (spec.layers[k].kind == LayerKind::lstm) return false;
        return true;
      }();
      upstream = lstm_backward(params.lstm(li), layout.lstm(result.params.data(), li), layer.output_dim,
                               lc.lstm, upstream, &dh0);
      if (first_lstm) result.initial_hidden = std::move(dh0);
    }
  }
  result.input = std::move(upstream);
  return result;
}

}  // namespace moerl::nn
