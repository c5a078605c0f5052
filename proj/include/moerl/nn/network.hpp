#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "moerl/nn/activation.hpp"

namespace moerl::nn {

/// One matrix per time step, each (features x batch). Feedforward inputs are
/// sequences of length 1.
using Sequence = std::vector<Matrix>;

enum class LayerKind { dense, lstm };

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  int input_dim = 0;
  int output_dim = 0;
  Activation activation = Activation::identity;  // ignored for lstm
};

LayerSpec dense_layer(int input_dim, int output_dim, Activation act);
LayerSpec lstm_layer(int input_dim, int hidden_dim);

std::size_t parameter_count(const LayerSpec& layer);

struct NetworkSpec {
  std::vector<LayerSpec> layers;
  std::uint64_t init_seed = 0;

  /// Throws ShapeError naming the first incompatible layer.
  void validate() const;
  std::size_t parameter_count() const;
  int input_dim() const;
  int output_dim() const;
};

nlohmann::json to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const nlohmann::json& j);

struct DenseView {
  Eigen::Map<Matrix> weight;  // out x in
  Eigen::Map<Vector> bias;
};
struct ConstDenseView {
  Eigen::Map<const Matrix> weight;
  Eigen::Map<const Vector> bias;
};
/// Gate blocks are stacked in the order input, forget, cell, output.
struct LstmView {
  Eigen::Map<Matrix> input_weight;      // 4h x in
  Eigen::Map<Matrix> recurrent_weight;  // 4h x h
  Eigen::Map<Vector> bias;              // 4h
};
struct ConstLstmView {
  Eigen::Map<const Matrix> input_weight;
  Eigen::Map<const Matrix> recurrent_weight;
  Eigen::Map<const Vector> bias;
};

/// Offsets of each layer inside a flat parameter (or gradient) vector.
class ParamLayout {
 public:
  ParamLayout() = default;
  explicit ParamLayout(const NetworkSpec& spec);

  std::size_t size() const { return size_; }
  std::size_t layer_count() const { return layers_.size(); }
  const LayerSpec& layer(std::size_t i) const { return layers_.at(i); }

  DenseView dense(double* base, std::size_t layer) const;
  ConstDenseView dense(const double* base, std::size_t layer) const;
  LstmView lstm(double* base, std::size_t layer) const;
  ConstLstmView lstm(const double* base, std::size_t layer) const;

 private:
  void require(std::size_t layer, LayerKind kind) const;

  std::vector<LayerSpec> layers_;
  std::vector<std::size_t> offsets_;
  std::size_t size_ = 0;
};

/// Flat parameter vector with per-layer views and Adam moment buffers.
class ModelParams {
 public:
  ModelParams() = default;
  /// All-zero parameters.
  explicit ModelParams(const NetworkSpec& spec);
  /// Weights uniform in +-sqrt(6/(fan_in+fan_out)) from spec.init_seed, zero biases.
  static ModelParams glorot_uniform(const NetworkSpec& spec);

  const Vector& values() const { return values_; }
  void set_values(const Vector& values);
  /// Mutable access invalidates any forward cache built from these params.
  Vector& mutable_values();
  std::size_t size() const { return static_cast<std::size_t>(values_.size()); }
  const ParamLayout& layout() const { return layout_; }

  DenseView dense(std::size_t layer);
  ConstDenseView dense(std::size_t layer) const;
  LstmView lstm(std::size_t layer);
  ConstLstmView lstm(std::size_t layer) const;

  std::uint64_t version() const { return version_; }
  void bump_version() { ++version_; }

  Vector adam_m;
  Vector adam_v;
  std::uint64_t adam_steps = 0;

 private:
  ParamLayout layout_;
  Vector values_;
  std::uint64_t version_ = 0;
};

struct DenseCache {
  Sequence input, pre, out;
};

struct LstmCache {
  Sequence x;
  Sequence gates;  // post-activation i, f, g, o stacked (4h x batch)
  Sequence c;
  Sequence tanh_c;
  Sequence h;
  Matrix h0, c0;
};

struct LayerCache {
  LayerKind kind = LayerKind::dense;
  DenseCache dense;
  LstmCache lstm;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Sequence output;
  const ModelParams* source = nullptr;
  std::uint64_t source_version = 0;
};

/// Runs the stack over every time step. `initial_hidden` (hidden x batch), if
/// given, seeds the first LSTM layer; its cell state starts at zero.
ForwardCache forward(const ModelParams& params, const NetworkSpec& spec, const Sequence& input,
                     const Matrix* initial_hidden = nullptr);

/// Single-step convenience: output of a feedforward pass, no cache kept.
Matrix predict(const ModelParams& params, const NetworkSpec& spec, const Matrix& input);

struct Gradients {
  Vector params;
  Sequence input;
  Matrix initial_hidden;  // empty unless forward was given an initial hidden state
};

/// Backpropagates per-step output gradients (empty matrices count as zero).
/// Throws UsageError if the params changed since `cache` was built.
Gradients backward(const ModelParams& params, const NetworkSpec& spec, const ForwardCache& cache,
                   const Sequence& output_grad);

}  // namespace moerl::nn
