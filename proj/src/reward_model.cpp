#include "moerl/reward_model.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>

#include "moerl/error.hpp"
#include "moerl/nn/checkpoint.hpp"
#include "moerl/nn/loss.hpp"

namespace moerl {

using nn::Matrix;
using nn::Vector;

void RewardConfig::validate() const {
  training.validate();
  if (!(input_gradient_weight >= 0.0)) throw ConfigError("reward.input_gradient_weight must be >= 0");
}

nn::NetworkSpec mortality_network_spec(std::uint64_t init_seed) {
  return {{nn::dense_layer(kFeatureCount, 64, nn::Activation::tanh), nn::dense_layer(64, 32, nn::Activation::tanh),
           nn::dense_layer(32, 1, nn::Activation::identity)},
          init_seed};
}

LabeledObservations label_observations(const std::vector<data::ProcessedTrajectory>& cohort) {
  std::size_t n = 0;
  for (const auto& t : cohort) n += t.steps.size();
  LabeledObservations out;
  out.x.resize(kFeatureCount, static_cast<Eigen::Index>(n));
  out.labels.reserve(n);
  Eigen::Index col = 0;
  for (const auto& t : cohort) {
    for (const auto& s : t.steps) {
      out.x.col(col++) = Eigen::Map<const Vector>(s.observation.values.data(), kFeatureCount);
      out.labels.push_back(t.outcome == Outcome::non_survivor ? 1 : 0);
    }
  }
  return out;
}

namespace {

struct MlpPass {
  std::vector<Matrix> h;  // h[0] = input, h[l] = layer l output
  std::vector<Matrix> a;  // a[l-1] = pre-activation of layer l
};

MlpPass mlp_forward(const nn::NetworkSpec& spec, const nn::ModelParams& params, const Matrix& x) {
  MlpPass p;
  p.h.push_back(x);
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    if (spec.layers[l].kind != nn::LayerKind::dense) throw UsageError("mortality predictor must be dense-only");
    const auto w = params.dense(l);
    Matrix a = w.weight * p.h.back();
    a.colwise() += w.bias;
    p.h.push_back(nn::activate(spec.layers[l].activation, a));
    p.a.push_back(std::move(a));
  }
  return p;
}

// c[l] = d z / d h[l] for the scalar logit z of each sample, for l = 0..L.
std::vector<Matrix> logit_input_chain(const nn::NetworkSpec& spec, const nn::ModelParams& params, const MlpPass& p,
                                      std::vector<Matrix>* e_out = nullptr) {
  const std::size_t L = spec.layers.size();
  std::vector<Matrix> c(L + 1), e(L);
  c[L] = Matrix::Ones(1, p.h[0].cols());
  for (std::size_t l = L; l-- > 0;) {
    e[l] = (c[l + 1].array() * nn::activation_derivative(spec.layers[l].activation, p.a[l], p.h[l + 1]).array()).matrix();
    c[l] = params.dense(l).weight.transpose() * e[l];
  }
  if (e_out != nullptr) *e_out = std::move(e);
  return c;
}

void check_binary(const std::vector<int>& labels) {
  bool has0 = false, has1 = false;
  for (int y : labels) {
    if (y != 0 && y != 1) throw DataError("mortality labels must be 0 or 1");
    has0 |= y == 0;
    has1 |= y == 1;
  }
  if (!has0 || !has1) throw DataError("mortality predictor needs both survivors and non-survivors");
}

}  // namespace

double predictor_loss(const nn::NetworkSpec& spec, const nn::ModelParams& params, const Matrix& x,
                      const Matrix& labels, double weight, Vector* grad) {
  const std::size_t L = spec.layers.size();
  const auto B = x.cols();
  const auto p = mlp_forward(spec, params, x);
  auto bce = nn::bce_with_logits(p.h[L], labels);
  std::vector<Matrix> e;
  const auto c = logit_input_chain(spec, params, p, &e);
  const double penalty = weight * c[0].cwiseAbs().sum() / static_cast<double>(B);
  if (grad == nullptr) return bce.value + penalty;

  *grad = Vector::Zero(static_cast<Eigen::Index>(params.size()));
  const auto& layout = params.layout();
  // Adjoint of the penalty pushed forward through the input-gradient chain.
  std::vector<Matrix> a_bar(L);
  for (std::size_t l = 0; l < L; ++l) a_bar[l] = Matrix::Zero(p.a[l].rows(), B);
  if (weight > 0.0) {
    Matrix c_bar = (weight / static_cast<double>(B)) * c[0].array().sign().matrix();
    for (std::size_t l = 0; l < L; ++l) {
      const auto act = spec.layers[l].activation;
      auto g = layout.dense(grad->data(), l);
      g.weight.noalias() += e[l] * c_bar.transpose();
      Matrix e_bar = params.dense(l).weight * c_bar;
      const Matrix d1 = nn::activation_derivative(act, p.a[l], p.h[l + 1]);
      const Matrix d2 = nn::activation_second_derivative(act, p.a[l], p.h[l + 1]);
      a_bar[l] += (e_bar.array() * c[l + 1].array() * d2.array()).matrix();
      c_bar = (e_bar.array() * d1.array()).matrix();
    }
  }
  // Ordinary reverse pass with the extra pre-activation adjoints injected.
  Matrix da = bce.grad + a_bar[L - 1];
  for (std::size_t l = L; l-- > 0;) {
    auto g = layout.dense(grad->data(), l);
    g.weight.noalias() += da * p.h[l].transpose();
    g.bias += da.rowwise().sum();
    if (l == 0) break;
    Matrix dh = params.dense(l).weight.transpose() * da;
    da = (dh.array() *
          nn::activation_derivative(spec.layers[l - 1].activation, p.a[l - 1], p.h[l]).array())
             .matrix() +
         a_bar[l - 1];
  }
  return bce.value + penalty;
}

MortalityPredictor train_mortality_predictor(const LabeledObservations& train, const RewardConfig& config) {
  config.validate();
  if (static_cast<std::size_t>(train.x.cols()) != train.labels.size()) throw DataError("label count mismatch");
  check_binary(train.labels);
  MortalityPredictor m;
  m.spec = mortality_network_spec(mix_seed(config.training.seed, 11));
  m.params = nn::ModelParams::glorot_uniform(m.spec);
  m.input_gradient_weight = config.input_gradient_weight;

  std::vector<Eigen::Index> pos, neg;
  for (std::size_t i = 0; i < train.labels.size(); ++i) (train.labels[i] ? pos : neg).push_back(static_cast<Eigen::Index>(i));
  std::mt19937_64 rng(mix_seed(config.training.seed, 12));
  std::uniform_int_distribution<std::size_t> pick_pos(0, pos.size() - 1), pick_neg(0, neg.size() - 1);
  const int batch = std::max(2, config.training.batch_size);
  const int half = batch / 2;
  const auto batches_per_epoch =
      std::max<std::size_t>(1, (train.labels.size() + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch));
  const auto adam = config.training.adam();
  Matrix x(kFeatureCount, batch);
  Matrix y(1, batch);
  for (int epoch = 0; epoch < config.training.epochs; ++epoch) {
    double total = 0.0;
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      for (int k = 0; k < batch; ++k) {
        const bool positive = k < half;
        const auto idx = positive ? pos[pick_pos(rng)] : neg[pick_neg(rng)];
        x.col(k) = train.x.col(idx);
        y(0, k) = positive ? 1.0 : 0.0;
      }
      Vector grad;
      const double loss = predictor_loss(m.spec, m.params, x, y, m.input_gradient_weight, &grad);
      if (!std::isfinite(loss)) {
        throw NumericalError("mortality predictor loss is non-finite at epoch " + std::to_string(epoch));
      }
      nn::adam_step(m.params, grad, adam);
      total += loss;
    }
    m.loss_log.push_back(total / static_cast<double>(batches_per_epoch));
  }
  return m;
}

Matrix mortality_logits(const MortalityPredictor& predictor, const Matrix& x) {
  return nn::predict(predictor.params, predictor.spec, x);
}

Matrix predict_mortality(const MortalityPredictor& predictor, const Matrix& x) {
  return mortality_logits(predictor, x).unaryExpr([](double z) { return nn::sigmoid(z); });
}

double predict_mortality(const MortalityPredictor& predictor, const data::Observation& o) {
  return predict_mortality(predictor, Matrix(Eigen::Map<const Vector>(o.values.data(), kFeatureCount)))(0, 0);
}

Matrix input_gradients(const MortalityPredictor& predictor, const Matrix& x) {
  const auto p = mlp_forward(predictor.spec, predictor.params, x);
  return logit_input_chain(predictor.spec, predictor.params, p)[0];
}

double accuracy(const MortalityPredictor& predictor, const LabeledObservations& data) {
  if (data.labels.empty()) throw DataError("accuracy of an empty set");
  const Matrix z = mortality_logits(predictor, data.x);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    const int guess = nn::sigmoid(z(0, static_cast<Eigen::Index>(i))) >= 0.5 ? 1 : 0;
    correct += guess == data.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(data.labels.size());
}

namespace {
double clamped_logit(double p) { return nn::logit(std::clamp(p, 1e-12, 1.0 - 1e-12)); }
}  // namespace

double compute_reward(const MortalityPredictor& predictor, const data::Observation& o, const data::Observation& o_next) {
  Matrix x(kFeatureCount, 2);
  x.col(0) = Eigen::Map<const Vector>(o.values.data(), kFeatureCount);
  x.col(1) = Eigen::Map<const Vector>(o_next.values.data(), kFeatureCount);
  const Matrix z = mortality_logits(predictor, x);
  return clamped_logit(nn::sigmoid(z(0, 0))) - clamped_logit(nn::sigmoid(z(0, 1)));
}

std::vector<double> trajectory_rewards(const MortalityPredictor& predictor, const data::ProcessedTrajectory& trajectory) {
  const auto T = trajectory.steps.size();
  std::vector<double> r(T, 0.0);
  if (T < 2) return r;
  Matrix x(kFeatureCount, static_cast<Eigen::Index>(T));
  for (std::size_t t = 0; t < T; ++t) {
    x.col(static_cast<Eigen::Index>(t)) = Eigen::Map<const Vector>(trajectory.steps[t].observation.values.data(), kFeatureCount);
  }
  const Matrix z = mortality_logits(predictor, x);
  std::vector<double> lg(T);
  for (std::size_t t = 0; t < T; ++t) lg[t] = clamped_logit(nn::sigmoid(z(0, static_cast<Eigen::Index>(t))));
  for (std::size_t t = 0; t + 1 < T; ++t) r[t] = lg[t] - lg[t + 1];
  return r;
}

LogOddsHistogram log_odds_histogram(const MortalityPredictor& predictor, const LabeledObservations& data, int bins) {
  if (bins < 1) throw UsageError("histogram needs at least one bin");
  LogOddsHistogram h;
  const Matrix z = mortality_logits(predictor, data.x);
  double lo = 0.0, hi = 0.0;
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    const double v = clamped_logit(nn::sigmoid(z(0, static_cast<Eigen::Index>(i))));
    (data.labels[i] ? h.non_survivor_logits : h.survivor_logits).push_back(v);
    lo = i == 0 ? v : std::min(lo, v);
    hi = i == 0 ? v : std::max(hi, v);
  }
  if (hi - lo < 1e-9) {
    lo -= 0.5;
    hi += 0.5;
  }
  const auto nb = static_cast<std::size_t>(bins);
  for (std::size_t b = 0; b <= nb; ++b) h.edges.push_back(lo + (hi - lo) * static_cast<double>(b) / bins);
  h.survivor_counts.assign(nb, 0);
  h.non_survivor_counts.assign(nb, 0);
  auto bin_of = [&](double v) {
    auto b = static_cast<std::size_t>(std::floor((v - lo) / (hi - lo) * bins));
    return std::min(b, nb - 1);
  };
  for (double v : h.survivor_logits) ++h.survivor_counts[bin_of(v)];
  for (double v : h.non_survivor_logits) ++h.non_survivor_counts[bin_of(v)];
  return h;
}

void write_histogram_csv(std::ostream& out, const LogOddsHistogram& h) {
  out << "bin_lo,bin_hi,survivor,non_survivor\n";
  for (std::size_t b = 0; b < h.survivor_counts.size(); ++b) {
    out << h.edges[b] << ',' << h.edges[b + 1] << ',' << h.survivor_counts[b] << ',' << h.non_survivor_counts[b] << '\n';
  }
}

InputGradientReport mortality_input_gradients(const MortalityPredictor& predictor, const Matrix& x) {
  InputGradientReport r;
  r.values = x.transpose();
  r.gradients = input_gradients(predictor, x).transpose();
  const auto n = static_cast<double>(x.cols());
  for (Eigen::Index j = 0; j < x.rows(); ++j) {
    const Vector v = r.values.col(j).array() - r.values.col(j).mean();
    const Vector g = r.gradients.col(j).array() - r.gradients.col(j).mean();
    const double denom = std::sqrt(v.squaredNorm() * g.squaredNorm());
    r.abs_correlation.push_back(denom > 1e-300 && n > 1 ? std::abs(v.dot(g)) / denom : 0.0);
  }
  return r;
}

void write_gradients_csv(std::ostream& out, const InputGradientReport& report) {
  const auto names = feature_catalog();
  out << "sample,feature,value,gradient\n";
  for (Eigen::Index i = 0; i < report.values.rows(); ++i) {
    for (Eigen::Index j = 0; j < report.values.cols(); ++j) {
      out << i << ',' << names[static_cast<std::size_t>(j)].name << ',' << report.values(i, j) << ','
          << report.gradients(i, j) << '\n';
    }
  }
}

void save_predictor(const std::filesystem::path& path, const MortalityPredictor& predictor) {
  nn::Checkpoint c;
  c.header = {{"type", "mortality_predictor"},
              {"spec", nn::to_json(predictor.spec)},
              {"input_gradient_weight", predictor.input_gradient_weight},
              {"test_accuracy", predictor.test_accuracy},
              {"loss_log", predictor.loss_log}};
  c.blocks = {predictor.params.values()};
  nn::save_checkpoint(path, c);
}

MortalityPredictor load_predictor(const std::filesystem::path& path) {
  auto c = nn::load_checkpoint(path);
  MortalityPredictor m;
  try {
    if (c.header.at("type") != "mortality_predictor") throw IoError(path.string() + " is not a predictor checkpoint");
    m.spec = nn::network_spec_from_json(c.header.at("spec"));
    m.input_gradient_weight = c.header.at("input_gradient_weight").get<double>();
    m.test_accuracy = c.header.at("test_accuracy").get<double>();
    m.loss_log = c.header.at("loss_log").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed predictor header: " + e.what());
  }
  if (c.blocks.size() != 1) throw IoError(path.string() + ": predictor checkpoint needs one parameter block");
  m.params = nn::ModelParams(m.spec);
  m.params.set_values(c.blocks[0]);
  return m;
}

}  // namespace moerl
