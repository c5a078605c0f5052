#include "moerl/state_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "moerl/error.hpp"
#include "moerl/nn/checkpoint.hpp"
#include "moerl/nn/loss.hpp"

namespace moerl {

using nn::Matrix;
using nn::Sequence;
using nn::Vector;

std::string_view to_string(EncoderKind kind) { return kind == EncoderKind::recurrent ? "recurrent" : "sparse"; }

EncoderKind encoder_kind_from_string(std::string_view name) {
  if (name == "recurrent") return EncoderKind::recurrent;
  if (name == "sparse") return EncoderKind::sparse;
  throw ConfigError("unknown encoder kind '" + std::string(name) + "' (expected recurrent or sparse)");
}

void EncoderConfig::validate() const {
  training.validate();
  if (hidden < 1) throw ConfigError("encoder.hidden must be >= 1");
  if (!(sparsity_target > 0.0 && sparsity_target < 1.0)) throw ConfigError("encoder.sparsity_target must lie in (0,1)");
  if (!(sparsity_weight >= 0.0)) throw ConfigError("encoder.sparsity_weight must be >= 0");
}

namespace {

struct Batch {
  Sequence x;  // T_max steps of (45 x B), zero past each sequence's end
  std::vector<std::size_t> lengths;
};

Batch make_batch(const std::vector<data::ProcessedTrajectory>& cohort, const std::size_t* idx, std::size_t count,
                 std::size_t max_steps = 0) {
  Batch b;
  std::size_t t_max = 0;
  for (std::size_t k = 0; k < count; ++k) {
    std::size_t len = cohort[idx[k]].steps.size();
    if (max_steps > 0) len = std::min(len, max_steps);
    if (len == 0) throw UsageError("patient " + cohort[idx[k]].patient_id + " has no steps");
    b.lengths.push_back(len);
    t_max = std::max(t_max, len);
  }
  const auto B = static_cast<Eigen::Index>(count);
  b.x.assign(t_max, Matrix::Zero(kFeatureCount, B));
  for (std::size_t k = 0; k < count; ++k) {
    const auto& steps = cohort[idx[k]].steps;
    for (std::size_t t = 0; t < b.lengths[k]; ++t) {
      b.x[t].col(static_cast<Eigen::Index>(k)) =
          Eigen::Map<const Vector>(steps[t].observation.values.data(), kFeatureCount);
    }
  }
  return b;
}

Matrix last_hidden(const Sequence& h, const std::vector<std::size_t>& lengths) {
  Matrix code(h.front().rows(), static_cast<Eigen::Index>(lengths.size()));
  for (std::size_t k = 0; k < lengths.size(); ++k) {
    code.col(static_cast<Eigen::Index>(k)) = h[lengths[k] - 1].col(static_cast<Eigen::Index>(k));
  }
  return code;
}

Sequence zero_inputs(std::size_t steps, Eigen::Index batch) { return Sequence(steps, Matrix::Zero(1, batch)); }

struct RecurrentPass {
  double sse = 0.0;
  double count = 0.0;
  Vector encoder_grad, decoder_grad;
};

RecurrentPass recurrent_pass(const EncoderModel& m, const Batch& b, bool want_grad) {
  RecurrentPass out;
  const auto B = static_cast<Eigen::Index>(b.lengths.size());
  const std::size_t T = b.x.size();
  auto enc = nn::forward(m.encoder, m.encoder_spec, b.x);
  const Matrix code = last_hidden(enc.output, b.lengths);
  auto dec = nn::forward(m.decoder, m.decoder_spec, zero_inputs(T, B), &code);
  Sequence diff(T);
  for (std::size_t t = 0; t < T; ++t) {
    diff[t] = dec.output[t] - b.x[t];
    for (Eigen::Index k = 0; k < B; ++k) {
      if (t >= b.lengths[static_cast<std::size_t>(k)]) diff[t].col(k).setZero();
    }
    out.sse += diff[t].squaredNorm();
  }
  for (auto len : b.lengths) out.count += static_cast<double>(len * kFeatureCount);
  if (!want_grad) return out;
  for (auto& d : diff) d *= 2.0 / out.count;
  auto dg = nn::backward(m.decoder, m.decoder_spec, dec, diff);
  Sequence enc_grad(T);
  for (std::size_t t = 0; t < T; ++t) {
    for (Eigen::Index k = 0; k < B; ++k) {
      if (b.lengths[static_cast<std::size_t>(k)] != t + 1) continue;
      if (enc_grad[t].size() == 0) enc_grad[t] = Matrix::Zero(code.rows(), B);
      enc_grad[t].col(k) = dg.initial_hidden.col(k);
    }
  }
  auto eg = nn::backward(m.encoder, m.encoder_spec, enc, enc_grad);
  out.encoder_grad = std::move(eg.params);
  out.decoder_grad = std::move(dg.params);
  return out;
}

double sparse_pass(const EncoderModel& m, const Matrix& x, const EncoderConfig& config, Vector* encoder_grad,
                   Vector* decoder_grad) {
  auto enc = nn::forward(m.encoder, m.encoder_spec, {x});
  auto dec = nn::forward(m.decoder, m.decoder_spec, enc.output);
  auto rec = nn::mse(dec.output[0], x);
  auto kl = nn::kl_sparsity(enc.output[0], config.sparsity_target);
  const double loss = rec.value + config.sparsity_weight * kl.value;
  if (encoder_grad == nullptr && decoder_grad == nullptr) return loss;
  auto dg = nn::backward(m.decoder, m.decoder_spec, dec, {rec.grad});
  Matrix dh = dg.input[0] + config.sparsity_weight * kl.grad;
  auto eg = nn::backward(m.encoder, m.encoder_spec, enc, {dh});
  if (encoder_grad != nullptr) *encoder_grad = std::move(eg.params);
  if (decoder_grad != nullptr) *decoder_grad = std::move(dg.params);
  return loss;
}

void check_epoch(double loss, int epoch) {
  if (!std::isfinite(loss)) {
    throw NumericalError("encoder training diverged (non-finite loss) at epoch " + std::to_string(epoch));
  }
}

}  // namespace

EncoderModel train_recurrent_autoencoder(const std::vector<data::ProcessedTrajectory>& train,
                                         const EncoderConfig& config) {
  config.validate();
  if (train.empty()) throw DataError("recurrent autoencoder needs at least one trajectory");
  EncoderModel m;
  m.kind = EncoderKind::recurrent;
  m.encoder_spec = {{nn::lstm_layer(kFeatureCount, config.hidden)}, mix_seed(config.training.seed, 1)};
  m.decoder_spec = {{nn::lstm_layer(1, config.hidden), nn::dense_layer(config.hidden, kFeatureCount, nn::Activation::identity)},
                    mix_seed(config.training.seed, 2)};
  m.encoder = nn::ModelParams::glorot_uniform(m.encoder_spec);
  m.decoder = nn::ModelParams::glorot_uniform(m.decoder_spec);

  std::mt19937_64 rng(mix_seed(config.training.seed, 3));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(config.training.batch_size);
  const auto adam = config.training.adam();
  for (int epoch = 0; epoch < config.training.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t count = std::min(batch, order.size() - start);
      auto b = make_batch(train, order.data() + start, count);
      auto pass = recurrent_pass(m, b, true);
      const double loss = pass.sse / pass.count;
      check_epoch(loss, epoch);
      nn::adam_step(m.encoder, pass.encoder_grad, adam);
      nn::adam_step(m.decoder, pass.decoder_grad, adam);
      total += loss;
      ++batches;
    }
    m.loss_log.push_back(total / batches);
  }
  return m;
}

EncoderModel train_sparse_autoencoder(const std::vector<data::Observation>& train, const EncoderConfig& config) {
  config.validate();
  if (train.empty()) throw DataError("sparse autoencoder needs at least one observation");
  EncoderModel m;
  m.kind = EncoderKind::sparse;
  m.encoder_spec = {{nn::dense_layer(kFeatureCount, config.hidden, nn::Activation::sigmoid)},
                    mix_seed(config.training.seed, 1)};
  m.decoder_spec = {{nn::dense_layer(config.hidden, kFeatureCount, nn::Activation::identity)},
                    mix_seed(config.training.seed, 2)};
  m.encoder = nn::ModelParams::glorot_uniform(m.encoder_spec);
  m.decoder = nn::ModelParams::glorot_uniform(m.decoder_spec);

  std::mt19937_64 rng(mix_seed(config.training.seed, 3));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(config.training.batch_size);
  const auto adam = config.training.adam();
  for (int epoch = 0; epoch < config.training.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t count = std::min(batch, order.size() - start);
      Matrix x(kFeatureCount, static_cast<Eigen::Index>(count));
      for (std::size_t k = 0; k < count; ++k) {
        x.col(static_cast<Eigen::Index>(k)) = Eigen::Map<const Vector>(train[order[start + k]].values.data(), kFeatureCount);
      }
      Vector eg, dg;
      const double loss = sparse_pass(m, x, config, &eg, &dg);
      check_epoch(loss, epoch);
      nn::adam_step(m.encoder, eg, adam);
      nn::adam_step(m.decoder, dg, adam);
      total += loss;
      ++batches;
    }
    m.loss_log.push_back(total / batches);
  }
  return m;
}

double autoencoder_loss(const EncoderModel& model, const std::vector<data::ProcessedTrajectory>& batch,
                        const EncoderConfig& config, Vector* encoder_grad, Vector* decoder_grad) {
  if (batch.empty()) throw UsageError("autoencoder_loss of an empty batch");
  const bool want = encoder_grad != nullptr || decoder_grad != nullptr;
  if (model.kind == EncoderKind::recurrent) {
    std::vector<std::size_t> idx(batch.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto pass = recurrent_pass(model, make_batch(batch, idx.data(), idx.size()), want);
    if (encoder_grad != nullptr) *encoder_grad = std::move(pass.encoder_grad);
    if (decoder_grad != nullptr) *decoder_grad = std::move(pass.decoder_grad);
    return pass.sse / pass.count;
  }
  const auto obs = flatten_observations(batch);
  Matrix x(kFeatureCount, static_cast<Eigen::Index>(obs.size()));
  for (std::size_t k = 0; k < obs.size(); ++k) {
    x.col(static_cast<Eigen::Index>(k)) = Eigen::Map<const Vector>(obs[k].values.data(), kFeatureCount);
  }
  return sparse_pass(model, x, config, encoder_grad, decoder_grad);
}

std::vector<data::Observation> flatten_observations(const std::vector<data::ProcessedTrajectory>& cohort) {
  std::vector<data::Observation> out;
  for (const auto& t : cohort)
    for (const auto& s : t.steps) out.push_back(s.observation);
  return out;
}

Vector encode_history(const EncoderModel& model, const data::ProcessedTrajectory& trajectory,
                      std::size_t prefix_length) {
  if (prefix_length == 0) throw UsageError("encode_history needs a non-empty history");
  if (prefix_length > trajectory.steps.size()) throw UsageError("prefix longer than the trajectory");
  if (model.kind == EncoderKind::sparse) {
    Matrix x = Eigen::Map<const Vector>(trajectory.steps[prefix_length - 1].observation.values.data(), kFeatureCount);
    return nn::predict(model.encoder, model.encoder_spec, x).col(0);
  }
  std::vector<data::ProcessedTrajectory> one{trajectory};
  const std::size_t idx = 0;
  auto b = make_batch(one, &idx, 1, prefix_length);
  auto enc = nn::forward(model.encoder, model.encoder_spec, b.x);
  return enc.output.back().col(0);
}

Matrix encode_prefixes(const EncoderModel& model, const data::ProcessedTrajectory& trajectory) {
  return encode_cohort(model, {trajectory}).front();
}

std::vector<Matrix> encode_cohort(const EncoderModel& model, const std::vector<data::ProcessedTrajectory>& cohort) {
  std::vector<Matrix> out(cohort.size());
  constexpr std::size_t kChunk = 256;
  std::vector<std::size_t> idx(cohort.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t start = 0; start < cohort.size(); start += kChunk) {
    const std::size_t count = std::min(kChunk, cohort.size() - start);
    auto b = make_batch(cohort, idx.data() + start, count);
    if (model.kind == EncoderKind::recurrent) {
      auto enc = nn::forward(model.encoder, model.encoder_spec, b.x);
      for (std::size_t k = 0; k < count; ++k) {
        Matrix& m = out[start + k];
        m.resize(model.code_dim(), static_cast<Eigen::Index>(b.lengths[k]));
        for (std::size_t t = 0; t < b.lengths[k]; ++t) {
          m.col(static_cast<Eigen::Index>(t)) = enc.output[t].col(static_cast<Eigen::Index>(k));
        }
      }
    } else {
      for (std::size_t k = 0; k < count; ++k) {
        const auto& steps = cohort[start + k].steps;
        Matrix x(kFeatureCount, static_cast<Eigen::Index>(steps.size()));
        for (std::size_t t = 0; t < steps.size(); ++t) {
          x.col(static_cast<Eigen::Index>(t)) = Eigen::Map<const Vector>(steps[t].observation.values.data(), kFeatureCount);
        }
        out[start + k] = nn::predict(model.encoder, model.encoder_spec, x);
      }
    }
  }
  return out;
}

double reconstruction_mse(const EncoderModel& model, const std::vector<data::ProcessedTrajectory>& cohort) {
  if (cohort.empty()) throw DataError("reconstruction_mse of an empty cohort");
  double sse = 0.0, count = 0.0;
  if (model.kind == EncoderKind::recurrent) {
    constexpr std::size_t kChunk = 256;
    std::vector<std::size_t> idx(cohort.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t start = 0; start < cohort.size(); start += kChunk) {
      auto b = make_batch(cohort, idx.data() + start, std::min(kChunk, cohort.size() - start));
      auto pass = recurrent_pass(model, b, false);
      sse += pass.sse;
      count += pass.count;
    }
  } else {
    for (const auto& t : cohort) {
      for (const auto& s : t.steps) {
        Matrix x = Eigen::Map<const Vector>(s.observation.values.data(), kFeatureCount);
        Matrix y = nn::predict(model.decoder, model.decoder_spec, nn::predict(model.encoder, model.encoder_spec, x));
        sse += (y - x).squaredNorm();
        count += kFeatureCount;
      }
    }
  }
  return sse / count;
}

void save_encoder(const std::filesystem::path& path, const EncoderModel& model) {
  nn::Checkpoint c;
  c.header = {{"type", "encoder"},
              {"kind", std::string(to_string(model.kind))},
              {"encoder_spec", nn::to_json(model.encoder_spec)},
              {"decoder_spec", nn::to_json(model.decoder_spec)},
              {"loss_log", model.loss_log}};
  c.blocks = {model.encoder.values(), model.decoder.values()};
  nn::save_checkpoint(path, c);
}

EncoderModel load_encoder(const std::filesystem::path& path) {
  auto c = nn::load_checkpoint(path);
  EncoderModel m;
  try {
    if (c.header.at("type") != "encoder") throw IoError(path.string() + " is not an encoder checkpoint");
    m.kind = encoder_kind_from_string(c.header.at("kind").get<std::string>());
    m.encoder_spec = nn::network_spec_from_json(c.header.at("encoder_spec"));
    m.decoder_spec = nn::network_spec_from_json(c.header.at("decoder_spec"));
    m.loss_log = c.header.at("loss_log").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed encoder header: " + e.what());
  }
  if (c.blocks.size() != 2) throw IoError(path.string() + ": encoder checkpoint needs two parameter blocks");
  m.encoder = nn::ModelParams(m.encoder_spec);
  m.decoder = nn::ModelParams(m.decoder_spec);
  m.encoder.set_values(c.blocks[0]);
  m.decoder.set_values(c.blocks[1]);
  return m;
}

}  // namespace moerl
