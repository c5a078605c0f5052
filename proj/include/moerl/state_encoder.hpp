#pragma once

#include <filesystem>
#include <string_view>
#include <vector>

#include "moerl/data_pipeline.hpp"
#include "moerl/nn/adam.hpp"
#include "moerl/nn/network.hpp"

namespace moerl {

enum class EncoderKind { recurrent, sparse };

std::string_view to_string(EncoderKind kind);
EncoderKind encoder_kind_from_string(std::string_view name);

struct EncoderConfig {
  nn::TrainingConfig training{};
  int hidden = kEncodedDim;
  double sparsity_target = 0.05;
  double sparsity_weight = 1e-3;

  void validate() const;
};

/// Recurrent: encoder = LSTM(45 -> hidden); decoder = LSTM(1 -> hidden) seeded
/// with the code, fed zeros, then dense(hidden -> 45).
/// Sparse: encoder = dense(45 -> hidden, sigmoid); decoder = dense(hidden -> 45).
struct EncoderModel {
  EncoderKind kind = EncoderKind::recurrent;
  nn::NetworkSpec encoder_spec;
  nn::NetworkSpec decoder_spec;
  nn::ModelParams encoder;
  nn::ModelParams decoder;
  std::vector<double> loss_log;  // mean training loss per epoch

  int code_dim() const { return encoder_spec.output_dim(); }
};

/// Minibatch Adam on reconstruction MSE. Throws NumericalError naming the
/// epoch if the loss turns non-finite.
EncoderModel train_recurrent_autoencoder(const std::vector<data::ProcessedTrajectory>& train,
                                         const EncoderConfig& config);

/// MSE plus sparsity_weight * KL(target || mean hidden activation).
EncoderModel train_sparse_autoencoder(const std::vector<data::Observation>& train, const EncoderConfig& config);

/// Training loss of one minibatch and, optionally, its gradients with respect
/// to the encoder and decoder parameters.
double autoencoder_loss(const EncoderModel& model, const std::vector<data::ProcessedTrajectory>& batch,
                        const EncoderConfig& config, nn::Vector* encoder_grad = nullptr,
                        nn::Vector* decoder_grad = nullptr);

/// All observations of a cohort, in order.
std::vector<data::Observation> flatten_observations(const std::vector<data::ProcessedTrajectory>& cohort);

/// State after the first `prefix_length` steps (recurrent) or of step
/// prefix_length - 1 alone (sparse). UsageError on an empty prefix.
nn::Vector encode_history(const EncoderModel& model, const data::ProcessedTrajectory& trajectory,
                          std::size_t prefix_length);

/// Column t is encode_history(model, trajectory, t + 1).
nn::Matrix encode_prefixes(const EncoderModel& model, const data::ProcessedTrajectory& trajectory);

/// encode_prefixes for every patient, batched.
std::vector<nn::Matrix> encode_cohort(const EncoderModel& model, const std::vector<data::ProcessedTrajectory>& cohort);

/// Mean squared reconstruction error over every observed entry.
double reconstruction_mse(const EncoderModel& model, const std::vector<data::ProcessedTrajectory>& cohort);

void save_encoder(const std::filesystem::path& path, const EncoderModel& model);
EncoderModel load_encoder(const std::filesystem::path& path);

}  // namespace moerl
