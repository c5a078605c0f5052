#include <gtest/gtest.h>

#include <filesystem>

#include "moerl/error.hpp"
#include "moerl/nn/checkpoint.hpp"
#include "moerl/nn/grad_check.hpp"
#include "moerl/state_encoder.hpp"
#include "test_support.hpp"

using namespace moerl;

namespace {

EncoderConfig small_config(int epochs, double lr = 1e-3, std::uint64_t seed = 1) {
  EncoderConfig c;
  c.training.epochs = epochs;
  c.training.learning_rate = lr;
  c.training.seed = seed;
  return c;
}

data::ProcessedTrajectory constant_sequence(const std::string& id, double v, int len) {
  data::ProcessedTrajectory t;
  t.patient_id = id;
  for (int k = 0; k < len; ++k) {
    data::ProcessedStep s;
    s.observation.values.fill(v);
    t.steps.push_back(s);
  }
  return t;
}

const fixtures::ProcessedSplit& cohort() {
  static const auto c = fixtures::processed_sim_cohort(400, 21);
  return c;
}

const EncoderModel& trained_recurrent() {
  static const auto m = train_recurrent_autoencoder(cohort().train, small_config(50));
  return m;
}

}  // namespace

TEST(RecurrentAutoencoder, MemorizesConstantSequences) {
  std::vector<data::ProcessedTrajectory> train;
  for (int i = 0; i < 32; ++i) train.push_back(constant_sequence("c" + std::to_string(i), 0.3, 3));
  auto m = train_recurrent_autoencoder(train, small_config(300, 1e-2));
  EXPECT_LT(m.loss_log.back(), 1e-4);
  EXPECT_LT(reconstruction_mse(m, train), 1e-4);
}

TEST(RecurrentAutoencoder, LossHalvesOnSyntheticCohort) {
  const auto& m = trained_recurrent();
  ASSERT_EQ(m.loss_log.size(), 50u);
  EXPECT_LT(m.loss_log.back(), 0.5 * m.loss_log.front());
}

TEST(RecurrentAutoencoder, HeldOutWithinTwiceTraining) {
  const auto& m = trained_recurrent();
  EXPECT_LE(reconstruction_mse(m, cohort().test), 2.0 * reconstruction_mse(m, cohort().train));
}

TEST(RecurrentAutoencoder, SeedFixedRunsGiveIdenticalCheckpoints) {
  std::vector<data::ProcessedTrajectory> few(cohort().train.begin(), cohort().train.begin() + 40);
  auto a = train_recurrent_autoencoder(few, small_config(2, 1e-3, 9));
  auto b = train_recurrent_autoencoder(few, small_config(2, 1e-3, 9));
  const auto dir = std::filesystem::temp_directory_path() / "moerl_enc_test";
  std::filesystem::create_directories(dir);
  save_encoder(dir / "a.ckpt", a);
  save_encoder(dir / "b.ckpt", b);
  EXPECT_EQ(nn::read_file(dir / "a.ckpt"), nn::read_file(dir / "b.ckpt"));
  auto back = load_encoder(dir / "a.ckpt");
  EXPECT_EQ(back.encoder.values(), a.encoder.values());
  EXPECT_EQ(back.decoder.values(), a.decoder.values());
  EXPECT_EQ(back.loss_log, a.loss_log);
  std::filesystem::remove_all(dir);
}

TEST(RecurrentAutoencoder, GradientMatchesFiniteDifferences) {
  EncoderConfig c = small_config(0);
  c.hidden = 5;
  auto m = train_recurrent_autoencoder({constant_sequence("x", 0.1, 1)}, c);
  std::mt19937_64 rng(3);
  std::vector<data::ProcessedTrajectory> batch(2);
  for (int i = 0; i < 2; ++i) {
    for (int t = 0; t < 3 - i; ++t) batch[static_cast<std::size_t>(i)].steps.push_back({fixtures::random_observation(rng), 0});
  }
  nn::Vector ge, gd;
  autoencoder_loss(m, batch, c, &ge, &gd);
  auto enc_loss = [&](const nn::Vector& v) {
    auto copy = m;
    copy.encoder.set_values(v);
    return autoencoder_loss(copy, batch, c);
  };
  auto dec_loss = [&](const nn::Vector& v) {
    auto copy = m;
    copy.decoder.set_values(v);
    return autoencoder_loss(copy, batch, c);
  };
  // Gradients through the code are ~1e-9; the five-point stencil keeps the
  // finite-difference roundoff below them.
  EXPECT_LT(nn::grad_check(enc_loss, ge, m.encoder.values(), 1e-3, nn::Stencil::five_point), 1e-4);
  EXPECT_LT(nn::grad_check(dec_loss, gd, m.decoder.values(), 1e-3, nn::Stencil::five_point), 1e-4);
}

TEST(EncodeHistory, ShapeDeterminismAndRecurrence) {
  const auto& m = trained_recurrent();
  const auto& t = cohort().test.at(0);
  auto a = encode_history(m, t, 1);
  auto b = encode_history(m, t, 1);
  EXPECT_EQ(a.size(), 128);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(a.allFinite());

  data::ProcessedTrajectory two;
  two.steps = {t.steps[0], t.steps[0]};
  for (auto& v : two.steps[1].observation.values) v = 1.0 - v;
  EXPECT_GT((encode_history(m, two, 2) - encode_history(m, two, 1)).norm(), 1e-6);
  EXPECT_THROW(encode_history(m, t, 0), UsageError);
}

TEST(EncodeHistory, PrefixIgnoresFutureSteps) {
  const auto& m = trained_recurrent();
  data::ProcessedTrajectory t;
  for (const auto& cand : cohort().test)
    if (cand.steps.size() >= 3) t = cand;
  ASSERT_GE(t.steps.size(), 3u);
  auto before = encode_history(m, t, 2);
  auto mutated = t;
  for (auto& v : mutated.steps[2].observation.values) v = 0.5 * v + 0.25;
  EXPECT_EQ(encode_history(m, mutated, 2), before);
}

TEST(EncodeHistory, BatchedPrefixesMatchSingle) {
  const auto& m = trained_recurrent();
  auto all = encode_cohort(m, cohort().test);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& t = cohort().test[i];
    ASSERT_EQ(all[i].cols(), static_cast<Eigen::Index>(t.steps.size()));
    for (std::size_t k = 0; k < t.steps.size(); ++k) {
      EXPECT_LT((all[i].col(static_cast<Eigen::Index>(k)) - encode_history(m, t, k + 1)).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(SparseAutoencoder, ZeroInputDecreasesLossTowardTarget) {
  std::vector<data::Observation> zeros(256);
  auto m = train_sparse_autoencoder(zeros, small_config(40, 1e-2));
  EXPECT_LT(m.loss_log.back(), m.loss_log.front());
  std::vector<data::ProcessedTrajectory> cohort_of_zeros{constant_sequence("z", 0.0, 4)};
  EXPECT_LT(reconstruction_mse(m, cohort_of_zeros), 1e-3);
  auto codes = encode_cohort(m, cohort_of_zeros).front();
  EXPECT_LT(std::abs(codes.mean() - 0.05), std::abs(0.5 - 0.05));
}

TEST(SparseAutoencoder, LearnsSyntheticObservations) {
  auto obs = flatten_observations(cohort().train);
  auto m = train_sparse_autoencoder(obs, small_config(10));
  EXPECT_LT(m.loss_log.back(), m.loss_log.front());
  auto a = encode_history(m, cohort().test[0], 1);
  EXPECT_EQ(a, encode_history(m, cohort().test[0], 1));
  EXPECT_EQ(a.size(), 128);
}

TEST(SparseAutoencoder, GradientMatchesFiniteDifferences) {
  EncoderConfig c = small_config(0);
  c.hidden = 6;
  c.sparsity_weight = 0.5;
  auto m = train_sparse_autoencoder({data::Observation{}}, c);
  std::mt19937_64 rng(4);
  std::vector<data::ProcessedTrajectory> batch(1);
  for (int t = 0; t < 3; ++t) batch[0].steps.push_back({fixtures::random_observation(rng), 0});
  nn::Vector ge, gd;
  autoencoder_loss(m, batch, c, &ge, &gd);
  auto enc_loss = [&](const nn::Vector& v) {
    auto copy = m;
    copy.encoder.set_values(v);
    return autoencoder_loss(copy, batch, c);
  };
  EXPECT_LT(nn::grad_check(enc_loss, ge, m.encoder.values()), 1e-4);
}

TEST(EncoderConfig, RejectsBadValues) {
  EncoderConfig c;
  c.sparsity_target = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(encoder_kind_from_string("conv"), ConfigError);
}
