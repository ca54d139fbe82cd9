#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "rae/data.hpp"
#include "rae/train.hpp"
#include "test_util.hpp"

namespace rae {
namespace {

using testing::random_tensor;
using testing::TempDir;
using testing::tiny_config;

Tensor synthetic_samples(std::size_t timesteps, std::size_t size, std::uint64_t seed) {
  return series_samples(normalize(gen_synthetic(timesteps, {size, 4, size}, seed, 3)));
}

TrainConfig quick_config(int epochs) {
  TrainConfig c;
  c.max_epochs = epochs;
  c.batch_size = 4;
  c.adam.learning_rate = 1e-3;
  c.early_stop_patience = epochs - 1;
  c.early_stop_min_delta = 0.0;
  c.seed = 3;
  return c;
}

TrainHooks fixed_clock() {
  TrainHooks h;
  h.clock = [] { return 0.0; };
  return h;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  Tensor p = Tensor({3}, {1, -2, 3}).set_requires_grad(true);
  std::vector<Tensor> params{p};
  AdamState st;
  adam_step(std::span<Tensor>(params), st, AdamHyper{0.1});
  EXPECT_EQ(st.step, 1u);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], -2.0);
  EXPECT_EQ(p[2], 3.0);
}

TEST(Adam, ConstantGradientApproachesLearningRateSteps) {
  Tensor p = Tensor({2}, {0, 0}).set_requires_grad(true);
  std::vector<Tensor> params{p};
  AdamState st;
  const AdamHyper h{1e-3};
  double prev0 = 0.0, prev1 = 0.0;
  for (int i = 0; i < 1000; ++i) {
    prev0 = p[0], prev1 = p[1];
    p.mutable_grad()[0] = 2.5;
    p.mutable_grad()[1] = -0.01;
    adam_step(std::span<Tensor>(params), st, h);
  }
  EXPECT_NEAR((p[0] - prev0) / -h.learning_rate, 1.0, 0.01);
  EXPECT_NEAR((p[1] - prev1) / h.learning_rate, 1.0, 0.01);
}

TEST(Adam, MinimizesScalarQuadratic) {
  Tensor w = Tensor({1}, {0.0}).set_requires_grad(true);
  std::vector<Tensor> params{w};
  AdamState st;
  int steps = 0;
  for (; steps < 200 && std::abs(w[0] - 3.0) >= 0.01; ++steps) {
    w.mutable_grad()[0] = 2.0 * (w[0] - 3.0);
    adam_step(std::span<Tensor>(params), st, AdamHyper{0.1});
  }
  EXPECT_LT(std::abs(w[0] - 3.0), 0.01) << "after " << steps << " steps";
}

TEST(Adam, MismatchedStateIsShapeError) {
  Tensor a = Tensor({2}).set_requires_grad(true);
  Tensor b = Tensor({3}).set_requires_grad(true);
  std::vector<Tensor> one{a}, two{a, b};
  AdamState st;
  adam_step(std::span<Tensor>(one), st, AdamHyper{});
  EXPECT_THROW(adam_step(std::span<Tensor>(two), st, AdamHyper{}), ShapeError);
  std::vector<Tensor> other{b};
  EXPECT_THROW(adam_step(std::span<Tensor>(other), st, AdamHyper{}), ShapeError);
}

// ---------------------------------------------------------------------------
// TrainConfig
// ---------------------------------------------------------------------------

TEST(TrainConfigTest, Defaults) {
  EXPECT_EQ(TrainConfig::defaults_for(ModelKind::baseline).max_epochs, 7000);
  const auto r = TrainConfig::defaults_for(ModelKind::residual);
  EXPECT_EQ(r.max_epochs, 100);
  EXPECT_EQ(r.batch_size, 16);
  EXPECT_EQ(r.adam.learning_rate, 1e-4);
  EXPECT_EQ(r.adam.beta1, 0.9);
  EXPECT_EQ(r.adam.beta2, 0.999);
  EXPECT_EQ(r.adam.epsilon, 1e-8);
  EXPECT_EQ(r.early_stop_patience, 20);
  EXPECT_EQ(r.early_stop_min_delta, 1e-5);
}

TEST(TrainConfigTest, RejectsInvalid) {
  TrainConfig c;
  c.early_stop_patience = c.max_epochs;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.adam.learning_rate = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TEST(Train, OverfitsEightSamples) {
  Tensor x = synthetic_samples(2, 16, 11);
  ASSERT_EQ(x.dim(0), 8u);
  ModelConfig mc = tiny_config(16);
  mc.stem_filters = 8;
  mc.rdb = {8, 2, 4, 0.2};
  mc.encoder_stage_out_channels = {8, 8, 4, 4};
  ResidualAutoencoder m(mc);
  TrainConfig c = quick_config(2000);
  c.batch_size = 1;
  c.adam.learning_rate = 2e-3;
  TrainHooks h;
  h.stop_when = [](const EpochRow& r) { return r.train_loss < 1e-3; };
  auto res = train(m, x, std::nullopt, c, h);
  EXPECT_LT(res.best_loss, 1e-3) << "after " << res.record.rows.size() << " epochs";
  EXPECT_LE(res.record.rows.size(), 2000u);
}

TEST(Train, EarlyStopFiresAfterOnePlusPatience) {
  Tensor x = synthetic_samples(1, 16, 12);
  ResidualAutoencoder m(tiny_config(16));
  TrainConfig c = quick_config(10);
  c.adam.learning_rate = 0.0;
  c.early_stop_patience = 1;
  c.early_stop_min_delta = 1e-5;
  auto res = train(m, x, x, c, fixed_clock());
  EXPECT_TRUE(res.stopped_early);
  EXPECT_EQ(res.record.rows.size(), 2u);
  EXPECT_EQ(res.best_epoch, 1);
}

TEST(Train, IdenticalSeedsGiveIdenticalRecords) {
  set_deterministic(true);
  Tensor x = synthetic_samples(1, 16, 13);
  auto run = [&] {
    ResidualAutoencoder m(tiny_config(16));
    return train(m, x, x, quick_config(4), fixed_clock());
  };
  auto a = run(), b = run();
  set_deterministic(false);
  ASSERT_EQ(a.record.rows.size(), b.record.rows.size());
  for (std::size_t i = 0; i < a.record.rows.size(); ++i) {
    EXPECT_EQ(a.record.rows[i].train_loss, b.record.rows[i].train_loss);
    EXPECT_EQ(a.record.rows[i].test_loss, b.record.rows[i].test_loss);
    EXPECT_EQ(a.record.rows[i].is_best, b.record.rows[i].is_best);
  }
  EXPECT_EQ(a.best_weights, b.best_weights);
}

TEST(Train, ReturnedWeightsAchieveMinimumRecordedLoss) {
  Tensor x = synthetic_samples(2, 16, 14);
  Tensor test = synthetic_samples(1, 16, 15);
  ResidualAutoencoder m(tiny_config(16));
  TrainConfig c = quick_config(6);
  c.adam.learning_rate = 3e-2;  // large enough that the curve is not monotone
  auto res = train(m, x, test, c, fixed_clock());
  double min_loss = std::numeric_limits<double>::infinity();
  int best_marks = 0;
  for (const auto& r : res.record.rows) {
    min_loss = std::min(min_loss, r.test_loss);
    best_marks += r.is_best;
  }
  EXPECT_EQ(best_marks, 1);
  EXPECT_EQ(res.best_loss, min_loss);
  EXPECT_NEAR(evaluate_loss(m, test, c.batch_size), min_loss, 1e-12);
  for (std::size_t i = 1; i < res.record.rows.size(); ++i)
    EXPECT_GT(res.record.rows[i].epoch, res.record.rows[i - 1].epoch);
}

TEST(Train, FirstEpochDescendsWithSmallLearningRate) {
  Tensor x = synthetic_samples(1, 16, 16);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    ModelConfig mc = tiny_config(16);
    mc.init_seed = seed;
    ResidualAutoencoder m(mc);
    const double initial = evaluate_loss(m, x, 4);
    TrainConfig c = quick_config(2);
    c.batch_size = static_cast<int>(x.dim(0));
    c.adam.learning_rate = 1e-5;
    c.early_stop_patience = 1;
    TrainHooks h = fixed_clock();
    h.halt_after_epoch = 1;
    train(m, x, std::nullopt, c, h);
    EXPECT_LE(evaluate_loss(m, x, 4), initial) << "seed " << seed;
  }
}

TEST(Train, FullBatchIsInvariantToSampleOrder) {
  Tensor x = synthetic_samples(1, 16, 17);
  std::vector<std::size_t> perm(x.dim(0));
  std::iota(perm.rbegin(), perm.rend(), 0);
  Tensor shuffled = gather_samples(x, perm);
  auto run = [&](const Tensor& data) {
    ResidualAutoencoder m(tiny_config(16));
    TrainConfig c = quick_config(3);
    c.batch_size = static_cast<int>(x.dim(0));
    return train(m, data, std::nullopt, c, fixed_clock());
  };
  auto a = run(x), b = run(shuffled);
  for (std::size_t i = 0; i < a.record.rows.size(); ++i)
    EXPECT_NEAR(a.record.rows[i].train_loss, b.record.rows[i].train_loss, 1e-12 * a.record.rows[i].train_loss);
}

TEST(Train, EpochOrderIsSeededPermutation) {
  auto a = epoch_order(50, 7, 3), b = epoch_order(50, 7, 3), c = epoch_order(50, 7, 4);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  std::sort(c.begin(), c.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(c[i], i);
}

TEST(Train, NonFiniteLossNamesEpochAndBatch) {
  Tensor x = synthetic_samples(1, 16, 18).clone();
  x.mutable_data()[x.numel() - 1] = std::numeric_limits<double>::quiet_NaN();
  ResidualAutoencoder m(tiny_config(16));
  TrainConfig c = quick_config(3);
  c.seed = 0;
  try {
    train(m, x, std::nullopt, c, fixed_clock());
    FAIL();
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch"), std::string::npos) << msg;
  }
}

TEST(Train, EmptyOrMalformedTrainSetIsError) {
  ResidualAutoencoder m(tiny_config(16));
  EXPECT_THROW(train(m, Tensor(), std::nullopt, quick_config(3)), ConfigError);
  EXPECT_THROW(train(m, Tensor({1, 16, 16}), std::nullopt, quick_config(3)), ConfigError);
}

TEST(Train, ResumeFromCheckpointIsExact) {
  set_deterministic(true);
  TempDir dir;
  Tensor x = synthetic_samples(2, 16, 19);
  Tensor test = synthetic_samples(1, 16, 20);
  TrainConfig c = quick_config(6);
  c.checkpoint_every = 3;

  ResidualAutoencoder straight(tiny_config(16));
  auto full = train(straight, x, test, c, fixed_clock());

  ResidualAutoencoder first(tiny_config(16));
  TrainHooks h = fixed_clock();
  h.checkpoint_path = dir / "ckpt.bin";
  h.halt_after_epoch = 3;
  train(first, x, test, c, h);

  ModelConfig other = tiny_config(16);
  other.init_seed = 1234;
  ResidualAutoencoder resumed(other);
  TrainHooks r = fixed_clock();
  r.resume = load_checkpoint(dir / "ckpt.bin", resumed.weights());
  EXPECT_EQ(r.resume->epoch, 3);
  auto rest = train(resumed, x, test, c, r);
  set_deterministic(false);

  ASSERT_EQ(rest.record.rows.size(), full.record.rows.size());
  for (std::size_t i = 0; i < full.record.rows.size(); ++i) {
    EXPECT_EQ(rest.record.rows[i].train_loss, full.record.rows[i].train_loss) << i;
    EXPECT_EQ(rest.record.rows[i].test_loss, full.record.rows[i].test_loss) << i;
  }
  EXPECT_EQ(resumed.weights().snapshot(), straight.weights().snapshot());
}

TEST(Train, CheckpointIntoWrongTopologyFails) {
  TempDir dir;
  ResidualAutoencoder a(tiny_config(16));
  save_checkpoint(dir / "c.bin", a.weights(), TrainState{});
  ModelConfig other = tiny_config(16);
  other.stem_filters = 5;
  ResidualAutoencoder b(other);
  EXPECT_THROW(load_checkpoint(dir / "c.bin", b.weights()), TopologyError);
  auto bytes = io::read_file(dir / "c.bin");
  bytes.resize(bytes.size() - 3);
  io::write_file_atomic(dir / "t.bin", bytes);
  EXPECT_THROW(load_checkpoint(dir / "t.bin", a.weights()), FormatError);
}

// ---------------------------------------------------------------------------
// Loss log
// ---------------------------------------------------------------------------

std::size_t line_count(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

TEST(LossLog, ThreeEpochsGiveFourLines) {
  TempDir dir;
  TrainRecord rec;
  for (int e = 1; e <= 3; ++e) rec.rows.push_back({e, 0.5 / e, 0.6 / e, 0.01 * e, e == 3});
  write_loss_log(rec, dir / "loss.csv");
  EXPECT_EQ(line_count(dir / "loss.csv"), 4u);
  std::ifstream in(dir / "loss.csv");
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  EXPECT_EQ(header, "epoch,train_loss,test_loss,seconds,is_best");
  EXPECT_EQ(first, "1,0.500000,0.600000,0.010000,0");
}

TEST(LossLog, RoundTripWithinSixDecimals) {
  TempDir dir;
  std::mt19937_64 rng(21);
  TrainRecord rec;
  for (int e = 1; e <= 20; ++e) {
    std::uniform_real_distribution<double> u(0, 2);
    rec.rows.push_back({e, u(rng), u(rng), u(rng), e == 7});
  }
  write_loss_log(rec, dir / "loss.csv");
  TrainRecord back = read_loss_log(dir / "loss.csv");
  ASSERT_EQ(back.rows.size(), rec.rows.size());
  for (std::size_t i = 0; i < rec.rows.size(); ++i) {
    EXPECT_EQ(back.rows[i].epoch, rec.rows[i].epoch);
    EXPECT_NEAR(back.rows[i].train_loss, rec.rows[i].train_loss, 1e-6);
    EXPECT_NEAR(back.rows[i].test_loss, rec.rows[i].test_loss, 1e-6);
    EXPECT_EQ(back.rows[i].is_best, rec.rows[i].is_best);
  }
  EXPECT_EQ(back.best_epoch(), 7);
}

TEST(LossLog, EmptyRecordIsHeaderOnly) {
  TempDir dir;
  write_loss_log(TrainRecord{}, dir / "loss.csv");
  EXPECT_EQ(line_count(dir / "loss.csv"), 1u);
  EXPECT_TRUE(read_loss_log(dir / "loss.csv").rows.empty());
}

TEST(LossLog, UnwritablePathIsIoError) {
  EXPECT_THROW(write_loss_log(TrainRecord{}, "/nonexistent-dir/x/loss.csv"), IoError);
}

}  // namespace
}  // namespace rae
