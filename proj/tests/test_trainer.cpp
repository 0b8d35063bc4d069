#include <gtest/gtest.h>

#include <set>

#include "moon/trainer.hpp"
#include "test_util.hpp"

using namespace moon;
using moon::testing::to_vector;

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  for (auto& b : m.backbone) {
    b.input_shape = {8, 8, 8};
    b.stem_channels = 2;
    b.channels = {4, 8};
    b.attention_stages = {2};
    b.output_channels = 8;
  }
  m.ori.channels = 8;
  m.ori.iterations = 2;
  m.adaptor_dim = 8;
  m.dcca_hidden = 4;
  m.dcca_out = 3;
  return m;
}

CohortConfig small_cohort(std::size_t n = 60) {
  CohortConfig c;
  c.subjects = n;
  c.val_fraction = 0.15;
  return c;
}

const Dataset& shared_data() {
  static const Dataset d = synth_dataset(small_cohort(), tiny_model());
  return d;
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const double g = rng.uniform(-5, 5);
    if (std::abs(g) < 1e-3) continue;
    auto w = Tensor::scalar(rng.uniform(-1, 1), true);
    const double w0 = w[0];
    scale(w, g).backward();
    std::vector<Tensor> p{w};
    AdamState st;
    adam_step(p, st, 0.01);
    const double expect = -0.01 * (g > 0 ? 1.0 : -1.0) / (1.0 + 1e-8 / std::abs(g));
    EXPECT_NEAR(w[0] - w0, expect, 1e-15);
  }
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto w = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  std::vector<Tensor> p{w};
  AdamState st;
  for (int i = 0; i < 100; ++i) {
    w.zero_grad();
    scale(sum(w), 0.0).backward();
    adam_step(p, st, 0.1);
  }
  EXPECT_EQ(to_vector(w), (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(Adam, QuadraticBowl) {
  auto w = Tensor::scalar(1.0, true);
  std::vector<Tensor> p{w};
  AdamState st;
  for (int i = 0; i < 200; ++i) {
    w.zero_grad();
    mul(w, w).backward();
    adam_step(p, st, 0.1);
  }
  EXPECT_LT(std::abs(w[0]), 0.05);
}

TEST(Schedule, HalvesEveryTwentyEpochs) {
  EXPECT_EQ(lr_schedule(0, 1e-3), 1e-3);
  EXPECT_EQ(lr_schedule(19, 1e-3), 1e-3);
  EXPECT_EQ(lr_schedule(20, 1e-3), 5e-4);
  EXPECT_EQ(lr_schedule(99, 1e-3), 1e-3 / 16);
  EXPECT_EQ(lr_schedule(10, 1.0, 5), 0.25);
}

TEST(Batches, PermutationWithMergedTail) {
  for (std::size_t n : {1u, 7u, 8u, 9u, 33u, 360u}) {
    const auto b = epoch_batches(n, 8, 4, 3, 0);
    std::multiset<std::size_t> seen;
    for (const auto& batch : b) {
      seen.insert(batch.begin(), batch.end());
      if (b.size() > 1) EXPECT_GE(batch.size(), 4u);
    }
    EXPECT_EQ(seen.size(), n);
    EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), n);
  }
  EXPECT_EQ(epoch_batches(50, 8, 4, 3, 2), epoch_batches(50, 8, 4, 3, 2));
  EXPECT_NE(epoch_batches(50, 8, 4, 3, 2), epoch_batches(50, 8, 4, 3, 3));
}

TEST(Augment, FlipsAreInvolutionsAndJitterOffIsIdentity) {
  Rng data(4);
  const auto v = moon::testing::random_tensor(data, {1, 3, 4, 5}, -1, 1, false);
  Rng r0(9);
  EXPECT_EQ(to_vector(augment_volume(v, false, 0.0, r0)), to_vector(v));
  Rng r1(9), r2(9);
  const auto once = augment_volume(v, true, 0.0, r1);
  EXPECT_EQ(to_vector(augment_volume(once, true, 0.0, r2)), to_vector(v));
}

TEST(TrainConfig, Validation) {
  const auto m = tiny_model();
  TrainConfig t;
  t.batch_size = 3;
  EXPECT_THROW(t.validate(m), ConfigError);
  auto single = m;
  single.multi_organ = false;
  EXPECT_NO_THROW(t.validate(single));
  t = TrainConfig{};
  t.lambda = 1.5;
  EXPECT_THROW(t.validate(m), ConfigError);
  t = TrainConfig{};
  t.epochs = 0;
  EXPECT_THROW(t.validate(m), ConfigError);
  const auto parsed = TrainConfig::from_config(FlatConfig::parse("train.epochs = 3\ntrain.lambda = 1\n"));
  EXPECT_EQ(parsed.epochs, 3u);
  EXPECT_EQ(parsed.lambda, 1.0);
  EXPECT_EQ(TrainConfig::from_config(parsed.to_config()).to_config().to_text(), parsed.to_config().to_text());
}

TEST(Train, LambdaOneMakesOverallEqualOrdinal) {
  MoonModel model(tiny_model(), 5);
  TrainConfig tc;
  tc.epochs = 2;
  tc.lambda = 1.0;
  const auto res = train(model, shared_data(), tc);
  for (const auto& r : res.log) {
    EXPECT_EQ(r.overall, r.ordinal);
    ASSERT_TRUE(r.dcca_l.has_value());
    EXPECT_TRUE(std::isfinite(*r.dcca_l));
  }
  // and per batch
  MoonModel m2(tiny_model(), 6);
  const auto& tr = shared_data().train;
  std::vector<const ModelInput*> batch;
  std::vector<int> grades;
  for (std::size_t i = 0; i < 6; ++i) {
    batch.push_back(&tr[i]);
    grades.push_back(tr[i].grade);
  }
  const auto s = batch_objective(m2, m2.forward_batch(batch), grades, 1.0);
  EXPECT_EQ(s.parts.total.item(), s.ordinal.item());
}

TEST(Train, DeterministicLogsAndBestRestore) {
  auto run = [] {
    MoonModel model(tiny_model(), 7);
    TrainConfig tc;
    tc.epochs = 3;
    tc.seed = 7;
    tc.augment_flips = true;
    tc.intensity_jitter = 0.05;
    const auto res = train(model, shared_data(), tc);
    const auto p = predict(model, shared_data().val);
    EXPECT_EQ(accuracy_of(p), res.best_val_acc);
    EXPECT_EQ(tau_of(p), res.best_val_tau);
    return training_log_csv(res.log);
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  EXPECT_EQ(a.substr(0, a.find('\n')), kTrainLogHeader);
}

TEST(Train, LossDropsByHalf) {
  MoonModel model(tiny_model(), 8);
  TrainConfig tc;
  tc.epochs = 40;
  tc.seed = 8;
  const auto res = train(model, shared_data(), tc);
  EXPECT_LT(res.final_train_ordinal, 0.5 * res.initial_train_ordinal);
}

TEST(Train, SingleOrganExcludesOtherBranches) {
  auto cfg = tiny_model();
  cfg.multi_organ = false;
  cfg.prior = PriorMode::none;
  MoonModel model(cfg, 9);
  std::size_t eso = 0;
  for (const auto& e : model.params().entries()) {
    EXPECT_EQ(e.name.find("liver"), std::string::npos);
    EXPECT_EQ(e.name.find("spleen"), std::string::npos);
    EXPECT_EQ(e.name.find("ori"), std::string::npos);
    eso += e.tensor.size();
  }
  EXPECT_EQ(eso, backbone_parameter_count(cfg.backbone[0]));
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 2;
  const auto res = train(model, shared_data(), tc);
  EXPECT_FALSE(res.log[0].dcca_l.has_value());
}

TEST(Train, NonFiniteLossNamesFirstOp) {
  Dataset d;
  d.train = shared_data().train;
  auto v = d.train[0].volumes[0].values();
  std::vector<double> huge(v.begin(), v.end());
  for (auto& x : huge) x = 1e308;
  d.train[0].volumes[0] = Tensor::from(d.train[0].volumes[0].shape(), huge);
  MoonModel model(tiny_model(), 10);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = static_cast<std::size_t>(d.train.size());
  try {
    train(model, d, tc);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("first non-finite op: conv3d"), std::string::npos) << e.what();
  }
}
