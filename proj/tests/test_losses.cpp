#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "moon/gradcheck.hpp"
#include "moon/losses.hpp"
#include "test_util.hpp"

using namespace moon;
using moon::testing::random_tensor;

TEST(Ordinal, EncodeIsCumulative) {
  EXPECT_EQ(ordinal_encode(0, 4), (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(ordinal_encode(3, 4), (std::vector<double>{1, 1, 1}));
  EXPECT_EQ(ordinal_encode(2, 4), (std::vector<double>{1, 1, 0}));
  EXPECT_THROW(ordinal_encode(4, 4), ConfigError);
  EXPECT_THROW(ordinal_encode(-1, 4), ConfigError);
}

TEST(Ordinal, DecodeCountsEntriesAboveHalf) {
  const std::vector<double> a{0.9, 0.6, 0.2}, b{0.1, 0.1, 0.1};
  EXPECT_EQ(ordinal_decode(a), 2);
  EXPECT_EQ(ordinal_decode(b), 0);
}

TEST(Ordinal, RoundTripForAllGradeCounts) {
  for (int k = 2; k <= 6; ++k)
    for (int g = 0; g < k; ++g) EXPECT_EQ(ordinal_decode(ordinal_encode(g, k)), g);
}

TEST(Ordinal, DecodeIsMonotoneInEachCoordinate) {
  Rng rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> v(3);
    for (auto& x : v) x = rng.uniform();
    const int base = ordinal_decode(v);
    const std::size_t j = rng.index(3);
    v[j] = std::min(1.0, v[j] + rng.uniform());
    EXPECT_GE(ordinal_decode(v), base);
  }
}

TEST(OrdinalLoss, Examples) {
  const std::vector<int> g0{0}, g03{0, 3};
  EXPECT_DOUBLE_EQ(ordinal_loss(Tensor::from({1, 3}, {0.5, 0.5, 0.5}), g0).item(), 0.75);
  EXPECT_DOUBLE_EQ(ordinal_loss(Tensor::from({2, 3}, {0, 0, 0, 1, 1, 1}), g03).item(), 0.0);
  const std::vector<int> g00{0, 0};
  EXPECT_DOUBLE_EQ(ordinal_loss(Tensor::from({2, 3}, {0, 0, 0, 0.5, 0.5, 0.5}), g00).item(), 0.375);
  EXPECT_THROW(ordinal_loss(Tensor::from({1, 3}, {0, 0, 0}), g00), ShapeError);
}

TEST(OrdinalLoss, NonNegativeAndZeroOnlyAtEncodings) {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> grades(4);
    for (auto& g : grades) g = int(rng.index(4));
    const auto pred = random_tensor(rng, {4, 3}, 0, 1, false);
    EXPECT_GT(ordinal_loss(pred, grades).item(), 0.0);
    EXPECT_EQ(ordinal_loss(ordinal_targets(grades, 4), grades).item(), 0.0);
  }
}

TEST(CrossEntropy, Examples) {
  const std::vector<int> y0{0};
  EXPECT_NEAR(cross_entropy_loss(Tensor::from({1, 4}, {0, 0, 0, 0}), y0).item(), std::log(4.0), 1e-12);
  // -log(e^10 / (e^10 + 3)) = log(1 + 3 e^-10)
  EXPECT_NEAR(cross_entropy_loss(Tensor::from({1, 4}, {10, 0, 0, 0}), y0).item(), std::log1p(3.0 * std::exp(-10.0)),
              1e-15);
  EXPECT_NEAR(cross_entropy_loss(Tensor::from({1, 4}, {10, 0, 0, 0}), y0).item(), 1.36e-4, 5e-7);
}

TEST(CrossEntropy, HybridIsWeightedMean) {
  Rng rng(21);
  const std::vector<int> y{1, 3, 0};
  const auto th = random_tensor(rng, {3, 3}, 0, 1, false);
  const auto lg = random_tensor(rng, {3, 4}, -2, 2, false);
  const double mix = hybrid_loss(th, lg, y, 0.5).item();
  EXPECT_NEAR(mix, 0.5 * (cross_entropy_loss(lg, y).item() + ordinal_loss(th, y).item()), 1e-14);
}

TEST(Dcca, IdenticalViewsGiveMinusOne) {
  const auto h = Tensor::from({2, 1}, {1, -1});
  EXPECT_NEAR(dcca_loss(h, h).item(), -1.0, 1e-9);
}

TEST(Dcca, AntiCorrelatedViewsGivePlusOne) {
  EXPECT_NEAR(dcca_loss(Tensor::from({2, 1}, {1, -1}), Tensor::from({2, 1}, {-1, 1})).item(), 1.0, 1e-9);
}

TEST(Dcca, HandDerivedFourByTwo) {
  // Column 1 perfectly correlated (+4), column 2 perfectly anti-correlated (-4): trace 0.
  const auto h1 = Tensor::from({4, 2}, {1, 2, 2, 0, 3, 2, 4, 0});
  const auto h2 = Tensor::from({4, 2}, {1, 0, 2, 1, 3, 0, 4, 1});
  EXPECT_NEAR(dcca_loss(h1, h2).item(), 0.0, 1e-9);
}

TEST(Dcca, RequiresTwoSamples) {
  EXPECT_THROW(dcca_loss(Tensor::from({1, 2}, {1, 2}), Tensor::from({1, 2}, {1, 2})), ShapeError);
  EXPECT_THROW(dcca_loss(Tensor::from({2, 1}, {1, 2}), Tensor::from({3, 1}, {1, 2, 3})), ShapeError);
}

TEST(Dcca, BoundedSymmetricAndAffineInvariant) {
  Rng rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.index(12), d = 1 + rng.index(4);
    const auto a = random_tensor(rng, {n, d}, -10, 10, false);
    const auto b = random_tensor(rng, {n, d}, -10, 10, false);
    const double v = dcca_loss(a, b).item();
    EXPECT_GE(v, -1.0 - 1e-9);
    EXPECT_LE(v, 1.0 + 1e-9);
    EXPECT_NEAR(dcca_loss(b, a).item(), v, 1e-12);
    // Per-feature a*x + c with a > 0.
    std::vector<double> t(a.values().begin(), a.values().end());
    for (std::size_t j = 0; j < d; ++j) {
      const double s = rng.uniform(0.1, 10.0), c = rng.uniform(-5, 5);
      for (std::size_t i = 0; i < n; ++i) t[i * d + j] = s * t[i * d + j] + c;
    }
    EXPECT_NEAR(dcca_loss(Tensor::from({n, d}, t), b).item(), v, 1e-9);
  }
}

TEST(Dcca, IdentityProjectionGradientMatchesFiniteDifferences) {
  Rng rng(37);
  std::vector<Tensor> in{random_tensor(rng, {8, 4}), random_tensor(rng, {8, 4})};
  const auto report = finite_difference_check(
      [](const std::vector<Tensor>& x) { return dcca_loss(x[0], x[1]); }, in, 1e-5, 1e-4);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

TEST(Dcca, ProjectedGradientMatchesFiniteDifferences) {
  Rng rng(41);
  ParameterStore store;
  auto f1 = ProjectionNet::create(store, "f1", 3, 16, 8, rng);
  auto f2 = ProjectionNet::create(store, "f2", 3, 16, 8, rng);
  std::vector<Tensor> in = store.tensors();
  in.push_back(random_tensor(rng, {6, 3}));
  in.push_back(random_tensor(rng, {6, 3}));
  const auto report = finite_difference_check_sampled(
      [&](const std::vector<Tensor>& x) { return dcca_loss(x[8], x[9], std::cref(f1), std::cref(f2)); }, in, 20, 5,
      1e-5, 1e-4);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

TEST(Overall, LambdaEndpoints) {
  Rng rng(43);
  const std::vector<int> y{0, 1, 2, 3, 1};
  const auto hf = random_tensor(rng, {5, 3}, 0, 1, false);
  const auto he = random_tensor(rng, {5, 3}, 0, 1, false);
  const auto hl = random_tensor(rng, {5, 3}, 0, 1, false);
  const auto hs = random_tensor(rng, {5, 3}, 0, 1, false);
  EXPECT_EQ(overall_loss(hf, y, he, hl, hs, 1.0).total.item(), ordinal_loss(hf, y).item());
  EXPECT_NEAR(overall_loss(hf, y, he, hl, hs, 0.0).total.item(), dcca_loss(he, hl).item() + dcca_loss(he, hs).item(),
              1e-15);
  EXPECT_THROW(overall_loss(hf, y, he, hl, hs, 1.5), ConfigError);
  EXPECT_THROW(overall_loss(hf, y, he, hl, hs, -0.1), ConfigError);
  EXPECT_DOUBLE_EQ(kDefaultLambda, 0.9);
}

TEST(Overall, GradientMatchesFiniteDifferences) {
  Rng rng(47);
  const std::vector<int> y{0, 1, 2, 3};
  std::vector<Tensor> in{random_tensor(rng, {4, 3}, 0.1, 0.9), random_tensor(rng, {4, 3}), random_tensor(rng, {4, 3}),
                         random_tensor(rng, {4, 3})};
  const auto report = finite_difference_check(
      [&](const std::vector<Tensor>& x) { return overall_loss(x[0], y, x[1], x[2], x[3], 0.9).total; }, in, 1e-5, 1e-4);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

TEST(LossKind, Parses) {
  EXPECT_EQ(parse_loss_kind("ordinal"), LossKind::ordinal);
  EXPECT_EQ(parse_loss_kind("hybrid"), LossKind::hybrid);
  EXPECT_THROW(parse_loss_kind("focal"), ConfigError);
}
