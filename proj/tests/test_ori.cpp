#include <gtest/gtest.h>

#include <cmath>

#include "moon/gradcheck.hpp"
#include "moon/ori.hpp"
#include "test_util.hpp"

using namespace moon;
using moon::testing::random_tensor;
using moon::testing::to_vector;

namespace {

Streams random_streams(Rng& rng, Shape shape, bool grad = false) {
  return {random_tensor(rng, shape, -1, 1, grad), random_tensor(rng, shape, -1, 1, grad),
          random_tensor(rng, shape, -1, 1, grad)};
}

void set_values(Tensor& t, std::vector<double> v) {
  auto m = t.mutable_values();
  ASSERT_EQ(m.size(), v.size());
  std::copy(v.begin(), v.end(), m.begin());
}

// Row vector (1 x 2) times a 2 x 2 matrix stored row-major.
std::array<double, 2> vecmat(std::array<double, 2> x, const std::vector<double>& w) {
  return {x[0] * w[0] + x[1] * w[2], x[0] * w[1] + x[1] * w[3]};
}

std::array<double, 2> plus(std::array<double, 2> a, std::array<double, 2> b) { return {a[0] + b[0], a[1] + b[1]}; }

const OriStrategy kAll[] = {OriStrategy::none,      OriStrategy::add,        OriStrategy::concat,
                            OriStrategy::self_attn, OriStrategy::query_swap, OriStrategy::switching};

}  // namespace

TEST(OriPool, ConstantStaysConstant) {
  const auto m = Tensor::full({3, 4, 6, 5}, 2.5);
  const auto p = ori_pool({m, m, m}, {2, 3, 2});
  for (const auto& s : p) {
    EXPECT_EQ(s.shape(), (Shape{3, 2, 3, 2}));
    for (double v : s.values()) EXPECT_NEAR(v, 2.5, 1e-15);
  }
}

TEST(OriPool, SameShapeIsIdentity) {
  Rng rng(1);
  const auto s = random_streams(rng, {2, 3, 3, 3});
  const auto p = ori_pool(s, {3, 3, 3});
  for (int i = 0; i < 3; ++i) EXPECT_EQ(to_vector(p[i]), to_vector(s[i]));
}

TEST(OriPool, MeanOfEightValues) {
  const auto m = Tensor::from({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  const auto p = ori_pool({m, m, m}, {1, 1, 1});
  EXPECT_DOUBLE_EQ(p[0].item(), 4.5);
}

TEST(OriPool, Errors) {
  const auto m = Tensor::zeros({2, 2, 2, 2});
  EXPECT_THROW(ori_pool({m, m, m}, {3, 2, 2}), ShapeError);
  EXPECT_THROW(ori_pool({m, m, Tensor::zeros({3, 2, 2, 2})}, {1, 1, 1}), ShapeError);
}

TEST(Attention, SingleKeyReturnsValueRow) {
  Rng rng(2);
  const auto q = random_tensor(rng, {3, 4}, -1, 1, false);
  const auto k = random_tensor(rng, {1, 4}, -1, 1, false);
  const auto v = Tensor::from({1, 2}, {0.25, -3.0});
  const auto out = scaled_dot_attention(q, k, v);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(out[2 * i], 0.25, 1e-15);
    EXPECT_NEAR(out[2 * i + 1], -3.0, 1e-15);
  }
}

TEST(Attention, IdenticalKeysAverageValues) {
  const auto q = Tensor::from({1, 2}, {0.3, 0.9});
  const auto k = Tensor::from({3, 2}, {1, 2, 1, 2, 1, 2});
  const auto v = Tensor::from({3, 1}, {1, 2, 6});
  EXPECT_NEAR(scaled_dot_attention(q, k, v).item(), 3.0, 1e-14);
}

TEST(Attention, HandSoftmax) {
  const auto out = scaled_dot_attention(Tensor::from({1, 1}, {1}), Tensor::from({2, 1}, {1, 0}),
                                        Tensor::from({2, 1}, {1, 0}));
  const double e = std::exp(1.0);
  EXPECT_NEAR(out.item(), e / (e + 1.0), 1e-15);
  EXPECT_NEAR(out.item(), 0.7311, 5e-5);
}

TEST(Attention, DkMismatch) {
  EXPECT_THROW(scaled_dot_attention(Tensor::zeros({1, 2}), Tensor::zeros({2, 3}), Tensor::zeros({2, 1})), ShapeError);
}

TEST(OriInteract, NoneIsIdentity) {
  Rng rng(3);
  OriConfig cfg;
  cfg.strategy = OriStrategy::none;
  cfg.channels = 4;
  ParameterStore store;
  Ori ori(cfg, store, "ori", rng);
  const auto s = random_streams(rng, {4, 2, 2, 2});
  const auto g = ori.interact(s);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(to_vector(g[i]), to_vector(s[i]));
  EXPECT_EQ(store.scalar_count(), 0u);
}

TEST(OriInteract, AddWithZeroPartners) {
  Rng rng(4);
  OriConfig cfg;
  cfg.strategy = OriStrategy::add;
  cfg.channels = 3;
  ParameterStore store;
  Ori ori(cfg, store, "ori", rng);
  const auto e = random_tensor(rng, {3, 2, 2, 2}, -1, 1, false);
  const auto z = Tensor::zeros({3, 2, 2, 2});
  EXPECT_EQ(to_vector(ori.interact({e, z, z})[0]), to_vector(e));
}

TEST(OriInteract, SwitchingTwoIterationsHandTrace) {
  OriConfig cfg;
  cfg.strategy = OriStrategy::switching;
  cfg.iterations = 2;
  cfg.channels = 2;
  cfg.pooled_shape = {1, 1, 1};
  ParameterStore store;
  Rng rng(5);
  Ori ori(cfg, store, "ori", rng);
  const std::vector<double> wv{1.0, 0.5, -0.5, 2.0}, wp{0.3, 0.0, 0.1, -1.0}, wd{0.2, -0.1, 0.4, 0.05};
  auto& att = ori.attention_weights();
  set_values(att.wq, {9, 9, 9, 9});  // irrelevant with one key
  set_values(att.wk, {-7, 3, 1, 2});
  set_values(att.wv, wv);
  set_values(att.wp, wp);
  set_values(ori.direct_weight(), wd);

  const std::array<double, 2> e{0.5, -1.0}, l{2.0, 0.25}, s{-0.75, 1.5};
  // Iteration 0 (attention, liver partner): one key, so Att(X; Y) = Y Wv Wp.
  auto e1 = plus(e, vecmat(vecmat(l, wv), wp));
  auto l1 = plus(l, vecmat(vecmat(e, wv), wp));
  auto s1 = s;
  // Iteration 1 (direct): X + X Wd.
  const auto e2 = plus(e1, vecmat(e1, wd));
  const auto l2 = plus(l1, vecmat(l1, wd));
  const auto s2 = plus(s1, vecmat(s1, wd));

  auto mk = [](std::array<double, 2> v) { return Tensor::from({2, 1, 1, 1}, {v[0], v[1]}); };
  const auto g = ori.interact({mk(e), mk(l), mk(s)});
  const std::array<std::array<double, 2>, 3> expect{e2, l2, s2};
  for (int st = 0; st < 3; ++st)
    for (int c = 0; c < 2; ++c) EXPECT_NEAR(g[st][c], expect[st][c], 1e-14) << st << "," << c;
}

TEST(OriInteract, SwitchingTwoTokenAttentionMatchesManualSoftmax) {
  OriConfig cfg;
  cfg.strategy = OriStrategy::switching;
  cfg.iterations = 1;
  cfg.channels = 1;
  ParameterStore store;
  Rng rng(6);
  Ori ori(cfg, store, "ori", rng);
  auto& att = ori.attention_weights();
  set_values(att.wq, {1.0});
  set_values(att.wk, {2.0});
  set_values(att.wv, {0.5});
  set_values(att.wp, {3.0});
  // Streams as token matrices: E has 2 tokens, L has 2 tokens.
  const std::vector<double> e{0.2, -0.4}, l{1.0, 0.5};
  auto att_oracle = [](const std::vector<double>& x, const std::vector<double>& y, std::size_t i) {
    const double q = x[i] * 1.0;
    const double a0 = q * y[0] * 2.0, a1 = q * y[1] * 2.0;
    const double m = std::max(a0, a1);
    const double w0 = std::exp(a0 - m), w1 = std::exp(a1 - m);
    return (w0 * y[0] * 0.5 + w1 * y[1] * 0.5) / (w0 + w1) * 3.0;
  };
  const auto g = ori.interact_tokens({Tensor::from({2, 1}, e), Tensor::from({2, 1}, l), Tensor::from({2, 1}, {7, 8})});
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(g[0][i], e[i] + att_oracle(e, l, i), 1e-14);
    EXPECT_NEAR(g[1][i], l[i] + att_oracle(l, e, i), 1e-14);
  }
  EXPECT_EQ(g[2][0], 7.0);
}

TEST(OriInteract, SwitchingPathCounts) {
  for (std::size_t n = 1; n <= 9; ++n) {
    OriConfig cfg;
    cfg.iterations = n;
    cfg.channels = 2;
    ParameterStore store;
    Rng rng(7);
    Ori ori(cfg, store, "ori", rng);
    Rng data(8);
    OriCounters counters;
    ori.interact(random_streams(data, {2, 2, 2, 2}), &counters);
    EXPECT_EQ(counters.attention_iterations, (n + 1) / 2);
    EXPECT_EQ(counters.direct_iterations, n / 2);
  }
}

TEST(OriInteract, UnknownStrategyName) { EXPECT_THROW(parse_ori_strategy("cross"), ConfigError); }

TEST(Ori, OutputShapesEqualInputsForEveryStrategy) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    OriConfig cfg;
    cfg.strategy = kAll[trial % 6];
    cfg.channels = 1 + rng.index(4);
    cfg.iterations = 1 + rng.index(4);
    cfg.pooled_shape = {1 + rng.index(2), 1 + rng.index(2), 1 + rng.index(2)};
    ParameterStore store;
    Ori ori(cfg, store, "ori", rng);
    Streams maps;
    for (auto& m : maps)
      m = random_tensor(rng, {cfg.channels, 2 + rng.index(3), 2 + rng.index(3), 2 + rng.index(3)}, -1, 1, false);
    const auto out = ori.forward(maps);
    for (int s = 0; s < 3; ++s) EXPECT_EQ(out[s].shape(), maps[s].shape());
    const auto pooled = ori_pool(maps, cfg.pooled_shape);
    const auto g = ori.interact(pooled);
    for (int s = 0; s < 3; ++s) EXPECT_EQ(g[s].shape(), pooled[s].shape());
  }
}

TEST(Ori, ParameterCountsFollowStrategyOrdering) {
  const std::size_t c = 64;
  EXPECT_EQ(ori_interaction_parameter_count(OriStrategy::add, c), 0u);
  EXPECT_LT(ori_interaction_parameter_count(OriStrategy::concat, c),
            ori_interaction_parameter_count(OriStrategy::query_swap, c));
  EXPECT_LT(ori_interaction_parameter_count(OriStrategy::query_swap, c),
            ori_interaction_parameter_count(OriStrategy::switching, c));
  EXPECT_LT(ori_interaction_parameter_count(OriStrategy::switching, c),
            ori_interaction_parameter_count(OriStrategy::self_attn, c));
  for (auto s : kAll) {
    OriConfig cfg;
    cfg.strategy = s;
    cfg.channels = 6;
    ParameterStore store;
    Rng rng(10);
    Ori ori(cfg, store, "ori", rng);
    EXPECT_EQ(store.scalar_count(), ori_parameter_count(cfg)) << to_string(s);
    cfg.channels = 12;
    // Square projections scale by 4 when C doubles.
    if (s == OriStrategy::query_swap || s == OriStrategy::switching || s == OriStrategy::self_attn)
      EXPECT_EQ(ori_interaction_parameter_count(s, 12), 4 * ori_interaction_parameter_count(s, 6));
  }
}

TEST(OriRestore, IdentityConvAddsPooledFeatures) {
  OriConfig cfg;
  cfg.strategy = OriStrategy::add;
  cfg.channels = 2;
  ParameterStore store;
  Rng rng(11);
  Ori ori(cfg, store, "ori", rng);
  set_values(ori.restore_weight(0), {1, 0, 0, 1});
  const auto g = random_tensor(rng, {2, 2, 2, 2}, -1, 1, false);
  const auto f = random_tensor(rng, {2, 2, 2, 2}, -1, 1, false);
  const auto out = ori.restore(0, g, f);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], f[i] + g[i], 1e-15);
}

TEST(OriRestore, ConstantInAndUpscaleReplicates) {
  OriConfig cfg;
  cfg.strategy = OriStrategy::add;
  cfg.channels = 2;
  ParameterStore store;
  Rng rng(12);
  Ori ori(cfg, store, "ori", rng);
  set_values(ori.restore_weight(1), {0.5, -1, 2, 0.25});
  set_values(ori.restore_bias(1), {0.1, -0.2});
  const auto g = Tensor::from({2, 1, 1, 1}, {1.5, -2.0});
  const auto out = ori.restore(1, g, Tensor::zeros({2, 2, 2, 2}));
  const double c0 = 1.5 * 0.5 + -2.0 * 2 + 0.1, c1 = 1.5 * -1 + -2.0 * 0.25 - 0.2;
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_NEAR(out[i], c0, 1e-15);
    EXPECT_NEAR(out[8 + i], c1, 1e-15);
  }
}

TEST(Ori, ZeroRestoreLeavesMapsUnchanged) {
  Rng rng(13);
  for (auto s : kAll) {
    OriConfig cfg;
    cfg.strategy = s;
    cfg.channels = 3;
    ParameterStore store;
    Ori ori(cfg, store, "ori", rng);
    const auto maps = random_streams(rng, {3, 3, 2, 4});
    const auto out = ori.forward(maps);
    for (int i = 0; i < 3; ++i) EXPECT_EQ(to_vector(out[i]), to_vector(maps[i]));
  }
}

TEST(Ori, BlockGradientMatchesFiniteDifferences) {
  for (auto s : kAll) {
    if (s == OriStrategy::none) continue;
    Rng rng(14);
    OriConfig cfg;
    cfg.strategy = s;
    cfg.channels = 3;
    cfg.iterations = 4;
    cfg.pooled_shape = {1, 1, 1};
    ParameterStore store;
    Ori ori(cfg, store, "ori", rng);
    for (int st = 0; st < 3; ++st)
      for (auto& v : ori.restore_weight(st).mutable_values()) v = rng.uniform(-1, 1);
    std::vector<Tensor> in = store.tensors();
    for (int st = 0; st < 3; ++st) in.push_back(random_tensor(rng, {3, 1, 1, 1}));
    const std::size_t base = in.size() - 3;
    const auto report = finite_difference_check(
        [&](const std::vector<Tensor>& x) {
          const auto out = ori.forward({x[base], x[base + 1], x[base + 2]});
          return add(add(sum(mul(out[0], out[0])), sum(out[1])), sum(mul(out[2], out[1])));
        },
        in, 1e-6, 1e-4);
    EXPECT_TRUE(report.passed) << to_string(s) << " " << report.max_relative_error;
  }
}
