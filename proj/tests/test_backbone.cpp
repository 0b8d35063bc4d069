#include <gtest/gtest.h>

#include "moon/backbone.hpp"
#include "moon/gradcheck.hpp"
#include "test_util.hpp"

using namespace moon;
using moon::testing::random_tensor;

namespace {

BackboneConfig tiny_config() {
  BackboneConfig c;
  c.input_shape = {6, 5, 4};
  c.stem_channels = 2;
  c.channels = {3, 4};
  c.attention_stages = {2};
  c.output_channels = 4;
  c.logit_dim = 3;
  return c;
}

}  // namespace

TEST(Backbone, OutputSpatialIsCeilDivided) {
  BackboneConfig c;
  c.input_shape = {16, 16, 32};
  ParameterStore store;
  Rng rng(1);
  Backbone net(c, store, "b", rng);
  const auto out = net.forward(Tensor::zeros({1, 16, 16, 32}));
  EXPECT_EQ(out.features.shape(), (Shape{64, 1, 1, 2}));
  EXPECT_EQ(out.logits.shape(), (Shape{1, 3}));
  EXPECT_EQ(c.output_spatial(), (Shape{1, 1, 2}));
}

TEST(Backbone, ZeroHeadGivesHalf) {
  BackboneConfig c;
  ParameterStore store;
  Rng rng(2);
  Backbone net(c, store, "b", rng);
  for (auto& v : net.head_weight().mutable_values()) v = 0.0;
  const auto out = net.forward(Tensor::zeros({1, 20, 20, 20}));
  for (double v : out.logits.values()) EXPECT_EQ(v, 0.5);
}

TEST(Backbone, SameSeedIsBitIdentical) {
  auto run = [] {
    BackboneConfig c;
    ParameterStore store;
    Rng rng(77);
    Backbone net(c, store, "b", rng);
    Rng data(5);
    return moon::testing::to_vector(net.forward(random_tensor(data, {1, 20, 20, 20}, -1, 1, false)).logits);
  };
  EXPECT_EQ(run(), run());
}

TEST(Backbone, RejectsWrongInputShape) {
  BackboneConfig c;
  ParameterStore store;
  Rng rng(3);
  Backbone net(c, store, "b", rng);
  EXPECT_THROW(net.forward(Tensor::zeros({1, 20, 20, 19})), ShapeError);
  EXPECT_THROW(net.forward(Tensor::zeros({2, 20, 20, 20})), ShapeError);
}

TEST(Backbone, ConfigValidation) {
  BackboneConfig c;
  c.output_channels = 32;
  EXPECT_THROW(c.validate(), ConfigError);
  c = BackboneConfig{};
  c.attention_stages = {5};
  EXPECT_THROW(c.validate(), ConfigError);
  c = BackboneConfig{};
  c.channels.clear();
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Backbone, ClinicalRoiTargetsAreValidConfigs) {
  for (const Shape& s : {Shape{40, 40, 100}, Shape{256, 196, 36}, Shape{152, 196, 24}}) {
    BackboneConfig c;
    c.input_shape = s;
    EXPECT_NO_THROW(c.validate());
    const auto out = c.output_spatial();
    for (int a = 0; a < 3; ++a) EXPECT_EQ(out[a], (s[a] + 15) / 16);
  }
}

TEST(Backbone, ParameterCountMatchesStore) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    BackboneConfig c;
    c.stem_channels = 1 + rng.index(4);
    c.channels.clear();
    const std::size_t t = 1 + rng.index(4);
    for (std::size_t i = 0; i < t; ++i) c.channels.push_back(1 + rng.index(6));
    c.output_channels = c.channels.back();
    c.attention_stages.clear();
    for (std::size_t i = 1; i <= t; ++i)
      if (rng.uniform() < 0.5) c.attention_stages.insert(i);
    c.logit_dim = 1 + rng.index(5);
    ParameterStore store;
    Backbone net(c, store, "b", rng);
    EXPECT_EQ(store.scalar_count(), backbone_parameter_count(c));
  }
}

TEST(Backbone, ShapeContractsOnRandomConfigs) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    BackboneConfig c;
    c.input_shape = {1 + rng.index(9), 1 + rng.index(9), 1 + rng.index(9)};
    c.stem_channels = 1 + rng.index(3);
    c.channels.clear();
    const std::size_t t = 1 + rng.index(3);
    for (std::size_t i = 0; i < t; ++i) c.channels.push_back(1 + rng.index(4));
    c.output_channels = c.channels.back();
    c.attention_stages = {t};
    c.logit_dim = 3;
    ParameterStore store;
    Backbone net(c, store, "b", rng);
    const auto x = random_tensor(rng, {1, c.input_shape[0], c.input_shape[1], c.input_shape[2]}, 0, 1, false);
    const auto a = net.forward(x);
    const auto b = net.forward(scale(x, 2.0));
    const auto sp = c.output_spatial();
    EXPECT_EQ(a.features.shape(), (Shape{c.output_channels, sp[0], sp[1], sp[2]}));
    EXPECT_EQ(a.features.shape(), b.features.shape());
    for (double v : a.logits.values()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Backbone, GradientMatchesFiniteDifferences) {
  Rng rng(17);
  const auto cfg = tiny_config();
  ParameterStore store;
  Backbone net(cfg, store, "b", rng);
  std::vector<Tensor> in = store.tensors();
  in.push_back(random_tensor(rng, {1, 6, 5, 4}));
  const auto report = finite_difference_check_sampled(
      [&](const std::vector<Tensor>& x) { return sum(net.forward(x.back()).logits); }, in, 6, 3, 1e-5, 1e-4);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

TEST(RoiResize, FullMaskSameShapeIsIdentity) {
  Rng rng(19);
  Image img({4, 5, 6}, {1, 1, 1});
  for (auto& v : img.data) v = rng.uniform();
  Mask m({4, 5, 6}, {1, 1, 1}, 1);
  const auto out = organ_roi_resize(img, m, {4, 5, 6});
  EXPECT_EQ(moon::testing::to_vector(out), img.data);
}

TEST(RoiResize, SingleVoxelGivesConstant) {
  Image img({5, 5, 5}, {1, 1, 1}, 0.0);
  img.at(2, 3, 1) = 7.5;
  Mask m({5, 5, 5}, {1, 1, 1}, 0);
  m.at(2, 3, 1) = 1;
  const auto out = organ_roi_resize(img, m, {3, 4, 2});
  EXPECT_EQ(out.shape(), (Shape{1, 3, 4, 2}));
  for (double v : out.values()) EXPECT_EQ(v, 7.5);
}

TEST(RoiResize, CropKeepsBackgroundInsideBox) {
  Image img({4, 4, 4}, {1, 1, 1}, 3.0);
  Mask m({4, 4, 4}, {1, 1, 1}, 0);
  m.at(0, 0, 0) = 1;
  m.at(1, 1, 1) = 1;
  img.at(0, 0, 0) = 1.0;
  img.at(1, 1, 1) = 2.0;
  const auto out = organ_roi_resize(img, m, {2, 2, 2});
  // Box [0,2)^3 read verbatim: corner values and background 3.0 elsewhere.
  EXPECT_EQ(out[0], 1.0);
  EXPECT_EQ(out[7], 2.0);
  EXPECT_EQ(out[1], 3.0);
}

TEST(RoiResize, EmptyMaskErrors) {
  Image img({3, 3, 3}, {1, 1, 1});
  Mask m({3, 3, 3}, {1, 1, 1}, 0);
  try {
    organ_roi_resize(img, m, {2, 2, 2});
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_STREQ(e.what(), "empty organ mask");
  }
}
