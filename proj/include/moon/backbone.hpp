// Per-organ feature extractor: a stride-1 convolutional stem, then T stride-2
// stages (conv + relu), with residual single-head self-attention over the
// flattened voxels in the configured stages. A pooled linear head gives the
// branch's K-1 sigmoid outputs.
#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "moon/attention.hpp"
#include "moon/error.hpp"
#include "moon/nn.hpp"
#include "moon/ops.hpp"
#include "moon/volume.hpp"

namespace moon {

struct BackboneConfig {
  Shape input_shape{20, 20, 20};
  std::size_t in_channels = 1;
  std::size_t stem_channels = 2;
  std::vector<std::size_t> channels{4, 16, 32, 64};
  std::set<std::size_t> attention_stages{3, 4};  // 1-based stage numbers
  std::size_t output_channels = 64;
  std::size_t logit_dim = 3;
  bool relu_before_head = false;  // set under the cross-entropy ablation

  std::size_t stages() const { return channels.size(); }

  void validate() const {
    if (input_shape.size() != 3) throw ConfigError("backbone: input shape needs 3 axes");
    for (auto d : input_shape)
      if (d == 0) throw ConfigError("backbone: zero-length input axis");
    if (channels.empty()) throw ConfigError("backbone: need at least one stage");
    for (auto c : channels)
      if (c == 0) throw ConfigError("backbone: zero channel count");
    if (in_channels == 0 || stem_channels == 0 || logit_dim == 0) throw ConfigError("backbone: zero-width layer");
    if (channels.back() != output_channels)
      throw ConfigError("backbone: last stage has " + std::to_string(channels.back()) + " channels, expected C = " +
                        std::to_string(output_channels));
    for (auto s : attention_stages)
      if (s < 1 || s > channels.size())
        throw ConfigError("backbone: attention stage " + std::to_string(s) + " outside 1.." +
                          std::to_string(channels.size()));
  }

  // Spatial shape of the final feature map: each stage ceil-halves every axis.
  Shape output_spatial() const {
    Shape s = input_shape;
    for (std::size_t t = 0; t < stages(); ++t)
      for (auto& d : s) d = (d + 1) / 2;
    return s;
  }
};

// Analytic trainable-scalar count.
inline std::size_t backbone_parameter_count(const BackboneConfig& cfg) {
  std::size_t n = 27 * cfg.in_channels * cfg.stem_channels + cfg.stem_channels;
  std::size_t cin = cfg.stem_channels;
  for (std::size_t t = 0; t < cfg.stages(); ++t) {
    const std::size_t c = cfg.channels[t];
    n += 27 * cin * c + c;
    if (cfg.attention_stages.count(t + 1)) n += 4 * c * c;
    cin = c;
  }
  return n + cfg.output_channels * cfg.logit_dim + cfg.logit_dim;
}

struct BackboneStage {
  Tensor w, b;
  bool attention = false;
  AttentionWeights att;
};

struct BackboneOutput {
  Tensor features;  // (C, h, w, d)
  Tensor logits;    // (1, K-1), sigmoid-activated
};

class Backbone {
 public:
  Backbone() = default;

  Backbone(const BackboneConfig& cfg, ParameterStore& store, const std::string& prefix, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    auto conv = [&](const std::string& name, std::size_t cin, std::size_t cout) {
      return store.add_glorot(name, {cout, cin, 3, 3, 3}, cin * 27, cout * 27, rng);
    };
    stem_w_ = conv(prefix + ".stem.w", cfg_.in_channels, cfg_.stem_channels);
    stem_b_ = store.add_zeros(prefix + ".stem.b", {cfg_.stem_channels});
    std::size_t cin = cfg_.stem_channels;
    for (std::size_t t = 0; t < cfg_.stages(); ++t) {
      const std::size_t c = cfg_.channels[t];
      const std::string p = prefix + ".stage" + std::to_string(t + 1);
      BackboneStage s;
      s.w = conv(p + ".w", cin, c);
      s.b = store.add_zeros(p + ".b", {c});
      if (cfg_.attention_stages.count(t + 1)) {
        s.attention = true;
        s.att.wq = store.add_glorot(p + ".att.wq", {c, c}, c, c, rng);
        s.att.wk = store.add_glorot(p + ".att.wk", {c, c}, c, c, rng);
        s.att.wv = store.add_glorot(p + ".att.wv", {c, c}, c, c, rng);
        s.att.wp = store.add_glorot(p + ".att.wo", {c, c}, c, c, rng, 0.5);
      }
      stages_.push_back(s);
      cin = c;
    }
    head_w_ = store.add_glorot(prefix + ".head.w", {cfg_.output_channels, cfg_.logit_dim}, cfg_.output_channels,
                               cfg_.logit_dim, rng);
    head_b_ = store.add_zeros(prefix + ".head.b", {cfg_.logit_dim});
  }

  const BackboneConfig& config() const { return cfg_; }

  // volume: (in_channels, H, W, D) -> (C, h, w, d)
  Tensor features(const Tensor& volume) const {
    const Shape expect{cfg_.in_channels, cfg_.input_shape[0], cfg_.input_shape[1], cfg_.input_shape[2]};
    if (volume.shape() != expect)
      throw ShapeError("backbone_forward: volume " + shape_str(volume.shape()) + " does not match configured " +
                       shape_str(expect));
    Tensor x = relu(conv3d(volume, stem_w_, stem_b_, 1, 1));
    for (const auto& s : stages_) {
      x = relu(conv3d(x, s.w, s.b, 2, 1));
      if (s.attention) {
        const Shape spatial{x.dim(1), x.dim(2), x.dim(3)};
        const Tensor tokens = to_tokens(x);
        x = add(x, from_tokens(s.att(tokens, tokens), spatial));
      }
    }
    return x;
  }

  // Global average pool -> linear -> sigmoid; (C, h, w, d) -> (1, K-1).
  Tensor head(const Tensor& fmap) const { return sigmoid(linear(pooled(fmap), head_w_, head_b_)); }

  // (C, h, w, d) -> (1, C), with the ablation relu applied when configured.
  Tensor pooled(const Tensor& fmap) const {
    Tensor g = reshape(adaptive_avg_pool3d(fmap, {1, 1, 1}), {1, fmap.dim(0)});
    return cfg_.relu_before_head ? relu(g) : g;
  }

  BackboneOutput forward(const Tensor& volume) const {
    BackboneOutput out;
    out.features = features(volume);
    out.logits = head(out.features);
    return out;
  }

  Tensor& head_weight() { return head_w_; }
  Tensor& head_bias() { return head_b_; }

 private:
  BackboneConfig cfg_;
  Tensor stem_w_, stem_b_;
  std::vector<BackboneStage> stages_;
  Tensor head_w_, head_b_;
};

inline BackboneOutput backbone_forward(const Backbone& net, const Tensor& volume) { return net.forward(volume); }

// Crops `image` to the bounding box of mask > 0 and nearest-resizes the crop
// to `target`. Voxels inside the box but outside the mask are kept.
// Returns a (1, tx, ty, tz) tensor.
inline Tensor organ_roi_resize(const Image& image, const Mask& mask, const Shape& target) {
  if (image.dims != mask.dims) throw ShapeError("organ_roi_resize: image and mask dims differ");
  if (target.size() != 3 || std::find(target.begin(), target.end(), 0) != target.end())
    throw ShapeError("organ_roi_resize: target must be 3 positive axes, got " + shape_str(target));
  std::array<std::size_t, 3> lo{mask.dims}, hi{0, 0, 0};
  bool any = false;
  for (std::size_t x = 0; x < mask.dims[0]; ++x)
    for (std::size_t y = 0; y < mask.dims[1]; ++y)
      for (std::size_t z = 0; z < mask.dims[2]; ++z) {
        if (!mask.at(x, y, z)) continue;
        any = true;
        const std::array<std::size_t, 3> p{x, y, z};
        for (int a = 0; a < 3; ++a) {
          lo[a] = std::min(lo[a], p[a]);
          hi[a] = std::max(hi[a], p[a] + 1);
        }
      }
  if (!any) throw ShapeError("empty organ mask");
  std::array<std::vector<std::size_t>, 3> src;
  for (int a = 0; a < 3; ++a) {
    const std::size_t len = hi[a] - lo[a];
    for (std::size_t i = 0; i < target[a]; ++i) src[a].push_back(lo[a] + i * len / target[a]);
  }
  std::vector<double> out;
  out.reserve(target[0] * target[1] * target[2]);
  for (auto x : src[0])
    for (auto y : src[1])
      for (auto z : src[2]) out.push_back(image.at(x, y, z));
  return Tensor::from({1, target[0], target[1], target[2]}, std::move(out));
}

}  // namespace moon
