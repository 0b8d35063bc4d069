// Full model: three organ backbones, ORI between their feature maps, branch
// heads, the one-hot prior adaptor and the post-fusion head.
#pragma once

#include <array>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "moon/backbone.hpp"
#include "moon/config.hpp"
#include "moon/losses.hpp"
#include "moon/ori.hpp"
#include "moon/priors.hpp"
#include "moon/volume.hpp"

namespace moon {

inline constexpr int kOrganCount = 3;
inline constexpr const char* kBranchNames[kOrganCount] = {"eso", "liver", "spleen"};

enum class PriorMode { none, onehot };
enum class Fusion { concat, pred_sum };

inline PriorMode parse_prior_mode(const std::string& s) {
  if (s == "none") return PriorMode::none;
  if (s == "onehot") return PriorMode::onehot;
  throw ConfigError("unknown prior mode '" + s + "' (expected none|onehot)");
}
inline std::string to_string(PriorMode m) { return m == PriorMode::none ? "none" : "onehot"; }

inline Fusion parse_fusion(const std::string& s) {
  if (s == "concat") return Fusion::concat;
  if (s == "pred_sum") return Fusion::pred_sum;
  throw ConfigError("unknown fusion '" + s + "' (expected concat|pred_sum)");
}
inline std::string to_string(Fusion f) { return f == Fusion::concat ? "concat" : "pred_sum"; }

namespace detail {
inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + std::to_string(v[i]);
  return out;
}
inline std::vector<std::size_t> to_sizes(const std::string& key, const std::vector<std::int64_t>& v) {
  std::vector<std::size_t> out;
  for (auto x : v) {
    if (x < 0) throw ConfigError("config key '" + key + "': negative entry");
    out.push_back(static_cast<std::size_t>(x));
  }
  return out;
}
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

struct ModelConfig {
  std::array<BackboneConfig, kOrganCount> backbone{};
  OriConfig ori{};
  PriorMode prior = PriorMode::onehot;
  std::size_t adaptor_dim = 64;
  Fusion fusion = Fusion::concat;
  int grades = kDefaultGrades;
  bool multi_organ = true;
  bool dcca = true;
  std::size_t dcca_hidden = 16;
  std::size_t dcca_out = 8;
  LossKind loss = LossKind::ordinal;
  double ce_weight = 0.5;  // hybrid only

  std::size_t logit_dim() const { return static_cast<std::size_t>(grades - 1); }
  int organs() const { return multi_organ ? kOrganCount : 1; }
  bool ori_active() const { return multi_organ && ori.strategy != OriStrategy::none; }
  bool adaptor_active() const { return prior == PriorMode::onehot && fusion == Fusion::concat; }
  // A learned fusion head exists unless the fusion is a pure pass-through.
  bool fusion_head() const { return fusion == Fusion::concat && (multi_organ || adaptor_active()); }
  bool threshold_head() const { return loss != LossKind::ce && fusion_head(); }
  bool ce_head() const { return loss != LossKind::ordinal; }
  bool dcca_active() const { return multi_organ && dcca; }

  std::size_t fusion_width() const {
    std::size_t w = 0;
    for (int o = 0; o < organs(); ++o) w += backbone[o].output_channels;
    return w + (adaptor_active() ? adaptor_dim : 0);
  }

  void validate() const {
    if (grades < 2) throw ConfigError("model: need at least 2 grades");
    for (int o = 0; o < organs(); ++o) {
      if (backbone[o].logit_dim != logit_dim())
        throw ConfigError("model: backbone head width must be K-1 = " + std::to_string(logit_dim()));
      backbone[o].validate();
    }
    if (multi_organ) {
      for (int o = 1; o < kOrganCount; ++o)
        if (backbone[o].output_channels != backbone[0].output_channels)
          throw ConfigError("model: all branches need the same output channel count");
      if (ori.channels != backbone[0].output_channels)
        throw ConfigError("model: ORI channels " + std::to_string(ori.channels) + " differ from backbone C = " +
                          std::to_string(backbone[0].output_channels));
      ori.validate();
      if (ori_active())
        for (int o = 0; o < kOrganCount; ++o) {
          const auto sp = backbone[o].output_spatial();
          for (int a = 0; a < 3; ++a)
            if (ori.pooled_shape[a] > sp[a])
              throw ConfigError("model: ORI pooled shape " + shape_str(ori.pooled_shape) + " exceeds the " +
                                kBranchNames[o] + " feature map " + shape_str(sp));
        }
    }
    if (adaptor_active() && adaptor_dim == 0) throw ConfigError("model: adaptor dim must be positive");
    if (ce_head() && fusion != Fusion::concat)
      throw ConfigError("model: ce/hybrid loss needs concat fusion");
    if (!(ce_weight >= 0.0 && ce_weight <= 1.0)) throw ConfigError("model: ce_weight must lie in [0, 1]");
    if (dcca_active() && (dcca_hidden == 0 || dcca_out == 0)) throw ConfigError("model: zero-width DCCA projection");
  }

  static ModelConfig from_config(const FlatConfig& c) {
    ModelConfig m;
    m.grades = static_cast<int>(c.get_int("model.grades", m.grades));
    m.multi_organ = c.get_bool("model.multi_organ", m.multi_organ);
    m.prior = parse_prior_mode(c.get_string("model.prior", to_string(m.prior)));
    m.adaptor_dim = static_cast<std::size_t>(c.get_int("model.adaptor_dim", static_cast<std::int64_t>(m.adaptor_dim)));
    m.fusion = parse_fusion(c.get_string("model.fusion", to_string(m.fusion)));
    m.dcca = c.get_bool("model.dcca", m.dcca);
    m.dcca_hidden = static_cast<std::size_t>(c.get_int("model.dcca_hidden", static_cast<std::int64_t>(m.dcca_hidden)));
    m.dcca_out = static_cast<std::size_t>(c.get_int("model.dcca_out", static_cast<std::int64_t>(m.dcca_out)));
    m.loss = parse_loss_kind(c.get_string("model.loss", to_string(m.loss)));
    m.ce_weight = c.get_double("model.ce_weight", m.ce_weight);

    auto sizes = [&](const std::string& key, const std::vector<std::size_t>& fallback) {
      std::vector<std::int64_t> fb(fallback.begin(), fallback.end());
      return detail::to_sizes(key, c.get_ints(key, fb));
    };
    for (int o = 0; o < kOrganCount; ++o) {
      auto& b = m.backbone[o];
      auto key = [&](const std::string& k) {
        const std::string organ = std::string("model.") + kBranchNames[o] + "." + k;
        return c.has(organ) ? organ : "model.backbone." + k;
      };
      const auto shape = sizes(key("input_shape"), b.input_shape);
      if (shape.size() != 3) throw ConfigError("model: input_shape needs 3 entries");
      b.input_shape = shape;
      b.stem_channels = static_cast<std::size_t>(c.get_int(key("stem_channels"), static_cast<std::int64_t>(b.stem_channels)));
      b.channels = sizes(key("channels"), b.channels);
      const auto att = sizes(key("attention_stages"), {b.attention_stages.begin(), b.attention_stages.end()});
      b.attention_stages = {att.begin(), att.end()};
      b.output_channels = b.channels.empty() ? 0 : b.channels.back();
      b.logit_dim = m.logit_dim();
      b.relu_before_head = m.loss != LossKind::ordinal;
    }
    m.ori.strategy = parse_ori_strategy(c.get_string("model.ori.strategy", to_string(m.ori.strategy)));
    m.ori.iterations = static_cast<std::size_t>(c.get_int("model.ori.iterations", static_cast<std::int64_t>(m.ori.iterations)));
    const auto pooled = sizes("model.ori.pooled_shape", m.ori.pooled_shape);
    if (pooled.size() != 3) throw ConfigError("model: ori.pooled_shape needs 3 entries");
    m.ori.pooled_shape = pooled;
    m.ori.init_gain = c.get_double("model.ori.init_gain", m.ori.init_gain);
    m.ori.channels = m.backbone[0].output_channels;
    m.validate();
    return m;
  }

  // Every key spelled out, per organ, so the snapshot alone rebuilds the model.
  FlatConfig to_config() const {
    FlatConfig c;
    c.set("model.grades", std::to_string(grades));
    c.set("model.multi_organ", multi_organ ? "true" : "false");
    c.set("model.prior", to_string(prior));
    c.set("model.adaptor_dim", std::to_string(adaptor_dim));
    c.set("model.fusion", to_string(fusion));
    c.set("model.dcca", dcca ? "true" : "false");
    c.set("model.dcca_hidden", std::to_string(dcca_hidden));
    c.set("model.dcca_out", std::to_string(dcca_out));
    c.set("model.loss", to_string(loss));
    c.set("model.ce_weight", detail::fmt_double(ce_weight));
    for (int o = 0; o < kOrganCount; ++o) {
      const auto& b = backbone[o];
      const std::string p = std::string("model.") + kBranchNames[o] + ".";
      c.set(p + "input_shape", detail::join_sizes(b.input_shape));
      c.set(p + "stem_channels", std::to_string(b.stem_channels));
      c.set(p + "channels", detail::join_sizes(b.channels));
      c.set(p + "attention_stages", detail::join_sizes({b.attention_stages.begin(), b.attention_stages.end()}));
    }
    c.set("model.ori.strategy", to_string(ori.strategy));
    c.set("model.ori.iterations", std::to_string(ori.iterations));
    c.set("model.ori.pooled_shape", detail::join_sizes(ori.pooled_shape));
    c.set("model.ori.init_gain", detail::fmt_double(ori.init_gain));
    return c;
  }
};

// Analytic trainable-scalar count.
inline std::size_t parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  std::size_t n = 0;
  for (int o = 0; o < cfg.organs(); ++o) n += backbone_parameter_count(cfg.backbone[o]);
  if (cfg.multi_organ) n += ori_parameter_count(cfg.ori);
  if (cfg.adaptor_active()) n += PriorAdaptor::parameter_count(cfg.adaptor_dim);
  const std::size_t w = cfg.fusion_width(), k1 = cfg.logit_dim();
  if (cfg.threshold_head()) n += w * k1 + k1;
  if (cfg.ce_head()) n += w * (k1 + 1) + k1 + 1;
  if (cfg.dcca_active()) n += 4 * ProjectionNet::parameter_count(k1, cfg.dcca_hidden, cfg.dcca_out);
  return n;
}

// One subject, ready for the network: an ROI volume per organ and the prior.
struct ModelInput {
  std::string id;
  int grade = 0;
  std::array<Tensor, kOrganCount> volumes;  // (1, X, Y, Z)
  std::optional<PriorRecord> prior;
};

inline ModelInput make_input(const std::string& id, int grade, const std::array<Image, kOrganCount>& images,
                             const std::array<Mask, kOrganCount>& masks, std::optional<PriorRecord> prior,
                             const ModelConfig& cfg) {
  ModelInput in;
  in.id = id;
  in.grade = grade;
  for (int o = 0; o < kOrganCount; ++o) in.volumes[o] = organ_roi_resize(images[o], masks[o], cfg.backbone[o].input_shape);
  in.prior = std::move(prior);
  return in;
}

struct ModelOutput {
  Tensor h_e, h_l, h_s;  // branch thresholds (n, K-1); liver/spleen undefined for single-organ
  Tensor h_f;            // fused thresholds (n, K-1)
  Tensor ce_logits;      // (n, K) when a CE head exists
};

class MoonModel {
 public:
  MoonModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    for (auto& b : cfg_.backbone) b.relu_before_head = cfg_.loss != LossKind::ordinal;
    // Separate streams per component keep, for example, the esophagus backbone
    // identical between the single-organ and full configurations.
    auto rng = [&](const std::string& tag) { return Rng(derive_seed(seed, "init." + tag)); };
    for (int o = 0; o < cfg_.organs(); ++o) {
      Rng r = rng(kBranchNames[o]);
      branches_[o] = Backbone(cfg_.backbone[o], store_, kBranchNames[o], r);
    }
    if (cfg_.multi_organ) {
      Rng r = rng("ori");
      ori_ = Ori(cfg_.ori, store_, "ori", r);
    }
    if (cfg_.adaptor_active()) {
      Rng r = rng("prior");
      adaptor_ = PriorAdaptor::create(store_, "prior", cfg_.adaptor_dim, r);
    }
    const std::size_t w = cfg_.fusion_width(), k1 = cfg_.logit_dim();
    if (cfg_.threshold_head()) {
      Rng r = rng("fusion");
      fuse_w_ = store_.add_glorot("fusion.w", {w, k1}, w, k1, r);
      fuse_b_ = store_.add_zeros("fusion.b", {k1});
    }
    if (cfg_.ce_head()) {
      Rng r = rng("ce");
      ce_w_ = store_.add_glorot("ce.w", {w, k1 + 1}, w, k1 + 1, r);
      ce_b_ = store_.add_zeros("ce.b", {k1 + 1});
    }
    if (cfg_.dcca_active()) {
      Rng r = rng("dcca");
      static const char* names[] = {"dcca.el.e", "dcca.el.l", "dcca.es.e", "dcca.es.s"};
      for (int i = 0; i < 4; ++i) proj_[i] = ProjectionNet::create(store_, names[i], k1, cfg_.dcca_hidden, cfg_.dcca_out, r);
    }
  }

  MoonModel(const MoonModel&) = delete;
  MoonModel& operator=(const MoonModel&) = delete;
  MoonModel(MoonModel&&) = default;
  MoonModel& operator=(MoonModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

  // Forward pass for one subject; every output has a leading batch axis of 1.
  ModelOutput forward(const ModelInput& in, OriCounters* counters = nullptr) const {
    if (cfg_.adaptor_active() && !in.prior)
      throw ConfigError("moon_forward: prior mode onehot needs a prior record for subject '" + in.id + "'");
    Streams maps;
    for (int o = 0; o < cfg_.organs(); ++o) maps[o] = branches_[o].features(in.volumes[o]);
    if (cfg_.ori_active()) maps = ori_.forward(maps, counters);

    ModelOutput out;
    std::array<Tensor, kOrganCount> h;
    for (int o = 0; o < cfg_.organs(); ++o) h[o] = branches_[o].head(maps[o]);
    out.h_e = h[0];
    if (cfg_.multi_organ) {
      out.h_l = h[1];
      out.h_s = h[2];
    }

    Tensor fused;
    if (cfg_.fusion == Fusion::concat && (cfg_.fusion_head() || cfg_.ce_head())) {
      std::vector<Tensor> parts;
      for (int o = 0; o < cfg_.organs(); ++o) parts.push_back(branches_[o].pooled(maps[o]));
      if (cfg_.adaptor_active()) {
        const auto& oh = in.prior->onehot;
        parts.push_back(adaptor_(Tensor::from({1, kOneHotWidth}, {oh.begin(), oh.end()})));
      }
      fused = parts.size() == 1 ? parts[0] : concat(parts, 1);
    }
    if (cfg_.ce_head()) out.ce_logits = linear(relu(fused), ce_w_, ce_b_);

    if (cfg_.threshold_head()) {
      out.h_f = sigmoid(linear(fused, fuse_w_, fuse_b_));
    } else if (cfg_.loss == LossKind::ce) {
      out.h_f = cumulative_thresholds(out.ce_logits);
    } else if (cfg_.multi_organ) {
      out.h_f = scale(add(add(h[0], h[1]), h[2]), 1.0 / 3.0);
    } else {
      out.h_f = h[0];
    }
    return out;
  }

  // Per-subject forwards stacked along the batch axis.
  ModelOutput forward_batch(const std::vector<const ModelInput*>& batch) const {
    if (batch.empty()) throw ShapeError("forward_batch: empty batch");
    std::vector<ModelOutput> outs;
    outs.reserve(batch.size());
    for (const auto* in : batch) outs.push_back(forward(*in));
    auto stack = [&](Tensor ModelOutput::*field) {
      if (!(outs[0].*field).defined()) return Tensor{};
      if (outs.size() == 1) return outs[0].*field;
      std::vector<Tensor> parts;
      for (const auto& o : outs) parts.push_back(o.*field);
      return concat(parts, 0);
    };
    ModelOutput out;
    out.h_e = stack(&ModelOutput::h_e);
    out.h_l = stack(&ModelOutput::h_l);
    out.h_s = stack(&ModelOutput::h_s);
    out.h_f = stack(&ModelOutput::h_f);
    out.ce_logits = stack(&ModelOutput::ce_logits);
    return out;
  }

  DccaProjections projections() const {
    if (!cfg_.dcca_active()) return {};
    return {proj_[0], proj_[1], proj_[2], proj_[3]};
  }

  Backbone& branch(int organ) { return branches_.at(static_cast<std::size_t>(organ)); }
  Ori& ori() { return ori_; }

  // P(grade > j) from a K-way softmax, as a (n, K-1) threshold matrix.
  static Tensor cumulative_thresholds(const Tensor& logits) {
    const std::size_t k = logits.dim(1);
    std::vector<double> upper(k * (k - 1), 0.0);
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t j = 0; j < k - 1; ++j) upper[c * (k - 1) + j] = c > j ? 1.0 : 0.0;
    return matmul(softmax(logits, 1), Tensor::from({k, k - 1}, std::move(upper)));
  }

 private:
  ModelConfig cfg_;
  ParameterStore store_;
  std::array<Backbone, kOrganCount> branches_;
  Ori ori_;
  PriorAdaptor adaptor_;
  Tensor fuse_w_, fuse_b_, ce_w_, ce_b_;
  std::array<ProjectionNet, 4> proj_;
};

inline ModelOutput moon_forward(const MoonModel& model, const ModelInput& in) { return model.forward(in); }

}  // namespace moon
