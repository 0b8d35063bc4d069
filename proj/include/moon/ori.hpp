// Organ representation interaction between the esophagus (E), liver (L) and
// spleen (S) feature maps: pool to a shared size, interact as token matrices,
// then restore each branch with a 1x1x1 conv, nearest upsampling and a
// residual add.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "moon/attention.hpp"
#include "moon/error.hpp"
#include "moon/nn.hpp"
#include "moon/ops.hpp"

namespace moon {

enum class OriStrategy { none, add, concat, self_attn, query_swap, switching };

inline OriStrategy parse_ori_strategy(const std::string& s) {
  if (s == "none") return OriStrategy::none;
  if (s == "add") return OriStrategy::add;
  if (s == "concat") return OriStrategy::concat;
  if (s == "self_attn") return OriStrategy::self_attn;
  if (s == "query_swap") return OriStrategy::query_swap;
  if (s == "switching") return OriStrategy::switching;
  throw ConfigError("unknown ORI strategy '" + s + "' (expected none|add|concat|self_attn|query_swap|switching)");
}

inline std::string to_string(OriStrategy s) {
  switch (s) {
    case OriStrategy::none: return "none";
    case OriStrategy::add: return "add";
    case OriStrategy::concat: return "concat";
    case OriStrategy::self_attn: return "self_attn";
    case OriStrategy::query_swap: return "query_swap";
    case OriStrategy::switching: return "switching";
  }
  return "?";
}

struct OriConfig {
  Shape pooled_shape{2, 2, 2};
  std::size_t iterations = 8;
  OriStrategy strategy = OriStrategy::switching;
  std::size_t channels = 64;
  double init_gain = 0.5;

  void validate() const {
    if (pooled_shape.size() != 3) throw ConfigError("ori: pooled shape needs 3 axes");
    for (auto d : pooled_shape)
      if (d == 0) throw ConfigError("ori: zero-length pooled axis");
    if (iterations < 1) throw ConfigError("ori: iterations must be >= 1");
    if (channels == 0) throw ConfigError("ori: zero channels");
  }
};

// Trainable scalars used by the interaction itself (restoration excluded).
inline std::size_t ori_interaction_parameter_count(OriStrategy s, std::size_t c) {
  switch (s) {
    case OriStrategy::none:
    case OriStrategy::add: return 0;
    case OriStrategy::concat: return 3 * c * c + c;
    case OriStrategy::query_swap: return 4 * c * c;
    case OriStrategy::switching: return 5 * c * c;
    case OriStrategy::self_attn: return 12 * c * c;
  }
  return 0;
}

inline std::size_t ori_restore_parameter_count(OriStrategy s, std::size_t c) {
  return s == OriStrategy::none ? 0 : 3 * (c * c + c);
}

inline std::size_t ori_parameter_count(const OriConfig& cfg) {
  return ori_interaction_parameter_count(cfg.strategy, cfg.channels) +
         ori_restore_parameter_count(cfg.strategy, cfg.channels);
}

struct OriCounters {
  std::size_t attention_iterations = 0;
  std::size_t direct_iterations = 0;
};

// Three streams in one struct: index 0 = esophagus, 1 = liver, 2 = spleen.
using Streams = std::array<Tensor, 3>;

// Adaptive average pooling of each (C, X, Y, Z) map to the pooled shape.
inline Streams ori_pool(const Streams& maps, const Shape& pooled_shape) {
  const std::size_t c = maps[0].dim(0);
  Streams out;
  for (int s = 0; s < 3; ++s) {
    if (maps[s].rank() != 4 || maps[s].dim(0) != c)
      throw ShapeError("ori_pool: stream " + std::to_string(s) + " has shape " + shape_str(maps[s].shape()) +
                       ", expected " + std::to_string(c) + " channels");
    out[s] = adaptive_avg_pool3d(maps[s], pooled_shape);
  }
  return out;
}

class Ori {
 public:
  Ori() = default;

  Ori(const OriConfig& cfg, ParameterStore& store, const std::string& prefix, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t c = cfg_.channels;
    auto square = [&](const std::string& name) { return store.add_glorot(prefix + "." + name, {c, c}, c, c, rng, cfg_.init_gain); };
    auto attention = [&](const std::string& p) {
      return AttentionWeights{square(p + "wq"), square(p + "wk"), square(p + "wv"), square(p + "wp")};
    };
    switch (cfg_.strategy) {
      case OriStrategy::none:
      case OriStrategy::add: break;
      case OriStrategy::concat:
        mix_w_ = store.add_glorot(prefix + ".mix.w", {3 * c, c}, 3 * c, c, rng, cfg_.init_gain);
        mix_b_ = store.add_zeros(prefix + ".mix.b", {c});
        break;
      case OriStrategy::query_swap: att_ = attention("att."); break;
      case OriStrategy::switching:
        att_ = attention("att.");
        direct_ = square("direct.w");
        break;
      case OriStrategy::self_attn:
        for (int s = 0; s < 3; ++s) self_[s] = attention("self" + std::to_string(s) + ".");
        break;
    }
    if (cfg_.strategy != OriStrategy::none) {
      static const char* names[] = {"e", "l", "s"};
      for (int s = 0; s < 3; ++s) {
        restore_w_[s] = store.add_zeros(prefix + ".restore." + names[s] + ".w", {c, c});
        restore_b_[s] = store.add_zeros(prefix + ".restore." + names[s] + ".b", {c});
      }
    }
  }

  const OriConfig& config() const { return cfg_; }

  // Interaction on token matrices (n x C per stream); returns G_E, G_L, G_S.
  Streams interact_tokens(const Streams& t, OriCounters* counters = nullptr) const {
    switch (cfg_.strategy) {
      case OriStrategy::none: return t;
      case OriStrategy::add: {
        const Tensor g = add(add(t[0], t[1]), t[2]);
        return {g, g, g};
      }
      case OriStrategy::concat: {
        const Tensor g = linear(concat({t[0], t[1], t[2]}, 1), mix_w_, mix_b_);
        return {g, g, g};
      }
      case OriStrategy::query_swap: return query_swap(t, counters);
      case OriStrategy::switching: return switching(t, counters);
      case OriStrategy::self_attn: return self_attention(t, counters);
    }
    throw ConfigError("ori: unknown strategy");
  }

  // Pooled (C, Hn, Wn, Dn) maps in, same-shaped maps out.
  Streams interact(const Streams& pooled, OriCounters* counters = nullptr) const {
    const Shape spatial{pooled[0].dim(1), pooled[0].dim(2), pooled[0].dim(3)};
    Streams tokens;
    for (int s = 0; s < 3; ++s) {
      if (pooled[s].shape() != pooled[0].shape())
        throw ShapeError("ori_interact: pooled shapes differ: " + shape_str(pooled[0].shape()) + " vs " +
                         shape_str(pooled[s].shape()));
      tokens[s] = to_tokens(pooled[s]);
    }
    const Streams g = interact_tokens(tokens, counters);
    Streams out;
    for (int s = 0; s < 3; ++s) out[s] = from_tokens(g[s], spatial);
    return out;
  }

  // F + upsample(conv1x1(G)) for one stream.
  Tensor restore(int stream, const Tensor& g, const Tensor& original) const {
    const Shape pooled_spatial{g.dim(1), g.dim(2), g.dim(3)};
    const Tensor conv = from_tokens(linear(to_tokens(g), restore_w_[stream], restore_b_[stream]), pooled_spatial);
    return add(original, nearest_interpolate3d(conv, {original.dim(1), original.dim(2), original.dim(3)}));
  }

  // Full block: pool, interact, restore. Strategy none returns the maps untouched.
  Streams forward(const Streams& maps, OriCounters* counters = nullptr) const {
    if (cfg_.strategy == OriStrategy::none) return maps;
    for (int s = 0; s < 3; ++s)
      for (int a = 0; a < 3; ++a)
        if (cfg_.pooled_shape[a] > maps[s].dim(a + 1))
          throw ShapeError("ori: pooled shape " + shape_str(cfg_.pooled_shape) + " larger than feature map " +
                           shape_str(maps[s].shape()));
    const Streams g = interact(ori_pool(maps, cfg_.pooled_shape), counters);
    Streams out;
    for (int s = 0; s < 3; ++s) out[s] = restore(s, g[s], maps[s]);
    return out;
  }

  AttentionWeights& attention_weights() { return att_; }
  Tensor& direct_weight() { return direct_; }
  Tensor& restore_weight(int s) { return restore_w_[s]; }
  Tensor& restore_bias(int s) { return restore_b_[s]; }

 private:
  // Even iterations: E attends to L (i = 0 mod 4) or S (i = 2 mod 4), and
  // that partner attends back to E. Odd iterations: X += X W_D for all streams.
  Streams switching(Streams t, OriCounters* counters) const {
    for (std::size_t i = 0; i < cfg_.iterations; ++i) {
      if (i % 2 == 0) {
        const int p = i % 4 == 0 ? 1 : 2;
        const Tensor e = add(t[0], att_(t[0], t[p]));
        const Tensor q = add(t[p], att_(t[p], t[0]));
        t[0] = e;
        t[p] = q;
        if (counters) ++counters->attention_iterations;
      } else {
        for (auto& x : t) x = add(x, matmul(x, direct_));
        if (counters) ++counters->direct_iterations;
      }
    }
    return t;
  }

  // Even iterations: E queries L and S. Odd iterations: L and S query E.
  Streams query_swap(Streams t, OriCounters* counters) const {
    for (std::size_t i = 0; i < cfg_.iterations; ++i) {
      if (i % 2 == 0) {
        t[0] = add(t[0], add(att_(t[0], t[1]), att_(t[0], t[2])));
      } else {
        const Tensor l = add(t[1], att_(t[1], t[0]));
        const Tensor s = add(t[2], att_(t[2], t[0]));
        t[1] = l;
        t[2] = s;
      }
      if (counters) ++counters->attention_iterations;
    }
    return t;
  }

  // Joint attention over the concatenated tokens of all three streams, with
  // per-stream Q/K/V and output projections.
  Streams self_attention(Streams t, OriCounters* counters) const {
    const std::size_t n = t[0].dim(0);
    for (std::size_t i = 0; i < cfg_.iterations; ++i) {
      std::vector<Tensor> q, k, v;
      for (int s = 0; s < 3; ++s) {
        q.push_back(matmul(t[s], self_[s].wq));
        k.push_back(matmul(t[s], self_[s].wk));
        v.push_back(matmul(t[s], self_[s].wv));
      }
      const Tensor joint = scaled_dot_attention(concat(q, 0), concat(k, 0), concat(v, 0));
      for (int s = 0; s < 3; ++s)
        t[s] = add(t[s], matmul(slice(joint, 0, s * n, (s + 1) * n), self_[s].wp));
      if (counters) ++counters->attention_iterations;
    }
    return t;
  }

  OriConfig cfg_;
  AttentionWeights att_;
  Tensor direct_;
  Tensor mix_w_, mix_b_;
  std::array<AttentionWeights, 3> self_;
  std::array<Tensor, 3> restore_w_, restore_b_;
};

}  // namespace moon
