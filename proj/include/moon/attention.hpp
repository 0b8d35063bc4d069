// Single-head scaled dot-product attention over token matrices.
#pragma once

#include <cmath>

#include "moon/ops.hpp"

namespace moon {

// Flattens (C, X, Y, Z) to X*Y*Z tokens of width C, and back.
inline Tensor to_tokens(const Tensor& fmap) {
  if (fmap.rank() != 4) throw ShapeError("to_tokens: expected (C, X, Y, Z), got " + shape_str(fmap.shape()));
  const std::size_t c = fmap.dim(0), n = fmap.dim(1) * fmap.dim(2) * fmap.dim(3);
  return transpose(reshape(fmap, {c, n}));
}

inline Tensor from_tokens(const Tensor& tokens, const Shape& spatial) {
  if (tokens.rank() != 2 || spatial.size() != 3 || tokens.dim(0) != spatial[0] * spatial[1] * spatial[2])
    throw ShapeError("from_tokens: tokens " + shape_str(tokens.shape()) + " do not fit spatial " + shape_str(spatial));
  return reshape(transpose(tokens), {tokens.dim(1), spatial[0], spatial[1], spatial[2]});
}

// softmax(Q K^T / sqrt(d_k)) V with Q (n_q x d_k), K (n_k x d_k), V (n_k x d_v).
inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw ShapeError("scaled_dot_attention: Q, K, V must be matrices");
  if (q.dim(1) != k.dim(1))
    throw ShapeError("scaled_dot_attention: d_k mismatch, Q " + shape_str(q.shape()) + " vs K " + shape_str(k.shape()));
  if (k.dim(0) != v.dim(0))
    throw ShapeError("scaled_dot_attention: K " + shape_str(k.shape()) + " and V " + shape_str(v.shape()) +
                     " token counts differ");
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  return matmul(softmax(scale(matmul(q, transpose(k)), inv), 1), v);
}

// Projection weights for one attention path; Att(X; Y) reads queries from X
// and keys/values from Y, then applies W_P.
struct AttentionWeights {
  Tensor wq, wk, wv, wp;

  Tensor operator()(const Tensor& x, const Tensor& y) const {
    return matmul(scaled_dot_attention(matmul(x, wq), matmul(y, wk), matmul(y, wv)), wp);
  }
};

}  // namespace moon
