// Differentiable primitives. Every op validates shapes, computes its output
// eagerly and registers a closure that maps the output gradient back onto
// its inputs.
//
// Volumetric tensors use channel-first layout (C, X, Y, Z), row-major.
#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "moon/tensor.hpp"

namespace moon {

namespace detail {

[[noreturn]] inline void shape_fail(std::string_view op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

[[noreturn]] inline void mismatch(std::string_view op, const Shape& a, const Shape& b) {
  shape_fail(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank)
    shape_fail(op, "expected rank " + std::to_string(rank) + ", got shape " + shape_str(t.shape()));
}

// Elementwise binary op; either operand may be a single-element tensor that
// broadcasts against the other.
template <class F, class DA, class DB>
Tensor binary(std::string_view op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const bool a_scalar = a.size() == 1 && b.size() != 1;
  const bool b_scalar = b.size() == 1 && a.size() != 1;
  if (!a_scalar && !b_scalar && a.shape() != b.shape()) mismatch(op, a.shape(), b.shape());
  const Shape out_shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_size(out_shape);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
  Node* pa = a.raw();
  Node* pb = b.raw();
  return Tensor::make(op, out_shape, std::move(out), {&a, &b},
                      [pa, pb, a_scalar, b_scalar, da, db](const Node&, std::span<const double> g) {
                        const auto& av = pa->values;
                        const auto& bv = pb->values;
                        if (pa->requires_grad) {
                          auto ga = pa->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i)
                            ga[a_scalar ? 0 : i] += g[i] * da(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
                        }
                        if (pb->requires_grad) {
                          auto gb = pb->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i)
                            gb[b_scalar ? 0 : i] += g[i] * db(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
                        }
                      });
}

template <class F, class DF>
Tensor unary(std::string_view op, const Tensor& a, F f, DF df) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  Node* pa = a.raw();
  // df receives (input, output).
  return Tensor::make(op, a.shape(), std::move(out), {&a}, [pa, df](const Node& self, std::span<const double> g) {
    auto ga = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(pa->values[i], self.values[i]);
  });
}

// Valid output range [lo, hi) along one axis of a strided, padded window.
inline std::pair<std::size_t, std::size_t> conv_range(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                                                      std::size_t pad) {
  // Need 0 <= o*stride + k - pad < in.
  std::size_t lo = 0;
  if (pad > k) lo = (pad - k + stride - 1) / stride;
  if (in + pad <= k) return {0, 0};
  std::size_t hi = (in - 1 + pad - k) / stride + 1;
  if (hi > out) hi = out;
  if (lo > hi) lo = hi;
  return {lo, hi};
}

}  // namespace detail

// ---- elementwise -------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary(
      "scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

// ---- shape ops ---------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) detail::mismatch("reshape", a.shape(), shape);
  std::vector<double> out(a.values().begin(), a.values().end());
  detail::Node* pa = a.raw();
  return Tensor::make("reshape", std::move(shape), std::move(out), {&a},
                      [pa](const detail::Node&, std::span<const double> g) {
                        auto ga = pa->ensure_grad();
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                      });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto av = a.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  detail::Node* pa = a.raw();
  return Tensor::make("transpose", {n, m}, std::move(out), {&a},
                      [pa, m, n](const detail::Node&, std::span<const double> g) {
                        auto ga = pa->ensure_grad();
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                      });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) detail::shape_fail("concat", "no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size())
    detail::shape_fail("concat", "axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) detail::mismatch("concat", first, p.shape());
    for (std::size_t d = 0; d < first.size(); ++d)
      if (d != axis && p.dim(d) != first[d]) detail::mismatch("concat", first, p.shape());
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_row = out_shape[axis] * inner;

  std::vector<double> out(shape_size(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t row = p.dim(axis) * inner;
    const auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * row, row, out.begin() + o * out_row + off);
    off += row;
  }
  std::vector<const Tensor*> inputs;
  std::vector<detail::Node*> nodes;
  for (const auto& p : parts) {
    inputs.push_back(&p);
    nodes.push_back(p.raw());
  }
  return Tensor::make("concat", out_shape, std::move(out), inputs,
                      [nodes, offsets, outer, out_row](const detail::Node&, std::span<const double> g) {
                        for (std::size_t k = 0; k < nodes.size(); ++k) {
                          if (!nodes[k]->requires_grad) continue;
                          auto gp = nodes[k]->ensure_grad();
                          const std::size_t row = gp.size() / outer;
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < row; ++i) gp[o * row + i] += g[o * out_row + offsets[k] + i];
                        }
                      });
}

// Entries [begin, end) along `axis`.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank() || begin >= end || end > a.dim(axis))
    detail::shape_fail("slice", "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                                    std::to_string(axis) + " invalid for " + shape_str(a.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t in_row = a.dim(axis) * inner;
  const std::size_t out_row = (end - begin) * inner;
  const std::size_t off = begin * inner;
  const auto av = a.values();
  std::vector<double> out(outer * out_row);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(av.begin() + o * in_row + off, out_row, out.begin() + o * out_row);
  detail::Node* pa = a.raw();
  return Tensor::make("slice", out_shape, std::move(out), {&a},
                      [pa, outer, in_row, out_row, off](const detail::Node&, std::span<const double> g) {
                        auto ga = pa->ensure_grad();
                        for (std::size_t o = 0; o < outer; ++o)
                          for (std::size_t i = 0; i < out_row; ++i) ga[o * in_row + off + i] += g[o * out_row + i];
                      });
}

// ---- linear algebra ----------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) detail::mismatch("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  detail::Node* pa = a.raw();
  detail::Node* pb = b.raw();
  return Tensor::make("matmul", {m, n}, std::move(out), {&a, &b},
                      [pa, pb, m, k, n](const detail::Node&, std::span<const double> g) {
                        if (pa->requires_grad) {  // dA = G B^T
                          auto ga = pa->ensure_grad();
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t p = 0; p < k; ++p) {
                              double s = 0.0;
                              for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * pb->values[p * n + j];
                              ga[i * k + p] += s;
                            }
                        }
                        if (pb->requires_grad) {  // dB = A^T G
                          auto gb = pb->ensure_grad();
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t p = 0; p < k; ++p) {
                              const double x = pa->values[i * k + p];
                              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += x * g[i * n + j];
                            }
                        }
                      });
}

// x (m x in) * w (in x out) + bias (out). `bias` may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor{}) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) detail::mismatch("linear", x.shape(), w.shape());
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (bias.defined() && bias.size() != n) detail::mismatch("linear", w.shape(), bias.shape());
  const auto xv = x.values();
  const auto wv = w.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out[i * n];
    if (bias.defined())
      for (std::size_t j = 0; j < n; ++j) orow[j] = bias[j];
    for (std::size_t p = 0; p < k; ++p) {
      const double v = xv[i * k + p];
      if (v == 0.0) continue;
      const double* wrow = &wv[p * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += v * wrow[j];
    }
  }
  detail::Node* px = x.raw();
  detail::Node* pw = w.raw();
  detail::Node* pb = bias.defined() ? bias.raw() : nullptr;
  std::vector<const Tensor*> inputs{&x, &w};
  if (bias.defined()) inputs.push_back(&bias);
  return Tensor::make("linear", {m, n}, std::move(out), inputs,
                      [px, pw, pb, m, k, n](const detail::Node&, std::span<const double> g) {
                        if (px->requires_grad) {
                          auto gx = px->ensure_grad();
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t p = 0; p < k; ++p) {
                              double s = 0.0;
                              for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * pw->values[p * n + j];
                              gx[i * k + p] += s;
                            }
                        }
                        if (pw->requires_grad) {
                          auto gw = pw->ensure_grad();
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t p = 0; p < k; ++p) {
                              const double v = px->values[i * k + p];
                              if (v == 0.0) continue;
                              for (std::size_t j = 0; j < n; ++j) gw[p * n + j] += v * g[i * n + j];
                            }
                        }
                        if (pb && pb->requires_grad) {
                          auto gb = pb->ensure_grad();
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                        }
                      });
}

// ---- volumetric ops ----------------------------------------------------------

// x: (Cin, X, Y, Z); w: (Cout, Cin, k, k, k); bias: (Cout) or undefined.
// Zero padding, the same stride on every axis.
inline Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t padding) {
  detail::require_rank("conv3d", x, 4);
  detail::require_rank("conv3d", w, 5);
  if (stride == 0) detail::shape_fail("conv3d", "stride must be >= 1");
  const std::size_t cin = x.dim(0), cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin || w.dim(3) != k || w.dim(4) != k) detail::mismatch("conv3d", x.shape(), w.shape());
  if (bias.defined() && bias.size() != cout) detail::mismatch("conv3d", w.shape(), bias.shape());
  const std::array<std::size_t, 3> in{x.dim(1), x.dim(2), x.dim(3)};
  std::array<std::size_t, 3> out{};
  for (int a = 0; a < 3; ++a) {
    if (in[a] + 2 * padding < k) detail::mismatch("conv3d", x.shape(), w.shape());
    out[a] = (in[a] + 2 * padding - k) / stride + 1;
  }
  const std::size_t in_vol = in[0] * in[1] * in[2];
  const std::size_t out_vol = out[0] * out[1] * out[2];

  // Per-kernel-offset valid output ranges along each axis.
  std::vector<std::array<std::pair<std::size_t, std::size_t>, 3>> ranges(k);
  for (std::size_t t = 0; t < k; ++t)
    for (int a = 0; a < 3; ++a) ranges[t][a] = detail::conv_range(in[a], out[a], t, stride, padding);

  // Visits every run of output voxels along z that one weight links to one
  // input row. fn(weight_index, in_start, out_start, count) handles a run;
  // input elements of the run are spaced `stride` apart.
  auto for_each_run = [=](auto&& fn) {
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t kx = 0; kx < k; ++kx)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kz = 0; kz < k; ++kz) {
              const std::size_t widx = (((co * cin + ci) * k + kx) * k + ky) * k + kz;
              const auto [x0, x1] = ranges[kx][0];
              const auto [y0, y1] = ranges[ky][1];
              const auto [z0, z1] = ranges[kz][2];
              if (z0 >= z1) continue;
              const std::size_t iz0 = z0 * stride + kz - padding;
              for (std::size_t ox = x0; ox < x1; ++ox) {
                const std::size_t ix = ox * stride + kx - padding;
                for (std::size_t oy = y0; oy < y1; ++oy) {
                  const std::size_t iy = oy * stride + ky - padding;
                  fn(widx, ci * in_vol + (ix * in[1] + iy) * in[2] + iz0, co * out_vol + (ox * out[1] + oy) * out[2] + z0,
                     z1 - z0);
                }
              }
            }
  };

  const auto xv = x.values();
  const auto wv = w.values();
  std::vector<double> result(cout * out_vol, 0.0);
  if (bias.defined())
    for (std::size_t co = 0; co < cout; ++co) std::fill_n(result.begin() + co * out_vol, out_vol, bias[co]);
  for_each_run([&](std::size_t widx, std::size_t in_start, std::size_t out_start, std::size_t count) {
    const double wt = wv[widx];
    const double* src = xv.data() + in_start;
    double* dst = result.data() + out_start;
    for (std::size_t j = 0; j < count; ++j) dst[j] += wt * src[j * stride];
  });

  detail::Node* px = x.raw();
  detail::Node* pw = w.raw();
  detail::Node* pb = bias.defined() ? bias.raw() : nullptr;
  std::vector<const Tensor*> inputs{&x, &w};
  if (bias.defined()) inputs.push_back(&bias);
  return Tensor::make(
      "conv3d", {cout, out[0], out[1], out[2]}, std::move(result), inputs,
      [px, pw, pb, for_each_run, stride, cout, out_vol](const detail::Node&, std::span<const double> g) {
        const bool need_x = px->requires_grad, need_w = pw->requires_grad;
        std::span<double> gx, gw;
        if (need_x) gx = px->ensure_grad();
        if (need_w) gw = pw->ensure_grad();
        const double* xv = px->values.data();
        const double* wv = pw->values.data();
        if (need_x || need_w) {
          for_each_run([&](std::size_t widx, std::size_t in_start, std::size_t out_start, std::size_t count) {
            const double* go = g.data() + out_start;
            if (need_x) {
              const double wt = wv[widx];
              double* dx = gx.data() + in_start;
              for (std::size_t j = 0; j < count; ++j) dx[j * stride] += wt * go[j];
            }
            if (need_w) {
              const double* src = xv + in_start;
              double s = 0.0;
              for (std::size_t j = 0; j < count; ++j) s += go[j] * src[j * stride];
              gw[widx] += s;
            }
          });
        }
        if (pb && pb->requires_grad) {
          auto gb = pb->ensure_grad();
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t i = 0; i < out_vol; ++i) gb[co] += g[co * out_vol + i];
        }
      });
}

namespace detail {
inline void require_spatial(std::string_view op, const Tensor& x, const Shape& target) {
  require_rank(op, x, 4);
  if (target.size() != 3) shape_fail(op, "target must have 3 spatial axes, got " + shape_str(target));
  for (auto d : target)
    if (d == 0) shape_fail(op, "zero-length target axis in " + shape_str(target));
}
}  // namespace detail

// Adaptive average pooling of (C, X, Y, Z) to (C, tx, ty, tz). Bin i along an
// axis of length n covers [floor(i*n/t), ceil((i+1)*n/t)).
inline Tensor adaptive_avg_pool3d(const Tensor& x, const Shape& target) {
  detail::require_spatial("adaptive_avg_pool3d", x, target);
  const std::size_t c = x.dim(0);
  const std::array<std::size_t, 3> in{x.dim(1), x.dim(2), x.dim(3)};
  for (int a = 0; a < 3; ++a)
    if (target[a] > in[a])
      detail::shape_fail("adaptive_avg_pool3d",
                         "target " + shape_str(target) + " larger than input " + shape_str(x.shape()));
  std::array<std::vector<std::pair<std::size_t, std::size_t>>, 3> bins;
  for (int a = 0; a < 3; ++a)
    for (std::size_t i = 0; i < target[a]; ++i)
      bins[a].emplace_back(i * in[a] / target[a], ((i + 1) * in[a] + target[a] - 1) / target[a]);
  const std::size_t in_vol = in[0] * in[1] * in[2];
  const std::size_t out_vol = target[0] * target[1] * target[2];

  auto for_each_cell = [bins, in, target, c, in_vol, out_vol](auto&& fn) {
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < target[0]; ++i)
        for (std::size_t j = 0; j < target[1]; ++j)
          for (std::size_t l = 0; l < target[2]; ++l) {
            const auto [x0, x1] = bins[0][i];
            const auto [y0, y1] = bins[1][j];
            const auto [z0, z1] = bins[2][l];
            const double inv = 1.0 / static_cast<double>((x1 - x0) * (y1 - y0) * (z1 - z0));
            const std::size_t o = ch * out_vol + (i * target[1] + j) * target[2] + l;
            for (std::size_t a = x0; a < x1; ++a)
              for (std::size_t b = y0; b < y1; ++b)
                for (std::size_t z = z0; z < z1; ++z) fn(o, ch * in_vol + (a * in[1] + b) * in[2] + z, inv);
          }
  };

  const auto xv = x.values();
  std::vector<double> out(c * out_vol, 0.0);
  for_each_cell([&](std::size_t o, std::size_t i, double inv) { out[o] += xv[i] * inv; });
  detail::Node* px = x.raw();
  return Tensor::make("adaptive_avg_pool3d", {c, target[0], target[1], target[2]}, std::move(out), {&x},
                      [px, for_each_cell](const detail::Node&, std::span<const double> g) {
                        auto gx = px->ensure_grad();
                        for_each_cell([&](std::size_t o, std::size_t i, double inv) { gx[i] += g[o] * inv; });
                      });
}

// Nearest-neighbour resampling of (C, X, Y, Z) to (C, tx, ty, tz); output
// index i reads source floor(i * n / t).
inline Tensor nearest_interpolate3d(const Tensor& x, const Shape& target) {
  detail::require_spatial("nearest_interpolate3d", x, target);
  const std::size_t c = x.dim(0);
  const std::array<std::size_t, 3> in{x.dim(1), x.dim(2), x.dim(3)};
  std::vector<std::size_t> src_index;
  const std::size_t in_vol = in[0] * in[1] * in[2];
  const std::size_t out_vol = target[0] * target[1] * target[2];
  src_index.reserve(c * out_vol);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < target[0]; ++i)
      for (std::size_t j = 0; j < target[1]; ++j)
        for (std::size_t l = 0; l < target[2]; ++l) {
          const std::size_t si = i * in[0] / target[0];
          const std::size_t sj = j * in[1] / target[1];
          const std::size_t sl = l * in[2] / target[2];
          src_index.push_back(ch * in_vol + (si * in[1] + sj) * in[2] + sl);
        }
  const auto xv = x.values();
  std::vector<double> out(src_index.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xv[src_index[o]];
  detail::Node* px = x.raw();
  return Tensor::make("nearest_interpolate3d", {c, target[0], target[1], target[2]}, std::move(out), {&x},
                      [px, src_index = std::move(src_index)](const detail::Node&, std::span<const double> g) {
                        auto gx = px->ensure_grad();
                        for (std::size_t o = 0; o < g.size(); ++o) gx[src_index[o]] += g[o];
                      });
}

// ---- reductions and normalizations -------------------------------------------

namespace detail {
struct AxisLayout {
  std::size_t outer, n, inner;
};
inline AxisLayout axis_layout(std::string_view op, const Tensor& a, std::size_t axis) {
  if (axis >= a.rank())
    shape_fail(op, "empty axis " + std::to_string(axis) + " for shape " + shape_str(a.shape()));
  AxisLayout l{1, a.dim(axis), 1};
  for (std::size_t d = 0; d < axis; ++d) l.outer *= a.dim(d);
  for (std::size_t d = axis + 1; d < a.rank(); ++d) l.inner *= a.dim(d);
  return l;
}
}  // namespace detail

inline Tensor softmax(const Tensor& a, std::size_t axis) {
  const auto l = detail::axis_layout("softmax", a, axis);
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.n * l.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < l.n; ++i) mx = std::max(mx, av[base + i * l.inner]);
      double s = 0.0;
      for (std::size_t i = 0; i < l.n; ++i) s += out[base + i * l.inner] = std::exp(av[base + i * l.inner] - mx);
      for (std::size_t i = 0; i < l.n; ++i) out[base + i * l.inner] /= s;
    }
  detail::Node* pa = a.raw();
  return Tensor::make("softmax", a.shape(), std::move(out), {&a},
                      [pa, l](const detail::Node& self, std::span<const double> g) {
                        auto ga = pa->ensure_grad();
                        const auto& y = self.values;
                        for (std::size_t o = 0; o < l.outer; ++o)
                          for (std::size_t in = 0; in < l.inner; ++in) {
                            const std::size_t base = o * l.n * l.inner + in;
                            double dot = 0.0;
                            for (std::size_t i = 0; i < l.n; ++i) dot += g[base + i * l.inner] * y[base + i * l.inner];
                            for (std::size_t i = 0; i < l.n; ++i) {
                              const std::size_t idx = base + i * l.inner;
                              ga[idx] += y[idx] * (g[idx] - dot);
                            }
                          }
                      });
}

inline Tensor log_softmax(const Tensor& a, std::size_t axis) {
  const auto l = detail::axis_layout("log_softmax", a, axis);
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.n * l.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < l.n; ++i) mx = std::max(mx, av[base + i * l.inner]);
      double s = 0.0;
      for (std::size_t i = 0; i < l.n; ++i) s += std::exp(av[base + i * l.inner] - mx);
      const double lse = mx + std::log(s);
      for (std::size_t i = 0; i < l.n; ++i) out[base + i * l.inner] = av[base + i * l.inner] - lse;
    }
  detail::Node* pa = a.raw();
  return Tensor::make("log_softmax", a.shape(), std::move(out), {&a},
                      [pa, l](const detail::Node& self, std::span<const double> g) {
                        auto ga = pa->ensure_grad();
                        const auto& y = self.values;
                        for (std::size_t o = 0; o < l.outer; ++o)
                          for (std::size_t in = 0; in < l.inner; ++in) {
                            const std::size_t base = o * l.n * l.inner + in;
                            double gs = 0.0;
                            for (std::size_t i = 0; i < l.n; ++i) gs += g[base + i * l.inner];
                            for (std::size_t i = 0; i < l.n; ++i) {
                              const std::size_t idx = base + i * l.inner;
                              ga[idx] += g[idx] - std::exp(y[idx]) * gs;
                            }
                          }
                      });
}

// Column-wise standardization of an (n x d) matrix: (x - mean) / (std + eps)
// with the population standard deviation.
inline Tensor standardize(const Tensor& a, double eps) {
  detail::require_rank("standardize", a, 2);
  const std::size_t n = a.dim(0), d = a.dim(1);
  const auto av = a.values();
  std::vector<double> mean(d, 0.0), sd(d, 0.0), out(n * d);
  for (std::size_t j = 0; j < d; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += av[i * d + j];
    mean[j] = s / static_cast<double>(n);
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double c = av[i * d + j] - mean[j];
      v += c * c;
    }
    sd[j] = std::sqrt(v / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) out[i * d + j] = (av[i * d + j] - mean[j]) / (sd[j] + eps);
  }
  detail::Node* pa = a.raw();
  return Tensor::make("standardize", a.shape(), std::move(out), {&a},
                      [pa, n, d, eps, mean = std::move(mean), sd = std::move(sd)](const detail::Node&,
                                                                                  std::span<const double> g) {
                        auto ga = pa->ensure_grad();
                        const auto& x = pa->values;
                        const double nn = static_cast<double>(n);
                        for (std::size_t j = 0; j < d; ++j) {
                          const double den = sd[j] + eps;
                          double gmean = 0.0, gc = 0.0;
                          for (std::size_t i = 0; i < n; ++i) {
                            gmean += g[i * d + j];
                            gc += g[i * d + j] * (x[i * d + j] - mean[j]);
                          }
                          gmean /= nn;
                          // d(sd)/dx_k = c_k / (n sd); vanishes with the centred column when sd == 0.
                          const double coef = sd[j] > 0.0 ? gc / (nn * sd[j] * den * den) : 0.0;
                          for (std::size_t i = 0; i < n; ++i) {
                            const double c = x[i * d + j] - mean[j];
                            ga[i * d + j] += (g[i * d + j] - gmean) / den - coef * c;
                          }
                        }
                      });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  detail::Node* pa = a.raw();
  return Tensor::make("sum", {1}, {s}, {&a}, [pa](const detail::Node&, std::span<const double> g) {
    auto ga = pa->ensure_grad();
    for (auto& v : ga) v += g[0];
  });
}

inline Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  const double n = static_cast<double>(a.size());
  detail::Node* pa = a.raw();
  return Tensor::make("mean", {1}, {s / n}, {&a}, [pa, n](const detail::Node&, std::span<const double> g) {
    auto ga = pa->ensure_grad();
    for (auto& v : ga) v += g[0] / n;
  });
}

// Mean squared difference over all elements.
inline Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::mismatch("mse", a.shape(), b.shape());
  const auto av = a.values();
  const auto bv = b.values();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  const double n = static_cast<double>(av.size());
  detail::Node* pa = a.raw();
  detail::Node* pb = b.raw();
  return Tensor::make("mse", {1}, {s / n}, {&a, &b}, [pa, pb, n](const detail::Node&, std::span<const double> g) {
    const auto& av = pa->values;
    const auto& bv = pb->values;
    if (pa->requires_grad) {
      auto ga = pa->ensure_grad();
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g[0] * 2.0 * (av[i] - bv[i]) / n;
    }
    if (pb->requires_grad) {
      auto gb = pb->ensure_grad();
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= g[0] * 2.0 * (av[i] - bv[i]) / n;
    }
  });
}

inline Tensor frobenius_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  const double r = std::sqrt(s);
  detail::Node* pa = a.raw();
  return Tensor::make("frobenius_norm", {1}, {r}, {&a}, [pa, r](const detail::Node&, std::span<const double> g) {
    if (r == 0.0) return;
    auto ga = pa->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * pa->values[i] / r;
  });
}

// Tr(A^T B) for two (n x d) matrices.
inline Tensor trace_gram(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.shape() != b.shape()) detail::mismatch("trace_gram", a.shape(), b.shape());
  const auto av = a.values();
  const auto bv = b.values();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  detail::Node* pa = a.raw();
  detail::Node* pb = b.raw();
  return Tensor::make("trace_gram", {1}, {s}, {&a, &b}, [pa, pb](const detail::Node&, std::span<const double> g) {
    if (pa->requires_grad) {
      auto ga = pa->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * pb->values[i];
    }
    if (pb->requires_grad) {
      auto gb = pb->ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[0] * pa->values[i];
    }
  });
}

}  // namespace moon
