#pragma once

// Differentiable tensor operations used by the U-Nets. Every op computes its
// forward value eagerly and, when gradients are enabled, registers a closure
// that accumulates input gradients from the output gradient.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

// Small products would otherwise take Eigen's coefficient-wise path, whose
// vectorized dot products depend on buffer alignment; always using the
// blocked kernels keeps results bitwise reproducible.
#ifndef EIGEN_GEMM_TO_COEFFBASED_THRESHOLD
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#endif
#include <Eigen/Core>

#include "scalesr/autodiff.hpp"
#include "scalesr/conservation.hpp"

namespace scalesr::ad {

enum class PadMode { zeros, circular };

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(Tape<T>& tape, Var<T> a, Var<T> b) {
  if (!(a.shape() == b.shape())) throw DimensionError("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  std::vector<T> v(a.value());
  const auto& bv = b.value();
  for (std::size_t k = 0; k < v.size(); ++k) v[k] += bv[k];
  Var<T> out = tape.make(a.shape(), std::move(v), {a, b});
  Node<T>* on = out.node();
  if (on->requires_grad)
    on->backward = [a, b, on]() {
      if (auto* ga = grad_slot(a))
        for (std::size_t k = 0; k < ga->size(); ++k) (*ga)[k] += on->grad[k];
      if (auto* gb = grad_slot(b))
        for (std::size_t k = 0; k < gb->size(); ++k) (*gb)[k] += on->grad[k];
    };
  return out;
}

template <class T>
Var<T> scale(Tape<T>& tape, Var<T> a, T c) {
  std::vector<T> v(a.value());
  for (auto& x : v) x *= c;
  Var<T> out = tape.make(a.shape(), std::move(v), {a});
  Node<T>* on = out.node();
  if (on->requires_grad)
    on->backward = [a, on, c]() {
      auto* ga = grad_slot(a);
      for (std::size_t k = 0; k < ga->size(); ++k) (*ga)[k] += c * on->grad[k];
    };
  return out;
}

/// x * sigmoid(x)
template <class T>
Var<T> silu(Tape<T>& tape, Var<T> a) {
  const auto& av = a.value();
  std::vector<T> v(av.size());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = av[k] / (T(1) + std::exp(-av[k]));
  Var<T> out = tape.make(a.shape(), std::move(v), {a});
  Node<T>* on = out.node();
  if (on->requires_grad)
    on->backward = [a, on]() {
      auto* ga = grad_slot(a);
      const auto& av = a.value();
      for (std::size_t k = 0; k < ga->size(); ++k) {
        const T s = T(1) / (T(1) + std::exp(-av[k]));
        (*ga)[k] += on->grad[k] * s * (T(1) + av[k] * (T(1) - s));
      }
    };
  return out;
}

/// x + b with b of shape (1 or N, C, 1, 1) broadcast over the plane.
template <class T>
Var<T> add_channel_bias(Tape<T>& tape, Var<T> x, Var<T> b) {
  const Shape s = x.shape(), bs = b.shape();
  if (bs.c != s.c || bs.h != 1 || bs.w != 1 || (bs.n != 1 && bs.n != s.n))
    throw DimensionError("add_channel_bias: bias " + bs.str() + " does not broadcast to " + s.str());
  std::vector<T> v(x.value());
  const std::size_t P = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T bb = b.value()[(bs.n == 1 ? 0 : n) * s.c + c];
      T* p = v.data() + (static_cast<std::size_t>(n) * s.c + c) * P;
      for (std::size_t k = 0; k < P; ++k) p[k] += bb;
    }
  Var<T> out = tape.make(s, std::move(v), {x, b});
  Node<T>* on = out.node();
  if (on->requires_grad)
    on->backward = [x, b, on, s, bs, P]() {
      if (auto* gx = grad_slot(x))
        for (std::size_t k = 0; k < gx->size(); ++k) (*gx)[k] += on->grad[k];
      if (auto* gb = grad_slot(b))
        for (int n = 0; n < s.n; ++n)
          for (int c = 0; c < s.c; ++c) {
            const T* g = on->grad.data() + (static_cast<std::size_t>(n) * s.c + c) * P;
            T acc = 0;
            for (std::size_t k = 0; k < P; ++k) acc += g[k];
            (*gb)[(bs.n == 1 ? 0 : n) * s.c + c] += acc;
          }
    };
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

/// Frames [first, first + count) along N.
template <class T>
Var<T> slice_frames(Tape<T>& tape, Var<T> x, int first, int count) {
  const Shape s = x.shape();
  if (first < 0 || count < 1 || first + count > s.n) throw DimensionError("slice_frames: range out of bounds");
  const std::size_t fs = static_cast<std::size_t>(s.c) * s.plane();
  std::vector<T> v(x.value().begin() + first * fs, x.value().begin() + (first + count) * fs);
  Var<T> out = tape.make({count, s.c, s.h, s.w}, std::move(v), {x});
  Node<T>* on = out.node();
  if (on->requires_grad)
    on->backward = [x, on, first, fs]() {
      auto* gx = grad_slot(x);
      for (std::size_t k = 0; k < on->grad.size(); ++k) (*gx)[first * fs + k] += on->grad[k];
    };
  return out;
}

/// Concatenate along channels; N, H, W must match.
template <class T>
Var<T> concat_channels(Tape<T>& tape, Var<T> a, Var<T> b) {
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
    throw DimensionError("concat_channels: " + sa.str() + " vs " + sb.str());
  const Shape so{sa.n, sa.c + sb.c, sa.h, sa.w};
  const std::size_t P = sa.plane(), fa = sa.c * P, fb = sb.c * P;
  std::vector<T> v(so.size());
  for (int n = 0; n < sa.n; ++n) {
    std::copy_n(a.value().begin() + n * fa, fa, v.begin() + n * (fa + fb));
    std::copy_n(b.value().begin() + n * fb, fb, v.begin() + n * (fa + fb) + fa);
  }
  Var<T> out = tape.make(so, std::move(v), {a, b});
  Node<T>* on = out.node();
  if (on->requires_grad)
    on->backward = [a, b, on, fa, fb, N = sa.n]() {
      auto* ga = grad_slot(a);
      auto* gb = grad_slot(b);
      for (int n = 0; n < N; ++n) {
        const T* g = on->grad.data() + n * (fa + fb);
        if (ga)
          for (std::size_t k = 0; k < fa; ++k) (*ga)[n * fa + k] += g[k];
        if (gb)
          for (std::size_t k = 0; k < fb; ++k) (*gb)[n * fb + k] += g[fa + k];
      }
    };
  return out;
}

/// Nearest-neighbour resize of each plane to (oh, ow).
template <class T>
Var<T> resize_nearest(Tape<T>& tape, Var<T> x, int oh, int ow) {
  const Shape s = x.shape();
  const Shape so{s.n, s.c, oh, ow};
  std::vector<int> src(static_cast<std::size_t>(oh) * ow);
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j) src[i * ow + j] = (i * s.h / oh) * s.w + (j * s.w / ow);
  std::vector<T> v(so.size());
  const std::size_t P = s.plane(), Q = so.plane();
  for (int nc = 0; nc < s.n * s.c; ++nc)
    for (std::size_t q = 0; q < Q; ++q) v[nc * Q + q] = x.value()[nc * P + src[q]];
  Var<T> out = tape.make(so, std::move(v), {x});
  Node<T>* on = out.node();
  if (on->requires_grad)
    on->backward = [x, on, src = std::move(src), P, Q, NC = s.n * s.c]() {
      auto* gx = grad_slot(x);
      for (int nc = 0; nc < NC; ++nc)
        for (std::size_t q = 0; q < Q; ++q) (*gx)[nc * P + src[q]] += on->grad[nc * Q + q];
    };
  return out;
}

/// Adaptive average pooling of each plane to (oh, ow).
template <class T>
Var<T> adaptive_avg_pool(Tape<T>& tape, Var<T> x, int oh, int ow) {
  const Shape s = x.shape();
  const Shape so{s.n, s.c, oh, ow};
  struct Range { int lo, hi; };
  auto ranges = [](int in, int outn) {
    std::vector<Range> r(outn);
    for (int o = 0; o < outn; ++o) r[o] = {o * in / outn, ((o + 1) * in + outn - 1) / outn};
    return r;
  };
  const auto ry = ranges(s.h, oh), rx = ranges(s.w, ow);
  const std::size_t P = s.plane(), Q = so.plane();
  std::vector<T> v(so.size());
  for (int nc = 0; nc < s.n * s.c; ++nc)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        T acc = 0;
        for (int y = ry[i].lo; y < ry[i].hi; ++y)
          for (int xx = rx[j].lo; xx < rx[j].hi; ++xx) acc += x.value()[nc * P + y * s.w + xx];
        v[nc * Q + i * ow + j] = acc / T((ry[i].hi - ry[i].lo) * (rx[j].hi - rx[j].lo));
      }
  Var<T> out = tape.make(so, std::move(v), {x});
  Node<T>* on = out.node();
  if (on->requires_grad)
    on->backward = [x, on, ry, rx, s, P, Q, oh, ow]() {
      auto* gx = grad_slot(x);
      for (int nc = 0; nc < s.n * s.c; ++nc)
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j) {
            const T g = on->grad[nc * Q + i * ow + j] / T((ry[i].hi - ry[i].lo) * (rx[j].hi - rx[j].lo));
            for (int y = ry[i].lo; y < ry[i].hi; ++y)
              for (int xx = rx[j].lo; xx < rx[j].hi; ++xx) (*gx)[nc * P + y * s.w + xx] += g;
          }
    };
  return out;
}

/// Row `index` of a (J, D, 1, 1) table as a (1, D, 1, 1) tensor.
template <class T>
Var<T> embedding_row(Tape<T>& tape, Var<T> table, int index) {
  const Shape s = table.shape();
  if (index < 0 || index >= s.n) throw DimensionError("embedding_row: index out of range");
  const std::size_t D = static_cast<std::size_t>(s.c) * s.plane();
  std::vector<T> v(table.value().begin() + index * D, table.value().begin() + (index + 1) * D);
  Var<T> out = tape.make({1, s.c, s.h, s.w}, std::move(v), {table});
  Node<T>* on = out.node();
  if (on->requires_grad)
    on->backward = [table, on, index, D]() {
      auto* g = grad_slot(table);
      for (std::size_t k = 0; k < D; ++k) (*g)[index * D + k] += on->grad[k];
    };
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

inline int wrap_index(int i, int n) { return ((i % n) + n) % n; }

/// cols[(ci*k + ky)*k + kx][oy*ow + ox]
template <class T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, PadMode mode, int oh, int ow, T* cols) {
  const std::size_t Q = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < C; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * Q;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + ky;
          const bool yin = iy >= 0 && iy < H;
          if (!yin && mode == PadMode::circular) iy = wrap_index(iy, H);
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + kx;
            const bool xin = ix >= 0 && ix < W;
            if (mode == PadMode::zeros) {
              row[oy * ow + ox] = (yin && xin) ? x[(static_cast<std::size_t>(ci) * H + iy) * W + ix] : T(0);
            } else {
              if (!xin) ix = wrap_index(ix, W);
              row[oy * ow + ox] = x[(static_cast<std::size_t>(ci) * H + iy) * W + ix];
            }
          }
        }
      }
}

template <class T>
void col2im(const T* cols, int C, int H, int W, int k, int stride, int pad, PadMode mode, int oh, int ow, T* dx) {
  const std::size_t Q = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < C; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * Q;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + ky;
          const bool yin = iy >= 0 && iy < H;
          if (!yin) {
            if (mode == PadMode::zeros) continue;
            iy = wrap_index(iy, H);
          }
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= W) {
              if (mode == PadMode::zeros) continue;
              ix = wrap_index(ix, W);
            }
            dx[(static_cast<std::size_t>(ci) * H + iy) * W + ix] += row[oy * ow + ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution of every frame: x (N, Cin, H, W), weight (Cout, Cin, k, k),
/// bias (1, Cout, 1, 1) or empty.
template <class T>
Var<T> conv2d(Tape<T>& tape, Var<T> x, Var<T> weight, Var<T> bias, int stride = 1, int pad = -1,
              PadMode mode = PadMode::zeros) {
  const Shape s = x.shape(), ws = weight.shape();
  const int k = ws.h;
  if (ws.w != k || ws.c != s.c)
    throw DimensionError("conv2d: weight " + ws.str() + " incompatible with input " + s.str());
  if (pad < 0) pad = k / 2;
  const int oh = (s.h + 2 * pad - k) / stride + 1, ow = (s.w + 2 * pad - k) / stride + 1;
  if (oh <= 0 || ow <= 0) throw DimensionError("conv2d: empty output");
  const int cout = ws.n;
  const int K = s.c * k * k;
  const std::size_t Q = static_cast<std::size_t>(oh) * ow;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);
  const Shape so{s.n, cout, oh, ow};

  std::vector<T> cols(pointwise ? 0 : static_cast<std::size_t>(s.n) * K * Q);
  std::vector<T> v(so.size());
  ConstMapMat<T> Wm(weight.value().data(), cout, K);
  for (int n = 0; n < s.n; ++n) {
    const T* xn = x.value().data() + static_cast<std::size_t>(n) * s.c * s.plane();
    const T* cn = xn;
    if (!pointwise) {
      detail::im2col(xn, s.c, s.h, s.w, k, stride, pad, mode, oh, ow, cols.data() + n * K * Q);
      cn = cols.data() + n * K * Q;
    }
    MapMat<T> out(v.data() + static_cast<std::size_t>(n) * cout * Q, cout, static_cast<Eigen::Index>(Q));
    out.noalias() = Wm * ConstMapMat<T>(cn, K, static_cast<Eigen::Index>(Q));
    if (bias)
      for (int co = 0; co < cout; ++co) out.row(co).array() += bias.value()[co];
  }
  Var<T> out = bias ? tape.make(so, std::move(v), {x, weight, bias}) : tape.make(so, std::move(v), {x, weight});
  Node<T>* on = out.node();
  if (on->requires_grad)
    on->backward = [=, cols = std::move(cols)]() {
      auto* gx = grad_slot(x);
      auto* gw = grad_slot(weight);
      auto* gb = bias ? grad_slot(bias) : nullptr;
      ConstMapMat<T> Wm(weight.value().data(), cout, K);
      std::vector<T> dcols(gx && !pointwise ? static_cast<std::size_t>(K) * Q : 0);
      for (int n = 0; n < s.n; ++n) {
        ConstMapMat<T> g(on->grad.data() + static_cast<std::size_t>(n) * cout * Q, cout, static_cast<Eigen::Index>(Q));
        const T* cn = pointwise ? x.value().data() + static_cast<std::size_t>(n) * s.c * s.plane()
                                : cols.data() + n * K * Q;
        if (gw) {
          MapMat<T> dW(gw->data(), cout, K);
          dW.noalias() += g * ConstMapMat<T>(cn, K, static_cast<Eigen::Index>(Q)).transpose();
        }
        if (gb)
          for (int co = 0; co < cout; ++co) {
            T acc = T(0);
            for (Eigen::Index q = 0; q < g.cols(); ++q) acc += g(co, q);
            (*gb)[co] += acc;
          }
        if (gx) {
          T* dxn = gx->data() + static_cast<std::size_t>(n) * s.c * s.plane();
          if (pointwise) {
            MapMat<T> dx(dxn, K, static_cast<Eigen::Index>(Q));
            dx.noalias() += Wm.transpose() * g;
          } else {
            MapMat<T> dc(dcols.data(), K, static_cast<Eigen::Index>(Q));
            dc.noalias() = Wm.transpose() * g;
            detail::col2im(dcols.data(), s.c, s.h, s.w, k, stride, pad, mode, oh, ow, dxn);
          }
        }
      }
    };
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Group normalization per frame: x (N, C, H, W), gamma/beta (1, C, 1, 1).
template <class T>
Var<T> group_norm(Tape<T>& tape, Var<T> x, Var<T> gamma, Var<T> beta, int groups, T eps = T(1e-5)) {
  const Shape s = x.shape();
  if (s.c % groups != 0) throw DimensionError("group_norm: groups must divide channels");
  const int cg = s.c / groups;
  const std::size_t P = s.plane(), M = cg * P;
  std::vector<T> xhat(s.size()), v(s.size());
  std::vector<T> inv_std(static_cast<std::size_t>(s.n) * groups);
  for (int n = 0; n < s.n; ++n)
    for (int g = 0; g < groups; ++g) {
      const std::size_t off = (static_cast<std::size_t>(n) * s.c + g * cg) * P;
      const T* xp = x.value().data() + off;
      double mean = 0.0, var = 0.0;
      for (std::size_t k = 0; k < M; ++k) mean += xp[k];
      mean /= static_cast<double>(M);
      for (std::size_t k = 0; k < M; ++k) var += (xp[k] - mean) * (xp[k] - mean);
      var /= static_cast<double>(M);
      const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
      inv_std[n * groups + g] = is;
      for (std::size_t k = 0; k < M; ++k) {
        const int c = g * cg + static_cast<int>(k / P);
        const T xh = static_cast<T>((xp[k] - mean)) * is;
        xhat[off + k] = xh;
        v[off + k] = xh * gamma.value()[c] + beta.value()[c];
      }
    }
  Var<T> out = tape.make(s, std::move(v), {x, gamma, beta});
  Node<T>* on = out.node();
  if (on->requires_grad)
    on->backward = [=, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
      auto* gx = grad_slot(x);
      auto* gg = grad_slot(gamma);
      auto* gbeta = grad_slot(beta);
      for (int n = 0; n < s.n; ++n)
        for (int g = 0; g < groups; ++g) {
          const std::size_t off = (static_cast<std::size_t>(n) * s.c + g * cg) * P;
          const T* dy = on->grad.data() + off;
          const T* xh = xhat.data() + off;
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (std::size_t k = 0; k < M; ++k) {
            const int c = g * cg + static_cast<int>(k / P);
            const T dxh = dy[k] * gamma.value()[c];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[k];
            if (gg) (*gg)[c] += dy[k] * xh[k];
            if (gbeta) (*gbeta)[c] += dy[k];
          }
          if (gx) {
            const T m1 = static_cast<T>(sum_dxh / M), m2 = static_cast<T>(sum_dxh_xh / M);
            const T is = inv_std[n * groups + g];
            for (std::size_t k = 0; k < M; ++k) {
              const int c = g * cg + static_cast<int>(k / P);
              (*gx)[off + k] += is * (dy[k] * gamma.value()[c] - m1 - xh[k] * m2);
            }
          }
        }
    };
  return out;
}

// ---------------------------------------------------------------------------
// Losses and the conservation transform

/// sum((a - target)^2) as a (1,1,1,1) scalar.
template <class T>
Var<T> sum_squared_error(Tape<T>& tape, Var<T> a, std::span<const T> target) {
  if (a.shape().size() != target.size()) throw DimensionError("sum_squared_error: size mismatch");
  double acc = 0.0;
  for (std::size_t k = 0; k < target.size(); ++k) {
    const double d = static_cast<double>(a.value()[k]) - target[k];
    acc += d * d;
  }
  Var<T> out = tape.make({1, 1, 1, 1}, {static_cast<T>(acc)}, {a});
  Node<T>* on = out.node();
  if (on->requires_grad)
    on->backward = [a, on, tgt = std::vector<T>(target.begin(), target.end())]() {
      auto* ga = grad_slot(a);
      const T g = on->grad[0];
      for (std::size_t k = 0; k < tgt.size(); ++k) (*ga)[k] += T(2) * (a.value()[k] - tgt[k]) * g;
    };
  return out;
}

/// Elementwise r_a(F(r_a(x))).
template <class T>
Var<T> apply_F(Tape<T>& tape, Var<T> x, const ConservationSpec& spec) {
  std::vector<T> v(x.value().size());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = static_cast<T>(apply_F_scalar(x.value()[k], spec));
  Var<T> out = tape.make(x.shape(), std::move(v), {x});
  Node<T>* on = out.node();
  if (on->requires_grad)
    on->backward = [x, on, spec]() {
      auto* gx = grad_slot(x);
      for (std::size_t k = 0; k < gx->size(); ++k)
        (*gx)[k] += on->grad[k] * static_cast<T>(apply_F_derivative(x.value()[k], spec));
    };
  return out;
}

/// pred * total / sum(pred); identity when sum(pred) == 0 (fallback).
template <class T>
Var<T> mass_rescale(Tape<T>& tape, Var<T> pred, double total) {
  double denom = 0.0;
  for (T v : pred.value()) denom += v;
  if (denom == 0.0) return pred;
  const double rho = total / denom;
  std::vector<T> v(pred.value());
  for (auto& x : v) x = static_cast<T>(x * rho);
  Var<T> out = tape.make(pred.shape(), std::move(v), {pred});
  Node<T>* on = out.node();
  if (on->requires_grad)
    on->backward = [pred, on, rho, denom]() {
      auto* gp = grad_slot(pred);
      double gdotp = 0.0;
      for (std::size_t k = 0; k < gp->size(); ++k) gdotp += static_cast<double>(on->grad[k]) * pred.value()[k];
      const double c = rho / denom * gdotp;
      for (std::size_t k = 0; k < gp->size(); ++k) (*gp)[k] += static_cast<T>(rho * on->grad[k] - c);
    };
  return out;
}

/// Differentiable counterpart of conserve_pipeline: the epoch gate and the
/// disabled-spec rule are the same; `total` is S^2 T sum(lr).
template <class T>
Var<T> conserve(Tape<T>& tape, Var<T> raw, double total, const ConservationSpec& spec, int epoch) {
  if (!spec.enabled) return spec.threshold_alpha > 0.0 ? apply_F(tape, raw, spec) : raw;
  if (epoch < spec.activation_epoch) return raw;
  return mass_rescale(tape, apply_F(tape, raw, spec), total);
}

}  // namespace scalesr::ad
