#pragma once

// Multi-head scaled dot-product attention over a fixed key table. Each query
// token attends to the same number of key tokens, listed in an
// AttentionIndex; temporal, windowed spatial and cross attention differ only
// in how that table is built.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "scalesr/ops.hpp"

namespace scalesr::ad {

/// keys[q * per_query + k] is the k-th key token of query token q. A token of
/// an (N, C, H, W) tensor is (n, pixel) flattened as n * H * W + pixel.
struct AttentionIndex {
  int queries = 0;
  int per_query = 0;
  std::vector<int> keys;
};

/// Query (n, p) attends to (m, p) for every frame m of an (N, ., H, W) tensor.
inline AttentionIndex temporal_index(int frames, int plane) {
  AttentionIndex idx{frames * plane, frames, {}};
  idx.keys.resize(static_cast<std::size_t>(idx.queries) * frames);
  for (int n = 0; n < frames; ++n)
    for (int p = 0; p < plane; ++p)
      for (int m = 0; m < frames; ++m) idx.keys[(static_cast<std::size_t>(n) * plane + p) * frames + m] = m * plane + p;
  return idx;
}

/// Query (0, p) of a single-frame tensor attends to (m, p) for each of
/// `context` frames of the key tensor.
inline AttentionIndex cross_index(int context, int plane) {
  AttentionIndex idx{plane, context, {}};
  idx.keys.resize(static_cast<std::size_t>(plane) * context);
  for (int p = 0; p < plane; ++p)
    for (int m = 0; m < context; ++m) idx.keys[static_cast<std::size_t>(p) * context + m] = m * plane + p;
  return idx;
}

/// Query (n, i, j) attends to the (2r+1)^2 neighbourhood of (i, j) within
/// frame n. Out-of-range neighbours are clamped (replicate) or wrapped.
inline AttentionIndex window_index(int frames, int h, int w, int radius, PadMode mode = PadMode::zeros) {
  const int side = 2 * radius + 1;
  const int plane = h * w;
  AttentionIndex idx{frames * plane, side * side, {}};
  idx.keys.resize(static_cast<std::size_t>(idx.queries) * idx.per_query);
  std::size_t k = 0;
  for (int n = 0; n < frames; ++n)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        for (int di = -radius; di <= radius; ++di)
          for (int dj = -radius; dj <= radius; ++dj) {
            int y = i + di, x = j + dj;
            if (mode == PadMode::circular) {
              y = detail::wrap_index(y, h);
              x = detail::wrap_index(x, w);
            } else {
              y = std::clamp(y, 0, h - 1);
              x = std::clamp(x, 0, w - 1);
            }
            idx.keys[k++] = n * plane + y * w + x;
          }
  return idx;
}

namespace detail {

/// (N, C, P) -> token-major (N * P, C).
template <class T>
std::vector<T> to_tokens(const std::vector<T>& x, const Shape& s) {
  const std::size_t P = s.plane();
  std::vector<T> t(x.size());
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (std::size_t p = 0; p < P; ++p) t[((n * P) + p) * s.c + c] = x[(static_cast<std::size_t>(n) * s.c + c) * P + p];
  return t;
}

template <class T>
void add_from_tokens(const std::vector<T>& t, const Shape& s, std::vector<T>& x) {
  const std::size_t P = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (std::size_t p = 0; p < P; ++p) x[(static_cast<std::size_t>(n) * s.c + c) * P + p] += t[((n * P) + p) * s.c + c];
}

}  // namespace detail

/// softmax(q k^T / sqrt(d)) v per head, with keys and values gathered through
/// `idx`. q is (Nq, C, H, W); k and v share one shape with C channels.
template <class T>
Var<T> attention(Tape<T>& tape, Var<T> q, Var<T> k, Var<T> v, int heads,
                 std::shared_ptr<const AttentionIndex> index) {
  const AttentionIndex& idx = *index;
  const Shape sq = q.shape(), sk = k.shape();
  const int C = sq.c;
  if (!(sk == v.shape()) || sk.c != C) throw DimensionError("attention: q/k/v channel mismatch");
  if (heads < 1 || C % heads != 0) throw DimensionError("attention: heads must divide channels");
  if (idx.queries != static_cast<int>(sq.n * sq.plane())) throw DimensionError("attention: index/query count mismatch");
  const int d = C / heads, nk = idx.per_query;
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
  auto qt = detail::to_tokens(q.value(), sq);
  auto kt = detail::to_tokens(k.value(), sk);
  auto vt = detail::to_tokens(v.value(), sk);
  const std::size_t NQ = idx.queries;

  std::vector<T> weights(NQ * heads * nk);
  std::vector<T> ot(NQ * C, T(0));
  std::vector<T> logit(nk);
  for (std::size_t t = 0; t < NQ; ++t) {
    const int* keys = idx.keys.data() + t * nk;
    for (int h = 0; h < heads; ++h) {
      const T* qv = qt.data() + t * C + h * d;
      T mx = -std::numeric_limits<T>::infinity();
      for (int b = 0; b < nk; ++b) {
        const T* kv = kt.data() + static_cast<std::size_t>(keys[b]) * C + h * d;
        T s = 0;
        for (int e = 0; e < d; ++e) s += qv[e] * kv[e];
        logit[b] = s * inv_sqrt_d;
        mx = std::max(mx, logit[b]);
      }
      T z = 0;
      for (int b = 0; b < nk; ++b) z += (logit[b] = std::exp(logit[b] - mx));
      T* wrow = weights.data() + (t * heads + h) * nk;
      T* o = ot.data() + t * C + h * d;
      for (int b = 0; b < nk; ++b) {
        wrow[b] = logit[b] / z;
        const T* vv = vt.data() + static_cast<std::size_t>(keys[b]) * C + h * d;
        for (int e = 0; e < d; ++e) o[e] += wrow[b] * vv[e];
      }
    }
  }
  std::vector<T> out_v(sq.size(), T(0));
  detail::add_from_tokens(ot, sq, out_v);
  Var<T> out = tape.make(sq, std::move(out_v), {q, k, v});
  Node<T>* on = out.node();
  if (on->requires_grad)
    on->backward = [=, qt = std::move(qt), kt = std::move(kt), vt = std::move(vt),
                    weights = std::move(weights)]() {
      const AttentionIndex& idx = *index;
      const auto go = detail::to_tokens(on->grad, sq);
      std::vector<T> gq(NQ * C, T(0)), gk(kt.size(), T(0)), gv(vt.size(), T(0));
      std::vector<T> gw(nk);
      for (std::size_t t = 0; t < NQ; ++t) {
        const int* keys = idx.keys.data() + t * nk;
        for (int h = 0; h < heads; ++h) {
          const T* g = go.data() + t * C + h * d;
          const T* wrow = weights.data() + (t * heads + h) * nk;
          T dot = 0;
          for (int b = 0; b < nk; ++b) {
            const std::size_t kb = static_cast<std::size_t>(keys[b]) * C + h * d;
            T s = 0;
            for (int e = 0; e < d; ++e) {
              s += g[e] * vt[kb + e];
              gv[kb + e] += wrow[b] * g[e];
            }
            gw[b] = s;
            dot += wrow[b] * s;
          }
          const T* qv = qt.data() + t * C + h * d;
          T* gqv = gq.data() + t * C + h * d;
          for (int b = 0; b < nk; ++b) {
            const T dl = wrow[b] * (gw[b] - dot) * inv_sqrt_d;
            const std::size_t kb = static_cast<std::size_t>(keys[b]) * C + h * d;
            for (int e = 0; e < d; ++e) {
              gqv[e] += dl * kt[kb + e];
              gk[kb + e] += dl * qv[e];
            }
          }
        }
      }
      if (auto* s = grad_slot(q)) detail::add_from_tokens(gq, sq, *s);
      if (auto* s = grad_slot(k)) detail::add_from_tokens(gk, sk, *s);
      if (auto* s = grad_slot(v)) detail::add_from_tokens(gv, sk, *s);
    };
  return out;
}

}  // namespace scalesr::ad
