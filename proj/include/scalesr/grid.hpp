#pragma once

// Grid geometry and the perfect-model operators linking HR and LR frames:
// block averaging (space, space-time) and bicubic / nearest upsampling.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "scalesr/errors.hpp"

namespace scalesr {

/// A single 2-D precipitation frame, row-major. Values are expected to be
/// nonnegative; `is_nonnegative()` checks it and the constructor taking data
/// rejects negative or non-finite entries.
class Field {
 public:
  Field() = default;
  Field(int height, int width, double fill = 0.0)
      : height_(height), width_(width), values_(checked_size(height, width), fill) {}
  Field(int height, int width, std::vector<double> values)
      : height_(height), width_(width), values_(std::move(values)) {
    if (values_.size() != checked_size(height, width))
      throw DimensionError("Field: value count does not match shape");
    for (double v : values_)
      if (!(v >= 0.0) || !std::isfinite(v))
        throw DimensionError("Field: values must be finite and nonnegative");
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double& operator()(int i, int j) { return values_[static_cast<std::size_t>(i) * width_ + j]; }
  double operator()(int i, int j) const { return values_[static_cast<std::size_t>(i) * width_ + j]; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::vector<double>& data() noexcept { return values_; }
  const std::vector<double>& data() const noexcept { return values_; }

  double sum() const noexcept {
    double s = 0.0;
    for (double v : values_) s += v;
    return s;
  }
  bool is_nonnegative() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return v >= 0.0; });
  }
  bool same_shape(const Field& o) const noexcept { return height_ == o.height_ && width_ == o.width_; }

  friend bool operator==(const Field&, const Field&) = default;

 private:
  static std::size_t checked_size(int h, int w) {
    if (h <= 0 || w <= 0) throw DimensionError("Field: height and width must be positive");
    return static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<double> values_;
};

/// Frames sharing one shape, spaced `stride` native time steps apart.
struct FieldSequence {
  std::vector<Field> frames;
  int start_time = 0;
  int tile_id = 0;
  int stride = 1;

  std::size_t length() const noexcept { return frames.size(); }
  const Field& operator[](std::size_t k) const { return frames[k]; }
  Field& operator[](std::size_t k) { return frames[k]; }
  const Field& back() const { return frames.back(); }

  void validate() const {
    if (frames.empty()) throw ArityError("FieldSequence: length must be >= 1");
    for (const auto& f : frames)
      if (!f.same_shape(frames.front())) throw DimensionError("FieldSequence: frames differ in shape");
  }
  double sum() const noexcept {
    double s = 0.0;
    for (const auto& f : frames) s += f.sum();
    return s;
  }
};

/// Spatial (S) and temporal (T) super-resolution factors.
struct SRFactors {
  int S = 1;
  int T = 1;

  SRFactors() = default;
  SRFactors(int s, int t) : S(s), T(t) {
    if (s < 1 || t < 1) throw ConfigError("SRFactors: S and T must be >= 1");
  }
  int lr_size(int hr) const {
    if (hr % S != 0) throw DimensionError("SRFactors: S=" + std::to_string(S) + " does not divide " + std::to_string(hr));
    return hr / S;
  }
  std::string str() const { return std::to_string(S) + "x" + std::to_string(T); }
  friend bool operator==(const SRFactors&, const SRFactors&) = default;
};

/// Mean over each SxS block. Accumulates in double.
inline Field coarsen_spatial(const Field& hr, const SRFactors& f) {
  const int S = f.S;
  if (hr.height() % S != 0 || hr.width() % S != 0)
    throw DimensionError("coarsen_spatial: S does not divide the field shape");
  const int h = hr.height() / S, w = hr.width() / S;
  Field lr(h, w);
  const double inv = 1.0 / (static_cast<double>(S) * S);
  for (int n = 0; n < h; ++n)
    for (int m = 0; m < w; ++m) {
      double acc = 0.0;
      for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j) acc += hr(S * n + i, S * m + j);
      lr(n, m) = acc * inv;
    }
  return lr;
}

/// Average of the spatial block means of T consecutive HR frames.
inline Field coarsen_spacetime(std::span<const Field> frames, const SRFactors& f) {
  if (frames.size() != static_cast<std::size_t>(f.T))
    throw ArityError("coarsen_spacetime: expected " + std::to_string(f.T) + " frames, got " +
                     std::to_string(frames.size()));
  for (const auto& fr : frames)
    if (!fr.same_shape(frames.front())) throw DimensionError("coarsen_spacetime: frame shapes differ");
  const int S = f.S;
  const int H = frames.front().height(), W = frames.front().width();
  if (H % S != 0 || W % S != 0) throw DimensionError("coarsen_spacetime: S does not divide the field shape");
  const int h = H / S, w = W / S;
  Field lr(h, w);
  const double inv = 1.0 / (static_cast<double>(S) * S * f.T);
  for (int n = 0; n < h; ++n)
    for (int m = 0; m < w; ++m) {
      double acc = 0.0;
      for (const auto& fr : frames)
        for (int i = 0; i < S; ++i)
          for (int j = 0; j < S; ++j) acc += fr(S * n + i, S * m + j);
      lr(n, m) = acc * inv;
    }
  return lr;
}

inline Field coarsen_spacetime(const FieldSequence& seq, const SRFactors& f) {
  return coarsen_spacetime(std::span<const Field>(seq.frames), f);
}

/// Each HR pixel copies the LR pixel that contains it.
inline Field upsample_nearest(const Field& lr, const SRFactors& f) {
  const int S = f.S;
  Field hr(lr.height() * S, lr.width() * S);
  for (int i = 0; i < hr.height(); ++i)
    for (int j = 0; j < hr.width(); ++j) hr(i, j) = lr(i / S, j / S);
  return hr;
}

namespace detail {

/// Keys cubic convolution kernel.
inline double cubic_kernel(double x, double a = -0.5) {
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

/// 1-D resampling weights: for each output index, 4 source indices (clamped)
/// and their weights. Pixel centres are aligned (half-pixel convention).
struct CubicTaps {
  std::vector<int> index;    // 4 per output
  std::vector<double> weight;
};

inline CubicTaps cubic_taps(int n_in, int scale) {
  CubicTaps taps;
  const int n_out = n_in * scale;
  taps.index.resize(static_cast<std::size_t>(n_out) * 4);
  taps.weight.resize(static_cast<std::size_t>(n_out) * 4);
  for (int o = 0; o < n_out; ++o) {
    const double src = (o + 0.5) / scale - 0.5;
    const int base = static_cast<int>(std::floor(src));
    const double t = src - base;
    for (int k = 0; k < 4; ++k) {
      const int idx = std::clamp(base - 1 + k, 0, n_in - 1);
      taps.index[o * 4 + k] = idx;
      taps.weight[o * 4 + k] = cubic_kernel(t - (k - 1));
    }
  }
  return taps;
}

}  // namespace detail

/// Separable Keys bicubic (a = -0.5) with replicate borders; negative
/// overshoot is clamped to zero.
inline Field upsample_bicubic(const Field& lr, const SRFactors& f) {
  const int S = f.S;
  if (S == 1) return lr;
  const int h = lr.height(), w = lr.width();
  const auto ty = detail::cubic_taps(h, S);
  const auto tx = detail::cubic_taps(w, S);
  const int H = h * S, W = w * S;
  // Horizontal pass: h x W.
  std::vector<double> tmp(static_cast<std::size_t>(h) * W);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < W; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) acc += tx.weight[j * 4 + k] * lr(i, tx.index[j * 4 + k]);
      tmp[static_cast<std::size_t>(i) * W + j] = acc;
    }
  Field hr(H, W);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) acc += ty.weight[i * 4 + k] * tmp[static_cast<std::size_t>(ty.index[i * 4 + k]) * W + j];
      hr(i, j) = std::max(acc, 0.0);
    }
  return hr;
}

}  // namespace scalesr
