#pragma once

// Dataset construction: outlier capping from a gamma fit, min-max
// normalization, Latin-square cross-validation folds, the synthetic storm
// generator that stands in for radar reanalysis at desk scale, and the
// (LR context, HR target) sample builder.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include <boost/math/distributions/gamma.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include "scalesr/errors.hpp"
#include "scalesr/grid.hpp"
#include "scalesr/rng.hpp"

namespace scalesr {

struct Tile {
  int tile_id = 0;
  int row = 0;
  int col = 0;
  Field topography;             // M_l, scaled to [0, 1] once normalized
  std::vector<Field> hr_frames;  // one per native time step
};

struct DatasetConfig {
  int H = 40;
  int W = 40;
  int grid_rows = 4;
  int grid_cols = 4;
  double cap_percentile = 99.5;
  double cap_value_mmh = 0.0;  // 0 means "fit from the training split"
  double normalization_max = 0.0;
  int fold_count = 4;

  void validate() const {
    if (H <= 0 || W <= 0) throw ConfigError("DatasetConfig: H and W must be positive");
    if (!(cap_percentile > 0.0 && cap_percentile < 100.0))
      throw ConfigError("DatasetConfig: cap_percentile must lie in (0, 100)");
    if (fold_count != grid_rows || fold_count != grid_cols)
      throw ConfigError("DatasetConfig: fold_count must equal grid_rows and grid_cols");
  }
};

/// One training/evaluation example.
struct Sample {
  FieldSequence lr_context;  // L frames, (H/S, W/S)
  Field topography;          // (H, W)
  FieldSequence hr_target;   // T frames, (H, W)
  SRFactors factors;
  int tile_id = 0;
  int time = 0;  // index of the first target frame
};

// ---------------------------------------------------------------------------
// Gamma fit and capping

struct GammaFit {
  double shape = 0.0;
  double scale = 0.0;
};

/// Maximum-likelihood gamma fit (Newton on ln k - digamma(k) = s).
inline GammaFit fit_gamma(std::span<const double> positive) {
  const double n = static_cast<double>(positive.size());
  double mean = 0.0, mean_log = 0.0;
  for (double v : positive) {
    mean += v;
    mean_log += std::log(v);
  }
  mean /= n;
  mean_log /= n;
  const double s = std::log(mean) - mean_log;
  if (!(s > 1e-12) || !std::isfinite(s))
    throw InsufficientDataError("fit_gamma: degenerate sample (no spread), shape is unbounded");
  double k = (3.0 - s + std::sqrt((s - 3.0) * (s - 3.0) + 24.0 * s)) / (12.0 * s);
  for (int it = 0; it < 100; ++it) {
    const double f = std::log(k) - boost::math::digamma(k) - s;
    const double df = 1.0 / k - boost::math::trigamma(k);
    const double next = k - f / df;
    const double step = std::abs(next - k);
    k = next > 0.0 ? next : 0.5 * k;
    if (step < 1e-12 * k) break;
  }
  return {k, mean / k};
}

/// Percentile of a gamma fitted on the strictly positive entries of `values`.
inline double fit_gamma_cap(std::span<const double> values, double percentile,
                            std::size_t min_positive = 100) {
  if (!(percentile > 0.0 && percentile < 100.0)) throw ConfigError("fit_gamma_cap: percentile must lie in (0, 100)");
  std::vector<double> pos;
  pos.reserve(values.size());
  for (double v : values)
    if (v > 0.0 && std::isfinite(v)) pos.push_back(v);
  if (pos.size() < min_positive)
    throw InsufficientDataError("fit_gamma_cap: need at least " + std::to_string(min_positive) +
                                " positive values, got " + std::to_string(pos.size()));
  const GammaFit g = fit_gamma(pos);
  const boost::math::gamma_distribution<double> dist(g.shape, g.scale);
  return boost::math::quantile(dist, percentile / 100.0);
}

inline double normalize_value(double v, double cap) { return std::min(v, cap) / cap; }
inline double denormalize_value(double u, double cap) { return u * cap; }

/// min(v, cap) / cap, elementwise.
inline void cap_and_normalize(std::span<Field> frames, double cap) {
  if (!(cap > 0.0)) throw ConfigError("cap_and_normalize: cap must be positive");
  for (auto& f : frames)
    for (auto& v : f.data()) v = normalize_value(v, cap);
}

inline Field cap_and_normalize(const Field& f, double cap) {
  Field out = f;
  cap_and_normalize(std::span<Field>(&out, 1), cap);
  return out;
}

// ---------------------------------------------------------------------------
// Folds

/// fold[r][c] for the Latin-square rule: fold f holds tiles (r, (r + f) mod n).
inline std::vector<std::vector<int>> make_folds(int grid_rows, int grid_cols, int fold_count) {
  if (grid_rows <= 0 || fold_count != grid_rows || fold_count != grid_cols)
    throw ConfigError("make_folds: fold_count must equal grid_rows and grid_cols");
  std::vector<std::vector<int>> fold(grid_rows, std::vector<int>(grid_cols));
  for (int r = 0; r < grid_rows; ++r)
    for (int c = 0; c < grid_cols; ++c) fold[r][c] = ((c - r) % fold_count + fold_count) % fold_count;
  return fold;
}

struct FoldSplit {
  std::vector<int> train_tiles;
  std::vector<int> val_tiles;
};

/// Tile ids are row-major, id = r * grid_cols + c.
inline FoldSplit split_fold(int grid_rows, int grid_cols, int fold_id) {
  const auto folds = make_folds(grid_rows, grid_cols, grid_rows);
  if (fold_id < 0 || fold_id >= grid_rows) throw ConfigError("split_fold: fold id out of range");
  FoldSplit s;
  for (int r = 0; r < grid_rows; ++r)
    for (int c = 0; c < grid_cols; ++c)
      (folds[r][c] == fold_id ? s.val_tiles : s.train_tiles).push_back(r * grid_cols + c);
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic storms

struct StormParams {
  double birth_rate = 0.7;          // new cells per frame per 100x100 px
  double lifetime_mean = 14.0;      // frames
  double sigma_min = 3.0;           // px, cell half-axes
  double sigma_max = 9.0;
  double peak_log_mean = 1.6;       // ln(mm/h)
  double peak_log_sd = 0.7;
  double wind_u = 1.0;              // px/frame
  double wind_v = 0.4;
  double wind_jitter = 0.35;
  double wind_period = 120.0;       // frames
  double texture_sd = 0.55;         // lognormal texture
  double threshold_mmh = 1.0;       // subtracted after summing cells
  double orographic_gain = 0.8;
  int topo_hills = 5;
  int spinup_frames = 30;
};

namespace detail {

/// Periodic smooth unit-variance noise, sampled bilinearly with wrap.
class TextureTable {
 public:
  static constexpr int kSize = 64;

  explicit TextureTable(Rng& rng) : v_(kSize * kSize, 0.0) {
    constexpr int kModes = 10;
    for (int m = 0; m < kModes; ++m) {
      const int kx = rng.uniform_int(-6, 6), ky = rng.uniform_int(1, 6);
      const double ph = rng.uniform(0.0, 2.0 * std::numbers::pi);
      for (int i = 0; i < kSize; ++i)
        for (int j = 0; j < kSize; ++j)
          v_[i * kSize + j] += std::sqrt(2.0 / kModes) *
                               std::cos(2.0 * std::numbers::pi * (kx * j + ky * i) / kSize + ph);
    }
  }

  double operator()(double y, double x) const {
    y -= kSize * std::floor(y / kSize);
    x -= kSize * std::floor(x / kSize);
    const int i0 = static_cast<int>(y) % kSize, j0 = static_cast<int>(x) % kSize;
    const int i1 = (i0 + 1) % kSize, j1 = (j0 + 1) % kSize;
    const double ty = y - std::floor(y), tx = x - std::floor(x);
    return (1 - ty) * ((1 - tx) * v_[i0 * kSize + j0] + tx * v_[i0 * kSize + j1]) +
           ty * ((1 - tx) * v_[i1 * kSize + j0] + tx * v_[i1 * kSize + j1]);
  }

 private:
  std::vector<double> v_;
};

struct Cell {
  double y, x;        // centre, px
  double vy, vx;      // own drift on top of the wind
  double sy, sx, rot;  // half-axes and orientation
  double peak;        // mm/h
  double age, life;
  double ty, tx;      // texture offset
};

}  // namespace detail

/// Smooth synthetic relief in metres: a few Gaussian hills plus a ridge.
inline Field synthesize_topography(std::uint64_t seed, int height, int width, int hills) {
  Rng rng(seed, 0x70b0);
  Field topo(height, width, 0.0);
  const double ridge_angle = rng.uniform(0.0, std::numbers::pi);
  const double ridge_off = rng.uniform(-0.3, 0.3) * std::max(height, width);
  const double ridge_w = 0.15 * std::max(height, width);
  struct Hill { double y, x, s, h; };
  std::vector<Hill> hs;
  for (int k = 0; k < hills; ++k)
    hs.push_back({rng.uniform(0, height), rng.uniform(0, width),
                  rng.uniform(0.08, 0.25) * std::max(height, width), rng.uniform(200.0, 1500.0)});
  const double ca = std::cos(ridge_angle), sa = std::sin(ridge_angle);
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) {
      const double d = (i - height / 2.0) * ca - (j - width / 2.0) * sa - ridge_off;
      double v = 800.0 * std::exp(-0.5 * d * d / (ridge_w * ridge_w));
      for (const auto& h : hs) {
        const double dy = i - h.y, dx = j - h.x;
        v += h.h * std::exp(-0.5 * (dy * dy + dx * dx) / (h.s * h.s));
      }
      topo(i, j) = v;
    }
  return topo;
}

/// Advected, growing and decaying anisotropic rain cells with lognormal
/// texture over a (height x width) domain, in mm/h. Deterministic in `seed`.
/// `topography` (metres, same shape) modulates intensity.
inline std::vector<Field> synthesize_rain(std::uint64_t seed, int n_frames, const Field& topography,
                                          const StormParams& p) {
  const int height = topography.height(), width = topography.width();
  Rng rng(seed, 0x5707);
  const detail::TextureTable texture(rng);
  double topo_max = 0.0;
  for (double v : topography.values()) topo_max = std::max(topo_max, v);

  const double margin = 2.5 * p.sigma_max + 10.0;
  const double area = (height + 2 * margin) * (width + 2 * margin) / 1e4;
  const double rate = p.birth_rate * area;

  std::vector<detail::Cell> cells;
  std::vector<Field> frames;
  frames.reserve(n_frames);
  std::vector<double> acc(static_cast<std::size_t>(height) * width);

  for (int t = -p.spinup_frames; t < n_frames; ++t) {
    const double phase = 2.0 * std::numbers::pi * t / p.wind_period;
    const double wu = p.wind_u * (1.0 + 0.5 * std::sin(phase));
    const double wv = p.wind_v + 0.5 * p.wind_u * std::cos(0.7 * phase);

    // Poisson births via repeated Bernoulli trials.
    const int trials = static_cast<int>(std::ceil(rate * 4.0)) + 1;
    for (int k = 0; k < trials; ++k) {
      if (rng.uniform() >= rate / trials) continue;
      detail::Cell c;
      c.y = rng.uniform(-margin, height + margin);
      c.x = rng.uniform(-margin, width + margin);
      c.vy = rng.normal(0.0, p.wind_jitter);
      c.vx = rng.normal(0.0, p.wind_jitter);
      c.sy = rng.uniform(p.sigma_min, p.sigma_max);
      c.sx = rng.uniform(p.sigma_min, p.sigma_max);
      c.rot = rng.uniform(0.0, std::numbers::pi);
      c.peak = std::exp(rng.normal(p.peak_log_mean, p.peak_log_sd));
      c.age = 0.0;
      c.life = std::max(3.0, -p.lifetime_mean * std::log(std::max(rng.uniform(), 1e-12)));
      c.ty = rng.uniform(0.0, detail::TextureTable::kSize);
      c.tx = rng.uniform(0.0, detail::TextureTable::kSize);
      cells.push_back(c);
    }

    if (t >= 0) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (const auto& c : cells) {
        const double env = std::sin(std::numbers::pi * std::clamp(c.age / c.life, 0.0, 1.0));
        if (env <= 0.0) continue;
        const double amp = c.peak * env;
        const double cr = std::cos(c.rot), sr = std::sin(c.rot);
        const double reach = 3.0 * std::max(c.sy, c.sx);
        const int i0 = std::max(0, static_cast<int>(std::floor(c.y - reach)));
        const int i1 = std::min(height - 1, static_cast<int>(std::ceil(c.y + reach)));
        const int j0 = std::max(0, static_cast<int>(std::floor(c.x - reach)));
        const int j1 = std::min(width - 1, static_cast<int>(std::ceil(c.x + reach)));
        for (int i = i0; i <= i1; ++i)
          for (int j = j0; j <= j1; ++j) {
            const double dy = i - c.y, dx = j - c.x;
            const double a = (dy * cr + dx * sr) / c.sy, b = (-dy * sr + dx * cr) / c.sx;
            const double g = std::exp(-0.5 * (a * a + b * b));
            if (g < 1e-4) continue;
            const double tex = std::exp(p.texture_sd * texture(c.ty + dy, c.tx + dx) -
                                        0.5 * p.texture_sd * p.texture_sd);
            acc[static_cast<std::size_t>(i) * width + j] += amp * g * tex;
          }
      }
      Field f(height, width);
      for (int i = 0; i < height; ++i)
        for (int j = 0; j < width; ++j) {
          const double oro = topo_max > 0.0 ? topography(i, j) / topo_max : 0.0;
          const double v = acc[static_cast<std::size_t>(i) * width + j] * (1.0 + p.orographic_gain * (oro - 0.5));
          f(i, j) = std::max(0.0, v - p.threshold_mmh);
        }
      frames.push_back(std::move(f));
    }

    for (auto& c : cells) {
      c.y += wv + c.vy;
      c.x += wu + c.vx;
      c.age += 1.0;
    }
    std::erase_if(cells, [&](const detail::Cell& c) {
      return c.age > c.life || c.y < -2 * margin || c.y > height + 2 * margin || c.x < -2 * margin ||
             c.x > width + 2 * margin;
    });
  }
  return frames;
}

/// Single tile of synthetic data (topography in metres, frames in mm/h).
inline Tile synthesize_storms(std::uint64_t seed, int n_frames, int height, int width, const StormParams& p) {
  Tile tile;
  tile.topography = synthesize_topography(seed, height, width, p.topo_hills);
  tile.hr_frames = synthesize_rain(seed, n_frames, tile.topography, p);
  return tile;
}

/// Slice a (rows*H) x (cols*W) domain into row-major tiles.
inline std::vector<Tile> slice_tiles(const Field& topography, const std::vector<Field>& frames, int rows, int cols) {
  const int H = topography.height() / rows, W = topography.width() / cols;
  if (H * rows != topography.height() || W * cols != topography.width())
    throw DimensionError("slice_tiles: domain not divisible by the tile grid");
  auto cut = [&](const Field& f, int r, int c) {
    Field out(H, W);
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) out(i, j) = f(r * H + i, c * W + j);
    return out;
  };
  std::vector<Tile> tiles;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      Tile t;
      t.tile_id = r * cols + c;
      t.row = r;
      t.col = c;
      t.topography = cut(topography, r, c);
      t.hr_frames.reserve(frames.size());
      for (const auto& f : frames) t.hr_frames.push_back(cut(f, r, c));
      tiles.push_back(std::move(t));
    }
  return tiles;
}

/// Min-max scaling statistics for topography, computed on a set of tiles.
struct MinMax {
  double lo = 0.0;
  double hi = 1.0;
  double apply(double v) const { return hi > lo ? std::clamp((v - lo) / (hi - lo), 0.0, 1.0) : 0.0; }
};

inline MinMax fit_minmax(const std::vector<const Field*>& fields) {
  MinMax mm{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const Field* f : fields)
    for (double v : f->values()) {
      mm.lo = std::min(mm.lo, v);
      mm.hi = std::max(mm.hi, v);
    }
  return mm;
}

// ---------------------------------------------------------------------------
// Samples

/// LR frame x^t = A_{S,T}(y^t .. y^{t+T-1}).
inline Field lr_frame_at(const Tile& tile, int t, const SRFactors& f) {
  return coarsen_spacetime(std::span<const Field>(tile.hr_frames.data() + t, static_cast<std::size_t>(f.T)), f);
}

/// Samples at anchors t = (L-1)T, (L-1)T + stride, ...; the context holds the
/// LR frames at t-(L-1)T, ..., t-T, t and the target is y^t .. y^{t+T-1}.
inline std::vector<Sample> build_samples(const Tile& tile, const SRFactors& f, int L, int stride,
                                         int first_anchor = 0) {
  if (L < 1 || stride < 1) throw ConfigError("build_samples: L and stride must be >= 1");
  std::vector<Sample> out;
  const int n = static_cast<int>(tile.hr_frames.size());
  for (int t = std::max(first_anchor, (L - 1) * f.T); t + f.T <= n; t += stride) {
    Sample s;
    s.factors = f;
    s.tile_id = tile.tile_id;
    s.time = t;
    s.topography = tile.topography;
    s.lr_context.tile_id = tile.tile_id;
    s.lr_context.stride = f.T;
    s.lr_context.start_time = t - (L - 1) * f.T;
    for (int k = L - 1; k >= 0; --k) s.lr_context.frames.push_back(lr_frame_at(tile, t - k * f.T, f));
    s.hr_target.tile_id = tile.tile_id;
    s.hr_target.stride = 1;
    s.hr_target.start_time = t;
    for (int k = 0; k < f.T; ++k) s.hr_target.frames.push_back(tile.hr_frames[t + k]);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace scalesr
