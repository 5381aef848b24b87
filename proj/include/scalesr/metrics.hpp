#pragma once

// Verification metrics: MSE, MAE, 99th-percentile error, log-spectral
// distance, 1-D earth mover's distance, global SSIM, randomized PIT with its
// deviation score, and the closed-form ensemble CRPS.

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include <fftw3.h>
#include <json.hpp>

#include "scalesr/errors.hpp"
#include "scalesr/rng.hpp"

namespace scalesr {

namespace detail {
inline void require_nonempty_equal(std::size_t a, std::size_t b, const char* what) {
  if (a == 0 || a != b) throw DimensionError(std::string(what) + ": inputs must be nonempty and of equal size");
}
}  // namespace detail

template <class A, class B>
double mse(std::span<const A> pred, std::span<const B> target) {
  detail::require_nonempty_equal(pred.size(), target.size(), "mse");
  double acc = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double d = static_cast<double>(pred[k]) - static_cast<double>(target[k]);
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

template <class A, class B>
double mae(std::span<const A> pred, std::span<const B> target) {
  detail::require_nonempty_equal(pred.size(), target.size(), "mae");
  double acc = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) acc += std::abs(static_cast<double>(pred[k]) - static_cast<double>(target[k]));
  return acc / static_cast<double>(pred.size());
}

/// Linear-interpolation quantile (position (n-1) q in the sorted sample).
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw DimensionError("quantile: empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

template <class A>
double quantile(std::span<const A> values, double q) {
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  return quantile_sorted(v, q);
}

/// |q99(pred) - q99(target)|
template <class A, class B>
double pe99(std::span<const A> pred, std::span<const B> target) {
  if (pred.empty() || target.empty()) throw DimensionError("pe99: empty sample");
  return std::abs(quantile(pred, 0.99) - quantile(target, 0.99));
}

// ---------------------------------------------------------------------------
// Log-spectral distance

namespace detail {
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

/// |DFT| of an h x w real field, row-major.
inline std::vector<double> dft_magnitude(std::span<const double> x, int h, int w) {
  const std::size_t n = static_cast<std::size_t>(h) * w;
  auto* buf = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n));
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner_mutex());
    plan = fftw_plan_dft_2d(h, w, buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
  }
  for (std::size_t k = 0; k < n; ++k) {
    buf[k][0] = x[k];
    buf[k][1] = 0.0;
  }
  fftw_execute(plan);
  std::vector<double> mag(n);
  for (std::size_t k = 0; k < n; ++k) mag[k] = std::hypot(buf[k][0], buf[k][1]);
  {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(buf);
  return mag;
}
}  // namespace detail

/// Radially averaged spectrum: bin round(sqrt(n^2 + m^2)) over signed
/// frequency indices, mean magnitude per bin.
inline std::vector<double> radial_spectrum(std::span<const double> magnitude, int h, int w) {
  auto signed_index = [](int k, int n) { return k <= n / 2 ? k : k - n; };
  const int max_bin = static_cast<int>(std::lround(std::hypot(h / 2, w / 2)));
  std::vector<double> sum(max_bin + 1, 0.0), count(max_bin + 1, 0.0);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const int b = static_cast<int>(std::lround(std::hypot(signed_index(i, h), signed_index(j, w))));
      sum[b] += magnitude[static_cast<std::size_t>(i) * w + j];
      count[b] += 1.0;
    }
  std::vector<double> out;
  for (int b = 0; b <= max_bin; ++b)
    if (count[b] > 0) out.push_back(sum[b] / count[b]);
  return out;
}

constexpr double kSpectrumFloor = 1e-12;

/// RMSE between natural-log radial spectra of two h x w fields.
inline double lsd_from_spectra(std::span<const double> a, std::span<const double> b) {
  detail::require_nonempty_equal(a.size(), b.size(), "lsd");
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = std::log(std::max(a[k], kSpectrumFloor)) - std::log(std::max(b[k], kSpectrumFloor));
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(a.size()));
}

template <class A, class B>
double lsd(std::span<const A> pred, std::span<const B> target, int h, int w) {
  detail::require_nonempty_equal(pred.size(), target.size(), "lsd");
  if (pred.size() != static_cast<std::size_t>(h) * w) throw DimensionError("lsd: size does not match h x w");
  const std::vector<double> p(pred.begin(), pred.end()), t(target.begin(), target.end());
  const auto sp = radial_spectrum(detail::dft_magnitude(p, h, w), h, w);
  const auto st = radial_spectrum(detail::dft_magnitude(t, h, w), h, w);
  return lsd_from_spectra(sp, st);
}

// ---------------------------------------------------------------------------
// Distribution distances

/// 1-Wasserstein distance between two empirical samples, integrating
/// |F^-1(u) - G^-1(u)| over u in [0, 1].
template <class A, class B>
double emd(std::span<const A> a_values, std::span<const B> b_values) {
  if (a_values.empty() || b_values.empty()) throw DimensionError("emd: empty sample");
  std::vector<double> a(a_values.begin(), a_values.end()), b(b_values.begin(), b_values.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  if (a.size() == b.size()) {
    double acc = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) acc += std::abs(a[k] - b[k]);
    return acc / na;
  }
  double acc = 0.0, u = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const double next_a = (i + 1) / na, next_b = (j + 1) / nb;
    const double next = std::min(next_a, next_b);
    acc += (next - u) * std::abs(a[i] - b[j]);
    u = next;
    if (next_a <= next) ++i;
    if (next_b <= next) ++j;
  }
  return acc;
}

constexpr double kSsimC1 = 1e-4;  // (0.01 * 1)^2
constexpr double kSsimC2 = 9e-4;  // (0.03 * 1)^2

/// SSIM from global frame moments (population variances).
template <class A, class B>
double ssim(std::span<const A> x, std::span<const B> y) {
  detail::require_nonempty_equal(x.size(), y.size(), "ssim");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    mx += x[k];
    my += y[k];
  }
  mx /= n;
  my /= n;
  double vx = 0.0, vy = 0.0, cxy = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double dx = x[k] - mx, dy = y[k] - my;
    vx += dx * dx;
    vy += dy * dy;
    cxy += dx * dy;
  }
  vx /= n;
  vy /= n;
  cxy /= n;
  return ((2 * mx * my + kSsimC1) * (2 * cxy + kSsimC2)) / ((mx * mx + my * my + kSsimC1) * (vx + vy + kSsimC2));
}

// ---------------------------------------------------------------------------
// Calibration

/// u_i = randomized empirical CDF of the pooled ensemble at target value y_i:
/// uniform in [F(y-), F(y)], which resolves ties such as exact zeros.
template <class A, class B>
std::vector<double> pit_values(std::span<const A> ensemble_pixels, std::span<const B> target, Rng& rng) {
  if (ensemble_pixels.empty()) throw DimensionError("pit_values: empty ensemble");
  std::vector<double> pool(ensemble_pixels.begin(), ensemble_pixels.end());
  std::sort(pool.begin(), pool.end());
  const double m = static_cast<double>(pool.size());
  std::vector<double> u(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double y = target[i];
    const double below = static_cast<double>(std::lower_bound(pool.begin(), pool.end(), y) - pool.begin());
    const double upto = static_cast<double>(std::upper_bound(pool.begin(), pool.end(), y) - pool.begin());
    u[i] = below == upto ? below / m : (below + rng.uniform() * (upto - below)) / m;
  }
  return u;
}

/// sqrt(mean((u_(i) - (i - 0.5)/N)^2)) over the sorted values.
inline double pitd(std::span<const double> u_values) {
  if (u_values.empty()) throw DimensionError("pitd: empty input");
  std::vector<double> u(u_values.begin(), u_values.end());
  std::sort(u.begin(), u.end());
  const double n = static_cast<double>(u.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double d = u[i] - (static_cast<double>(i) + 0.5) / n;
    acc += d * d;
  }
  return std::sqrt(acc / n);
}

enum class PitShape { flat, u_shaped, bell_shaped };

/// Decile histogram of PIT values.
inline std::vector<double> pit_histogram(std::span<const double> u, int bins = 10) {
  std::vector<double> h(bins, 0.0);
  for (double v : u) h[std::clamp(static_cast<int>(v * bins), 0, bins - 1)] += 1.0;
  for (auto& x : h) x /= static_cast<double>(std::max<std::size_t>(1, u.size()));
  return h;
}

/// U-shaped when the outer deciles hold more than 0.25 of the mass, bell
/// shaped when the two central deciles hold more than 0.3.
inline PitShape classify_pit(std::span<const double> u) {
  const auto h = pit_histogram(u, 10);
  if (h[0] + h[9] > 0.25) return PitShape::u_shaped;
  if (h[4] + h[5] > 0.3) return PitShape::bell_shaped;
  return PitShape::flat;
}

inline std::string to_string(PitShape s) {
  switch (s) {
    case PitShape::u_shaped: return "u_shaped";
    case PitShape::bell_shaped: return "bell_shaped";
    default: return "flat";
  }
}

/// CRPS of the empirical CDF of `members` at y: E|X - y| - E|X - X'| / 2.
template <class A>
double crps(std::span<const A> members, double y) {
  if (members.empty()) throw DimensionError("crps: empty ensemble");
  std::vector<double> x(members.begin(), members.end());
  std::sort(x.begin(), x.end());
  const double k = static_cast<double>(x.size());
  double e1 = 0.0, e2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    e1 += std::abs(x[i] - y);
    e2 += (2.0 * (static_cast<double>(i) + 1.0) - k - 1.0) * x[i];
  }
  return e1 / k - e2 / (k * k);
}

// ---------------------------------------------------------------------------
// Ensemble report

struct MetricReport {
  double mse = 0.0;
  double mae = 0.0;
  double pe99 = 0.0;
  double lsd = 0.0;
  double emd = 0.0;
  double ssim = 0.0;
  double pitd = 0.0;
  double crps = 0.0;

  static constexpr const char* kKeys[] = {"mse", "mae", "pe99", "lsd", "emd", "ssim", "pitd", "crps"};

  std::array<double, 8> values() const { return {mse, mae, pe99, lsd, emd, ssim, pitd, crps}; }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    const auto v = values();
    for (std::size_t k = 0; k < v.size(); ++k) j[kKeys[k]] = v[k];
    return j;
  }
  static MetricReport from_json(const nlohmann::json& j) {
    MetricReport r;
    r.mse = j.at("mse");
    r.mae = j.at("mae");
    r.pe99 = j.at("pe99");
    r.lsd = j.at("lsd");
    r.emd = j.at("emd");
    r.ssim = j.at("ssim");
    r.pitd = j.at("pitd");
    r.crps = j.at("crps");
    return r;
  }
};

/// Scores one forecast of T frames (H x W each). MSE and MAE use the
/// ensemble mean; PE99, EMD and PIT pool every member pixel; LSD and SSIM
/// average over members and frames; CRPS averages the per-pixel score.
inline MetricReport evaluate_forecast(const std::vector<std::vector<float>>& members, std::span<const float> target,
                                      int T, int H, int W, Rng& rng) {
  if (members.empty()) throw DimensionError("evaluate_forecast: no members");
  const std::size_t n = static_cast<std::size_t>(T) * H * W, plane = static_cast<std::size_t>(H) * W;
  if (target.size() != n) throw DimensionError("evaluate_forecast: target size mismatch");
  for (const auto& m : members)
    if (m.size() != n) throw DimensionError("evaluate_forecast: member size mismatch");
  const double K = static_cast<double>(members.size());
  std::vector<double> mean(n, 0.0), pooled;
  pooled.reserve(members.size() * n);
  for (const auto& m : members)
    for (std::size_t k = 0; k < n; ++k) {
      mean[k] += m[k] / K;
      pooled.push_back(m[k]);
    }
  MetricReport r;
  r.mse = mse<double, float>(mean, target);
  r.mae = mae<double, float>(mean, target);
  r.pe99 = pe99<double, float>(pooled, target);
  r.emd = emd<double, float>(pooled, target);
  std::vector<double> tspec_cache;
  double lsd_acc = 0.0, ssim_acc = 0.0;
  for (int t = 0; t < T; ++t) {
    const auto tgt = target.subspan(t * plane, plane);
    const std::vector<double> tv(tgt.begin(), tgt.end());
    const auto tspec = radial_spectrum(detail::dft_magnitude(tv, H, W), H, W);
    for (const auto& m : members) {
      const std::vector<double> mv(m.begin() + t * plane, m.begin() + (t + 1) * plane);
      lsd_acc += lsd_from_spectra(radial_spectrum(detail::dft_magnitude(mv, H, W), H, W), tspec);
      ssim_acc += ssim<double, double>(mv, tv);
    }
  }
  r.lsd = lsd_acc / (K * T);
  r.ssim = ssim_acc / (K * T);
  const auto u = pit_values<double, float>(pooled, target, rng);
  r.pitd = pitd(u);
  std::vector<double> px(members.size());
  double crps_acc = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t m = 0; m < members.size(); ++m) px[m] = members[m][k];
    crps_acc += crps<double>(px, target[k]);
  }
  r.crps = crps_acc / static_cast<double>(n);
  return r;
}

/// Running mean of per-sample reports.
class MetricAverager {
 public:
  void add(const MetricReport& r) {
    const auto v = r.values();
    for (std::size_t k = 0; k < 8; ++k) sum_[k] += v[k];
    ++count_;
  }
  std::size_t count() const noexcept { return count_; }
  MetricReport mean() const {
    if (count_ == 0) throw InsufficientDataError("MetricAverager: no samples");
    std::array<double, 8> m{};
    for (std::size_t k = 0; k < 8; ++k) m[k] = sum_[k] / static_cast<double>(count_);
    return {m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7]};
  }

 private:
  std::array<double, 8> sum_{};
  std::size_t count_ = 0;
};

}  // namespace scalesr
