#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>

#include "oracles.hpp"
#include "scalesr/metrics.hpp"

using namespace scalesr;
using namespace scalesr::oracle;

namespace {

std::vector<double> uniforms(std::size_t n, Rng& rng, double lo = 0.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

using VD = std::span<const double>;

double mse_dd(VD a, VD b) { return mse<double, double>(a, b); }
double mae_dd(VD a, VD b) { return mae<double, double>(a, b); }
double pe99_dd(VD a, VD b) { return pe99<double, double>(a, b); }
double lsd_dd(VD a, VD b, int h, int w) { return lsd<double, double>(a, b, h, w); }
double emd_dd(VD a, VD b) { return emd<double, double>(a, b); }
double ssim_dd(VD a, VD b) { return ssim<double, double>(a, b); }
std::vector<double> pit_values_dd(VD a, VD b, Rng& rng) { return pit_values<double, double>(a, b, rng); }

}  // namespace

TEST(PointMetrics, MseMaeBasics) {
  Rng rng(1);
  const auto a = uniforms(300, rng), b = uniforms(300, rng);
  EXPECT_EQ(mse_dd(a, a), 0.0);
  EXPECT_EQ(mae_dd(a, a), 0.0);
  std::vector<double> s(a);
  for (auto& v : s) v += 0.25;
  EXPECT_NEAR(mse_dd(s, a), 0.0625, 1e-12);
  EXPECT_NEAR(mae_dd(s, a), 0.25, 1e-12);
  double m2 = 0.0, m1 = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    m2 += (a[k] - b[k]) * (a[k] - b[k]);
    m1 += std::abs(a[k] - b[k]);
  }
  EXPECT_NEAR(mse_dd(a, b), m2 / 300, 1e-14);
  EXPECT_NEAR(mae_dd(a, b), m1 / 300, 1e-14);
  EXPECT_THROW(mse_dd(a, VD(b).first(10)), DimensionError);
  EXPECT_THROW(mae_dd(VD{}, VD{}), DimensionError);
}

TEST(PointMetrics, Pe99) {
  Rng rng(2);
  const auto a = uniforms(1000, rng, 0.0, 5.0), b = uniforms(1000, rng, 0.0, 3.0);
  EXPECT_EQ(pe99_dd(a, a), 0.0);
  std::vector<double> s(a);
  for (auto& v : s) v += 0.1;
  EXPECT_NEAR(pe99_dd(s, a), 0.1, 1e-12);
  auto q99 = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const double pos = 0.99 * (v.size() - 1);
    const auto i = static_cast<std::size_t>(pos);
    return v[i] + (pos - i) * (v[i + 1] - v[i]);
  };
  EXPECT_NEAR(pe99_dd(a, b), std::abs(q99(a) - q99(b)), 1e-12);
  const std::vector<double> one{3.0};
  EXPECT_EQ(quantile<double>(one, 0.99), 3.0);
  EXPECT_THROW(pe99_dd(VD{}, a), DimensionError);
}

TEST(Spectral, MatchesDirectDft) {
  Rng rng(3);
  for (auto [h, w] : {std::pair{8, 8}, std::pair{6, 9}, std::pair{7, 5}}) {
    const auto a = uniforms(h * w, rng), b = uniforms(h * w, rng);
    EXPECT_NEAR((lsd_dd(a, b, h, w)), lsd_oracle(a, b, h, w), 1e-9) << h << "x" << w;
  }
  const auto a = uniforms(64, rng);
  EXPECT_EQ((lsd_dd(a, a, 8, 8)), 0.0);
  EXPECT_THROW((lsd_dd(a, a, 8, 7)), DimensionError);
}

TEST(Spectral, ScaleProperty) {
  Rng rng(4);
  const auto x = uniforms(24 * 20, rng);
  for (double c : {0.5, 2.0, 10.0}) {
    std::vector<double> y(x);
    for (auto& v : y) v *= c;
    EXPECT_NEAR((lsd_dd(y, x, 24, 20)), std::abs(std::log(c)), 1e-9);
  }
  // An all-zero field hits the floor instead of -inf.
  const std::vector<double> z(24 * 20, 0.0);
  EXPECT_TRUE(std::isfinite(lsd_dd(z, x, 24, 20)));
}

TEST(Distances, EmdBasicsAndTransportOracle) {
  const std::vector<double> a{0.3, 1.2, 0.0, 0.7};
  std::vector<double> p(a);
  std::reverse(p.begin(), p.end());
  EXPECT_EQ(emd_dd(a, p), 0.0);
  EXPECT_NEAR(emd_dd(std::vector<double>{2.5}, std::vector<double>{-1.0}), 3.5, 1e-15);
  EXPECT_NEAR(emd_dd(std::vector<double>(3, 2.5), std::vector<double>(7, -1.0)), 3.5, 1e-12);
  Rng rng(5);
  for (auto [na, nb] : {std::pair{5, 3}, std::pair{5, 5}, std::pair{2, 6}, std::pair{6, 4}, std::pair{1, 5}}) {
    for (int trial = 0; trial < 10; ++trial) {
      const auto x = uniforms(na, rng, -1.0, 2.0), y = uniforms(nb, rng, 0.0, 1.0);
      EXPECT_NEAR(emd_dd(x, y), transport_oracle(x, y), 1e-9) << na << " vs " << nb;
    }
  }
  EXPECT_THROW(emd_dd(VD{}, a), DimensionError);
}

TEST(Distances, EmdMetricAxioms) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const auto x = uniforms(rng.uniform_int(1, 6), rng), y = uniforms(rng.uniform_int(1, 6), rng),
               z = uniforms(rng.uniform_int(1, 6), rng);
    const double xy = emd_dd(x, y), yx = emd_dd(y, x);
    EXPECT_NEAR(xy, yx, 1e-12);
    EXPECT_GE(xy, 0.0);
    EXPECT_LE(xy, emd_dd(x, z) + emd_dd(z, y) + 1e-12);
    EXPECT_EQ(emd_dd(x, x), 0.0);
    // Distinct multisets are at positive distance.
    if (x.size() == y.size()) {
      EXPECT_GT(xy, 0.0);
    }
  }
  // Same multiset at different sample sizes is the same distribution.
  const std::vector<double> a{1.0, 2.0}, b{1.0, 1.0, 2.0, 2.0};
  EXPECT_NEAR(emd_dd(a, b), 0.0, 1e-15);
}

TEST(Structural, SsimClosedForms) {
  Rng rng(7);
  const auto x = uniforms(100, rng);
  EXPECT_NEAR(ssim_dd(x, x), 1.0, 1e-12);
  const std::vector<double> c1(50, 0.2), c2(50, 0.6);
  const double expect = (2 * 0.2 * 0.6 + 1e-4) * 9e-4 / ((0.04 + 0.36 + 1e-4) * 9e-4);
  EXPECT_NEAR(ssim_dd(c1, c2), expect, 1e-12);
  std::vector<double> p(64), q(64);
  for (int k = 0; k < 64; ++k) {
    p[k] = (k % 2 ? 0.3 : -0.3);
    q[k] = -p[k];
  }
  // Zero means, variances 0.09, covariance -0.09.
  const double anti = 1e-4 * (-0.18 + 9e-4) / (1e-4 * (0.18 + 9e-4));
  EXPECT_NEAR(ssim_dd(p, q), anti, 1e-12);
  EXPECT_LT(ssim_dd(p, q), 0.0);
}

TEST(Calibration, PitEdgesAndTies) {
  Rng rng(8);
  const std::vector<double> pool{0.0, 0.0, 0.0, 1.0, 2.0};
  const std::vector<double> y{-1.0, 5.0, 1.5};
  const auto u = pit_values_dd(pool, y, rng);
  EXPECT_EQ(u[0], 0.0);
  EXPECT_EQ(u[1], 1.0);
  EXPECT_DOUBLE_EQ(u[2], 0.8);
  // Ties at zero spread uniformly over [0, 3/5].
  const std::vector<double> zeros(20000, 0.0);
  const auto uz = pit_values_dd(pool, zeros, rng);
  double mean = 0.0;
  for (double v : uz) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 0.6);
    mean += v / uz.size();
  }
  EXPECT_NEAR(mean, 0.3, 0.01);
  EXPECT_THROW((pit_values_dd(VD{}, y, rng)), DimensionError);
}

TEST(Calibration, PitdClosedForms) {
  const int N = 1000;
  std::vector<double> u(N);
  for (int i = 0; i < N; ++i) u[i] = (i + 0.5) / N;
  std::reverse(u.begin(), u.end());
  EXPECT_NEAR(pitd(u), 0.0, 1e-15);
  std::vector<double> z(N, 0.0);
  double s = 0.0;
  for (int i = 1; i <= N; ++i) s += ((i - 0.5) / N) * ((i - 0.5) / N);
  EXPECT_NEAR(pitd(z), std::sqrt(s / N), 1e-12);
  EXPECT_NEAR(pitd(z), 1.0 / std::sqrt(3.0), 1e-3);
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(100, seed);
    EXPECT_LT(pitd(uniforms(10000, rng)), 0.02);
  }
  EXPECT_THROW(pitd(std::vector<double>{}), DimensionError);
}

TEST(Calibration, PitUniformWhenEnsembleMatchesTruth) {
  // Kolmogorov-Smirnov at alpha = 0.01, asymptotic critical value.
  const int n = 10000;
  Rng rng(9);
  std::vector<double> pool(5 * n), y(n);
  for (auto& v : pool) v = rng.normal(1.0, 2.0);
  for (auto& v : y) v = rng.normal(1.0, 2.0);
  auto u = pit_values_dd(pool, y, rng);
  std::sort(u.begin(), u.end());
  double d = 0.0;
  for (int i = 0; i < n; ++i) d = std::max({d, (i + 1.0) / n - u[i], u[i] - double(i) / n});
  EXPECT_LT(d, 1.6276 / std::sqrt(double(n)));
  for (int seed = 0; seed < 50; ++seed) {
    Rng r(200, seed);
    const int N = 2000;
    std::vector<double> p(4 * N), t(N);
    for (auto& v : p) v = r.uniform();
    for (auto& v : t) v = r.uniform();
    EXPECT_LT(pitd(pit_values_dd(p, t, r)), 3.0 / std::sqrt(double(N)));
  }
  // Zero-inflated variant: randomization keeps the PIT flat.
  std::vector<double> zp(5 * n), zy(n);
  auto zi = [&] { return rng.uniform() < 0.7 ? 0.0 : rng.uniform(0.0, 3.0); };
  for (auto& v : zp) v = zi();
  for (auto& v : zy) v = zi();
  EXPECT_LT(pitd(pit_values_dd(zp, zy, rng)), 3.0 / std::sqrt(double(n)));
}

TEST(Calibration, PitShapeClassifier) {
  std::vector<double> flat, ushape, bell;
  for (int i = 0; i < 1000; ++i) {
    const double u = (i + 0.5) / 1000;
    flat.push_back(u);
    ushape.push_back(u < 0.5 ? u * u : 1.0 - (1.0 - u) * (1.0 - u));
    bell.push_back(0.5 + (u - 0.5) * 0.4);
  }
  EXPECT_EQ(classify_pit(flat), PitShape::flat);
  EXPECT_EQ(classify_pit(ushape), PitShape::u_shaped);
  EXPECT_EQ(classify_pit(bell), PitShape::bell_shaped);
}

TEST(Probabilistic, CrpsClosedFormAndOracles) {
  EXPECT_NEAR(crps<double>(std::vector<double>{0.0, 1.0}, 0.0), 0.25, 1e-15);
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const double x = rng.uniform(-2, 2), y = rng.uniform(-2, 2);
    EXPECT_EQ(crps<double>(std::vector<double>{x}, y), std::abs(x - y));
  }
  for (int trial = 0; trial < 3; ++trial) {
    const auto x = uniforms(5, rng, 0.0, 2.0);
    const double y = rng.uniform(-0.5, 2.5);
    EXPECT_NEAR(crps<double>(x, y), crps_quadrature(x, y, 20000000), 1e-6);
  }
  // Ensemble of identical members reduces to the absolute error.
  EXPECT_NEAR(crps<double>(std::vector<double>(4, 1.5), 0.5), 1.0, 1e-15);
}

TEST(Report, DeterministicForecastAndPermutationInvariance) {
  Rng rng(11);
  const int T = 2, H = 12, W = 10;
  const std::size_t n = static_cast<std::size_t>(T) * H * W;
  std::vector<float> target(n);
  for (auto& v : target) v = rng.uniform() < 0.6 ? 0.0f : static_cast<float>(rng.uniform());
  std::vector<std::vector<float>> members(4, std::vector<float>(n));
  for (auto& m : members)
    for (auto& v : m) v = static_cast<float>(std::max(0.0, rng.normal(0.2, 0.3)));

  Rng r1(5);
  const auto single = evaluate_forecast({members[0]}, target, T, H, W, r1);
  EXPECT_NEAR(single.crps, single.mae, 1e-12);
  const double single_mse = mse<float, float>(members[0], target);
  EXPECT_NEAR(single.mse, single_mse, 1e-12);

  Rng ra(6), rb(6);
  const auto a = evaluate_forecast(members, target, T, H, W, ra);
  auto shuffled = members;
  std::swap(shuffled[0], shuffled[3]);
  std::swap(shuffled[1], shuffled[2]);
  const auto b = evaluate_forecast(shuffled, target, T, H, W, rb);
  const auto va = a.values(), vb = b.values();
  for (std::size_t k = 0; k < va.size(); ++k) EXPECT_NEAR(va[k], vb[k], 1e-12 * std::max(1.0, std::abs(va[k])));
  for (std::size_t k = 0; k < va.size(); ++k)
    if (k != 5) {
      EXPECT_GE(va[k], 0.0);
    }
  EXPECT_LE(a.ssim, 1.0);
  EXPECT_GE(a.ssim, -1.0);
  // The ensemble beats a lone member on CRPS (spread term).
  EXPECT_LT(a.crps, single.crps);

  const auto j = a.to_json();
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  EXPECT_EQ(keys, (std::vector<std::string>{"mse", "mae", "pe99", "lsd", "emd", "ssim", "pitd", "crps"}));
  const auto back = MetricReport::from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.values(), a.values());

  EXPECT_THROW(evaluate_forecast({}, target, T, H, W, ra), DimensionError);
  EXPECT_THROW(evaluate_forecast({std::vector<float>(5)}, target, T, H, W, ra), DimensionError);

  MetricAverager avg;
  avg.add(a);
  avg.add(single);
  EXPECT_NEAR(avg.mean().crps, 0.5 * (a.crps + single.crps), 1e-15);
}
