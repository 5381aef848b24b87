#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "gradcheck.hpp"
#include "scalesr/attention.hpp"

using namespace scalesr;
using namespace scalesr::ad;
using scalesr::check::gradcheck;
using scalesr::check::randomize;

namespace {

Parameter<double> random_param(const char* name, Shape s, Rng& rng, double sd = 1.0) {
  Parameter<double> p(name, s);
  randomize(p, rng, sd);
  return p;
}

void expect_ok(const check::GradCheck& r) {
  EXPECT_GT(r.checked, 0);
  EXPECT_EQ(r.failures, 0) << "max relative error " << r.max_rel_error;
}

// Dense attention oracle on channel-major (N, C, P) buffers. mult[q][t] is how
// many times key token t appears for query q.
std::vector<double> dense_attention(const std::vector<double>& q, Shape sq, const std::vector<double>& k,
                                    const std::vector<double>& v, Shape sk, int heads,
                                    const std::vector<std::vector<int>>& mult) {
  const int C = sq.c, d = C / heads;
  const int P = static_cast<int>(sq.plane()), Pk = static_cast<int>(sk.plane());
  const int NQ = sq.n * P, NK = sk.n * Pk;
  auto at = [](const std::vector<double>& x, int C, int P, int tok, int c) {
    return x[(static_cast<std::size_t>(tok / P) * C + c) * P + tok % P];
  };
  std::vector<double> out(sq.size(), 0.0);
  for (int a = 0; a < NQ; ++a)
    for (int h = 0; h < heads; ++h) {
      std::vector<double> w(NK, 0.0);
      double z = 0.0;
      for (int b = 0; b < NK; ++b) {
        if (mult[a][b] == 0) continue;
        double s = 0.0;
        for (int e = 0; e < d; ++e) s += at(q, C, P, a, h * d + e) * at(k, C, Pk, b, h * d + e);
        w[b] = mult[a][b] * std::exp(s / std::sqrt(static_cast<double>(d)));
        z += w[b];
      }
      for (int e = 0; e < d; ++e) {
        double acc = 0.0;
        for (int b = 0; b < NK; ++b) acc += w[b] / z * at(v, C, Pk, b, h * d + e);
        out[(static_cast<std::size_t>(a / P) * C + h * d + e) * P + a % P] = acc;
      }
    }
  return out;
}

std::vector<double> run_attention(const Parameter<double>& q, const Parameter<double>& k, const Parameter<double>& v,
                                  int heads, AttentionIndex idx) {
  Tape<double> tape(false);
  auto out = attention(tape, tape.param(const_cast<Parameter<double>&>(q)), tape.param(const_cast<Parameter<double>&>(k)),
                       tape.param(const_cast<Parameter<double>&>(v)), heads,
                       std::make_shared<const AttentionIndex>(std::move(idx)));
  return out.value();
}

}  // namespace

// ---------------------------------------------------------------------------
// Gradient checks

TEST(GradCheck, Conv2dConfigurations) {
  struct Cfg { int n, cin, cout, h, w, k, stride, pad; PadMode mode; bool bias; };
  const Cfg cfgs[] = {
      {1, 2, 3, 5, 5, 3, 1, 1, PadMode::zeros, true},    {2, 3, 2, 6, 4, 3, 2, 1, PadMode::zeros, true},
      {1, 4, 4, 4, 4, 1, 1, 0, PadMode::zeros, true},    {3, 2, 5, 3, 3, 1, 1, 0, PadMode::zeros, false},
      {1, 2, 2, 5, 6, 3, 1, 1, PadMode::circular, true}, {1, 1, 2, 7, 7, 3, 2, 1, PadMode::circular, false},
      {2, 2, 3, 6, 6, 5, 1, 2, PadMode::zeros, true},
  };
  int seed = 0;
  for (const auto& c : cfgs) {
    Rng rng(100 + seed);
    auto x = random_param("x", {c.n, c.cin, c.h, c.w}, rng);
    auto w = random_param("w", {c.cout, c.cin, c.k, c.k}, rng, 0.5);
    auto b = random_param("b", {1, c.cout, 1, 1}, rng);
    std::vector<Parameter<double>*> ps{&x, &w};
    if (c.bias) ps.push_back(&b);
    expect_ok(gradcheck(ps, [&](Tape<double>& t, std::vector<Var<double>>& in) {
      return conv2d(t, in[0], in[1], c.bias ? in[2] : Var<double>(), c.stride, c.pad, c.mode);
    }, seed++));
  }
}

TEST(GradCheck, GroupNorm) {
  for (int seed = 0; seed < 3; ++seed) {
    Rng rng(200 + seed);
    const int groups = seed == 0 ? 1 : 2;
    auto x = random_param("x", {2, 4, 3, 3}, rng, 2.0);
    auto g = random_param("g", {1, 4, 1, 1}, rng);
    auto b = random_param("b", {1, 4, 1, 1}, rng);
    expect_ok(gradcheck({&x, &g, &b}, [&](Tape<double>& t, std::vector<Var<double>>& in) {
      return group_norm(t, in[0], in[1], in[2], groups);
    }, seed));
  }
}

TEST(GradCheck, ElementwiseAndShapeOps) {
  Rng rng(300);
  auto a = random_param("a", {2, 3, 4, 4}, rng);
  auto b = random_param("b", {2, 2, 4, 4}, rng);
  auto bias = random_param("bias", {2, 3, 1, 1}, rng);
  auto table = random_param("table", {5, 3, 1, 1}, rng);
  expect_ok(gradcheck({&a}, [](Tape<double>& t, std::vector<Var<double>>& in) { return silu(t, in[0]); }, 1));
  expect_ok(gradcheck({&a, &b}, [](Tape<double>& t, std::vector<Var<double>>& in) {
    return concat_channels(t, in[0], in[1]);
  }, 2));
  expect_ok(gradcheck({&a, &bias}, [](Tape<double>& t, std::vector<Var<double>>& in) {
    return add_channel_bias(t, scale(t, in[0], 0.7), in[1]);
  }, 3));
  expect_ok(gradcheck({&a}, [](Tape<double>& t, std::vector<Var<double>>& in) { return resize_nearest(t, in[0], 7, 9); }, 4));
  expect_ok(gradcheck({&a}, [](Tape<double>& t, std::vector<Var<double>>& in) { return adaptive_avg_pool(t, in[0], 3, 2); }, 5));
  expect_ok(gradcheck({&a}, [](Tape<double>& t, std::vector<Var<double>>& in) { return slice_frames(t, in[0], 1, 1); }, 6));
  expect_ok(gradcheck({&a, &table}, [](Tape<double>& t, std::vector<Var<double>>& in) {
    return add_channel_bias(t, in[0], embedding_row(t, in[1], 3));
  }, 7));
}

TEST(GradCheck, ConservationOps) {
  for (int seed = 0; seed < 3; ++seed) {
    Rng rng(400 + seed);
    Parameter<double> x("x", {2, 1, 4, 4});
    // Keep inputs away from the ReLU kinks.
    for (auto& v : x.value) v = rng.uniform() < 0.3 ? rng.uniform(-1.0, -0.1) : rng.uniform(0.2, 1.5);
    const auto spec = seed == 0 ? ConservationSpec::power(0.5, 1e-2) : ConservationSpec::identity(2e-2);
    expect_ok(gradcheck({&x}, [&](Tape<double>& t, std::vector<Var<double>>& in) {
      return mass_rescale(t, apply_F(t, in[0], spec), 11.0);
    }, seed));
  }
}

TEST(GradCheck, TemporalAttention) {
  for (int seed = 0; seed < 3; ++seed) {
    Rng rng(500 + seed);
    const int L = 1 + seed, C = 4, heads = seed == 2 ? 1 : 2;
    auto q = random_param("q", {L, C, 3, 3}, rng);
    auto k = random_param("k", {L, C, 3, 3}, rng);
    auto v = random_param("v", {L, C, 3, 3}, rng);
    auto idx = std::make_shared<const AttentionIndex>(temporal_index(L, 9));
    expect_ok(gradcheck({&q, &k, &v}, [&](Tape<double>& t, std::vector<Var<double>>& in) {
      return attention(t, in[0], in[1], in[2], heads, idx);
    }, seed));
  }
}

TEST(GradCheck, WindowAttention) {
  for (int seed = 0; seed < 4; ++seed) {
    Rng rng(600 + seed);
    const int radius = seed % 3, C = 4;
    const PadMode mode = seed == 3 ? PadMode::circular : PadMode::zeros;
    auto q = random_param("q", {2, C, 5, 4}, rng);
    auto k = random_param("k", {2, C, 5, 4}, rng);
    auto v = random_param("v", {2, C, 5, 4}, rng);
    auto idx = std::make_shared<const AttentionIndex>(window_index(2, 5, 4, radius, mode));
    expect_ok(gradcheck({&q, &k, &v}, [&](Tape<double>& t, std::vector<Var<double>>& in) {
      return attention(t, in[0], in[1], in[2], 2, idx);
    }, seed));
  }
}

TEST(GradCheck, CrossAttention) {
  for (int seed = 0; seed < 3; ++seed) {
    Rng rng(700 + seed);
    const int ctx = 2 + seed, C = 4;
    auto q = random_param("q", {1, C, 4, 4}, rng);
    auto k = random_param("k", {ctx, C, 4, 4}, rng);
    auto v = random_param("v", {ctx, C, 4, 4}, rng);
    auto idx = std::make_shared<const AttentionIndex>(cross_index(ctx, 16));
    expect_ok(gradcheck({&q, &k, &v}, [&](Tape<double>& t, std::vector<Var<double>>& in) {
      return attention(t, in[0], in[1], in[2], 2, idx);
    }, seed));
  }
}

// ---------------------------------------------------------------------------
// Attention oracles

TEST(Attention, SingleFrameReturnsValues) {
  Rng rng(1);
  auto q = random_param("q", {1, 4, 3, 3}, rng), k = random_param("k", {1, 4, 3, 3}, rng),
       v = random_param("v", {1, 4, 3, 3}, rng);
  const auto out = run_attention(q, k, v, 2, temporal_index(1, 9));
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], v.value[i], 1e-12);
  const auto out0 = run_attention(q, k, v, 2, window_index(1, 3, 3, 0));
  for (std::size_t i = 0; i < out0.size(); ++i) EXPECT_NEAR(out0[i], v.value[i], 1e-12);
}

TEST(Attention, EqualKeysGiveUniformWeights) {
  Rng rng(2);
  const int L = 4;
  auto q = random_param("q", {L, 2, 2, 2}, rng), v = random_param("v", {L, 2, 2, 2}, rng);
  Parameter<double> k("k", {L, 2, 2, 2});
  for (int n = 0; n < L; ++n)
    for (int j = 0; j < 8; ++j) k.value[n * 8 + j] = 0.3 * j;
  const auto out = run_attention(q, k, v, 1, temporal_index(L, 4));
  for (int c = 0; c < 2; ++c)
    for (int p = 0; p < 4; ++p) {
      double mean = 0.0;
      for (int n = 0; n < L; ++n) mean += v.value[(n * 2 + c) * 4 + p] / L;
      for (int n = 0; n < L; ++n) EXPECT_NEAR(out[(n * 2 + c) * 4 + p], mean, 1e-12);
    }
}

TEST(Attention, TemporalMatchesDenseOracle) {
  Rng rng(3);
  const int L = 3;
  const Shape s{L, 2, 2, 3};
  auto q = random_param("q", s, rng), k = random_param("k", s, rng), v = random_param("v", s, rng);
  std::vector<std::vector<int>> mult(L * 6, std::vector<int>(L * 6, 0));
  for (int a = 0; a < L * 6; ++a)
    for (int b = 0; b < L * 6; ++b) mult[a][b] = (a % 6 == b % 6);
  const auto expect = dense_attention(q.value, s, k.value, v.value, s, 1, mult);
  const auto out = run_attention(q, k, v, 1, temporal_index(L, 6));
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-6);
}

TEST(Attention, WindowMatchesMaskedDenseOracle) {
  Rng rng(4);
  const Shape s{1, 4, 5, 5};
  auto q = random_param("q", s, rng), k = random_param("k", s, rng), v = random_param("v", s, rng);
  std::vector<std::vector<int>> mult(25, std::vector<int>(25, 0));
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          const int y = std::min(4, std::max(0, i + di)), x = std::min(4, std::max(0, j + dj));
          mult[i * 5 + j][y * 5 + x] += 1;
        }
  const auto expect = dense_attention(q.value, s, k.value, v.value, s, 2, mult);
  const auto out = run_attention(q, k, v, 2, window_index(1, 5, 5, 1));
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-6);
}

TEST(Attention, WindowLocality) {
  Rng rng(5);
  for (int radius = 0; radius <= 2; ++radius) {
    const Shape s{1, 2, 7, 7};
    auto q = random_param("q", s, rng), k = random_param("k", s, rng), v = random_param("v", s, rng);
    const auto base = run_attention(q, k, v, 1, window_index(1, 7, 7, radius));
    const int pi = 1, pj = 5;
    for (int c = 0; c < 2; ++c) {
      k.value[c * 49 + pi * 7 + pj] += 3.0;
      v.value[c * 49 + pi * 7 + pj] -= 2.0;
    }
    const auto moved = run_attention(q, k, v, 1, window_index(1, 7, 7, radius));
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 7; ++j) {
        if (std::max(std::abs(i - pi), std::abs(j - pj)) <= radius) continue;
        for (int c = 0; c < 2; ++c) EXPECT_EQ(moved[c * 49 + i * 7 + j], base[c * 49 + i * 7 + j]);
      }
  }
}

TEST(Attention, CrossMatchesDenseOracle) {
  Rng rng(6);
  const int ctx = 3;
  const Shape sq{1, 4, 4, 4}, sk{ctx, 4, 4, 4};
  auto q = random_param("q", sq, rng), k = random_param("k", sk, rng), v = random_param("v", sk, rng);
  std::vector<std::vector<int>> mult(16, std::vector<int>(ctx * 16, 0));
  for (int a = 0; a < 16; ++a)
    for (int m = 0; m < ctx; ++m) mult[a][m * 16 + a] = 1;
  const auto expect = dense_attention(q.value, sq, k.value, v.value, sk, 2, mult);
  const auto out = run_attention(q, k, v, 2, cross_index(ctx, 16));
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-6);
}

TEST(Ops, ConvMatchesDirectLoop) {
  Rng rng(7);
  auto x = random_param("x", {1, 2, 5, 5}, rng), w = random_param("w", {3, 2, 3, 3}, rng);
  Tape<double> tape(false);
  const auto out = conv2d(tape, tape.param(x), tape.param(w), Var<double>(), 1, 1).value();
  for (int co = 0; co < 3; ++co)
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) {
        double acc = 0.0;
        for (int ci = 0; ci < 2; ++ci)
          for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
              const int y = i + a - 1, xx = j + b - 1;
              if (y < 0 || y >= 5 || xx < 0 || xx >= 5) continue;
              acc += w.value[((co * 2 + ci) * 3 + a) * 3 + b] * x.value[(ci * 5 + y) * 5 + xx];
            }
        EXPECT_NEAR(out[(co * 5 + i) * 5 + j], acc, 1e-12);
      }
}

TEST(Ops, MassRescaleConservesAndFallsBack) {
  Tape<double> tape(false);
  auto x = tape.constant({1, 1, 2, 2}, {0.5, 1.0, 0.0, 2.5});
  const auto y = mass_rescale(tape, x, 8.0).value();
  EXPECT_NEAR(y[0] + y[1] + y[2] + y[3], 8.0, 1e-12);
  auto z = tape.constant({1, 1, 2, 2}, {0.0, 0.0, 0.0, 0.0});
  EXPECT_EQ(mass_rescale(tape, z, 8.0).value(), z.value());
}

TEST(Tape, GradSinkKeepsParametersUntouched) {
  Rng rng(8);
  auto w = random_param("w", {2, 2, 3, 3}, rng);
  Tape<double> tape;
  auto x = tape.constant({1, 2, 4, 4}, std::vector<double>(32, 1.0));
  std::vector<double> tgt(32, 0.0);
  auto loss = sum_squared_error(tape, conv2d(tape, x, tape.param(w), Var<double>()), std::span<const double>(tgt));
  Tape<double>::GradSink sink;
  tape.backward(loss, &sink);
  for (double g : w.grad) EXPECT_EQ(g, 0.0);
  ASSERT_EQ(sink.count(&w), 1u);
  double norm = 0.0;
  for (double g : sink.at(&w)) norm += g * g;
  EXPECT_GT(norm, 0.0);
}
