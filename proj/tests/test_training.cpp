#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "scalesr/dataset.hpp"
#include "scalesr/training.hpp"

using namespace scalesr;

namespace {

UNetConfig tiny_det(int L, int T, bool attention = true) {
  UNetConfig c = UNetConfig::deterministic(L, T);
  c.stages = 2;
  c.base_channels = 4;
  c.channel_mult = {1, 2, 2};
  c.window_sizes = {1, 1, 0};
  c.heads = 2;
  c.groups = 2;
  c.attention = attention;
  return c;
}

UNetConfig tiny_dif(int L, int T, int J) {
  UNetConfig c = UNetConfig::diffusion(L, T, J);
  c.stages = 2;
  c.base_channels = 4;
  c.channel_mult = {1, 2, 2};
  c.window_sizes = {1, 1, 0};
  c.heads = 2;
  c.groups = 2;
  c.embed_dim = 8;
  return c;
}

ExperimentData small_data(std::uint64_t seed) {
  ExperimentData d;
  d.grid.H = 12;
  d.grid.W = 12;
  d.factors = SRFactors(2, 2);
  d.L = 2;
  d.train_frames = 60;
  d.test_frames = 30;
  d.stride = 3;
  d.seed = seed;
  d.storms.birth_rate = 3.0;  // small tiles need denser cells to have rain
  return d;
}

TrainConfig quick(int epochs, std::uint64_t seed = 1) {
  TrainConfig c;
  c.lr_init = 1e-3;
  c.epochs = epochs;
  c.patience = std::max(1, epochs - 1);
  c.batch_size = 4;
  c.mc_activation_epoch = 1;
  c.seed = seed;
  c.samples_per_epoch = 8;
  c.val_samples = 4;
  return c;
}

const PreparedData& shared_data() {
  static const PreparedData p = prepare_experiment(small_data(3), 1);
  return p;
}

}  // namespace

TEST(Schedule, CosineLearningRate) {
  TrainConfig c;
  c.lr_init = 3e-4;
  c.epochs = 80;
  EXPECT_EQ(cosine_lr(0, c), 3e-4);
  EXPECT_NEAR(cosine_lr(80, c), 0.0, 1e-20);
  EXPECT_NEAR(cosine_lr(40, c), 1.5e-4, 1e-18);
  for (int e = 1; e <= 80; ++e) EXPECT_LT(cosine_lr(e, c), cosine_lr(e - 1, c));
  EXPECT_THROW(cosine_lr(81, c), ConfigError);
  EXPECT_THROW(cosine_lr(-1, c), ConfigError);
  c.patience = 80;
  EXPECT_THROW(c.validate(), ConfigError);
  c.patience = 8;
  c.lr_init = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Optimizer, AdamFirstStepAndConvergence) {
  ad::Parameter<double> p("x", {1, 3, 1, 1});
  p.value = {1.0, -2.0, 0.5};
  Adam<double> adam({&p});
  p.grad = {4.0, -0.01, 0.0};
  adam.step(0.1);
  // Bias correction makes the first step lr * sign(g).
  EXPECT_NEAR(p.value[0], 0.9, 1e-7);
  EXPECT_NEAR(p.value[1], -1.9, 1e-5);
  EXPECT_EQ(p.value[2], 0.5);
  for (int it = 0; it < 3000; ++it) {
    for (int k = 0; k < 3; ++k) p.grad[k] = 2.0 * (p.value[k] - (k + 1.0));
    adam.step(0.01);
  }
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(p.value[k], k + 1.0, 1e-3);
}

TEST(EarlyStopping, StopsAfterPatiencePlusOneFlatEpochs) {
  EarlyStopper s(8);
  EXPECT_TRUE(s.update(1.0));
  for (int k = 1; k <= 8; ++k) {
    EXPECT_FALSE(s.update(1.0));
    EXPECT_FALSE(s.should_stop());
  }
  EXPECT_FALSE(s.update(1.0));
  EXPECT_TRUE(s.should_stop());
  EXPECT_EQ(s.bad_epochs(), 9);
}

TEST(EarlyStopping, LoopKeepsBestWeightsAndStopsOnFrozenLoss) {
  UNet<float> net(tiny_det(1, 1), 1);
  auto& w = net.param("out.b");
  const std::vector<double> val{3.0, 1.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0};
  std::vector<float> value_at;
  TrainConfig c = quick(20);
  c.patience = 3;
  c.samples_per_epoch = 1;
  c.batch_size = 1;
  RunRecord rec = detail::run_epochs<float>(
      "stub", net, 1, c,
      [&](std::size_t, int, std::size_t, ad::Tape<float>::GradSink* sink) {
        (*sink)[&w] = std::vector<float>(w.value.size(), 1.0f);
        return 0.5;
      },
      [&](int epoch) { return val.at(epoch); }, [&](const EpochRecord&) { value_at.push_back(w.value[0]); });
  // Epoch 1 is best; epochs 2..5 are the patience + 1 non-improving ones.
  EXPECT_EQ(rec.epochs.size(), 6u);
  EXPECT_EQ(rec.stop_reason, "early_stop");
  EXPECT_EQ(rec.best_epoch, 1);
  EXPECT_EQ(rec.best_val_loss, 1.0);
  EXPECT_EQ(w.value[0], value_at[1]);
  EXPECT_NE(value_at.back(), value_at[1]);
  for (std::size_t e = 0; e < rec.epochs.size(); ++e) {
    EXPECT_EQ(rec.epochs[e].epoch, static_cast<int>(e));
    EXPECT_NEAR(rec.epochs[e].lr, cosine_lr(static_cast<int>(e), c), 1e-12);
  }
}

TEST(Dataset, FoldIsolationAndTrainingOnlyStatistics) {
  const ExperimentData d = small_data(3);
  for (int fold = 0; fold < 4; ++fold) {
    const PreparedData p = prepare_experiment(d, fold);
    std::set<int> train_ids, val_ids;
    for (const auto& m : p.train) train_ids.insert(m.tile_id);
    for (const auto& m : p.val) val_ids.insert(m.tile_id);
    for (const auto& m : p.test) EXPECT_TRUE(val_ids.count(m.tile_id));
    for (int id : val_ids) EXPECT_FALSE(train_ids.count(id));
    EXPECT_EQ(train_ids.size(), 12u);
    EXPECT_EQ(val_ids.size(), 4u);
    for (const auto* split : {&p.train, &p.val, &p.test})
      for (const auto& m : *split) {
        for (float v : m.target) {
          EXPECT_GE(v, 0.0f);
          EXPECT_LE(v, 1.0f);
        }
        for (float v : m.topography) {
          EXPECT_GE(v, 0.0f);
          EXPECT_LE(v, 1.0f);
        }
      }
  }
  // The cap ignores the held-out tiles and the test year entirely.
  ExperimentData louder = d;
  louder.test_frames = 45;
  EXPECT_EQ(prepare_experiment(d, 2).cap, prepare_experiment(louder, 2).cap);
  ExperimentData capped = d;
  capped.grid.cap_value_mmh = 10.0;
  EXPECT_EQ(prepare_experiment(capped, 0).cap, 10.0);
}

TEST(Dataset, ConfigJsonRoundTrip) {
  ExperimentData d = small_data(9);
  d.storms.wind_u = 2.25;
  ExperimentData back;
  from_json(nlohmann::json::parse(to_json(d).dump()), back);
  EXPECT_EQ(to_json(back), to_json(d));
}

TEST(Deterministic, OverfitsOneSample) {
  ExperimentData d = small_data(5);
  d.grid.H = d.grid.W = 20;
  const PreparedData p = prepare_experiment(d, 0);
  std::size_t pick = 0;
  double best_mass = -1.0;
  for (std::size_t i = 0; i < p.train.size(); ++i)
    if (p.train[i].lr_mass > best_mass) {
      best_mass = p.train[i].lr_mass;
      pick = i;
    }
  const std::vector<ModelSample> one{p.train[pick]};
  UNetConfig cfg = tiny_det(2, 2);
  cfg.base_channels = 8;
  DetModel model(cfg, d.factors, ConservationSpec::identity(0.0), true, 4);
  TrainConfig c = quick(500);
  c.lr_init = 5e-3;
  c.batch_size = 1;
  c.samples_per_epoch = 1;
  c.patience = 499;
  c.mc_activation_epoch = 1000;
  const auto rec = train_deterministic(model, one, one, c);
  double best = 1e9;
  for (const auto& e : rec.epochs) best = std::min(best, e.train_loss);
  EXPECT_LT(best, 1e-5);
  EXPECT_LT(model.loss(one[0], 0), 1e-5);
}

TEST(Deterministic, ConservationGate) {
  const auto& p = shared_data();
  DetModel model(tiny_det(2, 2), SRFactors(2, 2), ConservationSpec::power(0.5, 1e-2, true, 3), true, 8);
  Rng w(2);
  for (auto& v : model.net.param("out.w").value) v = static_cast<float>(w.normal(0.0, 0.05));
  int checked = 0, off_identity = 0;
  for (const auto& m : p.train) {
    const auto before = model.predict(m, 2), after = model.predict(m, 3);
    double sb = 0.0, sa = 0.0;
    for (float v : before) sb += v;
    for (float v : after) sa += v;
    double raw_positive = 0.0;
    for (float v : before) raw_positive += apply_F_scalar(v, model.spec);
    if (m.lr_mass <= 0.0 || raw_positive <= 0.0) continue;  // fallback cases
    ++checked;
    EXPECT_NEAR(sa, m.lr_mass, 1e-4 * m.lr_mass);
    if (std::abs(sb - m.lr_mass) > 1e-3 * m.lr_mass) ++off_identity;
  }
  EXPECT_GT(checked, 10);
  EXPECT_GT(off_identity, checked / 2);
}

TEST(Deterministic, DivergenceAbortsWithRecord) {
  auto p = shared_data();
  std::vector<ModelSample> bad(p.train.begin(), p.train.begin() + 4);
  bad[2].target[0] = std::numeric_limits<float>::quiet_NaN();
  DetModel model(tiny_det(2, 2), SRFactors(2, 2), ConservationSpec::identity(0.0), true, 1);
  RunRecord rec;
  EXPECT_THROW(train_deterministic(model, bad, p.val, quick(3), {}, &rec), DivergenceError);
  EXPECT_EQ(rec.stop_reason, "diverged");
  EXPECT_THROW(train_deterministic(model, {}, p.val, quick(3)), InsufficientDataError);
}

TEST(Reproducibility, DeterministicTrainingIsBitwiseAcrossRunsAndWorkers) {
  const auto& p = shared_data();
  auto run = [&](int workers) {
    DetModel model(tiny_det(2, 2), SRFactors(2, 2), ConservationSpec::power(0.5, 1e-2), true, 6);
    TrainConfig c = quick(3);
    c.workers = workers;
    const auto rec = train_deterministic(model, p.train, p.val, c);
    std::vector<double> losses;
    for (const auto& e : rec.epochs) {
      losses.push_back(e.train_loss);
      losses.push_back(e.val_loss);
    }
    return std::make_pair(losses, detail::snapshot(model.net));
  };
  const auto a = run(1), b = run(1), c = run(3);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(a.first, c.first);
  EXPECT_EQ(a.second, c.second);
}

TEST(Diffusion, FrozenDeterministicNetAndUntrainedLossOracle) {
  const auto& p = shared_data();
  const int J = 50;
  DetModel det(tiny_det(2, 2), SRFactors(2, 2), ConservationSpec::power(0.5, 1e-2), true, 2);
  const auto det_before = detail::snapshot(det.net);
  const NoiseSchedule s(J, 1e-4, 2e-2);
  DifModel dif(tiny_dif(2, 2, J), s, SRFactors(2, 2), ConservationSpec::power(0.5, 1e-2), 3);
  const std::vector<ModelSample> train(p.train.begin(), p.train.begin() + 16);
  TrainConfig c = quick(2);
  c.batch_size = 16;
  c.samples_per_epoch = 16;
  const auto rec = train_diffusion(dif, det, train, p.val, c);
  EXPECT_EQ(detail::snapshot(det.net), det_before);
  for (const auto& prm : det.net.parameters())
    for (float g : prm->grad) EXPECT_EQ(g, 0.0f);

  // Epoch 0 is one batch scored before any update: a zero predictor.
  double expect = 0.0;
  for (const auto& m : train) {
    const auto D = det.predict(m);
    double r2 = 0.0;
    for (std::size_t k = 0; k < D.size(); ++k) r2 += (m.target[k] - D[k]) * (m.target[k] - D[k]);
    r2 /= static_cast<double>(dif.residual_scale) * dif.residual_scale;
    const double n = static_cast<double>(D.size());
    for (int j = 1; j <= J; ++j) expect += (s.alpha_bar(j) * n + (1.0 - s.alpha_bar(j)) * r2) / (J * n);
  }
  expect /= static_cast<double>(train.size());
  EXPECT_NEAR(rec.epochs.at(0).train_loss, expect, 0.1 * expect);
  EXPECT_LT(rec.epochs.back().train_loss, rec.epochs.front().train_loss);
}

TEST(Reproducibility, DiffusionTrainingAndSampling) {
  const auto& p = shared_data();
  const int J = 20;
  DetModel det(tiny_det(2, 2), SRFactors(2, 2), ConservationSpec::power(0.5, 1e-2), true, 2);
  auto run = [&](int workers) {
    DifModel dif(tiny_dif(2, 2, J), NoiseSchedule(J, 1e-4, 2e-2), SRFactors(2, 2), ConservationSpec::power(0.5, 1e-2),
                 3);
    TrainConfig c = quick(2);
    c.workers = workers;
    const auto rec = train_diffusion(dif, det, p.train, p.val, c);
    std::vector<double> losses;
    for (const auto& e : rec.epochs) losses.push_back(e.train_loss);
    const auto D = det.predict(p.test[0]);
    return std::make_pair(losses, dif.sample_ensemble(p.test[0], D, 3, 11, 0, workers).members);
  };
  const auto a = run(1), b = run(1), c = run(2);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(a.first, c.first);
  EXPECT_EQ(a.second, c.second);
}

TEST(Baselines, IdentityFactorsAndInterpolants) {
  ExperimentData d = small_data(4);
  d.factors = SRFactors(1, 1);
  d.L = 1;
  const PreparedData p = prepare_experiment(d, 0);
  const auto r = run_baselines(p.test, 1);
  EXPECT_EQ(r.bicubic.mse, 0.0);
  EXPECT_EQ(r.nearest.mse, 0.0);
  EXPECT_EQ(r.bicubic.crps, 0.0);

  const auto& q = shared_data();
  const auto b = run_baselines(q.test, 1);
  EXPECT_NE(b.bicubic.mse, b.nearest.mse);
  int differ = 0;
  for (const auto& m : q.test)
    if (baseline_prediction(m, Interpolation::bicubic) != baseline_prediction(m, Interpolation::nearest)) ++differ;
  EXPECT_GT(differ, 0);
  const auto j = b.bicubic.to_json();
  EXPECT_EQ(j.size(), 8u);
  EXPECT_NEAR(b.nearest.crps, b.nearest.mae, 1e-12);
}

// ---------------------------------------------------------------------------

namespace {

struct EnsembleStats {
  double mean_dev = 0.0;  // rms(ensemble mean - D)
  double spread = 0.0;    // rms member deviation from the mean
  double field = 0.0;     // rms target
};

EnsembleStats ensemble_stats(const DifModel& dif, const DetModel& det, const std::vector<ModelSample>& samples,
                             int K) {
  EnsembleStats s;
  std::size_t n = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto D = det.predict(samples[i]);
    const auto e = dif.sample_ensemble(samples[i], D, K, 9, i, 1);
    for (std::size_t k = 0; k < D.size(); ++k) {
      double mu = 0.0;
      for (const auto& m : e.members) mu += m[k];
      mu /= K;
      for (const auto& m : e.members) s.spread += (m[k] - mu) * (m[k] - mu) / K;
      s.mean_dev += (mu - D[k]) * (mu - D[k]);
      s.field += static_cast<double>(samples[i].target[k]) * samples[i].target[k];
      ++n;
    }
  }
  s.mean_dev = std::sqrt(s.mean_dev / n);
  s.spread = std::sqrt(s.spread / n);
  s.field = std::sqrt(s.field / n);
  return s;
}

}  // namespace

TEST(Diffusion, SpreadGrowsWithBetaAndCollapsesAsBetaVanishes) {
  const auto& p = shared_data();
  const int J = 20;
  // identity transform without threshold: a conserved D is a fixed point
  const auto spec = ConservationSpec::identity(0.0, true, 0);
  DetModel det(tiny_det(2, 2), SRFactors(2, 2), spec, true, 2);
  DifModel dif(tiny_dif(2, 2, J), NoiseSchedule(J, 1e-4, 2e-2), SRFactors(2, 2), spec, 3);
  train_diffusion(dif, det, p.train, p.val, quick(2));
  const std::vector<ModelSample> eval(p.test.begin(), p.test.begin() + 4);
  std::vector<double> spreads;
  for (double b : {1e-6, 1e-2, 2e-2, 3.5e-2}) {
    dif.schedule = NoiseSchedule(J, std::min(1e-4, b / 10), b);  // same trained net, new schedule
    const auto s = ensemble_stats(dif, det, eval, 8);
    ASSERT_GT(s.field, 0.0);
    if (b == 1e-6) {
      EXPECT_LT(s.mean_dev, 0.02 * s.field);
    }
    spreads.push_back(s.spread);
  }
  for (std::size_t i = 1; i < spreads.size(); ++i) EXPECT_LT(spreads[i - 1], spreads[i]) << i;
}

TEST(Diffusion, ResidualScaleIsTrainingRmsAndScalesTheSpread) {
  const auto& p = shared_data();
  const std::vector<ModelSample> train(p.train.begin(), p.train.begin() + 6);
  std::vector<std::vector<float>> D;
  double ss = 0.0;
  std::size_t n = 0;
  for (const auto& m : train) {
    D.emplace_back(m.target.size(), 0.0f);
    for (float v : m.target) {
      ss += static_cast<double>(v) * v;
      ++n;
    }
  }
  EXPECT_NEAR(fit_residual_scale(train, D), std::sqrt(ss / n), 1e-6 * std::sqrt(ss / n));
  const std::vector<ModelSample> none;
  EXPECT_EQ(fit_residual_scale(none, {}), 1e-6f);

  // without conservation, member - D is linear in the scale
  const int J = 10;
  auto spec = ConservationSpec::identity(0.0, false, 0);
  DetModel det(tiny_det(2, 2), SRFactors(2, 2), spec, true, 2);
  DifModel dif(tiny_dif(2, 2, J), NoiseSchedule(J, 1e-4, 2e-2), SRFactors(2, 2), spec, 3);
  const auto& m = p.test[0];
  // large D keeps every value clear of the zero clamp
  std::vector<float> Dm(m.target.size(), 10.0f);
  dif.residual_scale = 1.0f;
  const auto a = dif.sample_member(m, Dm, 5, 0, 0);
  dif.residual_scale = 0.5f;
  const auto b = dif.sample_member(m, Dm, 5, 0, 0);
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(b[k] - 10.0f, 0.5f * (a[k] - 10.0f), 1e-4f);
}
