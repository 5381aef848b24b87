#pragma once

// Retuning recipe for a new (S, T): context length by elbow on validation
// MSE, beta_max by minimal PITD over validation ensembles, and the F
// transform steered by the PIT shape. Plus the published reference rows.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "scalesr/experiment.hpp"
#include "scalesr/metrics.hpp"

namespace scalesr {

struct TuneGrid {
  std::vector<int> L_candidates{1, 2, 3, 4};
  std::vector<double> beta_max_candidates{1e-2, 2e-2, 3.5e-2};
  std::vector<ConservationSpec> F_candidates;  // empty: keep the run's transform

  void validate() const {
    if (L_candidates.empty() || beta_max_candidates.empty()) throw ConfigError("TuneGrid: empty candidate list");
    if (!std::is_sorted(L_candidates.begin(), L_candidates.end()) ||
        !std::is_sorted(beta_max_candidates.begin(), beta_max_candidates.end()))
      throw ConfigError("TuneGrid: candidates must be ascending");
    if (L_candidates.front() < 1) throw ConfigError("TuneGrid: L candidates must be >= 1");
    for (const auto& f : F_candidates) f.validate();
  }
};

struct TuneResult {
  SRFactors factors{1, 1};
  int L = 1;
  double beta_max = 0.0;
  ConservationSpec spec;
  PitShape shape = PitShape::flat;  // PIT shape under the transform in use before F tuning
  std::vector<double> L_scores, beta_pitd, F_pitd;

  int attention_time() const { return factors.T * L; }

  nlohmann::ordered_json to_json() const {
    return {{"S", factors.S},          {"T", factors.T},          {"L", L},
            {"A_T", attention_time()}, {"beta_max", beta_max},    {"conservation", scalesr::to_json(spec)},
            {"pit_shape", scalesr::to_string(shape)}, {"L_scores", L_scores}, {"beta_pitd", beta_pitd},
            {"F_pitd", F_pitd}};
  }
};

// ---------------------------------------------------------------------------
// Selection rules

/// Smallest candidate whose successor improves the (lower-is-better) score by
/// less than `rel_gain` relative; the last candidate if every step gains.
inline int elbow_select_L(const std::vector<int>& candidates, const std::vector<double>& scores,
                          double rel_gain = 0.02) {
  if (candidates.empty() || candidates.size() != scores.size())
    throw DimensionError("elbow_select_L: need one score per candidate");
  if (!(rel_gain >= 0.0)) throw ConfigError("elbow_select_L: threshold must be >= 0");
  for (std::size_t i = 0; i + 1 < scores.size(); ++i) {
    const double gain = scores[i] > 0.0 ? (scores[i] - scores[i + 1]) / scores[i] : 0.0;
    // tolerance so a gain equal to the threshold on paper counts as marginal
    if (gain < rel_gain + 1e-12) return candidates[i];
  }
  return candidates.back();
}

/// argmin PITD; ties go to the smaller beta_max.
inline double tune_beta_max(const std::vector<double>& candidates, const std::vector<double>& pitd) {
  if (candidates.empty() || candidates.size() != pitd.size())
    throw DimensionError("tune_beta_max: need one PITD per candidate");
  std::size_t best = 0;
  for (std::size_t i = 1; i < pitd.size(); ++i)
    if (pitd[i] < pitd[best]) best = i;
  return candidates[best];
}

struct FCandidate {
  ConservationSpec spec;
  double pitd = 0.0;
};

/// Bell-shaped PIT (over-dispersed) keeps only slower-growing transforms, a
/// U shape only faster-growing ones; among those the lowest PITD wins. Flat
/// PIT, or nothing in the allowed direction, keeps `current`.
inline ConservationSpec tune_F(const ConservationSpec& current, PitShape shape,
                               const std::vector<FCandidate>& candidates) {
  if (shape == PitShape::flat) return current;
  const double p0 = current.effective_exponent();
  const FCandidate* best = nullptr;
  for (const auto& c : candidates) {
    const double p = c.spec.effective_exponent();
    const bool allowed = shape == PitShape::bell_shaped ? p < p0 : p > p0;
    if (allowed && (!best || c.pitd < best->pitd)) best = &c;
  }
  return best ? best->spec : current;
}

// ---------------------------------------------------------------------------
// Reference configurations

struct ReferenceRow {
  SRFactors factors;
  int attention_time;
  double beta_max;
  ConservationSpec spec;

  int L() const { return attention_time / factors.T; }
};

inline std::vector<ReferenceRow> table2_fixtures() {
  return {{SRFactors(1, 3), 12, 1.5e-2, ConservationSpec::power(0.5, 1e-2)},
          {SRFactors(10, 1), 10, 1e-2, ConservationSpec::power(0.5, 1e-2)},
          {SRFactors(10, 3), 15, 2e-2, ConservationSpec::identity(2e-2)},
          {SRFactors(25, 6), 18, 3.5e-2, ConservationSpec::identity(4e-2)}};
}

// ---------------------------------------------------------------------------
// Sweeps

/// PIT values of every target pixel against its pooled ensemble, over all
/// samples (randomization for sample i from (seed, i)).
inline std::vector<double> pooled_pit(const std::vector<ModelSample>& samples, const Forecaster& forecast,
                                      std::uint64_t seed) {
  std::vector<double> u;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto members = forecast(samples[i], i);
    std::vector<float> pool;
    for (const auto& m : members) pool.insert(pool.end(), m.begin(), m.end());
    Rng rng(seed, 0x9170, i);
    const auto v = pit_values<float, float>(pool, samples[i].target, rng);
    u.insert(u.end(), v.begin(), v.end());
  }
  return u;
}

/// Mean validation MSE of D, the score the L elbow uses.
inline double validation_mse(const DetModel& det, const std::vector<ModelSample>& val, int workers = worker_count()) {
  return detail::parallel_mean(val.size(), [&](std::size_t i) { return det.loss(val[i], INT_MAX); }, workers);
}

struct SweepLog {
  nlohmann::ordered_json manifest = nlohmann::ordered_json::object();
};

/// Retrains from scratch per candidate: det nets over L (one anchor set for
/// all L), then diffusion nets over beta_max on the elbow L, then F at
/// inference on the chosen pair. Validation uses `base.eval_samples` evenly
/// spaced samples and `base.members` members.
inline TuneResult run_sweep(const RunConfig& base, const TuneGrid& grid, int fold, const EpochHook& hook = {},
                            SweepLog* log = nullptr, double rel_gain = 0.02) {
  grid.validate();
  base.validate();
  const int T = base.data.factors.T;
  const int anchor = (grid.L_candidates.back() - 1) * T;
  const std::uint64_t eval_seed = base.train.seed ^ 0x5eedULL;

  TuneResult r;
  r.factors = base.data.factors;
  std::vector<std::unique_ptr<DetModel>> dets;
  std::vector<PreparedData> data;
  nlohmann::ordered_json lj = nlohmann::ordered_json::array();
  for (int L : grid.L_candidates) {
    RunConfig c = base;
    c.data.L = L;
    c.data.first_anchor = anchor;
    data.push_back(prepare_experiment(c.data, fold));
    dets.push_back(make_det(c));
    const auto rec = train_deterministic(*dets.back(), data.back().train, data.back().val, c.train, hook);
    r.L_scores.push_back(
        validation_mse(*dets.back(), spaced_subset(data.back().val, c.eval_samples), c.train.workers));
    lj.push_back({{"L", L}, {"A_T", L * T}, {"val_mse", r.L_scores.back()}, {"record", rec.summary()}});
  }
  r.L = elbow_select_L(grid.L_candidates, r.L_scores, rel_gain);
  const std::size_t li =
      std::find(grid.L_candidates.begin(), grid.L_candidates.end(), r.L) - grid.L_candidates.begin();
  DetModel& det = *dets[li];
  const PreparedData& p = data[li];
  const auto val = spaced_subset(p.val, base.eval_samples);

  RunConfig chosen = base;
  chosen.data.L = r.L;
  chosen.data.first_anchor = anchor;
  std::unique_ptr<DifModel> best_dif;
  nlohmann::ordered_json bj = nlohmann::ordered_json::array();
  for (double b : grid.beta_max_candidates) {
    RunConfig c = chosen;
    c.beta_max = b;
    auto dif = make_dif(c);
    const auto rec = train_diffusion(*dif, det, p.train, p.val, c.diffusion_train(), hook);
    const auto rep = evaluate(val, ensemble_forecaster(det, *dif, c.members, eval_seed, c.train.workers), eval_seed);
    r.beta_pitd.push_back(rep.pitd);
    bj.push_back({{"beta_max", b}, {"pitd", rep.pitd}, {"crps", rep.crps}, {"record", rec.summary()}});
    if (r.beta_pitd.size() == 1 || rep.pitd < *std::min_element(r.beta_pitd.begin(), r.beta_pitd.end() - 1))
      best_dif = std::move(dif);
  }
  r.beta_max = tune_beta_max(grid.beta_max_candidates, r.beta_pitd);

  r.spec = chosen.spec();
  nlohmann::ordered_json fj = nlohmann::ordered_json::array();
  if (!grid.F_candidates.empty()) {
    DifModel& dif = *best_dif;
    auto with_spec = [&](ConservationSpec s) {
      s.enabled = chosen.mass_conservation;
      s.activation_epoch = 0;
      det.spec = s;
      dif.spec = s;
      return ensemble_forecaster(det, dif, chosen.members, eval_seed, chosen.train.workers);
    };
    r.shape = classify_pit(pooled_pit(val, with_spec(r.spec), eval_seed));
    std::vector<FCandidate> fc;
    for (const auto& s : grid.F_candidates) {
      const double d = evaluate(val, with_spec(s), eval_seed).pitd;
      fc.push_back({s, d});
      r.F_pitd.push_back(d);
      fj.push_back({{"conservation", to_json(s)}, {"pitd", d}});
    }
    const auto keep = r.spec;
    r.spec = tune_F(r.spec, r.shape, fc);
    r.spec.enabled = keep.enabled;
    r.spec.activation_epoch = keep.activation_epoch;
  }
  if (log) {
    log->manifest["fold"] = fold;
    log->manifest["base"] = to_json(base);
    log->manifest["L_sweep"] = lj;
    log->manifest["beta_sweep"] = bj;
    log->manifest["F_sweep"] = fj;
    log->manifest["result"] = r.to_json();
  }
  return r;
}

}  // namespace scalesr
