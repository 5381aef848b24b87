#pragma once

// End-to-end dataset assembly for one cross-validation fold: a synthetic
// rows x cols domain for a training year and a test year, tiling, outlier
// cap and topography scaling fitted on training data only, and network-ready
// samples for the train / validation / test splits.

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "scalesr/data.hpp"
#include "scalesr/model.hpp"

namespace scalesr {

struct ExperimentData {
  DatasetConfig grid;  // tile shape, tiling, cap percentile
  StormParams storms;
  SRFactors factors{4, 2};
  int L = 3;
  int train_frames = 240;
  int test_frames = 120;
  int stride = 2;  // anchor spacing between samples, HR frames
  int first_anchor = 0;  // raise to keep one anchor set across an L sweep
  std::uint64_t seed = 0;

  void validate() const {
    grid.validate();
    if (L < 1 || stride < 1 || first_anchor < 0)
      throw ConfigError("ExperimentData: L and stride must be >= 1, first_anchor >= 0");
    if (grid.H % factors.S != 0 || grid.W % factors.S != 0)
      throw ConfigError("ExperimentData: tile shape must be divisible by S");
    if (train_frames < L * factors.T + 1 || test_frames < L * factors.T + 1)
      throw ConfigError("ExperimentData: too few frames for one sample");
  }
};

/// Splits for one fold. Train and validation come from the training year
/// (training and held-out tiles); test is the held-out tiles in the test year.
struct PreparedData {
  std::vector<ModelSample> train;
  std::vector<ModelSample> val;
  std::vector<ModelSample> test;
  FoldSplit split;
  double cap = 0.0;  // mm/h
  MinMax topography;
};

namespace detail {
inline std::vector<ModelSample> samples_from(const std::vector<Tile>& tiles, const std::vector<int>& ids,
                                             const ExperimentData& d) {
  std::vector<ModelSample> out;
  for (int id : ids)
    for (const Sample& s : build_samples(tiles.at(id), d.factors, d.L, d.stride, d.first_anchor)) out.push_back(prepare_sample(s));
  return out;
}
}  // namespace detail

inline PreparedData prepare_experiment(const ExperimentData& d, int fold_id) {
  d.validate();
  const int DH = d.grid.H * d.grid.grid_rows, DW = d.grid.W * d.grid.grid_cols;
  const Field topo = synthesize_topography(Rng(d.seed, 0x70).next_u64(), DH, DW, d.storms.topo_hills);
  const auto train_rain = synthesize_rain(Rng(d.seed, 0x71).next_u64(), d.train_frames, topo, d.storms);
  const auto test_rain = synthesize_rain(Rng(d.seed, 0x72).next_u64(), d.test_frames, topo, d.storms);
  auto train_tiles = slice_tiles(topo, train_rain, d.grid.grid_rows, d.grid.grid_cols);
  auto test_tiles = slice_tiles(topo, test_rain, d.grid.grid_rows, d.grid.grid_cols);

  PreparedData p;
  p.split = split_fold(d.grid.grid_rows, d.grid.grid_cols, fold_id);

  if (d.grid.cap_value_mmh > 0.0) {
    p.cap = d.grid.cap_value_mmh;
  } else {
    std::vector<double> pool;
    for (int id : p.split.train_tiles)
      for (const auto& f : train_tiles[id].hr_frames) pool.insert(pool.end(), f.values().begin(), f.values().end());
    p.cap = fit_gamma_cap(pool, d.grid.cap_percentile);
  }
  std::vector<const Field*> topo_fit;
  for (int id : p.split.train_tiles) topo_fit.push_back(&train_tiles[id].topography);
  p.topography = fit_minmax(topo_fit);

  for (auto* tiles : {&train_tiles, &test_tiles})
    for (auto& t : *tiles) {
      cap_and_normalize(t.hr_frames, p.cap);
      for (auto& v : t.topography.data()) v = p.topography.apply(v);
    }

  p.train = detail::samples_from(train_tiles, p.split.train_tiles, d);
  p.val = detail::samples_from(train_tiles, p.split.val_tiles, d);
  p.test = detail::samples_from(test_tiles, p.split.val_tiles, d);
  if (p.train.empty() || p.val.empty() || p.test.empty())
    throw InsufficientDataError("prepare_experiment: a split has no samples");
  return p;
}

inline nlohmann::ordered_json to_json(const ExperimentData& d) {
  const auto& g = d.grid;
  const auto& s = d.storms;
  return {{"H", g.H},
          {"W", g.W},
          {"grid_rows", g.grid_rows},
          {"grid_cols", g.grid_cols},
          {"cap_percentile", g.cap_percentile},
          {"cap_value_mmh", g.cap_value_mmh},
          {"S", d.factors.S},
          {"T", d.factors.T},
          {"L", d.L},
          {"train_frames", d.train_frames},
          {"test_frames", d.test_frames},
          {"stride", d.stride},
          {"first_anchor", d.first_anchor},
          {"seed", d.seed},
          {"storms",
           {{"birth_rate", s.birth_rate},
            {"lifetime_mean", s.lifetime_mean},
            {"sigma_min", s.sigma_min},
            {"sigma_max", s.sigma_max},
            {"peak_log_mean", s.peak_log_mean},
            {"peak_log_sd", s.peak_log_sd},
            {"wind_u", s.wind_u},
            {"wind_v", s.wind_v},
            {"wind_jitter", s.wind_jitter},
            {"wind_period", s.wind_period},
            {"texture_sd", s.texture_sd},
            {"threshold_mmh", s.threshold_mmh},
            {"orographic_gain", s.orographic_gain},
            {"topo_hills", s.topo_hills},
            {"spinup_frames", s.spinup_frames}}}};
}

/// Missing keys keep the values already in `d`.
inline void from_json(const nlohmann::json& j, ExperimentData& d) {
  auto get = [&](const nlohmann::json& o, const char* k, auto& v) {
    if (o.contains(k)) o.at(k).get_to(v);
  };
  get(j, "H", d.grid.H);
  get(j, "W", d.grid.W);
  get(j, "grid_rows", d.grid.grid_rows);
  get(j, "grid_cols", d.grid.grid_cols);
  d.grid.fold_count = d.grid.grid_rows;
  get(j, "cap_percentile", d.grid.cap_percentile);
  get(j, "cap_value_mmh", d.grid.cap_value_mmh);
  int S = d.factors.S, T = d.factors.T;
  get(j, "S", S);
  get(j, "T", T);
  d.factors = SRFactors(S, T);
  get(j, "L", d.L);
  get(j, "train_frames", d.train_frames);
  get(j, "test_frames", d.test_frames);
  get(j, "stride", d.stride);
  get(j, "first_anchor", d.first_anchor);
  get(j, "seed", d.seed);
  if (j.contains("storms")) {
    const auto& s = j.at("storms");
    auto& p = d.storms;
    get(s, "birth_rate", p.birth_rate);
    get(s, "lifetime_mean", p.lifetime_mean);
    get(s, "sigma_min", p.sigma_min);
    get(s, "sigma_max", p.sigma_max);
    get(s, "peak_log_mean", p.peak_log_mean);
    get(s, "peak_log_sd", p.peak_log_sd);
    get(s, "wind_u", p.wind_u);
    get(s, "wind_v", p.wind_v);
    get(s, "wind_jitter", p.wind_jitter);
    get(s, "wind_period", p.wind_period);
    get(s, "texture_sd", p.texture_sd);
    get(s, "threshold_mmh", p.threshold_mmh);
    get(s, "orographic_gain", p.orographic_gain);
    get(s, "topo_hills", p.topo_hills);
    get(s, "spinup_frames", p.spinup_frames);
  }
}

}  // namespace scalesr
