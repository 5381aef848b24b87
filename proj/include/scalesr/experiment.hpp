#pragma once

// One resolved run: data, both networks, schedule, conservation transform and
// evaluation settings, with the desk and paper presets, JSON persistence, and
// the train / evaluate helpers the CLI and the acceptance suite share.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "scalesr/dataset.hpp"
#include "scalesr/diffusion.hpp"
#include "scalesr/training.hpp"

namespace scalesr {

struct RunConfig {
  std::string preset = "desk";
  ExperimentData data;
  TrainConfig train;
  int stages = 4;
  int base_channels = 16;
  int heads = 4;
  int groups = 8;
  int embed_dim = 128;
  int J = 200;
  double beta_min = 1e-4;
  double beta_max = 2e-2;
  ConservationSpec conservation = ConservationSpec::power(0.5, 1e-2);
  bool attention = true;
  bool deterministic_only = false;
  bool mass_conservation = true;
  bool bicubic_skip = true;
  int diffusion_samples_per_epoch = 0;  // 0: train.samples_per_epoch
  int members = 4;        // K
  int eval_samples = 24;  // evenly spaced subset of the split, 0 = all
  std::uint64_t model_seed = 11;

  /// 40x40 tiles at (4, 2), sized for one CPU core. The diffusion net sees
  /// more samples per epoch than the deterministic one: its loss is much
  /// noisier per sample and each step is cheaper.
  static RunConfig desk() {
    RunConfig c;
    c.train.lr_init = 1e-3;
    c.train.epochs = 30;
    c.train.patience = 8;
    c.train.batch_size = 8;
    c.train.mc_activation_epoch = 8;
    c.train.samples_per_epoch = 96;
    c.train.val_samples = 48;
    c.diffusion_samples_per_epoch = 384;
    c.conservation = ConservationSpec::identity(1e-2);
    c.reseed(7);
    return c;
  }

  /// Full-size settings. Not runnable on a desktop: a year of 400x400 frames
  /// and J = 1000 reverse steps per member.
  static RunConfig paper() {
    RunConfig c;
    c.preset = "paper";
    c.data.grid.H = c.data.grid.W = 100;
    c.data.factors = SRFactors(10, 3);
    c.data.L = 5;
    c.data.train_frames = 8760;
    c.data.test_frames = 8784;
    c.data.stride = 1;
    c.train.lr_init = 1e-4;
    c.train.epochs = 80;
    c.train.patience = 8;
    c.train.batch_size = 12;
    c.train.mc_activation_epoch = 20;
    c.J = 1000;
    c.beta_max = 2e-2;
    c.conservation = ConservationSpec::identity(2e-2);
    c.members = 3;
    c.eval_samples = 0;
    return c;
  }

  static RunConfig named(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "paper") return paper();
    throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
  }

  UNetConfig net_config(NetKind kind, bool with_attention = true) const {
    UNetConfig c = kind == NetKind::deterministic ? UNetConfig::deterministic(data.L, data.factors.T)
                                                  : UNetConfig::diffusion(data.L, data.factors.T, J);
    if (stages < 1 || stages + 1 > static_cast<int>(c.channel_mult.size()))
      throw ConfigError("RunConfig: stages must be in [1, 4]");
    c.stages = stages;
    c.base_channels = base_channels;
    c.heads = heads;
    c.groups = groups;
    c.embed_dim = embed_dim;
    c.channel_mult.resize(stages + 1);
    c.window_sizes.resize(stages + 1);
    c.attention = attention && with_attention;
    c.validate();
    return c;
  }

  /// One seed for data, batch order, sampling and initial weights.
  void reseed(std::uint64_t s) {
    data.seed = s;
    train.seed = s;
    model_seed = s * 2 + 11;
  }

  TrainConfig diffusion_train() const {
    TrainConfig t = train;
    if (diffusion_samples_per_epoch > 0) t.samples_per_epoch = diffusion_samples_per_epoch;
    return t;
  }

  NoiseSchedule schedule() const { return NoiseSchedule(J, beta_min, beta_max); }

  ConservationSpec spec() const {
    ConservationSpec s = conservation;
    s.enabled = mass_conservation;
    s.activation_epoch = train.mc_activation_epoch;
    return s;
  }

  void validate() const {
    data.validate();
    train.validate();
    conservation.validate();
    net_config(NetKind::deterministic);
    if (!deterministic_only) {
      net_config(NetKind::diffusion);
      schedule();
    }
    if (members < 1) throw ConfigError("RunConfig: members must be >= 1");
    if (eval_samples < 0) throw ConfigError("RunConfig: eval_samples must be >= 0");
    if (diffusion_samples_per_epoch < 0) throw ConfigError("RunConfig: diffusion_samples_per_epoch must be >= 0");
  }
};

inline nlohmann::ordered_json to_json(const ConservationSpec& s) {
  return {{"family", s.family == FFamily::identity ? "identity" : "power"},
          {"exponent", s.exponent},
          {"threshold", s.threshold_alpha}};
}

inline void from_json(const nlohmann::json& j, ConservationSpec& s) {
  if (j.contains("family")) {
    const auto f = j.at("family").get<std::string>();
    if (f != "identity" && f != "power") throw ConfigError("conservation.family must be identity or power");
    s.family = f == "identity" ? FFamily::identity : FFamily::power;
  }
  if (j.contains("exponent")) j.at("exponent").get_to(s.exponent);
  if (j.contains("threshold")) j.at("threshold").get_to(s.threshold_alpha);
}

inline nlohmann::ordered_json to_json(const TrainConfig& t) {
  return {{"lr_init", t.lr_init},
          {"epochs", t.epochs},
          {"patience", t.patience},
          {"batch_size", t.batch_size},
          {"mc_activation_epoch", t.mc_activation_epoch},
          {"seed", t.seed},
          {"fold", t.fold_id},
          {"samples_per_epoch", t.samples_per_epoch},
          {"val_samples", t.val_samples},
          {"grad_clip", t.grad_clip}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& t) {
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) j.at(k).get_to(v);
  };
  get("lr_init", t.lr_init);
  get("epochs", t.epochs);
  get("patience", t.patience);
  get("batch_size", t.batch_size);
  get("mc_activation_epoch", t.mc_activation_epoch);
  get("seed", t.seed);
  get("fold", t.fold_id);
  get("samples_per_epoch", t.samples_per_epoch);
  get("val_samples", t.val_samples);
  get("grad_clip", t.grad_clip);
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  return {{"preset", c.preset},
          {"data", to_json(c.data)},
          {"train", to_json(c.train)},
          {"net",
           {{"stages", c.stages},
            {"base_channels", c.base_channels},
            {"heads", c.heads},
            {"groups", c.groups},
            {"embed_dim", c.embed_dim}}},
          {"schedule", {{"J", c.J}, {"beta_min", c.beta_min}, {"beta_max", c.beta_max}}},
          {"conservation", to_json(c.conservation)},
          {"attention", c.attention},
          {"deterministic_only", c.deterministic_only},
          {"mass_conservation", c.mass_conservation},
          {"bicubic_skip", c.bicubic_skip},
          {"diffusion_samples_per_epoch", c.diffusion_samples_per_epoch},
          {"members", c.members},
          {"eval_samples", c.eval_samples},
          {"model_seed", c.model_seed}};
}

/// Starts from the named preset (default desk), then overlays the keys that
/// are present.
inline RunConfig run_config_from_json(const nlohmann::json& j, std::optional<std::string> preset = std::nullopt) {
  RunConfig c = RunConfig::named(preset ? *preset : j.value("preset", std::string("desk")));
  auto get = [](const nlohmann::json& o, const char* k, auto& v) {
    if (o.contains(k)) o.at(k).get_to(v);
  };
  if (j.contains("data")) from_json(j.at("data"), c.data);
  if (j.contains("train")) from_json(j.at("train"), c.train);
  if (j.contains("net")) {
    const auto& n = j.at("net");
    get(n, "stages", c.stages);
    get(n, "base_channels", c.base_channels);
    get(n, "heads", c.heads);
    get(n, "groups", c.groups);
    get(n, "embed_dim", c.embed_dim);
  }
  if (j.contains("schedule")) {
    get(j.at("schedule"), "J", c.J);
    get(j.at("schedule"), "beta_min", c.beta_min);
    get(j.at("schedule"), "beta_max", c.beta_max);
  }
  if (j.contains("conservation")) from_json(j.at("conservation"), c.conservation);
  get(j, "attention", c.attention);
  get(j, "deterministic_only", c.deterministic_only);
  get(j, "mass_conservation", c.mass_conservation);
  get(j, "bicubic_skip", c.bicubic_skip);
  get(j, "diffusion_samples_per_epoch", c.diffusion_samples_per_epoch);
  get(j, "members", c.members);
  get(j, "eval_samples", c.eval_samples);
  get(j, "model_seed", c.model_seed);
  return c;
}

// ---------------------------------------------------------------------------

inline std::unique_ptr<DetModel> make_det(const RunConfig& c, bool with_attention = true) {
  return std::make_unique<DetModel>(c.net_config(NetKind::deterministic, with_attention), c.data.factors, c.spec(),
                                    c.bicubic_skip, c.model_seed);
}

inline std::unique_ptr<DifModel> make_dif(const RunConfig& c, bool with_attention = true) {
  return std::make_unique<DifModel>(c.net_config(NetKind::diffusion, with_attention), c.schedule(), c.data.factors,
                                    c.spec(), c.model_seed + 1);
}

/// Evenly spaced subset of at most n samples (n = 0 keeps all).
inline std::vector<ModelSample> spaced_subset(const std::vector<ModelSample>& s, int n) {
  if (n <= 0 || static_cast<std::size_t>(n) >= s.size()) return s;
  std::vector<ModelSample> out;
  for (int i = 0; i < n; ++i) out.push_back(s[static_cast<std::size_t>(i) * s.size() / n]);
  return out;
}

struct TrainedModels {
  std::unique_ptr<DetModel> det;
  std::unique_ptr<DifModel> dif;  // null when deterministic-only
  RunRecord det_record;
  std::optional<RunRecord> dif_record;
};

inline TrainedModels train_models(const RunConfig& c, const PreparedData& p, bool with_attention = true,
                                  const EpochHook& hook = {}) {
  TrainedModels m{make_det(c, with_attention), nullptr, {}, std::nullopt};
  m.det_record = train_deterministic(*m.det, p.train, p.val, c.train, hook);
  if (!c.deterministic_only) {
    m.dif = make_dif(c, with_attention);
    m.dif_record = train_diffusion(*m.dif, *m.det, p.train, p.val, c.diffusion_train(), hook);
  }
  return m;
}

/// The comparison set: full model, deterministic-only, no-attention ablation,
/// and the interpolation baselines. Absent models are skipped. The ablation is
/// scored as an ensemble when it has its own diffusion net.
struct ComparisonReport {
  std::optional<MetricReport> full, deterministic, no_attention;
  MetricReport bicubic, nearest;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    if (full) j["full"] = full->to_json();
    if (deterministic) j["deterministic"] = deterministic->to_json();
    if (no_attention) j["no_attention"] = no_attention->to_json();
    j["bicubic"] = bicubic.to_json();
    j["nearest"] = nearest.to_json();
    return j;
  }
};

inline ComparisonReport compare_models(const RunConfig& c, const std::vector<ModelSample>& samples, const DetModel& det,
                                       const DifModel* dif, const DetModel* no_attention,
                                       const DifModel* no_attention_dif, std::uint64_t seed,
                                       int workers = worker_count()) {
  ComparisonReport r;
  const auto b = run_baselines(samples, seed);
  r.bicubic = b.bicubic;
  r.nearest = b.nearest;
  r.deterministic = evaluate(samples, deterministic_forecaster(det), seed);
  if (no_attention && no_attention_dif)
    r.no_attention =
        evaluate(samples, ensemble_forecaster(*no_attention, *no_attention_dif, c.members, seed, workers), seed);
  else if (no_attention)
    r.no_attention = evaluate(samples, deterministic_forecaster(*no_attention), seed);
  if (dif) r.full = evaluate(samples, ensemble_forecaster(det, *dif, c.members, seed, workers), seed);
  return r;
}

}  // namespace scalesr
