// scalesr: command-line driver. Every command is deterministic given its
// inputs and seed; errors go to stderr as one JSON object.

#include <CLI11.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "scalesr/experiment.hpp"
#include "scalesr/gridded.hpp"
#include "scalesr/tuning.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace scalesr;

namespace {

// ---------------------------------------------------------------------------
// config resolution: preset defaults, then the file, then flags

struct Overrides {
  std::string config_path;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::optional<int> fold;
  std::string factors;  // "SxT"
  std::optional<int> members;
  bool no_attention = false;
  bool deterministic_only = false;
  bool no_mc = false;
};

void add_config_flags(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config_path, "JSON run config (keys missing here keep preset values)");
  app->add_option("--preset", o.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  app->add_option("--seed", o.seed, "seed for data, batch order, sampling and weights");
  app->add_option("--fold", o.fold, "cross-validation fold (0-3)");
  app->add_option("--factors", o.factors, "super-resolution factors as SxT, e.g. 4x2");
  app->add_option("--members", o.members, "ensemble size K");
  app->add_flag("--no-attention", o.no_attention, "drop temporal, windowed and cross attention from both nets");
  app->add_flag("--deterministic-only", o.deterministic_only, "skip the diffusion stage");
  app->add_flag("--no-mc", o.no_mc, "disable the mass-conservation transform");
}

SRFactors parse_factors(const std::string& s) {
  const auto x = s.find_first_of("xX");
  try {
    if (x == std::string::npos) throw std::invalid_argument(s);
    std::size_t a = 0, b = 0;
    const int S = std::stoi(s.substr(0, x), &a), T = std::stoi(s.substr(x + 1), &b);
    if (a != x || b != s.size() - x - 1) throw std::invalid_argument(s);
    return SRFactors(S, T);
  } catch (const std::logic_error&) {
    throw ConfigError("--factors expects SxT with positive integers, got '" + s + "'");
  }
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw FormatError("cannot open " + p.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const ordered_json& j) {
  std::ofstream os(p);
  if (!os) throw FormatError("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

RunConfig resolve(const Overrides& o) {
  json file = json::object();
  if (!o.config_path.empty()) file = read_json(o.config_path);
  std::optional<std::string> preset;
  if (!o.preset.empty()) preset = o.preset;
  RunConfig c = run_config_from_json(file, preset);
  if (o.seed) c.reseed(*o.seed);
  if (o.fold) c.train.fold_id = *o.fold;
  if (!o.factors.empty()) c.data.factors = parse_factors(o.factors);
  if (o.members) c.members = *o.members;
  if (o.no_attention) c.attention = false;
  if (o.deterministic_only) c.deterministic_only = true;
  if (o.no_mc) c.mass_conservation = false;
  c.train.workers = worker_count();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// run directory: config.json, weights/{det,dif}.bin, record.jsonl, metrics.json

struct Run {
  RunConfig cfg;
  PreparedData data;
  std::unique_ptr<DetModel> det;
  std::unique_ptr<DifModel> dif;
  std::unique_ptr<DetModel> no_attention;  // optional ablation weights
  std::unique_ptr<DifModel> no_attention_dif;
};

Run load_run(const fs::path& dir, bool need_models = true) {
  const json j = read_json(dir / "config.json");
  Run r;
  r.cfg = run_config_from_json(j);
  r.cfg.train.workers = worker_count();
  r.data = prepare_experiment(r.cfg.data, r.cfg.train.fold_id);
  if (!need_models) return r;
  r.det = make_det(r.cfg);
  r.det->net.load(dir / "weights" / "det.bin");
  if (!r.cfg.deterministic_only) {
    r.dif = make_dif(r.cfg);
    r.dif->net.load(dir / "weights" / "dif.bin");
    r.dif->residual_scale = j.at("fitted").at("residual_scale").get<float>();
  }
  if (fs::exists(dir / "weights" / "det_noattn.bin") && r.cfg.attention) {
    r.no_attention = make_det(r.cfg, false);
    r.no_attention->net.load(dir / "weights" / "det_noattn.bin");
    if (fs::exists(dir / "weights" / "dif_noattn.bin")) {
      r.no_attention_dif = make_dif(r.cfg, false);
      r.no_attention_dif->net.load(dir / "weights" / "dif_noattn.bin");
      r.no_attention_dif->residual_scale = j.at("fitted").at("residual_scale_noattn").get<float>();
    }
  }
  return r;
}

const std::vector<ModelSample>& split_of(const Run& r, const std::string& split) {
  if (split == "train") return r.data.train;
  if (split == "val") return r.data.val;
  if (split == "test") return r.data.test;
  throw ConfigError("split must be train, val or test");
}

// ---------------------------------------------------------------------------
// commands

int cmd_coarsen(const std::string& in, const std::string& factors, const std::string& out) {
  const SRFactors f = parse_factors(factors);
  const GriddedData g = read_gridded(in);
  if (g.ny % f.S != 0 || g.nx % f.S != 0) throw DimensionError("coarsen: S must divide the grid shape");
  if (g.nt < f.T) throw InsufficientDataError("coarsen: fewer frames than T");
  const int nt = g.nt / f.T;  // a trailing partial block is dropped
  GriddedData lr;
  lr.nt = nt;
  lr.ny = g.ny / f.S;
  lr.nx = g.nx / f.S;
  lr.missing_value = g.missing_value;
  ordered_json check = ordered_json::object();
  for (const auto& name : g.variables) {
    std::vector<float> v;
    double hr_sum = 0.0, lr_sum = 0.0;
    if (f.S == 1 && f.T == 1) {
      v = g.data.at(name);  // identity: keep the bytes as they are
      for (float x : v) hr_sum += x, lr_sum += x;
    } else {
      const auto frames = g.frames(name);
      for (int t = 0; t < nt; ++t) {
        const Field c = coarsen_spacetime(std::span<const Field>(frames.data() + t * f.T, f.T), f);
        for (double x : c.values()) v.push_back(static_cast<float>(x)), lr_sum += x;
        for (int k = 0; k < f.T; ++k)
          for (double x : frames[t * f.T + k].values()) hr_sum += x;
      }
    }
    // mass identity: S^2 T sum(lr) = sum(hr), up to float32 storage
    double stored = 0.0;
    for (float x : v) stored += x;
    const double scaled = static_cast<double>(f.S) * f.S * f.T * lr_sum;
    const double rel = std::abs(scaled - hr_sum) / std::max(1e-300, std::abs(hr_sum));
    if (rel > 1e-8) throw Error("mass", "coarsen: mass identity violated for " + name);
    check[name] = {{"hr_sum", hr_sum}, {"lr_sum_scaled", scaled}, {"relative_error", rel}, {"stored_sum", stored}};
    lr.add_variable(name, std::move(v), g.units.count(name) ? g.units.at(name) : "");
    std::cerr << "coarsen: " << name << " mass identity holds (relative error " << rel << ")\n";
  }
  for (const auto& [name, vals] : g.statics) {
    Field s(g.ny, g.nx);
    for (std::size_t k = 0; k < vals.size(); ++k) s.data()[k] = vals[k];
    const Field c = f.S == 1 ? s : coarsen_spatial(s, f);
    std::vector<float> v;
    for (double x : c.values()) v.push_back(static_cast<float>(x));
    if (f.S == 1) v = vals;
    lr.statics[name] = std::move(v);
    lr.static_units[name] = g.static_units.count(name) ? g.static_units.at(name) : "";
  }
  write_gridded(out, lr);
  write_json(fs::path(out) / "coarsen.json",
             {{"S", f.S}, {"T", f.T}, {"input", in}, {"dropped_frames", g.nt - nt * f.T}, {"mass", check}});
  return 0;
}

int cmd_train(const Overrides& o, const std::string& out, bool ablation) {
  const RunConfig c = resolve(o);
  fs::create_directories(fs::path(out) / "weights");
  const auto t0 = std::chrono::steady_clock::now();
  const PreparedData p = prepare_experiment(c.data, c.train.fold_id);
  std::ofstream rec(fs::path(out) / "record.jsonl");
  auto hook = [&](const EpochRecord& e) {
    rec << e.to_json().dump() << '\n' << std::flush;
    std::cerr << e.stage << " epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss
              << (e.best ? " *" : "") << '\n';
  };
  const TrainedModels m = train_models(c, p, true, hook);
  m.det->net.save(fs::path(out) / "weights" / "det.bin");
  ordered_json fitted = {{"cap_mmh", p.cap},
                         {"topography_min", p.topography.lo},
                         {"topography_max", p.topography.hi},
                         {"train_samples", p.train.size()},
                         {"val_samples", p.val.size()},
                         {"test_samples", p.test.size()}};
  ordered_json summary = {{"det", m.det_record.summary()}};
  if (m.dif) {
    m.dif->net.save(fs::path(out) / "weights" / "dif.bin");
    fitted["residual_scale"] = m.dif->residual_scale;
    summary["dif"] = m.dif_record->summary();
  }
  if (ablation && c.attention) {
    const TrainedModels a = train_models(c, p, false, [&](const EpochRecord& e) {
      EpochRecord x = e;
      x.stage += "_noattn";
      hook(x);
    });
    a.det->net.save(fs::path(out) / "weights" / "det_noattn.bin");
    summary["det_noattn"] = a.det_record.summary();
    if (a.dif) {
      a.dif->net.save(fs::path(out) / "weights" / "dif_noattn.bin");
      fitted["residual_scale_noattn"] = a.dif->residual_scale;
      summary["dif_noattn"] = a.dif_record->summary();
    }
  }
  ordered_json cj = to_json(c);
  cj["fitted"] = fitted;
  write_json(fs::path(out) / "config.json", cj);
  summary["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_sample(const std::string& dir, std::optional<int> K, std::optional<std::uint64_t> seed,
               const std::string& split, int index) {
  const Run r = load_run(dir);
  if (!r.dif) throw ConfigError("sample: run is deterministic-only");
  const auto& s = split_of(r, split);
  if (index < 0 || index >= static_cast<int>(s.size())) throw ConfigError("sample: index out of range");
  const ModelSample& m = s[index];
  const int k = K.value_or(r.cfg.members);
  const std::uint64_t sd = seed.value_or(r.cfg.train.seed);
  const auto D = r.det->predict(m);
  const auto e = r.dif->sample_ensemble(m, D, k, sd, static_cast<std::uint64_t>(index), r.cfg.train.workers);
  GriddedData g;
  g.nt = m.T();
  g.ny = m.H;
  g.nx = m.W;
  const std::string unit = "normalized";
  g.add_variable("deterministic", D, unit);
  for (int i = 0; i < k; ++i) g.add_variable("member_" + std::to_string(i), e.members[i], unit);
  g.add_variable("target", m.target, unit);
  const fs::path out = fs::path(dir) / "samples" / (split + "_" + std::to_string(index) + "_seed" + std::to_string(sd));
  write_gridded(out, g);
  std::cout << out.string() << '\n';
  return 0;
}

void print_table(const ComparisonReport& r) {
  std::cout << std::left << std::setw(16) << "model";
  for (const char* k : MetricReport::kKeys) std::cout << std::right << std::setw(12) << k;
  std::cout << '\n';
  auto row = [](const char* name, const MetricReport& m) {
    std::cout << std::left << std::setw(16) << name;
    for (double v : m.values()) std::cout << std::right << std::setw(12) << std::setprecision(4) << v;
    std::cout << '\n';
  };
  if (r.full) row("full", *r.full);
  if (r.deterministic) row("deterministic", *r.deterministic);
  if (r.no_attention) row("no_attention", *r.no_attention);
  row("bicubic", r.bicubic);
  row("nearest", r.nearest);
}

int cmd_evaluate(const std::string& dir, const std::string& split, std::optional<int> K) {
  Run r = load_run(dir);
  if (K) r.cfg.members = *K;
  const auto samples = spaced_subset(split_of(r, split), r.cfg.eval_samples);
  const auto rep = compare_models(r.cfg, samples, *r.det, r.dif.get(), r.no_attention.get(),
                                  r.no_attention_dif.get(), r.cfg.train.seed, r.cfg.train.workers);
  ordered_json j = {{"split", split}, {"samples", samples.size()}, {"members", r.cfg.members},
                    {"units", "normalized"}, {"attention", r.cfg.attention}, {"reports", rep.to_json()}};
  write_json(fs::path(dir) / "metrics.json", j);
  print_table(rep);
  return 0;
}

TuneGrid read_grid(const json& j) {
  TuneGrid g;
  if (j.contains("L")) g.L_candidates = j.at("L").get<std::vector<int>>();
  if (j.contains("beta_max")) g.beta_max_candidates = j.at("beta_max").get<std::vector<double>>();
  if (j.contains("F"))
    for (const auto& f : j.at("F")) {
      ConservationSpec s;
      from_json(f, s);
      g.F_candidates.push_back(s);
    }
  return g;
}

int cmd_sweep(const Overrides& o, const std::string& grid_path, const std::string& out, double rel_gain) {
  const RunConfig c = resolve(o);
  const json gj = read_json(grid_path);
  const TuneGrid g = read_grid(gj);
  fs::create_directories(out);
  std::ofstream rec(fs::path(out) / "record.jsonl");
  SweepLog log;
  const auto r = run_sweep(c, g, c.train.fold_id, [&](const EpochRecord& e) { rec << e.to_json().dump() << '\n'; },
                           &log, rel_gain);
  log.manifest["grid"] = gj;
  write_json(fs::path(out) / "sweep.json", log.manifest);
  std::cout << r.to_json().dump(2) << '\n';
  return 0;
}

// 0 -> white, then a blue / green / yellow / red ramp.
std::array<unsigned char, 3> colour(double v, double vmax) {
  if (!(v > 0.0) || vmax <= 0.0) return {255, 255, 255};
  const double t = std::clamp(v / vmax, 0.0, 1.0);
  static const double stops[5][3] = {{200, 220, 255}, {40, 90, 220}, {30, 170, 80}, {240, 210, 40}, {200, 30, 30}};
  const double x = t * 4.0;
  const int i = std::min(3, static_cast<int>(x));
  const double w = x - i;
  std::array<unsigned char, 3> c{};
  for (int k = 0; k < 3; ++k) c[k] = static_cast<unsigned char>(std::lround(stops[i][k] * (1 - w) + stops[i + 1][k] * w));
  return c;
}

/// Columns: deterministic mean, K members, target; one row per output frame.
void write_panel(const fs::path& path, const std::vector<std::vector<float>>& columns, int T, int H, int W,
                 int zoom) {
  const int gap = 2, cols = static_cast<int>(columns.size());
  const int pw = cols * W * zoom + (cols + 1) * gap, ph = T * H * zoom + (T + 1) * gap;
  std::vector<unsigned char> img(static_cast<std::size_t>(pw) * ph * 3, 128);
  double vmax = 0.0;
  for (const auto& c : columns)
    for (float v : c) vmax = std::max(vmax, static_cast<double>(v));
  for (int c = 0; c < cols; ++c)
    for (int t = 0; t < T; ++t)
      for (int y = 0; y < H * zoom; ++y)
        for (int x = 0; x < W * zoom; ++x) {
          const auto rgb = colour(columns[c][(static_cast<std::size_t>(t) * H + y / zoom) * W + x / zoom], vmax);
          const std::size_t px = gap + c * (W * zoom + gap) + x, py = gap + t * (H * zoom + gap) + y;
          std::copy(rgb.begin(), rgb.end(), img.begin() + (py * pw + px) * 3);
        }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << "P6\n" << pw << ' ' << ph << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
}

int cmd_plot(const std::string& dir, const std::string& split, int index, std::optional<int> K, int zoom) {
  const Run r = load_run(dir);
  const auto& s = split_of(r, split);
  if (index < 0 || index >= static_cast<int>(s.size())) throw ConfigError("plot: index out of range");
  const ModelSample& m = s[index];
  const auto D = r.det->predict(m);
  std::vector<std::vector<float>> cols{D};
  if (r.dif) {
    const auto e = r.dif->sample_ensemble(m, D, K.value_or(r.cfg.members), r.cfg.train.seed,
                                          static_cast<std::uint64_t>(index), r.cfg.train.workers);
    cols.insert(cols.end(), e.members.begin(), e.members.end());
  }
  cols.push_back(m.target);
  const fs::path out = fs::path(dir) / "plot.ppm";
  write_panel(out, cols, m.T(), m.H, m.W, zoom);
  std::cout << out.string() << " (" << cols.size() << " columns x " << m.T() << " rows)\n";
  return 0;
}

int fail(const std::string& kind, const std::string& msg, int code) {
  std::cerr << ordered_json{{"error", kind}, {"message", msg}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatiotemporal precipitation super-resolution: train, sample, evaluate, tune"};
  app.require_subcommand(1);

  Overrides train_o, sweep_o;
  std::string in_dir, out_dir, factors, run_dir, grid_path, split = "test";
  std::optional<int> members;
  std::optional<std::uint64_t> seed;
  int index = 0, zoom = 4;
  bool ablation = false;
  double rel_gain = 0.02;

  auto* coarsen = app.add_subcommand("coarsen", "block-average a gridded container by (S, T)");
  coarsen->add_option("--input", in_dir, "input container directory")->required();
  coarsen->add_option("--factors", factors, "SxT")->required();
  coarsen->add_option("--output", out_dir, "output container directory")->required();

  auto* train = app.add_subcommand("train", "train the deterministic and diffusion nets into a run directory");
  add_config_flags(train, train_o);
  train->add_option("--out", out_dir, "run directory")->required();
  train->add_flag("--ablation", ablation, "also train the no-attention ablation for comparison");

  auto* sample = app.add_subcommand("sample", "draw an ensemble for one sample of a trained run");
  sample->add_option("--run", run_dir)->required();
  sample->add_option("--members", members, "ensemble size K");
  sample->add_option("--seed", seed);
  sample->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  sample->add_option("--index", index);

  auto* evaluate = app.add_subcommand("evaluate", "eight-metric comparison against the baselines");
  evaluate->add_option("--run", run_dir)->required();
  evaluate->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  evaluate->add_option("--members", members, "ensemble size K");

  auto* sweep = app.add_subcommand("sweep", "retune L, beta_max and F for one (S, T)");
  add_config_flags(sweep, sweep_o);
  sweep->add_option("--grid", grid_path, "JSON with L, beta_max and F candidate lists")->required();
  sweep->add_option("--out", out_dir, "sweep directory")->required();
  sweep->add_option("--rel-gain", rel_gain, "elbow threshold on relative validation MSE gain");

  auto* plot = app.add_subcommand("plot", "deterministic / members / target panel as a PPM image");
  plot->add_option("--run", run_dir)->required();
  plot->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  plot->add_option("--index", index);
  plot->add_option("--members", members, "ensemble size K");
  plot->add_option("--zoom", zoom, "pixels per grid cell")->check(CLI::Range(1, 32));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", e.what(), 2);
  }

  try {
    if (*coarsen) return cmd_coarsen(in_dir, factors, out_dir);
    if (*train) return cmd_train(train_o, out_dir, ablation);
    if (*sample) return cmd_sample(run_dir, members, seed, split, index);
    if (*evaluate) return cmd_evaluate(run_dir, split, members);
    if (*sweep) return cmd_sweep(sweep_o, grid_path, out_dir, rel_gain);
    if (*plot) return cmd_plot(run_dir, split, index, members, zoom);
  } catch (const ConfigError& e) {
    return fail(e.kind(), e.what(), 2);
  } catch (const Error& e) {
    return fail(e.kind(), e.what(), 1);
  } catch (const json::exception& e) {
    return fail("format", e.what(), 1);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}
