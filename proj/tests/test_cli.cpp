#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include <json.hpp>

#include "scalesr/gridded.hpp"
#include "scalesr/rng.hpp"

using namespace scalesr;
namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
  static const fs::path d = [] {
    const fs::path p = fs::temp_directory_path() / ("scalesr_cli_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return d;
}

int run(const std::string& args, std::string* err = nullptr) {
  const fs::path e = workdir() / "stderr.txt";
  const std::string cmd = std::string(SCALESR_CLI) + " " + args + " > " + (workdir() / "stdout.txt").string() +
                          " 2> " + e.string();
  const int status = std::system(cmd.c_str());
  if (err) {
    std::ifstream is(e);
    *err = std::string(std::istreambuf_iterator<char>(is), {});
  }
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

// Tiny run: 12x12 tiles at (2, 2), two short epochs per net.
const fs::path& trained_run() {
  static const fs::path dir = [] {
    const fs::path cfg = workdir() / "tiny.json";
    std::ofstream(cfg) << R"({
      "data": {"H": 12, "W": 12, "S": 2, "T": 2, "L": 2, "train_frames": 60, "test_frames": 30, "stride": 3,
               "storms": {"birth_rate": 3.0}},
      "train": {"epochs": 2, "patience": 1, "batch_size": 4, "mc_activation_epoch": 1,
                "samples_per_epoch": 8, "val_samples": 4},
      "net": {"stages": 2, "base_channels": 4, "heads": 2, "groups": 2, "embed_dim": 8},
      "schedule": {"J": 10},
      "diffusion_samples_per_epoch": 8, "members": 2, "eval_samples": 3})";
    const fs::path out = workdir() / "run";
    std::string err;
    const int rc = run("train --config " + cfg.string() + " --seed 4 --ablation --out " + out.string(), &err);
    EXPECT_EQ(rc, 0) << err;
    return out;
  }();
  return dir;
}

}  // namespace

TEST(Cli, CoarsenIdentityKeepsBytesAndBlocksConserveMass) {
  GriddedData g;
  g.nt = 6;
  g.ny = 8;
  g.nx = 8;
  Rng rng(3);
  std::vector<float> v(g.nt * g.frame_size());
  for (auto& x : v) x = rng.uniform() < 0.5 ? 0.0f : static_cast<float>(rng.uniform(0.0, 20.0));
  g.add_variable("precip", v, "mm/h");
  std::vector<float> topo(g.frame_size());
  for (auto& x : topo) x = static_cast<float>(rng.uniform(0.0, 900.0));
  g.statics["topography"] = topo;
  g.static_units["topography"] = "m";
  const fs::path in = workdir() / "hr";
  write_gridded(in, g);

  std::string err;
  ASSERT_EQ(run("coarsen --input " + in.string() + " --factors 1x1 --output " + (workdir() / "same").string(), &err),
            0)
      << err;
  EXPECT_EQ(slurp(workdir() / "same" / "precip.f32"), slurp(in / "precip.f32"));

  ASSERT_EQ(run("coarsen --input " + in.string() + " --factors 2x3 --output " + (workdir() / "lr").string(), &err), 0)
      << err;
  const GriddedData lr = read_gridded(workdir() / "lr");
  EXPECT_EQ(lr.nt, 2);
  EXPECT_EQ(lr.ny, 4);
  EXPECT_EQ(lr.nx, 4);
  double hr = 0.0, low = 0.0;
  for (float x : v) hr += x;
  for (float x : lr.data.at("precip")) low += x;
  EXPECT_NEAR(12.0 * low, hr, 1e-5 * hr);
  EXPECT_EQ(lr.statics.at("topography").size(), 16u);
}

TEST(Cli, TrainEvaluateSamplePlot) {
  const fs::path& dir = trained_run();
  for (const char* f : {"config.json", "record.jsonl", "weights/det.bin", "weights/dif.bin", "weights/det_noattn.bin",
                        "weights/dif_noattn.bin"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto cfg = nlohmann::json::parse(slurp(dir / "config.json"));
  EXPECT_TRUE(cfg.contains("fitted"));

  std::string err;
  ASSERT_EQ(run("evaluate --run " + dir.string() + " --split test", &err), 0) << err;
  const auto m = nlohmann::json::parse(slurp(dir / "metrics.json"));
  for (const char* k : {"full", "deterministic", "no_attention", "bicubic", "nearest"}) {
    ASSERT_TRUE(m["reports"].contains(k)) << k;
    for (const char* metric : {"mse", "mae", "pe99", "lsd", "emd", "ssim", "pitd", "crps"})
      EXPECT_TRUE(m["reports"][k].contains(metric)) << k << "." << metric;
  }

  ASSERT_EQ(run("sample --run " + dir.string() + " --index 1 --members 3 --seed 9", &err), 0) << err;
  const fs::path s = dir / "samples" / "test_1_seed9";
  const std::string first = slurp(s / "member_2.f32");
  ASSERT_FALSE(first.empty());
  EXPECT_NE(first, slurp(s / "member_0.f32"));
  ASSERT_EQ(run("sample --run " + dir.string() + " --index 1 --members 3 --seed 9", &err), 0) << err;
  EXPECT_EQ(slurp(s / "member_2.f32"), first);

  ASSERT_EQ(run("plot --run " + dir.string() + " --index 0 --members 2 --zoom 2", &err), 0) << err;
  std::istringstream ppm(slurp(dir / "plot.ppm"));
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  ppm >> magic >> w >> h >> maxv;
  EXPECT_EQ(magic, "P6");
  EXPECT_EQ(maxv, 255);
  // four columns (D, two members, target) of 24 px and two rows of 24 px, plus gutters
  EXPECT_GT(w, 4 * 24);
  EXPECT_LT(w, 4 * 24 + 5 * 8);
  EXPECT_GT(h, 2 * 24);
  EXPECT_LT(h, 2 * 24 + 3 * 8);
}

TEST(Cli, ErrorsAreJsonWithExitCodes) {
  std::string err;
  EXPECT_EQ(run("train --preset desk --factors 7x2 --out " + (workdir() / "bad").string(), &err), 2);
  const auto j = nlohmann::json::parse(err);
  EXPECT_TRUE(j.contains("error"));
  EXPECT_TRUE(j.contains("message"));
  EXPECT_EQ(run("evaluate --run " + (workdir() / "missing").string(), &err), 1);
  EXPECT_TRUE(nlohmann::json::accept(err));
  EXPECT_EQ(run("sample --run " + trained_run().string() + " --index 100000", &err), 2);
}
