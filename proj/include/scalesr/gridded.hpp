#pragma once

// Gridded container: a directory of raw little-endian float32 arrays
// (row-major, one `<name>.f32` file per variable) described by `meta.json`:
//
//   {"dims": ["time", "y", "x"], "shape": [nt, ny, nx],
//    "variables": ["precip", ...], "units": {"precip": "mm/h"},
//    "missing_value": -9999.0,
//    "static": {"topography": {"shape": [ny, nx], "units": "m"}}}
//
// Static (time-less) variables are optional.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "scalesr/errors.hpp"
#include "scalesr/grid.hpp"

namespace scalesr {

struct GriddedData {
  int nt = 0;
  int ny = 0;
  int nx = 0;
  double missing_value = -9999.0;
  std::vector<std::string> variables;             // ordered
  std::map<std::string, std::string> units;
  std::map<std::string, std::vector<float>> data;  // nt*ny*nx each
  std::map<std::string, std::vector<float>> statics;  // ny*nx each
  std::map<std::string, std::string> static_units;

  std::size_t frame_size() const { return static_cast<std::size_t>(ny) * nx; }

  void add_variable(const std::string& name, std::vector<float> values, const std::string& unit) {
    if (values.size() != frame_size() * nt) throw DimensionError("GriddedData: variable size mismatch for " + name);
    if (!data.contains(name)) variables.push_back(name);
    data[name] = std::move(values);
    units[name] = unit;
  }

  /// Frames of one variable as Fields; missing or negative values become 0.
  std::vector<Field> frames(const std::string& name) const {
    const auto it = data.find(name);
    if (it == data.end()) throw FormatError("GriddedData: no variable " + name);
    std::vector<Field> out;
    out.reserve(nt);
    for (int t = 0; t < nt; ++t) {
      Field f(ny, nx);
      for (std::size_t k = 0; k < frame_size(); ++k) {
        const double v = it->second[t * frame_size() + k];
        f.data()[k] = (v == missing_value || !(v > 0.0)) ? 0.0 : v;
      }
      out.push_back(std::move(f));
    }
    return out;
  }

  static std::vector<float> pack(const std::vector<Field>& frames) {
    std::vector<float> v;
    for (const auto& f : frames)
      for (double x : f.values()) v.push_back(static_cast<float>(x));
    return v;
  }
};

namespace detail {

inline void write_f32(const std::filesystem::path& path, const std::vector<float>& values) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  for (float v : values) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    os.write(reinterpret_cast<const char*>(&bits), 4);
  }
}

inline std::vector<float> read_f32(const std::filesystem::path& path, std::size_t count) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot read " + path.string());
  std::vector<float> out(count);
  for (std::size_t k = 0; k < count; ++k) {
    std::uint32_t bits = 0;
    if (!is.read(reinterpret_cast<char*>(&bits), 4)) throw FormatError("truncated array " + path.string());
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    out[k] = std::bit_cast<float>(bits);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in " + path.string());
  return out;
}

}  // namespace detail

inline void write_gridded(const std::filesystem::path& dir, const GriddedData& g) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["dims"] = {"time", "y", "x"};
  meta["shape"] = {g.nt, g.ny, g.nx};
  meta["variables"] = g.variables;
  meta["units"] = g.units;
  meta["missing_value"] = g.missing_value;
  for (const auto& name : g.variables) detail::write_f32(dir / (name + ".f32"), g.data.at(name));
  if (!g.statics.empty()) {
    nlohmann::json st = nlohmann::json::object();
    for (const auto& [name, values] : g.statics) {
      st[name] = {{"shape", {g.ny, g.nx}}, {"units", g.static_units.contains(name) ? g.static_units.at(name) : ""}};
      detail::write_f32(dir / (name + ".f32"), values);
    }
    meta["static"] = st;
  }
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
}

inline GriddedData read_gridded(const std::filesystem::path& dir) {
  std::ifstream is(dir / "meta.json");
  if (!is) throw FormatError("missing meta.json in " + dir.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("meta.json: ") + e.what());
  }
  GriddedData g;
  try {
    if (meta.at("dims") != nlohmann::json({"time", "y", "x"})) throw FormatError("meta.json: dims must be [time, y, x]");
    const auto shape = meta.at("shape").get<std::vector<int>>();
    if (shape.size() != 3 || shape[0] < 0 || shape[1] <= 0 || shape[2] <= 0) throw FormatError("meta.json: bad shape");
    g.nt = shape[0];
    g.ny = shape[1];
    g.nx = shape[2];
    g.missing_value = meta.value("missing_value", -9999.0);
    g.variables = meta.at("variables").get<std::vector<std::string>>();
    if (meta.contains("units")) g.units = meta["units"].get<std::map<std::string, std::string>>();
    for (const auto& name : g.variables) g.data[name] = detail::read_f32(dir / (name + ".f32"), g.frame_size() * g.nt);
    if (meta.contains("static"))
      for (const auto& [name, info] : meta["static"].items()) {
        g.statics[name] = detail::read_f32(dir / (name + ".f32"), g.frame_size());
        g.static_units[name] = info.value("units", "");
      }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("meta.json: ") + e.what());
  }
  return g;
}

}  // namespace scalesr
