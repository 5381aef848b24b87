#pragma once

// Mass-conservation transform: thresholded ReLU around a power function F,
// followed by a single scalar rescale of the T predicted frames so their
// total matches the mass implied by the LR frame.

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scalesr/errors.hpp"
#include "scalesr/grid.hpp"

namespace scalesr {

enum class FFamily { identity, power };

struct ConservationSpec {
  FFamily family = FFamily::identity;
  double exponent = 1.0;
  double threshold_alpha = 0.0;
  bool enabled = true;
  int activation_epoch = 20;

  static ConservationSpec power(double p, double alpha, bool enabled = true, int activation_epoch = 20) {
    return {FFamily::power, p, alpha, enabled, activation_epoch};
  }
  static ConservationSpec identity(double alpha, bool enabled = true, int activation_epoch = 20) {
    return {FFamily::identity, 1.0, alpha, enabled, activation_epoch};
  }

  double effective_exponent() const { return family == FFamily::identity ? 1.0 : exponent; }

  void validate() const {
    if (!(exponent > 0.0)) throw ConfigError("ConservationSpec: exponent must be > 0");
    if (!(threshold_alpha >= 0.0)) throw ConfigError("ConservationSpec: threshold_alpha must be >= 0");
  }

  std::string describe() const {
    const double p = effective_exponent();
    std::string f = p == 1.0 ? "x" : (p == 0.5 ? "sqrt(x)" : "x^" + std::to_string(p));
    return "f: x->" + f + ", alpha=" + std::to_string(threshold_alpha);
  }

  friend bool operator==(const ConservationSpec&, const ConservationSpec&) = default;
};

/// r_a(x) = max(0, x - a)
inline double threshold_relu(double x, double alpha) { return x > alpha ? x - alpha : 0.0; }

/// r_a(F(r_a(x))) for one value.
inline double apply_F_scalar(double x, const ConservationSpec& spec) {
  const double a = spec.threshold_alpha;
  const double u = threshold_relu(x, a);
  const double p = spec.effective_exponent();
  const double fu = (p == 1.0 || u == 0.0) ? u : std::pow(u, p);
  return threshold_relu(fu, a);
}

/// d/dx of apply_F_scalar. Zero wherever either ReLU is inactive.
inline double apply_F_derivative(double x, const ConservationSpec& spec) {
  const double a = spec.threshold_alpha;
  if (!(x > a)) return 0.0;
  const double u = x - a;
  const double p = spec.effective_exponent();
  const double fu = p == 1.0 ? u : std::pow(u, p);
  if (!(fu > a)) return 0.0;
  return p == 1.0 ? 1.0 : p * std::pow(u, p - 1.0);
}

template <class T>
void apply_F_inplace(std::span<T> values, const ConservationSpec& spec) {
  for (auto& v : values) v = static_cast<T>(apply_F_scalar(static_cast<double>(v), spec));
}

/// Eq. (mass conservation) ratio S^2 T sum(lr) / sum(pred); empty when the
/// denominator is exactly zero.
template <class T>
std::optional<double> mass_ratio(std::span<const T> pred, double lr_sum, const SRFactors& f) {
  double denom = 0.0;
  for (T v : pred) denom += static_cast<double>(v);
  if (denom == 0.0) return std::nullopt;
  return static_cast<double>(f.S) * f.S * f.T * lr_sum / denom;
}

/// Rescaled copy of `pred` (T frames); std::nullopt signals the zero-denominator
/// fallback, in which case the caller keeps the ReLU-only output.
inline std::optional<FieldSequence> mass_conserve(const FieldSequence& pred, const Field& lr_frame, const SRFactors& f) {
  pred.validate();
  if (pred.length() != static_cast<std::size_t>(f.T))
    throw ArityError("mass_conserve: prediction must hold T frames");
  if (pred[0].height() != lr_frame.height() * f.S || pred[0].width() != lr_frame.width() * f.S)
    throw DimensionError("mass_conserve: prediction and LR frame shapes are inconsistent with S");
  double denom = 0.0;
  for (const auto& fr : pred.frames) denom += fr.sum();
  if (denom == 0.0) return std::nullopt;
  const double rho = static_cast<double>(f.S) * f.S * f.T * lr_frame.sum() / denom;
  FieldSequence out = pred;
  for (auto& fr : out.frames)
    for (auto& v : fr.data()) v *= rho;
  return out;
}

/// Flat (T x H x W) prediction that may carry negative raw values.
struct RawSequence {
  int T = 0;
  int H = 0;
  int W = 0;
  std::vector<double> values;

  std::size_t frame_size() const { return static_cast<std::size_t>(H) * W; }
  Field frame(int k) const {
    Field f(H, W);
    for (std::size_t p = 0; p < frame_size(); ++p) f.data()[p] = std::max(0.0, values[k * frame_size() + p]);
    return f;
  }
};

struct ConservationResult {
  RawSequence values;  // nonnegative unless the transform was skipped
  bool transformed = false;
  bool fallback = false;
  double ratio = 1.0;
};

/// MC(F(raw), lr). The epoch gate leaves `raw` untouched before
/// activation_epoch; a disabled spec applies F alone when a threshold is set.
inline ConservationResult conserve_pipeline(const RawSequence& raw, const Field& lr_frame, const SRFactors& f,
                                            const ConservationSpec& spec,
                                            int epoch = std::numeric_limits<int>::max()) {
  spec.validate();
  ConservationResult r{raw, false, false, 1.0};
  if (!spec.enabled) {
    if (spec.threshold_alpha > 0.0) {
      apply_F_inplace(std::span<double>(r.values.values), spec);
      r.transformed = true;
    }
    return r;
  }
  if (epoch < spec.activation_epoch) return r;
  if (raw.T != f.T || raw.H != lr_frame.height() * f.S || raw.W != lr_frame.width() * f.S)
    throw DimensionError("conserve_pipeline: raw prediction shape inconsistent with LR frame and factors");
  apply_F_inplace(std::span<double>(r.values.values), spec);
  r.transformed = true;
  const auto rho = mass_ratio(std::span<const double>(r.values.values), lr_frame.sum(), f);
  if (!rho) {
    r.fallback = true;
    return r;
  }
  r.ratio = *rho;
  for (auto& v : r.values.values) v *= *rho;
  return r;
}

inline FieldSequence to_sequence(const RawSequence& raw, int start_time = 0, int tile_id = 0) {
  FieldSequence s;
  s.start_time = start_time;
  s.tile_id = tile_id;
  for (int k = 0; k < raw.T; ++k) s.frames.push_back(raw.frame(k));
  return s;
}

inline RawSequence to_raw(const FieldSequence& seq) {
  RawSequence r;
  r.T = static_cast<int>(seq.length());
  r.H = seq[0].height();
  r.W = seq[0].width();
  for (const auto& f : seq.frames) r.values.insert(r.values.end(), f.data().begin(), f.data().end());
  return r;
}

}  // namespace scalesr
