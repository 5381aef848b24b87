#pragma once

// Residual diffusion: linear beta schedule, forward noising, velocity target,
// the velocity loss and the ancestral reverse sampler. Residuals live in
// normalized precipitation units; conservation is applied after adding D.

#include <cmath>
#include <span>
#include <vector>

#include "scalesr/conservation.hpp"
#include "scalesr/model.hpp"
#include "scalesr/nets.hpp"
#include "scalesr/parallel.hpp"
#include "scalesr/rng.hpp"

namespace scalesr {

/// beta_j = beta_min + (j/J)(beta_max - beta_min), j = 1..J; all accessors
/// take the 1-based step index.
class NoiseSchedule {
 public:
  NoiseSchedule(int J, double beta_min, double beta_max) : J_(J), beta_min_(beta_min), beta_max_(beta_max) {
    if (J < 1) throw ConfigError("NoiseSchedule: J must be >= 1");
    if (!(beta_min > 0.0 && beta_max < 1.0 && beta_min < beta_max))
      throw ConfigError("NoiseSchedule: need 0 < beta_min < beta_max < 1");
    beta_.resize(J + 1);
    alpha_bar_.resize(J + 1);
    alpha_bar_[0] = 1.0;
    for (int j = 1; j <= J; ++j) {
      beta_[j] = j == J ? beta_max : beta_min + (static_cast<double>(j) / J) * (beta_max - beta_min);
      alpha_bar_[j] = alpha_bar_[j - 1] * (1.0 - beta_[j]);
    }
  }

  int J() const noexcept { return J_; }
  double beta_min() const noexcept { return beta_min_; }
  double beta_max() const noexcept { return beta_max_; }
  double beta(int j) const { return beta_.at(check(j)); }
  double alpha(int j) const { return 1.0 - beta(j); }
  double alpha_bar(int j) const { return alpha_bar_.at(check(j)); }
  double sigma(int j) const { return std::sqrt(beta(j)); }

 private:
  int check(int j) const {
    if (j < 1 || j > J_) throw DimensionError("NoiseSchedule: step " + std::to_string(j) + " outside [1, J]");
    return j;
  }
  int J_;
  double beta_min_, beta_max_;
  std::vector<double> beta_, alpha_bar_;
};

namespace detail {
template <class T>
void require_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw DimensionError(std::string(what) + ": size mismatch");
}
}  // namespace detail

/// r_j = sqrt(abar_j) r0 + sqrt(1 - abar_j) eps
template <class T>
std::vector<T> forward_noise(std::span<const T> r0, int j, std::span<const T> eps, const NoiseSchedule& s) {
  detail::require_same<T>(r0.size(), eps.size(), "forward_noise");
  const double a = std::sqrt(s.alpha_bar(j)), b = std::sqrt(1.0 - s.alpha_bar(j));
  std::vector<T> out(r0.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = static_cast<T>(a * r0[k] + b * eps[k]);
  return out;
}

/// v_j = sqrt(abar_j) eps - sqrt(1 - abar_j) r0
template <class T>
std::vector<T> velocity_target(std::span<const T> r0, std::span<const T> eps, int j, const NoiseSchedule& s) {
  detail::require_same<T>(r0.size(), eps.size(), "velocity_target");
  const double a = std::sqrt(s.alpha_bar(j)), b = std::sqrt(1.0 - s.alpha_bar(j));
  std::vector<T> out(r0.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = static_cast<T>(a * eps[k] - b * r0[k]);
  return out;
}

/// eps_hat = sqrt(abar_j) v_hat + sqrt(1 - abar_j) r_j
template <class T>
std::vector<T> recover_epsilon(std::span<const T> v_hat, std::span<const T> r_j, int j, const NoiseSchedule& s) {
  detail::require_same<T>(v_hat.size(), r_j.size(), "recover_epsilon");
  const double a = std::sqrt(s.alpha_bar(j)), b = std::sqrt(1.0 - s.alpha_bar(j));
  std::vector<T> out(r_j.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = static_cast<T>(a * v_hat[k] + b * r_j[k]);
  return out;
}

/// r_{j-1} = (r_j - beta_j / sqrt(1 - abar_j) eps_hat) / sqrt(alpha_j) + sigma_j z,
/// with z ignored at j = 1.
template <class T>
std::vector<T> reverse_step(std::span<const T> r_j, std::span<const T> eps_hat, int j, std::span<const T> z,
                            const NoiseSchedule& s) {
  detail::require_same<T>(r_j.size(), eps_hat.size(), "reverse_step");
  if (j > 1) detail::require_same<T>(r_j.size(), z.size(), "reverse_step");
  const double c = s.beta(j) / std::sqrt(1.0 - s.alpha_bar(j));
  const double inv = 1.0 / std::sqrt(s.alpha(j));
  const double sig = j > 1 ? s.sigma(j) : 0.0;
  std::vector<T> out(r_j.size());
  for (std::size_t k = 0; k < out.size(); ++k)
    out[k] = static_cast<T>((r_j[k] - c * eps_hat[k]) * inv + (j > 1 ? sig * z[k] : 0.0));
  return out;
}

/// Members of one ensemble, each T planes of H x W.
struct EnsembleForecast {
  std::vector<std::vector<float>> members;
  std::vector<float> det_mean;
  std::vector<float> target;
  int T = 0;
  int H = 0;
  int W = 0;
};

/// The residual model U_dif with its schedule. With `predict_noise` the net
/// output is read as eps_hat directly instead of as a velocity.
class DifModel {
 public:
  DifModel(const UNetConfig& cfg, const NoiseSchedule& schedule, const SRFactors& f, const ConservationSpec& spec,
           std::uint64_t seed, bool predict_noise = false)
      : net(cfg, seed), schedule(schedule), factors(f), spec(spec), predict_noise(predict_noise) {
    if (cfg.kind != NetKind::diffusion || cfg.out_frames != f.T || cfg.steps != schedule.J())
      throw ConfigError("DifModel: config must be a diffusion net with T outputs and J steps");
  }

  UNet<float> net;
  NoiseSchedule schedule;
  SRFactors factors;
  ConservationSpec spec;
  bool predict_noise = false;
  // Residuals are divided by this before noising so they are O(1) next to
  // the unit-variance noise; fitted on training residuals.
  float residual_scale = 1.0f;
  // Start the chain from the forward marginal of the zero-mean residual,
  // N(0, (1 - abar_J) I), instead of N(0, I). The two agree once abar_J ~ 0;
  // for a short or gentle schedule this lets the ensemble collapse onto D as
  // beta_max -> 0 rather than keep a unit-variance start.
  bool marginal_prior = true;

  NetInput<float> input(const ModelSample& m, std::span<const float> D, std::span<const float> r_j, int j) const {
    NetInput<float> in{m.H, m.W, {}, j, m.bicubic};
    in.stack.reserve((2 * m.T() + 1) * m.plane());
    in.stack.insert(in.stack.end(), r_j.begin(), r_j.end());
    in.stack.insert(in.stack.end(), m.last_bicubic().begin(), m.last_bicubic().end());
    in.stack.insert(in.stack.end(), D.begin(), D.end());
    return in;
  }

  /// Output of the net read as eps_hat.
  std::vector<float> predict_epsilon(const ModelSample& m, std::span<const float> D, std::span<const float> r_j,
                                     int j) const {
    ad::Tape<float> tape(false);
    const auto out = net.forward(tape, input(m, D, r_j, j)).value();
    if (predict_noise) return out;
    return recover_epsilon<float>(out, r_j, j, schedule);
  }

  /// sum ||v_hat - v||^2 for one draw of (j, eps); gradients go to `sink`.
  double loss_and_grad(const ModelSample& m, std::span<const float> D, Rng& rng,
                       ad::Tape<float>::GradSink* sink, bool grad = true) const {
    std::vector<float> r0(m.target.size()), eps(m.target.size());
    for (std::size_t k = 0; k < r0.size(); ++k) r0[k] = (m.target[k] - D[k]) / residual_scale;
    const int j = rng.uniform_int(1, schedule.J());
    rng.fill_normal(eps);
    const auto rj = forward_noise<float>(r0, j, eps, schedule);
    const auto target = predict_noise ? eps : velocity_target<float>(r0, eps, j, schedule);
    ad::Tape<float> tape(grad);
    auto out = net.forward(tape, input(m, D, rj, j));
    auto loss = ad::sum_squared_error(tape, out, std::span<const float>(target));
    if (grad) tape.backward(loss, sink);
    return static_cast<double>(loss.value()[0]);
  }

  /// One ensemble member: r_J from the prior, J reverse steps,
  /// y = D + scale * r_0, then the conservation transform. Noise for (sample_key, member, step) comes
  /// from its own keyed stream.
  std::vector<float> sample_member(const ModelSample& m, std::span<const float> D, std::uint64_t seed,
                                   std::uint64_t sample_key, int member) const {
    const int J = schedule.J();
    std::vector<float> r(D.size());
    Rng init(seed, sample_key, static_cast<std::uint64_t>(member), static_cast<std::uint64_t>(J + 1));
    init.fill_normal(r);
    if (marginal_prior) {
      const float sd = static_cast<float>(std::sqrt(1.0 - schedule.alpha_bar(J)));
      for (auto& v : r) v *= sd;
    }
    std::vector<float> z(D.size());
    for (int j = J; j >= 1; --j) {
      const auto eps_hat = predict_epsilon(m, D, r, j);
      if (j > 1) {
        Rng step(seed, sample_key, static_cast<std::uint64_t>(member), static_cast<std::uint64_t>(j));
        step.fill_normal(z);
      }
      r = reverse_step<float>(r, eps_hat, j, z, schedule);
    }
    RawSequence y{m.T(), m.H, m.W, std::vector<double>(D.size())};
    const double scale = residual_scale;
    for (std::size_t k = 0; k < D.size(); ++k) y.values[k] = static_cast<double>(D[k]) + scale * r[k];
    const auto res = conserve_pipeline(y, m.lr_last, factors, spec);
    std::vector<float> out(D.size());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = static_cast<float>(std::max(0.0, res.values.values[k]));
    return out;
  }

  EnsembleForecast sample_ensemble(const ModelSample& m, std::span<const float> D, int K, std::uint64_t seed,
                                   std::uint64_t sample_key, int workers = worker_count()) const {
    if (K < 1) throw ConfigError("sample_ensemble: K must be >= 1");
    EnsembleForecast e{std::vector<std::vector<float>>(K), std::vector<float>(D.begin(), D.end()), m.target, m.T(), m.H,
                       m.W};
    parallel_for(K, [&](int k) { e.members[k] = sample_member(m, D, seed, sample_key, k); }, workers);
    return e;
  }
};

}  // namespace scalesr
