#pragma once

// Two-stage training: the deterministic net first (pixel MSE, conservation
// gate), then the residual diffusion net against a frozen D. Adam with a
// cosine schedule, early stopping on the validation loss, batch gradients
// reduced in sample order so results do not depend on the worker count.

#include <chrono>
#include <climits>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "scalesr/diffusion.hpp"
#include "scalesr/metrics.hpp"
#include "scalesr/model.hpp"
#include "scalesr/parallel.hpp"

namespace scalesr {

struct TrainConfig {
  double lr_init = 1e-4;
  int epochs = 80;
  int patience = 8;
  int batch_size = 8;
  int mc_activation_epoch = 20;
  std::uint64_t seed = 0;
  int fold_id = 0;
  int samples_per_epoch = 0;  // 0: the full training split every epoch
  int val_samples = 0;        // 0: the full validation split
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // global norm, 0 = off
  int workers = 1;

  void validate() const {
    if (!(lr_init > 0.0)) throw ConfigError("TrainConfig: lr_init must be > 0");
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
    if (patience < 1 || patience >= epochs) throw ConfigError("TrainConfig: need 1 <= patience < epochs");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (samples_per_epoch < 0 || val_samples < 0) throw ConfigError("TrainConfig: sample counts must be >= 0");
    if (grad_clip < 0.0) throw ConfigError("TrainConfig: grad_clip must be >= 0");
  }
};

/// lr_init * (1 + cos(pi * epoch / epochs)) / 2, for 0 <= epoch <= epochs.
inline double cosine_lr(int epoch, const TrainConfig& c) {
  if (epoch < 0 || epoch > c.epochs) throw ConfigError("cosine_lr: epoch outside [0, epochs]");
  return c.lr_init * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / c.epochs));
}

/// Adam over a fixed parameter list.
template <class T>
class Adam {
 public:
  Adam(std::vector<ad::Parameter<T>*> params, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), b1_(b1), b2_(b2), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }

  /// One update from the gradients currently stored in the parameters.
  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m[i] = b1_ * m[i] + (1.0 - b1_) * g;
        v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
        p.value[i] = static_cast<T>(p.value[i] - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
      }
    }
  }

  long steps() const noexcept { return t_; }

 private:
  std::vector<ad::Parameter<T>*> params_;
  std::vector<std::vector<double>> m_, v_;
  double b1_, b2_, eps_;
  long t_ = 0;
};

/// Stops once the validation loss has failed to improve for more than
/// `patience` consecutive epochs.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}

  /// Returns true when `loss` is a new best.
  bool update(double loss) {
    if (loss < best_) {
      best_ = loss;
      bad_ = 0;
      return true;
    }
    ++bad_;
    return false;
  }
  bool should_stop() const noexcept { return bad_ > patience_; }
  double best() const noexcept { return best_; }
  int bad_epochs() const noexcept { return bad_; }

 private:
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

struct EpochRecord {
  std::string stage;
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  bool best = false;
  bool conservation = false;  // conservation transform active in training forwards
  double seconds = 0.0;

  nlohmann::ordered_json to_json() const {
    return {{"stage", stage},
            {"epoch", epoch},
            {"lr", lr},
            {"train_loss", train_loss},
            {"val_loss", val_loss},
            {"best", best},
            {"conservation", conservation},
            {"seconds", seconds}};
  }
};

struct RunRecord {
  std::string stage;
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::string stop_reason;  // "completed", "early_stop", "diverged"
  std::string weights;      // checkpoint path, filled in by the caller

  nlohmann::ordered_json summary() const {
    return {{"stage", stage},
            {"summary", true},
            {"epochs_run", epochs.size()},
            {"best_epoch", best_epoch},
            {"best_val_loss", best_val_loss},
            {"stop_reason", stop_reason},
            {"weights", weights}};
  }
};

/// Called after every epoch (e.g. to append record.jsonl).
using EpochHook = std::function<void(const EpochRecord&)>;

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch, int take) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed, 0xe90c, static_cast<std::uint64_t>(epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
  if (take > 0 && static_cast<std::size_t>(take) < n) idx.resize(take);
  return idx;
}

template <class T>
using Sink = typename ad::Tape<T>::GradSink;

/// Mean of per-sample gradients, summed in sample order, written to p->grad.
template <class T>
void reduce_gradients(UNet<T>& net, const std::vector<Sink<T>>& sinks, double clip) {
  const double inv = 1.0 / static_cast<double>(sinks.size());
  double norm2 = 0.0;
  for (auto& p : net.parameters()) {
    std::vector<double> acc(p->value.size(), 0.0);
    for (const auto& s : sinks) {
      const auto it = s.find(p.get());
      if (it == s.end()) continue;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += it->second[i];
    }
    for (std::size_t i = 0; i < acc.size(); ++i) {
      p->grad[i] = static_cast<T>(acc[i] * inv);
      norm2 += static_cast<double>(p->grad[i]) * p->grad[i];
    }
  }
  if (clip > 0.0 && norm2 > clip * clip) {
    const double s = clip / std::sqrt(norm2);
    for (auto& p : net.parameters())
      for (auto& g : p->grad) g = static_cast<T>(g * s);
  }
}

template <class T>
std::vector<std::vector<T>> snapshot(const UNet<T>& net) {
  std::vector<std::vector<T>> out;
  for (const auto& p : net.parameters()) out.push_back(p->value);
  return out;
}

template <class T>
void restore(UNet<T>& net, const std::vector<std::vector<T>>& snap) {
  for (std::size_t k = 0; k < snap.size(); ++k) net.parameters()[k]->value = snap[k];
}

template <class T>
std::vector<ad::Parameter<T>*> param_ptrs(UNet<T>& net) {
  std::vector<ad::Parameter<T>*> out;
  for (auto& p : net.parameters()) out.push_back(p.get());
  return out;
}

inline double finite_or_throw(double loss, const std::string& stage, int epoch, RunRecord& rec) {
  if (!std::isfinite(loss)) {
    rec.stop_reason = "diverged";
    throw DivergenceError(stage + ": non-finite loss at epoch " + std::to_string(epoch));
  }
  return loss;
}

/// Shared epoch loop. `step_loss(sample, epoch, slot, sink)` returns the
/// sample's training loss and fills its gradients; `val_loss()` scores the
/// validation split.
template <class T, class StepFn, class ValFn>
RunRecord run_epochs(const std::string& stage, UNet<T>& net, std::size_t n_train, const TrainConfig& cfg,
                     StepFn&& step_loss, ValFn&& val_loss, const EpochHook& hook = {}, RunRecord* out = nullptr) {
  cfg.validate();
  RunRecord rec;
  rec.stage = stage;
  Adam<T> adam(param_ptrs(net), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  EarlyStopper stopper(cfg.patience);
  auto best = snapshot(net);
  rec.stop_reason = "completed";
  try {
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      const double lr = cosine_lr(epoch, cfg);
      const auto order = epoch_order(n_train, cfg.seed, epoch, cfg.samples_per_epoch);
      double train_acc = 0.0;
      for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
        const std::size_t bn = std::min<std::size_t>(cfg.batch_size, order.size() - b0);
        std::vector<Sink<T>> sinks(bn);
        std::vector<double> losses(bn);
        parallel_for(
            static_cast<int>(bn),
            [&](int k) { losses[k] = step_loss(order[b0 + k], epoch, b0 + k, &sinks[k]); }, cfg.workers);
        for (double l : losses) train_acc += finite_or_throw(l, stage, epoch, rec);
        reduce_gradients(net, sinks, cfg.grad_clip);
        adam.step(lr);
      }
      EpochRecord e;
      e.stage = stage;
      e.epoch = epoch;
      e.lr = lr;
      e.train_loss = train_acc / static_cast<double>(order.size());
      e.val_loss = finite_or_throw(val_loss(epoch), stage, epoch, rec);
      e.conservation = epoch >= cfg.mc_activation_epoch;
      e.best = stopper.update(e.val_loss);
      if (e.best) {
        best = snapshot(net);
        rec.best_epoch = epoch;
        rec.best_val_loss = e.val_loss;
      }
      e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      rec.epochs.push_back(e);
      if (hook) hook(e);
      if (stopper.should_stop()) {
        rec.stop_reason = "early_stop";
        break;
      }
    }
  } catch (const DivergenceError&) {
    if (out) *out = rec;
    throw;
  }
  restore(net, best);
  if (out) *out = rec;
  return rec;
}

template <class Fn>
double parallel_mean(std::size_t n, Fn&& fn, int workers) {
  std::vector<double> v(n);
  parallel_for(static_cast<int>(n), [&](int i) { v[i] = fn(static_cast<std::size_t>(i)); }, workers);
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(std::max<std::size_t>(1, n));
}

// Evenly spaced so a capped validation set still covers every tile.
inline std::vector<std::size_t> val_indices(std::size_t n, const TrainConfig& c) {
  const std::size_t k = c.val_samples > 0 ? std::min<std::size_t>(n, c.val_samples) : n;
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = i * n / k;
  return idx;
}

}  // namespace detail

/// Stage 1. The conservation transform is gated by
/// `cfg.mc_activation_epoch`; validation always scores D as used at
/// inference (transform on). On return the net holds the best-validation
/// weights. Throws DivergenceError on a non-finite loss (`out` receives the
/// partial record).
inline RunRecord train_deterministic(DetModel& model, const std::vector<ModelSample>& train,
                                     const std::vector<ModelSample>& val, const TrainConfig& cfg,
                                     const EpochHook& hook = {}, RunRecord* out = nullptr) {
  if (train.empty() || val.empty()) throw InsufficientDataError("train_deterministic: empty split");
  model.spec.activation_epoch = cfg.mc_activation_epoch;
  const auto vi = detail::val_indices(val.size(), cfg);
  return detail::run_epochs<float>(
      "det", model.net, train.size(), cfg,
      [&](std::size_t i, int epoch, std::size_t, ad::Tape<float>::GradSink* sink) {
        return model.loss_and_grad(train[i], epoch, sink);
      },
      [&](int) {
        return detail::parallel_mean(vi.size(), [&](std::size_t i) { return model.loss(val[vi[i]], INT_MAX); },
                                     cfg.workers);
      },
      hook, out);
}

/// D for every sample, from the frozen deterministic model.
inline std::vector<std::vector<float>> predict_all(const DetModel& det, const std::vector<ModelSample>& samples,
                                                   int workers = worker_count()) {
  std::vector<std::vector<float>> out(samples.size());
  parallel_for(static_cast<int>(samples.size()), [&](int i) { out[i] = det.predict(samples[i]); }, workers);
  return out;
}

/// Per-pixel mean of ||v_hat - v||^2 for one seeded draw of (j, eps).
inline double velocity_loss(const DifModel& dif, const ModelSample& m, std::span<const float> D, Rng& rng,
                            ad::Tape<float>::GradSink* sink, bool grad) {
  return dif.loss_and_grad(m, D, rng, sink, grad) / static_cast<double>(m.target.size());
}

/// Stage 2 against a frozen `det`. Each sample's (j, eps) draw comes from a
/// stream keyed by (seed, epoch, position); validation reuses one fixed draw
/// per sample so epochs are comparable.
/// RMS of y - D over the training set, floored so an exact det fit still
/// leaves a usable scale.
inline float fit_residual_scale(const std::vector<ModelSample>& samples, const std::vector<std::vector<float>>& D) {
  double ss = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t k = 0; k < D[i].size(); ++k) {
      const double r = static_cast<double>(samples[i].target[k]) - D[i][k];
      ss += r * r;
      ++n;
    }
  return static_cast<float>(std::max(n ? std::sqrt(ss / static_cast<double>(n)) : 0.0, 1e-6));
}

inline RunRecord train_diffusion(DifModel& dif, const DetModel& det, const std::vector<ModelSample>& train,
                                 const std::vector<ModelSample>& val, const TrainConfig& cfg,
                                 const EpochHook& hook = {}, RunRecord* out = nullptr) {
  if (train.empty() || val.empty()) throw InsufficientDataError("train_diffusion: empty split");
  const auto d_train = predict_all(det, train, cfg.workers);
  dif.residual_scale = fit_residual_scale(train, d_train);
  const auto vi = detail::val_indices(val.size(), cfg);
  std::vector<ModelSample> vs;
  for (auto i : vi) vs.push_back(val[i]);
  const auto d_val = predict_all(det, vs, cfg.workers);
  return detail::run_epochs<float>(
      "dif", dif.net, train.size(), cfg,
      [&](std::size_t i, int epoch, std::size_t slot, ad::Tape<float>::GradSink* sink) {
        Rng rng(cfg.seed, 0xd1f, static_cast<std::uint64_t>(epoch), slot);
        return velocity_loss(dif, train[i], d_train[i], rng, sink, true);
      },
      [&](int) {
        return detail::parallel_mean(
            vs.size(),
            [&](std::size_t i) {
              Rng rng(cfg.seed, 0x7a1, i);
              return velocity_loss(dif, vs[i], d_val[i], rng, nullptr, false);
            },
            cfg.workers);
      },
      hook, out);
}

// ---------------------------------------------------------------------------
// Evaluation

/// Produces the members for sample `index`.
using Forecaster = std::function<std::vector<std::vector<float>>(const ModelSample&, std::size_t index)>;

/// Mean per-sample MetricReport over `samples`; PIT randomization for sample
/// i draws from (seed, i).
inline MetricReport evaluate(const std::vector<ModelSample>& samples, const Forecaster& forecast, std::uint64_t seed) {
  if (samples.empty()) throw InsufficientDataError("evaluate: no samples");
  MetricAverager avg;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& m = samples[i];
    Rng rng(seed, 0x917, i);
    avg.add(evaluate_forecast(forecast(m, i), m.target, m.T(), m.H, m.W, rng));
  }
  return avg.mean();
}

enum class Interpolation { bicubic, nearest };

/// Upsampled last LR frame, replicated T times.
inline std::vector<float> baseline_prediction(const ModelSample& m, Interpolation kind) {
  if (kind == Interpolation::bicubic) return replicated_bicubic(m);
  const Field up = upsample_nearest(m.lr_last, m.factors);
  std::vector<float> out;
  for (int k = 0; k < m.T(); ++k) out.insert(out.end(), up.data().begin(), up.data().end());
  return out;
}

struct BaselineReports {
  MetricReport bicubic;
  MetricReport nearest;
};

inline BaselineReports run_baselines(const std::vector<ModelSample>& samples, std::uint64_t seed) {
  auto with = [](Interpolation k) -> Forecaster {
    return [k](const ModelSample& m, std::size_t) { return std::vector<std::vector<float>>{baseline_prediction(m, k)}; };
  };
  return {evaluate(samples, with(Interpolation::bicubic), seed), evaluate(samples, with(Interpolation::nearest), seed)};
}

inline Forecaster deterministic_forecaster(const DetModel& det) {
  return [&det](const ModelSample& m, std::size_t) { return std::vector<std::vector<float>>{det.predict(m)}; };
}

/// D from `det`, then K diffusion members keyed by the sample index.
inline Forecaster ensemble_forecaster(const DetModel& det, const DifModel& dif, int K, std::uint64_t seed,
                                      int workers = worker_count()) {
  return [&det, &dif, K, seed, workers](const ModelSample& m, std::size_t index) {
    const auto D = det.predict(m);
    return dif.sample_ensemble(m, D, K, seed, index, workers).members;
  };
}

}  // namespace scalesr
