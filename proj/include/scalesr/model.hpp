#pragma once

// Network-ready view of a Sample and the deterministic mean predictor
// D = MC(F(U_det(...)), x).

#include <climits>
#include <span>
#include <vector>

#include "scalesr/conservation.hpp"
#include "scalesr/data.hpp"
#include "scalesr/nets.hpp"

namespace scalesr {

/// Float tensors derived once per Sample. All arrays are row-major planes.
struct ModelSample {
  SRFactors factors;
  int H = 0;
  int W = 0;
  int L = 0;
  int tile_id = 0;
  int time = 0;
  std::vector<float> bicubic;     // L planes: BI(x_l), oldest first
  std::vector<float> topography;  // 1 plane
  std::vector<float> target;      // T planes; empty when unknown
  Field lr_last;                  // x^t
  double lr_mass = 0.0;           // S^2 T sum(x^t)

  std::size_t plane() const { return static_cast<std::size_t>(H) * W; }
  int T() const { return factors.T; }
  std::span<const float> last_bicubic() const {
    return std::span<const float>(bicubic).subspan((L - 1) * plane(), plane());
  }
};

inline ModelSample prepare_sample(const Sample& s) {
  ModelSample m;
  m.factors = s.factors;
  m.L = static_cast<int>(s.lr_context.length());
  m.H = s.topography.height();
  m.W = s.topography.width();
  m.tile_id = s.tile_id;
  m.time = s.time;
  for (const auto& lr : s.lr_context.frames) {
    const Field up = upsample_bicubic(lr, s.factors);
    if (up.height() != m.H || up.width() != m.W) throw DimensionError("prepare_sample: context and topography shapes differ");
    m.bicubic.insert(m.bicubic.end(), up.data().begin(), up.data().end());
  }
  m.topography.assign(s.topography.data().begin(), s.topography.data().end());
  for (const auto& y : s.hr_target.frames) m.target.insert(m.target.end(), y.data().begin(), y.data().end());
  m.lr_last = s.lr_context.back();
  m.lr_mass = static_cast<double>(s.factors.S) * s.factors.S * s.factors.T * m.lr_last.sum();
  return m;
}

/// T copies of BI(x^t): the interpolation baseline and the deterministic
/// net's skip term.
inline std::vector<float> replicated_bicubic(const ModelSample& m) {
  std::vector<float> out;
  for (int k = 0; k < m.T(); ++k) out.insert(out.end(), m.last_bicubic().begin(), m.last_bicubic().end());
  return out;
}

/// U_det followed by the conservation transform. With `bicubic_skip` the net
/// predicts a correction to the replicated bicubic frame rather than the
/// frames themselves.
class DetModel {
 public:
  DetModel(const UNetConfig& cfg, const SRFactors& f, const ConservationSpec& spec, bool bicubic_skip,
           std::uint64_t seed)
      : net(cfg, seed), factors(f), spec(spec), bicubic_skip(bicubic_skip) {
    if (cfg.kind != NetKind::deterministic || cfg.out_frames != f.T)
      throw ConfigError("DetModel: config must be deterministic with T output frames");
  }

  UNet<float> net;
  SRFactors factors;
  ConservationSpec spec;
  bool bicubic_skip = true;

  NetInput<float> input(const ModelSample& m) const {
    if (m.L != net.config().context) throw DimensionError("DetModel: sample context length differs from L");
    NetInput<float> in{m.H, m.W, m.bicubic, 0, {}};
    in.stack.insert(in.stack.end(), m.topography.begin(), m.topography.end());
    return in;
  }

  ad::Var<float> forward(ad::Tape<float>& tape, const ModelSample& m, int epoch) const {
    ad::Var<float> raw = net.forward(tape, input(m));
    if (bicubic_skip) raw = ad::add(tape, raw, tape.constant(raw.shape(), replicated_bicubic(m)));
    return ad::conserve(tape, raw, m.lr_mass, spec, epoch);
  }

  /// D for one sample (conservation active).
  std::vector<float> predict(const ModelSample& m, int epoch = INT_MAX) const {
    ad::Tape<float> tape(false);
    return forward(tape, m, epoch).value();
  }

  /// Pixel-mean squared error against the target; gradients go to `sink`
  /// (or to the parameters when null).
  double loss_and_grad(const ModelSample& m, int epoch, ad::Tape<float>::GradSink* sink) const {
    ad::Tape<float> tape(true);
    auto pred = forward(tape, m, epoch);
    auto sse = ad::sum_squared_error(tape, pred, std::span<const float>(m.target));
    auto loss = ad::scale(tape, sse, 1.0f / static_cast<float>(m.target.size()));
    tape.backward(loss, sink);
    return static_cast<double>(loss.value()[0]);
  }

  double loss(const ModelSample& m, int epoch) const {
    const auto d = predict(m, epoch);
    double acc = 0.0;
    for (std::size_t k = 0; k < d.size(); ++k) acc += (static_cast<double>(d[k]) - m.target[k]) * (static_cast<double>(d[k]) - m.target[k]);
    return acc / static_cast<double>(d.size());
  }
};

}  // namespace scalesr
