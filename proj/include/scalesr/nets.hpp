#pragma once

// The two U-Nets. The deterministic net runs a shared encoder over the L
// context frames ([BI(x_l), M] per frame) with temporal and windowed spatial
// attention, and decodes the last-frame features into T output channels. The
// diffusion net sees [r_j, BI(x^t), D] as one frame, adds a learned step
// embedding in every encoder stage and cross-attends to the bicubic context.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>
#include <tuple>
#include <vector>

#include "scalesr/attention.hpp"
#include "scalesr/autodiff.hpp"
#include "scalesr/errors.hpp"
#include "scalesr/ops.hpp"
#include "scalesr/rng.hpp"

namespace scalesr {

enum class NetKind { deterministic, diffusion };

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct UNetConfig {
  NetKind kind = NetKind::deterministic;
  int context = 1;     // L
  int out_frames = 1;  // T
  int stages = 4;
  int base_channels = 16;
  std::vector<int> channel_mult{1, 2, 2, 4, 4};
  std::vector<int> window_sizes{3, 3, 1, 1, 1};
  int heads = 4;
  int groups = 8;
  bool attention = true;
  ad::PadMode pad = ad::PadMode::zeros;
  int embed_dim = 128;
  int steps = 200;  // J

  static UNetConfig deterministic(int L, int T) {
    UNetConfig c;
    c.kind = NetKind::deterministic;
    c.context = L;
    c.out_frames = T;
    return c;
  }
  static UNetConfig diffusion(int L, int T, int J) {
    UNetConfig c;
    c.kind = NetKind::diffusion;
    c.context = L;
    c.out_frames = T;
    c.steps = J;
    return c;
  }

  int channels(int stage) const { return base_channels * channel_mult.at(stage); }

  /// Channels of the net's input stack: L + 1 for the deterministic net,
  /// 2T + 1 for the diffusion net.
  int in_channels() const { return kind == NetKind::deterministic ? context + 1 : 2 * out_frames + 1; }

  /// Channels of one encoder input frame.
  int frame_channels() const {
    return kind == NetKind::deterministic ? 2 : 2 * out_frames + 1;
  }

  void validate() const {
    if (stages < 1) throw ConfigError("UNetConfig: stages must be >= 1");
    if (static_cast<int>(window_sizes.size()) != stages + 1)
      throw ConfigError("UNetConfig: window_sizes must have stages + 1 entries");
    if (static_cast<int>(channel_mult.size()) != stages + 1)
      throw ConfigError("UNetConfig: channel_mult must have stages + 1 entries");
    if (context < 1 || out_frames < 1) throw ConfigError("UNetConfig: context and out_frames must be >= 1");
    if (base_channels < 1 || heads < 1 || groups < 1) throw ConfigError("UNetConfig: channels, heads, groups must be positive");
    for (int s = 0; s <= stages; ++s) {
      if (channel_mult[s] < 1) throw ConfigError("UNetConfig: channel_mult entries must be positive");
      if (window_sizes[s] < 0) throw ConfigError("UNetConfig: window sizes must be >= 0");
      if (channels(s) % heads != 0) throw ConfigError("UNetConfig: heads must divide attention width");
      if (channels(s) % groups != 0) throw ConfigError("UNetConfig: groups must divide channels");
    }
    if (kind == NetKind::diffusion && (steps < 1 || embed_dim < 1))
      throw ConfigError("UNetConfig: diffusion net needs steps and embed_dim >= 1");
  }

  std::string canonical() const {
    std::string s = kind == NetKind::deterministic ? "det" : "dif";
    s += ";L=" + std::to_string(context) + ";T=" + std::to_string(out_frames) + ";stages=" + std::to_string(stages) +
         ";base=" + std::to_string(base_channels) + ";mult=";
    for (int m : channel_mult) s += std::to_string(m) + ",";
    s += ";win=";
    for (int w : window_sizes) s += std::to_string(w) + ",";
    s += ";heads=" + std::to_string(heads) + ";groups=" + std::to_string(groups) +
         ";attn=" + std::to_string(attention) + ";pad=" + std::to_string(static_cast<int>(pad));
    if (kind == NetKind::diffusion) s += ";embed=" + std::to_string(embed_dim) + ";J=" + std::to_string(steps);
    return s;
  }
  std::uint64_t hash() const { return fnv1a(canonical()); }
};

/// Closed-form trainable parameter count of a UNetConfig.
inline std::size_t parameter_count(const UNetConfig& c) {
  c.validate();
  auto conv = [](std::size_t co, std::size_t ci, std::size_t k) { return co * ci * k * k + co; };
  auto attn_block = [](std::size_t ch) { return 2 * ch + 4 * (ch * ch + ch); };
  const bool det = c.kind == NetKind::deterministic;
  const std::size_t L = c.context, E = c.embed_dim;
  std::size_t n = 0;
  std::size_t prev = c.frame_channels();
  for (int s = 0; s <= c.stages; ++s) {
    const std::size_t ch = c.channels(s);
    n += conv(ch, prev, 3) + 2 * ch + conv(ch, ch, 3) + 2 * ch;
    if (!det) n += ch * E + ch;
    if (c.attention) {
      n += attn_block(ch);  // windowed spatial
      n += det ? attn_block(ch) + L * ch : attn_block(ch) + conv(ch, 1, 1) + L * ch;
    }
    prev = ch;
  }
  for (int s = c.stages - 1; s >= 0; --s) {
    const std::size_t ch = c.channels(s);
    n += conv(ch, prev, 3) + conv(ch, 2 * ch, 3) + 2 * ch;
    prev = ch;
  }
  n += conv(c.out_frames, prev, 1);
  if (!det) n += static_cast<std::size_t>(c.steps) * E + E * E + E;
  return n;
}

/// Data fed to UNet::forward. `stack` is channel-major (in_channels, H, W):
/// deterministic [BI(x_1) .. BI(x_L), M]; diffusion [r_j (T), BI(x^t), D (T)].
/// `context` holds BI(x(L)) as (L, H, W) for the diffusion net.
template <class T>
struct NetInput {
  int H = 0;
  int W = 0;
  std::vector<T> stack;
  int step = 0;
  std::vector<T> context;
};

template <class T>
class UNet {
 public:
  using P = ad::Parameter<T>;
  using V = ad::Var<T>;

  UNet(const UNetConfig& config, std::uint64_t seed) : cfg_(config) {
    cfg_.validate();
    build(seed);
  }

  const UNetConfig& config() const noexcept { return cfg_; }
  std::vector<std::unique_ptr<P>>& parameters() noexcept { return params_; }
  const std::vector<std::unique_ptr<P>>& parameters() const noexcept { return params_; }
  P& param(const std::string& name) { return *params_.at(index_.at(name)); }
  const P& param(const std::string& name) const { return *params_.at(index_.at(name)); }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  /// Raw (unconstrained) output, shape (1, T, H, W).
  V forward(ad::Tape<T>& tape, const NetInput<T>& in) const {
    const int H = in.H, W = in.W;
    if (H < 1 || W < 1 || in.stack.size() != static_cast<std::size_t>(cfg_.in_channels()) * H * W)
      throw DimensionError("UNet::forward: input stack must hold " + std::to_string(cfg_.in_channels()) +
                           " channels of " + std::to_string(H) + "x" + std::to_string(W));
    const bool det = cfg_.kind == NetKind::deterministic;
    const std::size_t plane = static_cast<std::size_t>(H) * W;

    Bound b{tape, {}, this};
    for (const auto& p : params_) b.vars.push_back(tape.param(*p));

    V h;
    if (det) {
      // (n, 2, H, W): each context frame paired with the static field. Without
      // temporal attention nothing mixes frames, so only the last one is run.
      const int L = cfg_.context, first = cfg_.attention ? 0 : L - 1, n = L - first;
      std::vector<T> frames(static_cast<std::size_t>(n) * 2 * plane);
      for (int l = 0; l < n; ++l) {
        std::copy_n(in.stack.begin() + (first + l) * plane, plane, frames.begin() + (2 * l) * plane);
        std::copy_n(in.stack.begin() + L * plane, plane, frames.begin() + (2 * l + 1) * plane);
      }
      h = tape.constant({n, 2, H, W}, std::move(frames));
    } else {
      h = tape.constant({1, cfg_.in_channels(), H, W}, in.stack);
    }

    V emb, ctx;
    if (!det) {
      if (in.step < 1 || in.step > cfg_.steps) throw DimensionError("UNet::forward: step out of range");
      emb = ad::embedding_row(tape, b("step.table"), in.step - 1);
      emb = ad::silu(tape, conv1x1(b, emb, "step.lin"));
      if (cfg_.attention) {
        if (in.context.size() != static_cast<std::size_t>(cfg_.context) * plane)
          throw DimensionError("UNet::forward: context must hold L frames");
        ctx = tape.constant({cfg_.context, 1, H, W}, in.context);
      }
    }

    std::vector<V> skips;
    for (int s = 0; s <= cfg_.stages; ++s) {
      const std::string pre = stage_name(s);
      h = ad::conv2d(tape, h, b(pre + ".conv1.w"), b(pre + ".conv1.b"), s == 0 ? 1 : 2, 1, cfg_.pad);
      h = ad::group_norm(tape, h, b(pre + ".gn1.g"), b(pre + ".gn1.b"), cfg_.groups);
      if (!det) h = ad::add_channel_bias(tape, h, conv1x1(b, emb, pre + ".emb"));
      h = ad::silu(tape, h);
      h = ad::conv2d(tape, h, b(pre + ".conv2.w"), b(pre + ".conv2.b"), 1, 1, cfg_.pad);
      h = ad::silu(tape, ad::group_norm(tape, h, b(pre + ".gn2.g"), b(pre + ".gn2.b"), cfg_.groups));
      if (cfg_.attention) {
        const Shape s_ = h.shape();
        if (det)
          h = attention_block(b, h, pre + ".tattn", index(IndexKind::temporal, s_.n, s_.h, s_.w, 0), V());
        h = attention_block(b, h, pre + ".wattn", index(IndexKind::window, s_.n, s_.h, s_.w, cfg_.window_sizes[s]), V());
        if (!det) {
          V c = ad::adaptive_avg_pool(tape, ctx, s_.h, s_.w);
          c = conv1x1(b, c, pre + ".xattn.ctx");
          c = ad::add_channel_bias(tape, c, b(pre + ".xattn.pos"));
          h = attention_block(b, h, pre + ".xattn", index(IndexKind::cross, cfg_.context, s_.h, s_.w, 0), c);
        }
      }
      // The encoder carries all L frames; skips and the bottleneck output
      // keep only the last-frame slot.
      V last = h.shape().n > 1 ? ad::slice_frames(tape, h, h.shape().n - 1, 1) : h;
      if (s < cfg_.stages) skips.push_back(last);
      else h = last;
    }
    for (int s = cfg_.stages - 1; s >= 0; --s) {
      const std::string pre = "dec" + std::to_string(s);
      const V& skip = skips[s];
      h = ad::resize_nearest(tape, h, skip.shape().h, skip.shape().w);
      h = ad::conv2d(tape, h, b(pre + ".up.w"), b(pre + ".up.b"), 1, 1, cfg_.pad);
      h = ad::concat_channels(tape, h, skip);
      h = ad::conv2d(tape, h, b(pre + ".conv.w"), b(pre + ".conv.b"), 1, 1, cfg_.pad);
      h = ad::silu(tape, ad::group_norm(tape, h, b(pre + ".gn.g"), b(pre + ".gn.b"), cfg_.groups));
    }
    return conv1x1(b, h, "out");
  }

  /// Copies values (not gradients) from another net of the same config.
  void copy_from(const UNet& other) {
    if (other.cfg_.hash() != cfg_.hash()) throw ConfigError("UNet::copy_from: config mismatch");
    for (std::size_t k = 0; k < params_.size(); ++k) params_[k]->value = other.params_[k]->value;
  }

  // Weight file: "SSRW", u32 version, u64 config hash, u32 count, then per
  // parameter {u32 name length, name, 4 x i32 shape}, then all values as
  // little-endian float32 in manifest order.
  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("UNet::save: cannot open " + path.string());
    out.write("SSRW", 4);
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, cfg_.hash());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(params_.size()));
    for (const auto& p : params_) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
      out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
      for (int d : {p->shape.n, p->shape.c, p->shape.h, p->shape.w}) put<std::int32_t>(out, d);
    }
    for (const auto& p : params_)
      for (T v : p->value) put<float>(out, static_cast<float>(v));
    if (!out) throw FormatError("UNet::save: write failed for " + path.string());
  }

  void load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("UNet::load: cannot open " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "SSRW", 4) != 0) throw FormatError("UNet::load: bad magic in " + path.string());
    if (get<std::uint32_t>(in) != kVersion) throw FormatError("UNet::load: unsupported version");
    if (get<std::uint64_t>(in) != cfg_.hash()) throw ConfigError("UNet::load: config hash mismatch for " + path.string());
    const auto count = get<std::uint32_t>(in);
    if (count != params_.size()) throw FormatError("UNet::load: parameter count mismatch");
    for (const auto& p : params_) {
      const auto len = get<std::uint32_t>(in);
      if (len > 4096) throw FormatError("UNet::load: corrupt manifest");
      std::string name(len, '\0');
      in.read(name.data(), len);
      ad::Shape s;
      s.n = get<std::int32_t>(in);
      s.c = get<std::int32_t>(in);
      s.h = get<std::int32_t>(in);
      s.w = get<std::int32_t>(in);
      if (name != p->name || !(s == p->shape)) throw FormatError("UNet::load: manifest mismatch at " + p->name);
    }
    std::vector<std::vector<T>> values;
    for (const auto& p : params_) {
      std::vector<T> v(p->value.size());
      for (auto& x : v) {
        const float f = get<float>(in);
        if (!std::isfinite(f)) throw FormatError("UNet::load: non-finite weight in " + p->name);
        x = static_cast<T>(f);
      }
      values.push_back(std::move(v));
    }
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError("UNet::load: trailing bytes");
    for (std::size_t k = 0; k < params_.size(); ++k) params_[k]->value = std::move(values[k]);
  }

 private:
  using Shape = ad::Shape;
  static constexpr std::uint32_t kVersion = 1;

  struct Bound {
    ad::Tape<T>& tape;
    std::vector<V> vars;
    const UNet* net = nullptr;
    V operator()(const std::string& name) const { return vars.at(net->index_.at(name)); }
  };

  enum class IndexKind { temporal, window, cross };

  static std::string stage_name(int s) { return "enc" + std::to_string(s); }

  template <class U>
  static void put(std::ostream& out, U v) {
    static_assert(std::endian::native == std::endian::little);
    out.write(reinterpret_cast<const char*>(&v), sizeof(U));
  }
  template <class U>
  static U get(std::istream& in) {
    U v;
    in.read(reinterpret_cast<char*>(&v), sizeof(U));
    if (!in) throw FormatError("UNet::load: truncated file");
    return v;
  }

  V conv1x1(const Bound& b, V x, const std::string& pre) const {
    return ad::conv2d(b.tape, x, b(pre + ".w"), b(pre + ".b"), 1, 0);
  }

  /// x + W_o attention(W_q n(x), W_k n(kv), W_v n(kv)), where kv is x itself
  /// unless a context tensor is given.
  V attention_block(const Bound& b, V x, const std::string& pre, std::shared_ptr<const ad::AttentionIndex> idx,
                    V context) const {
    auto& tape = b.tape;
    V h = ad::group_norm(tape, x, b(pre + ".gn.g"), b(pre + ".gn.b"), cfg_.groups);
    V src = context;
    if (!context) {
      if (index_.contains(pre + ".pos")) h = ad::add_channel_bias(tape, h, b(pre + ".pos"));
      src = h;
    }
    V a = ad::attention(tape, conv1x1(b, h, pre + ".q"), conv1x1(b, src, pre + ".k"), conv1x1(b, src, pre + ".v"),
                        cfg_.heads, std::move(idx));
    return ad::add(tape, x, conv1x1(b, a, pre + ".o"));
  }

  std::shared_ptr<const ad::AttentionIndex> index(IndexKind kind, int n, int h, int w, int radius) const {
    std::lock_guard lock(cache_mutex_);
    auto key = std::make_tuple(static_cast<int>(kind), n, h, w, radius);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    ad::AttentionIndex idx;
    switch (kind) {
      case IndexKind::temporal: idx = ad::temporal_index(n, h * w); break;
      case IndexKind::window: idx = ad::window_index(n, h, w, radius, cfg_.pad); break;
      case IndexKind::cross: idx = ad::cross_index(n, h * w); break;
    }
    auto ptr = std::make_shared<const ad::AttentionIndex>(std::move(idx));
    cache_.emplace(key, ptr);
    return ptr;
  }

  P& add_param(const std::string& name, Shape s) {
    if (index_.contains(name)) throw ConfigError("UNet: duplicate parameter " + name);
    index_[name] = params_.size();
    params_.push_back(std::make_unique<P>(name, s));
    return *params_.back();
  }

  /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias; each parameter
  /// draws from its own keyed stream so construction order does not matter.
  void add_conv(const std::string& pre, int cout, int cin, int k, std::uint64_t seed, bool zero = false) {
    P& w = add_param(pre + ".w", {cout, cin, k, k});
    P& bb = add_param(pre + ".b", {1, cout, 1, 1});
    if (zero) return;
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
    Rng rw(seed, fnv1a(w.name)), rb(seed, fnv1a(bb.name));
    for (auto& v : w.value) v = static_cast<T>(rw.uniform(-bound, bound));
    for (auto& v : bb.value) v = static_cast<T>(rb.uniform(-bound, bound));
  }

  void add_gn(const std::string& pre, int c) {
    P& g = add_param(pre + ".g", {1, c, 1, 1});
    std::fill(g.value.begin(), g.value.end(), T(1));
    add_param(pre + ".b", {1, c, 1, 1});
  }

  void add_attention(const std::string& pre, int c, std::uint64_t seed) {
    add_gn(pre + ".gn", c);
    for (const char* p : {".q", ".k", ".v", ".o"}) add_conv(pre + p, c, c, 1, seed);
  }

  void build(std::uint64_t seed) {
    const bool det = cfg_.kind == NetKind::deterministic;
    const int E = cfg_.embed_dim;
    if (!det) {
      // Learned table initialised with the sinusoidal code of each step.
      P& table = add_param("step.table", {cfg_.steps, E, 1, 1});
      for (int j = 0; j < cfg_.steps; ++j)
        for (int i = 0; i < E / 2; ++i) {
          const double freq = std::exp(-std::log(10000.0) * i / std::max(1, E / 2));
          table.value[j * E + i] = static_cast<T>(std::sin((j + 1) * freq));
          table.value[j * E + E / 2 + i] = static_cast<T>(std::cos((j + 1) * freq));
        }
      add_conv("step.lin", E, E, 1, seed);
    }
    int prev = cfg_.frame_channels();
    for (int s = 0; s <= cfg_.stages; ++s) {
      const std::string pre = stage_name(s);
      const int c = cfg_.channels(s);
      add_conv(pre + ".conv1", c, prev, 3, seed);
      add_gn(pre + ".gn1", c);
      if (!det) add_conv(pre + ".emb", c, E, 1, seed);
      add_conv(pre + ".conv2", c, c, 3, seed);
      add_gn(pre + ".gn2", c);
      if (cfg_.attention) {
        if (det) {
          add_attention(pre + ".tattn", c, seed);
          add_param(pre + ".tattn.pos", {cfg_.context, c, 1, 1});
        }
        add_attention(pre + ".wattn", c, seed);
        if (!det) {
          add_attention(pre + ".xattn", c, seed);
          add_conv(pre + ".xattn.ctx", c, 1, 1, seed);
          add_param(pre + ".xattn.pos", {cfg_.context, c, 1, 1});
        }
      }
      prev = c;
    }
    for (int s = cfg_.stages - 1; s >= 0; --s) {
      const std::string pre = "dec" + std::to_string(s);
      const int c = cfg_.channels(s);
      add_conv(pre + ".up", c, prev, 3, seed);
      add_conv(pre + ".conv", c, 2 * c, 3, seed);
      add_gn(pre + ".gn", c);
      prev = c;
    }
    add_conv("out", cfg_.out_frames, prev, 1, seed, /*zero=*/true);
  }

  UNetConfig cfg_;
  std::vector<std::unique_ptr<P>> params_;
  std::map<std::string, std::size_t> index_;
  mutable std::mutex cache_mutex_;
  mutable std::map<std::tuple<int, int, int, int, int>, std::shared_ptr<const ad::AttentionIndex>> cache_;

  friend struct Bound;
};

}  // namespace scalesr
