#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "diar/convert.hpp"
#include "diar/datagen.hpp"
#include "diar/error.hpp"
#include "diar/image.hpp"
#include "diar/optim.hpp"
#include "diar/rng.hpp"
#include "diar/tensor.hpp"

namespace diar {

// ---------------------------------------------------------------------------
// Windows

/// Temporal extent p and spatial extent m of an attention window.
struct WindowSpec {
  std::size_t p = 2;
  std::size_t m = 7;
  bool shifted = false;
};

/// Index plan for one window partition of a T×H×W token grid (row-major
/// token index (t·H + y)·W + x). Each axis is replicate-padded to a multiple
/// of its window, then cyclically rolled by the shift. An axis whose extent
/// does not exceed the window uses the whole extent as its window and no
/// shift.
struct WindowLayout {
  std::array<std::size_t, 3> extent{}, window{}, shift{}, padded{};
  std::size_t windows = 0, tokens_per_window = 0;
  std::vector<std::size_t> gather;  // windowed row → source token
  std::vector<std::uint8_t> is_pad;  // per windowed row
  std::vector<std::size_t> inverse;  // source token → windowed row
  std::vector<std::uint8_t> blocked;  // windows × L × L, query-major

  bool masked(std::size_t w, std::size_t q, std::size_t k) const {
    return blocked[(w * tokens_per_window + q) * tokens_per_window + k] != 0;
  }
};

inline WindowLayout window_layout(std::size_t t, std::size_t h, std::size_t w, const WindowSpec& spec) {
  if (spec.p < 1 || spec.m < 1) throw ConfigError("window extents must be >= 1");
  if (t < 1 || h < 1 || w < 1) throw ShapeError("window_layout: empty token grid");
  WindowLayout lay;
  lay.extent = {t, h, w};
  const std::array<std::size_t, 3> requested{spec.p, spec.m, spec.m};
  for (std::size_t a = 0; a < 3; ++a) {
    const std::size_t n = lay.extent[a];
    lay.window[a] = std::min(requested[a], n);
    lay.shift[a] = (spec.shifted && requested[a] < n) ? requested[a] / 2 : 0;
    lay.padded[a] = (n + lay.window[a] - 1) / lay.window[a] * lay.window[a];
  }
  const auto& pw = lay.window;
  const auto& pp = lay.padded;
  const std::array<std::size_t, 3> count{pp[0] / pw[0], pp[1] / pw[1], pp[2] / pw[2]};
  lay.windows = count[0] * count[1] * count[2];
  lay.tokens_per_window = pw[0] * pw[1] * pw[2];
  const std::size_t L = lay.tokens_per_window;
  lay.gather.resize(lay.windows * L);
  lay.is_pad.resize(lay.windows * L);
  lay.inverse.assign(t * h * w, std::numeric_limits<std::size_t>::max());
  std::vector<std::array<std::uint8_t, 3>> region(lay.windows * L);
  std::size_t row = 0;
  for (std::size_t wt = 0; wt < count[0]; ++wt)
    for (std::size_t wy = 0; wy < count[1]; ++wy)
      for (std::size_t wx = 0; wx < count[2]; ++wx)
        for (std::size_t it = 0; it < pw[0]; ++it)
          for (std::size_t iy = 0; iy < pw[1]; ++iy)
            for (std::size_t ix = 0; ix < pw[2]; ++ix, ++row) {
              const std::array<std::size_t, 3> r{wt * pw[0] + it, wy * pw[1] + iy, wx * pw[2] + ix};
              std::array<std::size_t, 3> src{};
              bool pad = false;
              for (std::size_t a = 0; a < 3; ++a) {
                const std::size_t s = (r[a] + lay.shift[a]) % pp[a];
                pad = pad || s >= lay.extent[a];
                src[a] = std::min(s, lay.extent[a] - 1);
                region[row][a] = (lay.shift[a] > 0 && r[a] >= pp[a] - lay.shift[a]) ? 1 : 0;
              }
              const std::size_t token = (src[0] * h + src[1]) * w + src[2];
              lay.gather[row] = token;
              lay.is_pad[row] = pad ? 1 : 0;
              if (!pad) lay.inverse[token] = row;
            }
  lay.blocked.assign(lay.windows * L * L, 0);
  for (std::size_t wi = 0; wi < lay.windows; ++wi)
    for (std::size_t q = 0; q < L; ++q)
      for (std::size_t k = 0; k < L; ++k) {
        const std::size_t rq = wi * L + q, rk = wi * L + k;
        lay.blocked[(wi * L + q) * L + k] = (lay.is_pad[rk] || region[rq] != region[rk]) ? 1 : 0;
      }
  return lay;
}

/// tokens [T·H·W, C] → windows [n_windows, L, C].
template <typename T>
Var<T> window_partition(const Var<T>& tokens, const WindowLayout& lay) {
  const std::size_t c = tokens.shape().back();
  return reshape(gather_rows(tokens, lay.gather), Shape{lay.windows, lay.tokens_per_window, c});
}

/// windows [n_windows, L, C] → tokens [T·H·W, C]; pad rows are dropped.
template <typename T>
Var<T> window_reverse(const Var<T>& windows, const WindowLayout& lay) {
  const std::size_t c = windows.shape().back();
  return gather_rows(reshape(windows, Shape{lay.windows * lay.tokens_per_window, c}), lay.inverse);
}

inline constexpr double kMaskBias = -1e9;

// ---------------------------------------------------------------------------
// Model

enum class ModelKind { deep_sets, diar };
enum class AggregationMode { avg_x, avg_e, softmax_weighted };

inline std::string to_string(ModelKind k) { return k == ModelKind::deep_sets ? "deep_sets" : "diar"; }

inline std::string to_string(AggregationMode m) {
  switch (m) {
    case AggregationMode::avg_x: return "avg_x";
    case AggregationMode::avg_e: return "avg_e";
    default: return "softmax_weighted";
  }
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "deep_sets") return ModelKind::deep_sets;
  if (s == "diar") return ModelKind::diar;
  throw ConfigError("unknown model '" + s + "' (valid: deep_sets, diar)");
}

inline AggregationMode parse_aggregation(const std::string& s) {
  if (s == "avg_x") return AggregationMode::avg_x;
  if (s == "avg_e") return AggregationMode::avg_e;
  if (s == "softmax_weighted") return AggregationMode::softmax_weighted;
  throw ConfigError("unknown aggregation mode '" + s + "' (valid: avg_x, avg_e, softmax_weighted)");
}

struct ModelConfig {
  std::string kind = "diar";
  std::string mode = "softmax_weighted";
  std::size_t image_channels = 3;
  std::size_t stem_width = 8;
  std::size_t mid_width = 16;
  std::size_t latent_width = 64;
  std::size_t heads = 4;
  std::size_t mlp_expansion = 2;
  std::size_t window_t = 2;
  std::size_t window_s = 7;
  std::uint64_t seed = 0;

  void validate() const {
    parse_model_kind(kind);
    parse_aggregation(mode);
    if (image_channels < 1 || stem_width < 1 || mid_width < 1 || latent_width < 1 || mlp_expansion < 1) {
      throw ConfigError("model widths must be >= 1");
    }
    if (heads < 1 || latent_width % heads != 0) throw ConfigError("latent width must be divisible by the head count");
    if (window_t < 1 || window_s < 1) throw ConfigError("window extents must be >= 1");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, kind, mode, image_channels, stem_width, mid_width,
                                                latent_width, heads, mlp_expansion, window_t, window_s, seed)

namespace detail {

inline void add_conv(ParamStore<float>& s, Rng& rng, const std::string& name, std::size_t co, std::size_t ci,
                     std::size_t k) {
  s.add(name + ".w", he_uniform<float>(Shape{co, ci, k, k}, ci * k * k, rng));
  s.add(name + ".b", Tensor<float>(Shape{co}));
}

inline void add_linear(ParamStore<float>& s, Rng& rng, const std::string& name, std::size_t in, std::size_t out) {
  s.add(name + ".w", he_uniform<float>(Shape{in, out}, in, rng));
  s.add(name + ".b", Tensor<float>(Shape{out}));
}

inline void add_norm(ParamStore<float>& s, const std::string& name, std::size_t n) {
  s.add(name + ".g", Tensor<float>(Shape{n}, 1.0f));
  s.add(name + ".b", Tensor<float>(Shape{n}));
}

inline void add_res_block(ParamStore<float>& s, Rng& rng, const std::string& name, std::size_t ci, std::size_t co) {
  add_conv(s, rng, name + ".c1", co, ci, 3);
  add_conv(s, rng, name + ".c2", co, co, 3);
  add_conv(s, rng, name + ".skip", co, ci, 1);
}

}  // namespace detail

struct DiarModel {
  ModelConfig config;
  ParamStore<float> params;

  ModelKind kind() const { return parse_model_kind(config.kind); }
  AggregationMode mode() const { return parse_aggregation(config.mode); }

  static DiarModel create(const ModelConfig& cfg) {
    cfg.validate();
    DiarModel m{cfg, {}};
    Rng rng(derive_seed(cfg.seed, 0x30de1));
    auto& s = m.params;
    const std::size_t c = cfg.latent_width;
    detail::add_conv(s, rng, "enc.stem", cfg.stem_width, cfg.image_channels, 3);
    detail::add_res_block(s, rng, "enc.b1", cfg.stem_width, cfg.mid_width);
    detail::add_res_block(s, rng, "enc.b2", cfg.mid_width, c);
    if (m.kind() == ModelKind::diar) {
      for (const char* blk : {"attn0", "attn1"}) {
        const std::string b = blk;
        for (const char* proj : {".q", ".k", ".v", ".o"}) detail::add_linear(s, rng, b + proj, c, c);
        detail::add_norm(s, b + ".ln1", c);
        detail::add_linear(s, rng, b + ".mlp1", c, c * cfg.mlp_expansion);
        detail::add_linear(s, rng, b + ".mlp2", c * cfg.mlp_expansion, c);
        detail::add_norm(s, b + ".ln2", c);
      }
    }
    detail::add_res_block(s, rng, "dec.b1", c, cfg.mid_width);
    detail::add_res_block(s, rng, "dec.b2", cfg.mid_width, cfg.stem_width);
    detail::add_conv(s, rng, "dec.out", cfg.image_channels, cfg.stem_width, 3);
    return m;
  }
};

template <typename U, typename T>
ParamStore<U> cast_params(const ParamStore<T>& src) {
  ParamStore<U> out;
  for (const auto& [name, e] : src.entries()) out.add(name, e.value.template cast<U>());
  return out;
}

namespace detail {

template <typename T>
Var<T> conv(ParamBinding<T>& p, const std::string& name, const Var<T>& x, std::size_t stride) {
  const Var<T> w = p(name + ".w");
  return conv2d(x, w, p(name + ".b"), stride, w.shape()[2] / 2);
}

template <typename T>
Var<T> res_block(ParamBinding<T>& p, const std::string& name, const Var<T>& x, std::size_t stride) {
  const Var<T> main = conv(p, name + ".c2", relu(conv(p, name + ".c1", x, stride)), 1);
  return relu(add(main, conv(p, name + ".skip", x, stride)));
}

template <typename T>
Var<T> linear(ParamBinding<T>& p, const std::string& name, const Var<T>& x) {
  return add_bias(matmul(x, p(name + ".w")), p(name + ".b"));
}

}  // namespace detail

/// φ: C×H×W frame → latent C_lat×H/4×W/4.
template <typename T>
Var<T> encode_frame(ParamBinding<T>& p, const Var<T>& frame) {
  Var<T> x = relu(detail::conv(p, "enc.stem", frame, 1));
  x = detail::res_block(p, "enc.b1", x, 2);
  return detail::res_block(p, "enc.b2", x, 2);
}

/// ρ: latent C_lat×h×w → image C×4h×4w in (0, 1).
template <typename T>
Var<T> decode_latent(ParamBinding<T>& p, const Var<T>& z) {
  Var<T> x = detail::res_block(p, "dec.b1", upsample2x(z), 1);
  x = detail::res_block(p, "dec.b2", upsample2x(x), 1);
  return sigmoid(detail::conv(p, "dec.out", x, 1));
}

template <typename T>
struct AttentionProbe {
  Tensor<T> weights;  // [windows·heads, L, L] after softmax
};

/// Post-norm window attention block on tokens [T·h·w, C].
template <typename T>
Var<T> window_attention(ParamBinding<T>& p, const std::string& name, const Var<T>& tokens, const WindowLayout& lay,
                        std::size_t heads, AttentionProbe<T>* probe = nullptr) {
  const std::size_t c = tokens.shape()[1];
  if (c % heads != 0) throw ShapeError("window_attention: channels not divisible by heads");
  const std::size_t dh = c / heads, nw = lay.windows, L = lay.tokens_per_window;
  const Var<T> win = reshape(window_partition(tokens, lay), Shape{nw * L, c});
  auto split = [&](const Var<T>& v) {
    return reshape(permute(reshape(v, Shape{nw, L, heads, dh}), {0, 2, 1, 3}), Shape{nw * heads, L, dh});
  };
  const Var<T> q = split(detail::linear(p, name + ".q", win));
  const Var<T> k = split(detail::linear(p, name + ".k", win));
  const Var<T> v = split(detail::linear(p, name + ".v", win));
  Tensor<T> bias(Shape{nw * heads, L, L});
  for (std::size_t w = 0; w < nw; ++w)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < L * L; ++i)
        bias[(w * heads + h) * L * L + i] = lay.blocked[w * L * L + i] ? T(kMaskBias) : T{0};
  const Var<T> scores = add(scale(bmm(q, k, true), T(1.0 / std::sqrt(static_cast<double>(dh)))),
                            tokens.tape().constant(std::move(bias)));
  const Var<T> attn = softmax(scores, 2);
  if (probe) probe->weights = attn.value();
  const Var<T> mixed =
      reshape(permute(reshape(bmm(attn, v), Shape{nw, heads, L, dh}), {0, 2, 1, 3}), Shape{nw * L, c});
  const Var<T> out = window_reverse(detail::linear(p, name + ".o", mixed), lay);
  const Var<T> y = layer_norm(add(tokens, out), p(name + ".ln1.g"), p(name + ".ln1.b"));
  const Var<T> mlp = detail::linear(p, name + ".mlp2", relu(detail::linear(p, name + ".mlp1", y)));
  return layer_norm(add(y, mlp), p(name + ".ln2.g"), p(name + ".ln2.b"));
}

/// x, e: [T, n, C] → [n, C].
template <typename T>
Var<T> aggregate(const Var<T>& x, const Var<T>& e, AggregationMode mode) {
  if (mode != AggregationMode::avg_x && x.shape() != e.shape()) {
    throw ShapeError("aggregate: x " + shape_str(x.shape()) + " and e " + shape_str(e.shape()) + " differ");
  }
  switch (mode) {
    case AggregationMode::avg_x: return set_mean(x);
    case AggregationMode::avg_e: return set_mean(e);
    default: return set_sum(mul(x, softmax(e, 0)));
  }
}

namespace detail {

template <typename T>
void require_frames(const std::vector<Var<T>>& frames, const ModelConfig& cfg) {
  if (frames.empty()) throw ShapeError("model forward: need at least one frame");
  const Shape& s0 = frames[0].shape();
  if (s0.size() != 3 || s0[0] != cfg.image_channels) {
    throw ShapeError("model forward: frames must be " + std::to_string(cfg.image_channels) + "×H×W, got " +
                     shape_str(s0));
  }
  if (s0[1] % 4 != 0 || s0[2] % 4 != 0 || s0[1] < 4 || s0[2] < 4) {
    throw ShapeError("model forward: frame extents must be positive multiples of 4, got " + shape_str(s0));
  }
  for (const auto& f : frames) {
    if (f.shape() != s0) throw ShapeError("model forward: mixed frame shapes " + shape_str(s0) + " and " + shape_str(f.shape()));
  }
}

}  // namespace detail

/// Full forward pass; returns the C×H×W reconstruction.
template <typename T>
Var<T> model_forward(ParamBinding<T>& p, const ModelConfig& cfg, const std::vector<Var<T>>& frames) {
  detail::require_frames(frames, cfg);
  const ModelKind kind = parse_model_kind(cfg.kind);
  std::vector<Var<T>> latents;
  latents.reserve(frames.size());
  for (const auto& f : frames) latents.push_back(encode_frame(p, f));
  const std::size_t t = frames.size(), c = latents[0].shape()[0], h = latents[0].shape()[1],
                    w = latents[0].shape()[2];
  const Var<T> tokens = reshape(permute(stack(latents), {0, 2, 3, 1}), Shape{t * h * w, c});
  const Var<T> x = reshape(tokens, Shape{t, h * w, c});
  Var<T> pooled;
  const AggregationMode mode = kind == ModelKind::deep_sets ? AggregationMode::avg_x : parse_aggregation(cfg.mode);
  if (mode == AggregationMode::avg_x) {
    pooled = set_mean(x);  // e is unused in this mode
  } else {
    const WindowLayout regular = window_layout(t, h, w, WindowSpec{cfg.window_t, cfg.window_s, false});
    const WindowLayout shifted = window_layout(t, h, w, WindowSpec{cfg.window_t, cfg.window_s, true});
    Var<T> e = window_attention(p, "attn0", tokens, regular, cfg.heads);
    e = window_attention(p, "attn1", e, shifted, cfg.heads);
    pooled = aggregate(x, reshape(e, Shape{t, h * w, c}), mode);
  }
  const Var<T> z = permute(reshape(pooled, Shape{h, w, c}), {2, 0, 1});
  return decode_latent(p, z);
}

template <typename T>
Tensor<T> forward_values(const ParamStore<T>& params, const ModelConfig& cfg, const std::vector<Tensor<T>>& frames) {
  Tape<T> tape;
  ParamBinding<T> p(tape, params, false);
  std::vector<Var<T>> in;
  for (const auto& f : frames) in.push_back(tape.constant(f));
  return model_forward(p, cfg, in).value();
}

inline Image diar_forward(const std::vector<Image>& frames, const DiarModel& model) {
  std::vector<Tensor<float>> in;
  for (const auto& f : frames) in.push_back(image_to_chw<float>(f));
  return chw_to_image(forward_values(model.params, model.config, in));
}

inline Image deep_sets_forward(const std::vector<Image>& frames, const DiarModel& model) {
  if (model.kind() != ModelKind::deep_sets) throw ConfigError("deep_sets_forward: model is not a deep_sets model");
  return diar_forward(frames, model);
}

/// Mean absolute error between a reconstruction and its label.
template <typename T>
Var<T> l1_loss(const Var<T>& pred, const Var<T>& label) {
  return mean(abs(sub(pred, label)));
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 4;
  double lr = 0.001;
  double val_fraction = 0.1;
  std::size_t frames = 0;  // frames used per sequence; 0 = all
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in [0, 1)");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, batch, lr, val_fraction, frames, seed)

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;  // NaN without a validation split
  double wall_seconds = 0.0;
};

struct DataSplit {
  std::vector<std::size_t> train, val;
};

/// Seeded shuffle; the validation set is the first round(f·N) entries.
inline DataSplit split_dataset(std::size_t n, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x5b1));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  if (val_fraction > 0.0 && n >= 2) n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  if (n < 2) n_val = 0;
  DataSplit s;
  s.val.assign(order.begin(), order.begin() + static_cast<long>(n_val));
  s.train.assign(order.begin() + static_cast<long>(n_val), order.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

struct TrainResult {
  std::vector<EpochRecord> history;
  ParamStore<float> best;
  std::size_t best_epoch = 0;
  DataSplit split;
  std::vector<double> final_val_losses;  // per validation sequence, final epoch
};

struct TrainSample {
  std::vector<Tensor<float>> frames;
  Tensor<float> label;
};

inline TrainSample make_sample(const Sequence& s, std::size_t max_frames) {
  TrainSample out;
  const std::size_t n = max_frames == 0 ? s.frames.size() : std::min(max_frames, s.frames.size());
  for (std::size_t i = 0; i < n; ++i) out.frames.push_back(image_to_chw<float>(s.frames[i]));
  out.label = image_to_chw<float>(s.label);
  return out;
}

/// Loss and parameter gradients for one sample.
inline double sample_gradients(const DiarModel& model, const TrainSample& s, Gradients<float>* grads) {
  Tape<float> tape;
  ParamBinding<float> p(tape, model.params, grads != nullptr);
  std::vector<Var<float>> in;
  for (const auto& f : s.frames) in.push_back(tape.constant(f));
  const Var<float> loss = l1_loss(model_forward(p, model.config, in), tape.constant(s.label));
  if (grads) {
    tape.backward(loss);
    *grads = p.gradients();
  }
  return static_cast<double>(loss.value().item());
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam on the L1 reconstruction loss; keeps the parameters of the epoch
/// with the lowest validation loss (training loss without a split).
inline TrainResult train(DiarModel& model, const std::vector<Sequence>& data, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train: dataset is empty");
  TrainResult res;
  res.split = split_dataset(data.size(), cfg.val_fraction, cfg.seed);
  std::vector<TrainSample> samples;
  samples.reserve(data.size());
  for (const auto& s : data) samples.push_back(make_sample(s, cfg.frames));
  const AdamConfig adam{cfg.lr};
  double best_score = std::numeric_limits<double>::infinity();
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = res.split.train;
    Rng rng(derive_seed(cfg.seed, 0xe90c0000 + epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    double train_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch);
      Gradients<float> acc;
      for (std::size_t i = b0; i < b1; ++i) {
        Gradients<float> g;
        train_sum += sample_gradients(model, samples[order[i]], &g);
        if (acc.empty()) {
          acc = std::move(g);
        } else {
          for (auto& [name, t] : acc) {
            const auto& gi = g.at(name);
            for (std::size_t k = 0; k < t.size(); ++k) t[k] += gi[k];
          }
        }
      }
      const float inv = 1.0f / static_cast<float>(b1 - b0);
      for (auto& [name, t] : acc)
        for (auto& v : t.data()) v *= inv;
      adam_step(model.params, acc, adam);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = order.empty() ? std::numeric_limits<double>::quiet_NaN() : train_sum / static_cast<double>(order.size());
    std::vector<double> val;
    for (std::size_t i : res.split.val) val.push_back(sample_gradients(model, samples[i], nullptr));
    rec.val_loss = val.empty() ? std::numeric_limits<double>::quiet_NaN()
                               : std::accumulate(val.begin(), val.end(), 0.0) / static_cast<double>(val.size());
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const double score = val.empty() ? rec.train_loss : rec.val_loss;
    if (score < best_score || res.best_epoch == 0) {
      best_score = score;
      res.best_epoch = epoch;
      res.best = cast_params<float>(model.params);
    }
    res.history.push_back(rec);
    if (epoch == cfg.epochs) res.final_val_losses = val;
    if (on_epoch) on_epoch(rec);
  }
  return res;
}

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,val_loss,wall_seconds\n";
  char buf[160];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.3f\n", r.epoch, r.train_loss, r.val_loss, r.wall_seconds);
    out += buf;
  }
  return out;
}

}  // namespace diar
