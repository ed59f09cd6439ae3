#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <span>

#include "diar/aggregator.hpp"
#include "gradcheck.hpp"

using namespace diar;
using diar::testing::random_tensor;

namespace {

ModelConfig tiny(const std::string& kind = "diar", const std::string& mode = "softmax_weighted") {
  ModelConfig c;
  c.kind = kind;
  c.mode = mode;
  c.stem_width = 4;
  c.mid_width = 6;
  c.latent_width = 8;
  c.heads = 2;
  c.window_s = 4;
  c.seed = 21;
  return c;
}

std::vector<Tensor<double>> random_frames(std::size_t t, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor<double>> out;
  for (std::size_t i = 0; i < t; ++i) out.push_back(random_tensor({3, h, w}, rng, 0.0, 1.0));
  return out;
}

bool same_values(std::span<const double> a, std::span<const double> b) { return std::ranges::equal(a, b); }

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::fabs(a[i] - b[i]));
  return d;
}

// Swin-style labeling of one rolled axis: [0, n−m), [n−m, n−s), [n−s, n).
int axis_region(std::size_t r, std::size_t n, std::size_t m, std::size_t s) {
  if (s == 0) return 0;
  if (r < n - m) return 0;
  return r < n - s ? 1 : 2;
}

Sequence tiny_sequence(std::uint64_t seed, std::size_t frames = 2, std::size_t size = 16) {
  SceneSpec spec;
  spec.params.frame_count = frames;
  spec.params.height = spec.params.width = size;
  spec.params = spec.params.without_distortions();
  spec.params.light.gain_strength = 0.3;
  spec.seed = seed;
  spec.base_image = procedural_base(size, size, seed + 500);
  return generate_sequence(spec);
}

}  // namespace

TEST(Windows, PartitionInverseIsIdentity) {
  Rng rng(1);
  for (std::size_t t : {1, 2, 3, 5})
    for (std::size_t hw : {3, 4, 7, 9})
      for (const WindowSpec spec : {WindowSpec{2, 4, false}, WindowSpec{2, 4, true}, WindowSpec{3, 7, true},
                                    WindowSpec{1, 1, true}}) {
        const WindowLayout lay = window_layout(t, hw, hw + 1, spec);
        Tape<double> tape;
        const Tensor<double> x = random_tensor({t * hw * (hw + 1), 5}, rng);
        const Var<double> back = window_reverse(window_partition(tape.constant(x), lay), lay);
        ASSERT_EQ(back.value().shape(), x.shape());
        EXPECT_TRUE(same_values(back.value().data(), x.data()));
      }
}

TEST(Windows, UnshiftedFullExtentIsOneWindow) {
  const WindowLayout lay = window_layout(2, 7, 7, WindowSpec{2, 7, false});
  EXPECT_EQ(lay.windows, 1u);
  EXPECT_EQ(lay.tokens_per_window, 98u);
  std::vector<std::size_t> g = lay.gather;
  std::sort(g.begin(), g.end());
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g[i], i);
  EXPECT_TRUE(std::all_of(lay.blocked.begin(), lay.blocked.end(), [](auto b) { return b == 0; }));
}

TEST(Windows, ShiftAmountsAreHalfWindow) {
  const WindowLayout lay = window_layout(6, 12, 12, WindowSpec{3, 7, true});
  EXPECT_EQ(lay.shift[0], 1u);
  EXPECT_EQ(lay.shift[1], 3u);
  EXPECT_EQ(lay.shift[2], 3u);
  EXPECT_EQ(lay.padded[1], 14u);
  EXPECT_THROW(window_layout(2, 4, 4, WindowSpec{0, 4, false}), ConfigError);
}

TEST(Windows, ShiftedMaskMatchesRegionLabeling) {
  const std::size_t n = 8, m = 4, s = 2;
  const WindowLayout lay = window_layout(1, n, n, WindowSpec{1, m, true});
  ASSERT_EQ(lay.windows, 4u);
  const std::size_t L = lay.tokens_per_window;
  std::size_t masked = 0;
  for (std::size_t w = 0; w < lay.windows; ++w) {
    const std::size_t wy = w / 2, wx = w % 2;
    for (std::size_t q = 0; q < L; ++q)
      for (std::size_t k = 0; k < L; ++k) {
        const std::size_t qy = wy * m + q / m, qx = wx * m + q % m, ky = wy * m + k / m, kx = wx * m + k % m;
        const bool expect =
            axis_region(qy, n, m, s) != axis_region(ky, n, m, s) || axis_region(qx, n, m, s) != axis_region(kx, n, m, s);
        EXPECT_EQ(lay.masked(w, q, k), expect) << "window " << w << " q " << q << " k " << k;
        masked += expect;
      }
  }
  EXPECT_GT(masked, 0u);
  // Rolled row 6 holds source row 0 and rolled row 5 source row 7: opposite wrap sides.
  EXPECT_TRUE(lay.masked(3, 1 * m + 0, 2 * m + 0));
  EXPECT_EQ(lay.gather[3 * L + 1 * m], (7 * n) + 6);
  EXPECT_EQ(lay.gather[3 * L + 2 * m], (0 * n) + 6);
}

TEST(Windows, PadTokensAreMaskedAsKeys) {
  const WindowLayout lay = window_layout(3, 5, 5, WindowSpec{2, 4, false});
  EXPECT_EQ(lay.padded[0], 4u);
  EXPECT_EQ(lay.padded[1], 8u);
  std::size_t pads = 0;
  for (std::size_t w = 0; w < lay.windows; ++w)
    for (std::size_t k = 0; k < lay.tokens_per_window; ++k) {
      if (!lay.is_pad[w * lay.tokens_per_window + k]) continue;
      ++pads;
      for (std::size_t q = 0; q < lay.tokens_per_window; ++q) EXPECT_TRUE(lay.masked(w, q, k));
    }
  EXPECT_EQ(pads, 4u * 8 * 8 - 3u * 5 * 5);
}

namespace {

struct AttnFixture {
  ParamStore<double> params;
  explicit AttnFixture(std::size_t c) {
    ModelConfig cfg = tiny();
    cfg.latent_width = c;
    params = cast_params<double>(DiarModel::create(cfg).params);
  }
};

}  // namespace

TEST(WindowAttention, SingleTokenWindow) {
  AttnFixture f(8);
  Rng rng(2);
  Tape<double> tape;
  ParamBinding<double> p(tape, f.params, false);
  const WindowLayout lay = window_layout(1, 1, 1, WindowSpec{1, 1, false});
  const Tensor<double> x = random_tensor({1, 8}, rng);
  AttentionProbe<double> probe;
  const Var<double> y = window_attention(p, "attn0", tape.constant(x), lay, 2, &probe);
  for (double w : probe.weights.data()) EXPECT_EQ(w, 1.0);
  // With attention weight 1 the mixed value is the token's own V projection.
  const Var<double> xv = tape.constant(x);
  const Var<double> v = detail::linear(p, "attn0.v", xv);
  const Var<double> o = detail::linear(p, "attn0.o", v);
  const Var<double> h = layer_norm(add(xv, o), p("attn0.ln1.g"), p("attn0.ln1.b"));
  const Var<double> mlp = detail::linear(p, "attn0.mlp2", relu(detail::linear(p, "attn0.mlp1", h)));
  const Var<double> expect = layer_norm(add(h, mlp), p("attn0.ln2.g"), p("attn0.ln2.b"));
  EXPECT_LT(max_abs_diff(y.value(), expect.value()), 1e-12);
}

TEST(WindowAttention, RowsNormalizedAndMaskedPairsSuppressed) {
  AttnFixture f(8);
  Rng rng(3);
  Tape<double> tape;
  ParamBinding<double> p(tape, f.params, false);
  const WindowLayout lay = window_layout(3, 8, 8, WindowSpec{2, 4, true});
  const Tensor<double> x = random_tensor({3 * 8 * 8, 8}, rng, -3.0, 3.0);
  AttentionProbe<double> probe;
  window_attention(p, "attn1", tape.constant(x), lay, 2, &probe);
  const std::size_t L = lay.tokens_per_window, heads = 2;
  ASSERT_EQ(probe.weights.shape(), (Shape{lay.windows * heads, L, L}));
  std::size_t masked = 0;
  for (std::size_t w = 0; w < lay.windows; ++w)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t q = 0; q < L; ++q) {
        if (lay.is_pad[w * L + q]) continue;  // pad queries are dropped by window_reverse
        double sum = 0;
        for (std::size_t k = 0; k < L; ++k) {
          const double a = probe.weights[((w * heads + h) * L + q) * L + k];
          if (lay.masked(w, q, k)) {
            EXPECT_LT(a, 1e-6);
            ++masked;
          } else {
            sum += a;
          }
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
  EXPECT_GT(masked, 0u);
}

TEST(Aggregate, SingleSliceInEveryMode) {
  Rng rng(4);
  Tape<double> tape;
  const Var<double> x = tape.constant(random_tensor({1, 6, 3}, rng)), e = tape.constant(random_tensor({1, 6, 3}, rng));
  for (auto mode : {AggregationMode::avg_x, AggregationMode::softmax_weighted}) {
    EXPECT_TRUE(same_values(aggregate(x, e, mode).value().data(), x.value().data()));
  }
  EXPECT_TRUE(same_values(aggregate(x, e, AggregationMode::avg_e).value().data(), e.value().data()));
}

TEST(Aggregate, ConstantEmbeddingGivesMean) {
  Rng rng(5);
  Tape<double> tape;
  const Var<double> x = tape.constant(random_tensor({4, 10, 3}, rng));
  Tensor<double> e(Shape{4, 10, 3});
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = static_cast<double>((i % 30) / 7);
  const Tensor<double> y = aggregate(x, tape.constant(e), AggregationMode::softmax_weighted).value();
  const Tensor<double> m = set_mean(x).value();
  EXPECT_LT(max_abs_diff(y, m), 1e-15);
}

TEST(Aggregate, SaturatedSoftmaxSelectsOneFrame) {
  Rng rng(6);
  Tape<double> tape;
  const Tensor<double> xs = random_tensor({3, 1, 2}, rng);
  Tensor<double> e(Shape{3, 1, 2}, -40.0);
  e[0] = e[1] = 40.0;
  const Tensor<double> y = aggregate(tape.constant(xs), tape.constant(e), AggregationMode::softmax_weighted).value();
  EXPECT_NEAR(y[0], xs[0], 1e-15);
  EXPECT_NEAR(y[1], xs[1], 1e-15);
}

TEST(Aggregate, SoftmaxOutputInConvexHull) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<double> tape;
    const std::size_t t = 1 + rng.index(6);
    const Tensor<double> x = random_tensor({t, 9, 4}, rng), e = random_tensor({t, 9, 4}, rng, -20.0, 20.0);
    const Tensor<double> y = aggregate(tape.constant(x), tape.constant(e), AggregationMode::softmax_weighted).value();
    for (std::size_t j = 0; j < 36; ++j) {
      double lo = x[j], hi = x[j];
      for (std::size_t i = 1; i < t; ++i) {
        lo = std::min(lo, x[i * 36 + j]);
        hi = std::max(hi, x[i * 36 + j]);
      }
      EXPECT_GE(y[j], lo - 1e-15);
      EXPECT_LE(y[j], hi + 1e-15);
    }
  }
}

TEST(Aggregate, ShapeMismatchRejected) {
  Tape<double> tape;
  const Var<double> x = tape.constant(Tensor<double>(Shape{2, 3, 4})), e = tape.constant(Tensor<double>(Shape{3, 3, 4}));
  EXPECT_THROW(aggregate(x, e, AggregationMode::softmax_weighted), ShapeError);
  EXPECT_THROW(aggregate(x, e, AggregationMode::avg_e), ShapeError);
  EXPECT_NO_THROW(aggregate(x, e, AggregationMode::avg_x));
}

TEST(ModelConfig, Validation) {
  ModelConfig c = tiny();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.mode = "max";
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.kind = "unet";
  EXPECT_THROW(DiarModel::create(c), ConfigError);
  EXPECT_FALSE(DiarModel::create(tiny("deep_sets")).params.contains("attn0.q.w"));
  EXPECT_TRUE(DiarModel::create(tiny()).params.contains("attn1.ln2.g"));
}

TEST(DeepSets, SingleFrameIsDecodeOfEncode) {
  const DiarModel m = DiarModel::create(tiny("deep_sets"));
  const auto params = cast_params<double>(m.params);
  const auto frames = random_frames(1, 12, 16, 8);
  Tape<double> tape;
  ParamBinding<double> p(tape, params, false);
  const Tensor<double> direct = decode_latent(p, encode_frame(p, tape.constant(frames[0]))).value();
  EXPECT_TRUE(same_values(forward_values(params, m.config, frames).data(), direct.data()));
}

TEST(DeepSets, PermutationAndDuplicationExact) {
  const DiarModel m = DiarModel::create(tiny("deep_sets"));
  std::vector<Image> frames;
  for (std::uint64_t i = 0; i < 5; ++i) frames.push_back(procedural_base(16, 20, 40 + i));
  const Image ref = deep_sets_forward(frames, m);
  std::vector<Image> perm{frames[3], frames[0], frames[4], frames[2], frames[1]};
  EXPECT_EQ(deep_sets_forward(perm, m), ref);
  std::vector<Image> dup = frames;
  dup.insert(dup.end(), frames.begin(), frames.end());
  EXPECT_EQ(deep_sets_forward(dup, m), ref);
  EXPECT_THROW(deep_sets_forward(frames, DiarModel::create(tiny())), ConfigError);
}

TEST(DiarForward, ShapeContractAcrossGrid) {
  for (const char* mode : {"avg_x", "avg_e", "softmax_weighted"}) {
    const DiarModel m = DiarModel::create(tiny("diar", mode));
    for (std::size_t t : {1, 2, 3})
      for (auto [h, w] : {std::pair<std::size_t, std::size_t>{16, 16}, {12, 28}, {20, 8}}) {
        std::vector<Image> frames;
        for (std::size_t i = 0; i < t; ++i) frames.push_back(procedural_base(h, w, 60 + i));
        const Image out = diar_forward(frames, m);
        EXPECT_EQ(out.height(), h);
        EXPECT_EQ(out.width(), w);
        EXPECT_EQ(out.channels(), 3u);
        for (float v : out.data()) {
          EXPECT_GE(v, 0.0f);
          EXPECT_LE(v, 1.0f);
        }
      }
  }
}

TEST(DiarForward, InputErrors) {
  const DiarModel m = DiarModel::create(tiny());
  EXPECT_THROW(diar_forward({}, m), ShapeError);
  EXPECT_THROW(diar_forward({Image(16, 16, 3), Image(16, 20, 3)}, m), ShapeError);
  EXPECT_THROW(diar_forward({Image(18, 16, 3)}, m), ShapeError);
  EXPECT_THROW(diar_forward({Image(16, 16, 1)}, m), ShapeError);
}

TEST(DiarForward, PermutationInvariantWhenWindowCoversSequence) {
  ModelConfig cfg = tiny();
  cfg.window_t = 3;
  const DiarModel m = DiarModel::create(cfg);
  const auto params = cast_params<double>(m.params);
  const auto frames = random_frames(3, 16, 16, 9);
  const Tensor<double> ref = forward_values(params, cfg, frames);
  const std::vector<Tensor<double>> perm{frames[2], frames[0], frames[1]};
  EXPECT_TRUE(same_values(forward_values(params, cfg, perm).data(), ref.data()));

  std::vector<Image> imgs, pimgs;
  for (const auto& f : frames) imgs.push_back(chw_to_image(f.cast<float>()));
  for (const auto& f : perm) pimgs.push_back(chw_to_image(f.cast<float>()));
  const Image a = diar_forward(imgs, m), b = diar_forward(pimgs, m);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-6);
}

TEST(DiarForward, DuplicatedFramesMatchSingleFrame) {
  ModelConfig cfg = tiny();
  cfg.window_t = 3;
  const auto params = cast_params<double>(DiarModel::create(cfg).params);
  const auto one = random_frames(1, 16, 16, 10);
  const Tensor<double> ref = forward_values(params, cfg, one);
  for (std::size_t t : {2, 3}) {
    const std::vector<Tensor<double>> copies(t, one[0]);
    EXPECT_LT(max_abs_diff(forward_values(params, cfg, copies), ref), 1e-12) << "T=" << t;
  }
}

TEST(DiarForward, EndToEndGradientMatchesFiniteDifferences) {
  std::size_t sampled = 0;
  const double err = diar::testing::model_gradient_error(tiny(), 2, 16, 0.01, 13, &sampled);
  EXPECT_GT(sampled, 20u);
  EXPECT_LT(err, 1e-3);
}

TEST(Training, SplitIsSeededAndDisjoint) {
  const DataSplit a = split_dataset(50, 0.1, 3), b = split_dataset(50, 0.1, 3), c = split_dataset(50, 0.1, 4);
  EXPECT_EQ(a.val, b.val);
  EXPECT_EQ(a.train, b.train);
  EXPECT_NE(a.val, c.val);
  EXPECT_EQ(a.val.size(), 5u);
  std::vector<std::size_t> all = a.val;
  all.insert(all.end(), a.train.begin(), a.train.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(all[i], i);
  EXPECT_EQ(split_dataset(1, 0.1, 0).val.size(), 0u);
  EXPECT_EQ(split_dataset(3, 0.1, 0).val.size(), 1u);
}

TEST(Training, ConfigAndDataErrors) {
  DiarModel m = DiarModel::create(tiny());
  TrainConfig cfg;
  EXPECT_THROW(train(m, {}, cfg), ConfigError);
  cfg.lr = 0;
  EXPECT_THROW(train(m, {tiny_sequence(1)}, cfg), ConfigError);
  cfg = TrainConfig{};
  cfg.val_fraction = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Training, OverfitsSingleSequence) {
  ModelConfig mc;  // full-width model
  mc.seed = 5;
  DiarModel m = DiarModel::create(mc);
  TrainConfig cfg;
  cfg.epochs = 300;
  cfg.batch = 1;
  cfg.val_fraction = 0.0;
  cfg.seed = 5;
  const TrainResult r = train(m, {tiny_sequence(30)}, cfg);
  ASSERT_EQ(r.history.size(), 300u);
  EXPECT_LT(r.history.back().train_loss, 0.02);
  EXPECT_GT(r.history.front().train_loss, r.history[r.best_epoch - 1].train_loss);
}

TEST(Training, DeterministicAndCheckpointsBestValidation) {
  std::vector<Sequence> data;
  for (std::uint64_t s = 0; s < 6; ++s) data.push_back(tiny_sequence(40 + s, 3));
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch = 2;
  cfg.val_fraction = 0.34;
  cfg.seed = 8;
  DiarModel a = DiarModel::create(tiny()), b = DiarModel::create(tiny());
  std::vector<std::size_t> seen;
  const TrainResult ra = train(a, data, cfg, [&](const EpochRecord& r) { seen.push_back(r.epoch); });
  const TrainResult rb = train(b, data, cfg);
  ASSERT_EQ(ra.history.size(), 6u);
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(ra.split.val.size(), 2u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(ra.history[i].train_loss, rb.history[i].train_loss);
    EXPECT_EQ(ra.history[i].val_loss, rb.history[i].val_loss);
  }
  double best = ra.history[0].val_loss;
  for (const auto& h : ra.history) best = std::min(best, h.val_loss);
  EXPECT_EQ(ra.history[ra.best_epoch - 1].val_loss, best);
  EXPECT_EQ(ra.final_val_losses.size(), 2u);

  DiarModel restored = DiarModel::create(tiny());
  restored.params = ra.best;
  const TrainSample s = make_sample(data[ra.split.val[0]], 0);
  const TrainSample s1 = make_sample(data[ra.split.val[1]], 0);
  const double v = 0.5 * (sample_gradients(restored, s, nullptr) + sample_gradients(restored, s1, nullptr));
  EXPECT_NEAR(v, best, 1e-9);
}

TEST(Training, HistoryCsv) {
  const std::string csv = history_csv({EpochRecord{1, 0.5, 0.25, 1.5}, EpochRecord{2, 0.125, 0.0625, 3.0}});
  EXPECT_EQ(csv, "epoch,train_loss,val_loss,wall_seconds\n1,0.5,0.25,1.500\n2,0.125,0.0625,3.000\n");
}
