#include <gtest/gtest.h>

#include <array>
#include <cmath>

#include "support.hpp"
#include "sxda/gradcheck.hpp"
#include "sxda/training.hpp"

namespace sxda {
namespace {

using test::random_tensor;

// Direct Sobel on a single-channel plane with symmetric reflection, in double.
double sobel_edge_oracle(const Tensor<double>& pred, const Tensor<double>& gt) {
  const auto h = std::int64_t(pred.dim(0)), w = std::int64_t(pred.dim(1));
  const std::size_t c = pred.dim(2);
  auto refl = [](std::int64_t i, std::int64_t n) { return i < 0 ? -i - 1 : i >= n ? 2 * n - i - 1 : i; };
  auto d = [&](std::int64_t y, std::int64_t x, std::size_t ch) {
    const std::size_t yy = std::size_t(refl(y, h)), xx = std::size_t(refl(x, w));
    return pred.at({yy, xx, ch}) - gt.at({yy, xx, ch});
  };
  const int k[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  double sum = 0;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double gx = 0, gy = 0;
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) {
            gx += k[i][j] * d(y + i - 1, x + j - 1, ch);
            gy += k[j][i] * d(y + i - 1, x + j - 1, ch);
          }
        sum += std::abs(gx) + std::abs(gy);
      }
  return sum / double(2 * h * w * std::int64_t(c));
}

TEST(LossTest, ZeroWhenPredictionMatches) {
  Rng rng(1);
  Tape<double> t;
  const Tensor<double> x = random_tensor({8, 8, 3}, rng, 0, 1);
  const LossTerms<double> l = loss(t.constant(x), t.constant(x), 0.1);
  EXPECT_EQ(l.total.value()[0], 0.0);
  EXPECT_EQ(l.mse.value()[0], 0.0);
  EXPECT_EQ(l.edge.value()[0], 0.0);
}

TEST(LossTest, ConstantOffsetGivesSquare) {
  Rng rng(2);
  Tape<double> t;
  const Tensor<double> gt = random_tensor({8, 8, 3}, rng, 0, 1);
  Tensor<double> pred = gt;
  for (double& v : pred.values()) v += 0.3;
  for (double lambda : {0.0, 0.1, 5.0}) {
    const LossTerms<double> l = loss(t.constant(pred), t.constant(gt), lambda);
    EXPECT_NEAR(l.total.value()[0], 0.09, 1e-12) << lambda;
    EXPECT_NEAR(l.edge.value()[0], 0.0, 1e-12);
  }
}

TEST(LossTest, EdgeTermMatchesDirectSobel) {
  Rng rng(3);
  for (int rep = 0; rep < 5; ++rep) {
    Tape<double> t;
    const Tensor<double> pred = random_tensor({7, 9, 3}, rng, 0, 1), gt = random_tensor({7, 9, 3}, rng, 0, 1);
    const LossTerms<double> l = loss(t.constant(pred), t.constant(gt), 0.25);
    double mse = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) mse += (pred[i] - gt[i]) * (pred[i] - gt[i]);
    mse /= double(pred.size());
    const double edge = sobel_edge_oracle(pred, gt);
    EXPECT_NEAR(l.mse.value()[0], mse, 1e-12);
    EXPECT_NEAR(l.edge.value()[0], edge, 1e-12);
    EXPECT_NEAR(l.total.value()[0], mse + 0.25 * edge, 1e-12);
  }
}

TEST(LossTest, NonNegativeAndShapeChecked) {
  Rng rng(4);
  Tape<float> t;
  for (int i = 0; i < 20; ++i) {
    const LossTerms<float> l = loss(t.constant(random_tensor<float>({4, 4, 3}, rng)),
                                    t.constant(random_tensor<float>({4, 4, 3}, rng)), 0.1f);
    EXPECT_GT(l.total.value()[0], 0.0f);
  }
  EXPECT_THROW(loss(t.constant(Tensor<float>({4, 4, 3})), t.constant(Tensor<float>({4, 5, 3})), 0.1f),
               DimensionError);
}

TEST(LossTest, Gradcheck) {
  Rng rng(5);
  const std::vector<Tensor<double>> in{random_tensor({6, 5, 3}, rng, 0, 1), random_tensor({6, 5, 3}, rng, 0, 1)};
  const auto r = gradcheck(
      [](Tape<double>&, std::span<const Var<double>> v) { return loss(v[0], v[1], 0.1).total; }, in);
  EXPECT_LT(r.max_rel_error, 1e-5) << "input " << r.input << " index " << r.index;
}

TEST(AdamTest, ZeroGradientKeepsParametersAndDecaysMoments) {
  std::vector<Tensor<float>> params{Tensor<float>({3}, std::vector<float>{1, -2, 3})};
  AdamState state = AdamState::zeros_like(params);
  state.m[0] = {0.5, -0.5, 0.25};
  state.v[0] = {0.1, 0.2, 0.3};
  state.step = 4;
  const AdamConfig cfg{};
  const auto before = params;
  // With nonzero moments the update is not zero; only check it on a fresh state.
  adam_step(params, {{0, 0, 0}}, state, cfg);
  EXPECT_EQ(state.step, 5u);
  EXPECT_DOUBLE_EQ(state.m[0][0], 0.45);
  EXPECT_DOUBLE_EQ(state.v[0][2], 0.3 * 0.999);

  std::vector<Tensor<float>> fresh{Tensor<float>({3}, std::vector<float>{1, -2, 3})};
  AdamState zero = AdamState::zeros_like(fresh);
  for (int i = 0; i < 3; ++i) adam_step(fresh, {{0, 0, 0}}, zero, cfg);
  EXPECT_EQ(fresh, before);
  for (double m : zero.m[0]) EXPECT_EQ(m, 0.0);
}

TEST(AdamTest, FirstStepMovesByLearningRate) {
  const AdamConfig cfg{0.01, 0.9, 0.999, 1e-8};
  for (float g : {3.0f, -0.5f, 1e-3f}) {
    std::vector<Tensor<float>> params{Tensor<float>({1}, 1.0f)};
    AdamState state = AdamState::zeros_like(params);
    adam_step(params, {{g}}, state, cfg);
    const double delta = double(params[0][0]) - 1.0;
    EXPECT_NEAR(delta, -0.01 * std::copysign(1.0, g) * std::abs(g) / (std::abs(g) + 1e-8), 1e-7) << g;
  }
}

TEST(AdamTest, TwoStepScalarTrace) {
  const AdamConfig cfg{0.05, 0.8, 0.99, 1e-6};
  const std::array<float, 2> gs{0.4f, -0.1f};  // gradients arrive as float
  double p = 0.7, m = 0, v = 0;
  std::vector<Tensor<float>> params{Tensor<float>({1}, 0.7f)};
  AdamState state = AdamState::zeros_like(params);
  for (std::size_t t = 1; t <= 2; ++t) {
    const double g = gs[t - 1];
    m = 0.8 * m + 0.2 * g;
    v = 0.99 * v + 0.01 * g * g;
    const double mh = m / (1 - std::pow(0.8, double(t))), vh = v / (1 - std::pow(0.99, double(t)));
    p -= 0.05 * mh / (std::sqrt(vh) + 1e-6);
    adam_step(params, {{gs[t - 1]}}, state, cfg);
    EXPECT_NEAR(params[0][0], p, 1e-6) << "step " << t;
    EXPECT_NEAR(state.m[0][0], m, 1e-9);
    EXPECT_NEAR(state.v[0][0], v, 1e-9);
  }
}

TEST(AdamTest, GradientScaleKeepsUpdateSigns) {
  Rng rng(6);
  std::vector<float> g(50);
  for (float& x : g) x = float(rng.uniform(-1, 1));
  std::vector<float> scaled = g;
  for (float& x : scaled) x *= 37.0f;
  std::vector<Tensor<float>> a{Tensor<float>({50}, 0.0f)}, b = a;
  AdamState sa = AdamState::zeros_like(a), sb = AdamState::zeros_like(b);
  adam_step(a, {g}, sa, AdamConfig{});
  adam_step(b, {scaled}, sb, AdamConfig{});
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(std::signbit(a[0][i]), std::signbit(b[0][i]));
    EXPECT_NEAR(a[0][i], b[0][i], 1e-9);
  }
}

TEST(AdamTest, NonFiniteGradientNamesParameterAndChangesNothing) {
  std::vector<Tensor<float>> params{Tensor<float>({2}, 1.0f), Tensor<float>({2}, 2.0f)};
  AdamState state = AdamState::zeros_like(params);
  const auto before = params;
  try {
    adam_step(params, {{0.1f, 0.1f}, {0.1f, std::nanf("")}}, state, AdamConfig{}, {"enc0.alpha", "enc0.beta"});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("enc0.beta"), std::string::npos) << e.what();
  }
  EXPECT_EQ(params, before);
  EXPECT_EQ(state.step, 0u);
  EXPECT_THROW(adam_step(params, {{0.1f}, {0.1f, 0.1f}}, state, AdamConfig{}), DimensionError);
}

TEST(ClipNormTest, ScalesOnlyAboveThreshold) {
  std::vector<std::vector<float>> g{{3, 0}, {0, 4}};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 10), 5.0);
  EXPECT_EQ(g[0][0], 3.0f);
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1), 5.0);
  EXPECT_FLOAT_EQ(g[0][0], 0.6f);
  EXPECT_FLOAT_EQ(g[1][1], 0.8f);
  std::vector<std::vector<float>> h{{30}};
  clip_global_norm(h, 0);
  EXPECT_EQ(h[0][0], 30.0f);
}

// Frames whose every pixel encodes (frame, y, x) so crops can be located.
Clip indexed_clip(std::size_t frames, std::size_t h, std::size_t w) {
  Clip clip;
  for (std::size_t t = 0; t < frames; ++t) {
    Image f({h, w, 3});
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        f.at({y, x, 0}) = float(t) / 16.0f;
        f.at({y, x, 1}) = float(y) / 64.0f;
        f.at({y, x, 2}) = float(x) / 64.0f;
      }
    clip.frames.push_back(f);
  }
  clip.gt.push_back(clip.frames[0]);
  return clip;
}

TEST(SampleTripletTest, ThreeFramesForceMiddleIndex) {
  const Clip clip = indexed_clip(3, 24, 24);
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    const TrainSample s = sample_triplet(clip, rng, 16);
    EXPECT_EQ(s.t, 1u);
    EXPECT_EQ(s.prev.at({0, 0, 0}), 0.0f);
    EXPECT_EQ(s.next.at({0, 0, 0}), 2.0f / 16.0f);
    EXPECT_EQ(s.cur.at({0, 0, 1}), float(s.oy) / 64.0f);
    EXPECT_EQ(s.gt.at({3, 5, 2}), float(s.ox + 5) / 64.0f);
    EXPECT_EQ(s.prev.at({2, 2, 1}), s.next.at({2, 2, 1}));
  }
}

TEST(SampleTripletTest, FullFramePatchHasZeroOffset) {
  const Clip clip = indexed_clip(6, 32, 32);
  Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    const TrainSample s = sample_triplet(clip, rng, 32);
    EXPECT_EQ(s.oy, 0u);
    EXPECT_EQ(s.ox, 0u);
    EXPECT_GE(s.t, 1u);
    EXPECT_LE(s.t, 4u);
    EXPECT_EQ(s.cur, clip.frames[s.t]);
  }
  EXPECT_THROW(sample_triplet(clip, rng, 40), ConfigError);
}

TEST(SampleTripletTest, CropOffsetsAreUniform) {
  // 9 x 9 offsets, 10^4 draws; chi-square with 80 degrees of freedom has a
  // 1% critical value of 112.33.
  const Clip clip = indexed_clip(3, 24, 24);
  Rng rng(9);
  std::array<int, 81> counts{};
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const TrainSample s = sample_triplet(clip, rng, 16);
    ASSERT_LE(s.oy, 8u);
    ASSERT_LE(s.ox, 8u);
    ++counts[s.oy * 9 + s.ox];
  }
  const double expected = double(n) / 81;
  double chi2 = 0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 112.33);
}

TEST(SampleTripletTest, MiddleIndexIsUniform) {
  const Clip clip = indexed_clip(7, 16, 16);
  Rng rng(10);
  std::array<int, 7> counts{};
  for (int i = 0; i < 5000; ++i) ++counts[sample_triplet(clip, rng, 16).t];
  EXPECT_EQ(counts[0], 0);
  EXPECT_EQ(counts[6], 0);
  // 4 degrees of freedom, 1% critical value 13.28.
  double chi2 = 0;
  for (int t = 1; t <= 5; ++t) chi2 += (counts[t] - 1000.0) * (counts[t] - 1000.0) / 1000.0;
  EXPECT_LT(chi2, 13.28);
}

TEST(LogTest, LineFormatAndSmoothing) {
  const LossRecord r{12, 0.5, 0.25, 2.5};
  EXPECT_EQ(format_log_line(r), "iter 12 loss 0.5 mse 0.25 edge 2.5");
  std::vector<LossRecord> h;
  for (std::size_t i = 1; i <= 10; ++i) h.push_back({i, double(i), 0, 0});
  EXPECT_DOUBLE_EQ(smoothed_loss(h, 10, 4), (7 + 8 + 9 + 10) / 4.0);
  EXPECT_DOUBLE_EQ(smoothed_loss(h, 2, 4), 1.5);
  EXPECT_DOUBLE_EQ(smoothed_loss(h, 10), 5.5);
  EXPECT_THROW(smoothed_loss(h, 0), ContractError);
  EXPECT_THROW(smoothed_loss(h, 11), ContractError);
}

TrainConfig tiny_train_config() {
  TrainConfig cfg;
  cfg.model.stages = 2;
  cfg.model.base_channels = 4;
  cfg.model.block = 4;
  cfg.model.heads = {1, 1};
  cfg.patch = 16;
  cfg.iterations = 3;
  cfg.lr = 1e-3;
  cfg.seed = 21;
  return cfg;
}

std::vector<Clip> tiny_clips() {
  std::vector<Clip> clips;
  for (std::uint64_t s = 0; s < 2; ++s) {
    DegradationSpec spec;
    spec.seed = s;
    clips.push_back(gen_static_clip(gen_scene(s, 32, 32), spec, 4));
  }
  return clips;
}

TEST(TrainTest, ZeroLearningRateLeavesParameters) {
  TrainConfig cfg = tiny_train_config();
  cfg.lr = 0;
  const TrainResult r = train(cfg, tiny_clips());
  EXPECT_EQ(r.params.tensors, ModelParams<float>::init(cfg.model, cfg.seed).tensors);
  EXPECT_EQ(r.history.size(), 3u);
  EXPECT_EQ(r.batch_hashes.size(), 3u);
}

TEST(TrainTest, OneIterationChangesParameters) {
  TrainConfig cfg = tiny_train_config();
  cfg.iterations = 1;
  const TrainResult r = train(cfg, tiny_clips());
  ASSERT_GT(r.history[0].loss, 0.0);
  const auto init = ModelParams<float>::init(cfg.model, cfg.seed);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < init.tensors.size(); ++i) changed += r.params.tensors[i] != init.tensors[i];
  EXPECT_GT(changed, 0u);
}

TEST(TrainTest, DeterministicAcrossRunsAndThreadCounts) {
  TrainConfig cfg = tiny_train_config();
  std::vector<std::string> lines1, lines2;
  cfg.log_interval = 1;
  const TrainResult a = train(cfg, tiny_clips(), [&](const std::string& l) { lines1.push_back(l); });
  cfg.threads = 2;
  const TrainResult b = train(cfg, tiny_clips(), [&](const std::string& l) { lines2.push_back(l); });
  EXPECT_EQ(a.params.tensors, b.params.tensors);
  EXPECT_EQ(a.batch_hashes, b.batch_hashes);
  EXPECT_EQ(lines1, lines2);
  ASSERT_EQ(lines1.size(), 3u);
  EXPECT_EQ(lines1[0].rfind("iter 1 loss ", 0), 0u) << lines1[0];

  cfg.seed = 22;
  const TrainResult c = train(cfg, tiny_clips());
  EXPECT_NE(a.batch_hashes, c.batch_hashes);
}

TEST(TrainTest, LogsEveryIntervalAndAtTheEnd) {
  TrainConfig cfg = tiny_train_config();
  cfg.iterations = 5;
  cfg.log_interval = 2;
  cfg.lr = 0;
  std::vector<std::string> lines;
  train(cfg, tiny_clips(), [&](const std::string& l) { lines.push_back(l); });
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0].rfind("iter 2 ", 0), 0u);
  EXPECT_EQ(lines[1].rfind("iter 4 ", 0), 0u);
  EXPECT_EQ(lines[2].rfind("iter 5 ", 0), 0u);
}

TEST(TrainTest, BaseVariantHasNoCrossParameters) {
  TrainConfig cfg = tiny_train_config();
  cfg.model.variant = Variant::base;
  cfg.iterations = 1;
  const TrainResult r = train(cfg, tiny_clips());
  for (const auto& s : r.params.layout.specs) EXPECT_EQ(s.name.find("fuse"), std::string::npos) << s.name;
}

TEST(TrainTest, RejectsBadInputs) {
  TrainConfig cfg = tiny_train_config();
  EXPECT_THROW(train(cfg, {}), ConfigError);
  cfg.patch = 12;
  EXPECT_THROW(train(cfg, tiny_clips()), ConfigError);
  cfg = tiny_train_config();
  cfg.patch = 48;
  EXPECT_THROW(train(cfg, tiny_clips()), ConfigError);
  cfg = tiny_train_config();
  cfg.batch = 0;
  EXPECT_THROW(train(cfg, tiny_clips()), ConfigError);
}

}  // namespace
}  // namespace sxda
