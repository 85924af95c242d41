#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "sxda/attention.hpp"
#include "sxda/gradcheck.hpp"

namespace sxda {
namespace {

using test::random_tensor;

// Pixel sampled by token (u, v) of grid cell (r, c), enumerated from the
// definition: a b x b grid at stride d whose top-left corner sits
// (d - 1) * b / 2 pixels above and left of the standard block's corner.
std::pair<std::int64_t, std::int64_t> window_pixel(std::size_t r, std::size_t c, std::size_t u, std::size_t v,
                                                   std::size_t b, std::size_t d) {
  const std::int64_t shift = std::int64_t((d - 1) * b / 2);
  return {std::int64_t(r * b) - shift + std::int64_t(u * d), std::int64_t(c * b) - shift + std::int64_t(v * d)};
}

// Reference blocked attention on whole maps, straight from the formulas:
// per block and head, softmax(Q K^T / sqrt(C / heads)) V, heads
// concatenated, then the output projection.
Tensor<double> reference_attention(const Tensor<double>& fq, const Tensor<double>& fkv, std::size_t b,
                                   std::size_t d, const Tensor<double>& wq, const Tensor<double>& wk,
                                   const Tensor<double>& wv, const Tensor<double>& wo, std::size_t heads) {
  const std::size_t h = fq.dim(0), w = fq.dim(1), c = fq.dim(2), n = b * b, dh = c / heads;
  Tensor<double> out(fq.dims());
  auto project = [&](const std::vector<double>& x, const Tensor<double>& m) {
    std::vector<double> y(c, 0.0);
    for (std::size_t o = 0; o < c; ++o)
      for (std::size_t i = 0; i < c; ++i) y[o] += x[i] * m.at({i, o});
    return y;
  };
  for (std::size_t r = 0; r < h / b; ++r)
    for (std::size_t cc = 0; cc < w / b; ++cc) {
      std::vector<std::vector<double>> q(n), k(n), v(n);
      for (std::size_t t = 0; t < n; ++t) {
        std::vector<double> xq(c), xkv(c);
        const std::size_t qy = r * b + t / b, qx = cc * b + t % b;
        const auto [ky, kx] = window_pixel(r, cc, t / b, t % b, b, d);
        const auto sy = std::size_t(reflect_index(ky, std::int64_t(h)));
        const auto sx = std::size_t(reflect_index(kx, std::int64_t(w)));
        for (std::size_t ch = 0; ch < c; ++ch) {
          xq[ch] = fq.at({qy, qx, ch});
          xkv[ch] = fkv.at({sy, sx, ch});
        }
        q[t] = project(xq, wq);
        k[t] = project(xkv, wk);
        v[t] = project(xkv, wv);
      }
      for (std::size_t t = 0; t < n; ++t) {
        std::vector<double> concat(c, 0.0);
        for (std::size_t hd = 0; hd < heads; ++hd) {
          std::vector<double> s(n);
          double mx = -INFINITY;
          for (std::size_t u = 0; u < n; ++u) {
            double dot = 0;
            for (std::size_t e = hd * dh; e < (hd + 1) * dh; ++e) dot += q[t][e] * k[u][e];
            s[u] = dot / std::sqrt(double(dh));
            mx = std::max(mx, s[u]);
          }
          double z = 0;
          for (auto& x : s) z += (x = std::exp(x - mx));
          for (std::size_t u = 0; u < n; ++u)
            for (std::size_t e = hd * dh; e < (hd + 1) * dh; ++e) concat[e] += s[u] / z * v[u][e];
        }
        const auto y = project(concat, wo);
        for (std::size_t ch = 0; ch < c; ++ch) out.at({r * b + t / b, cc * b + t % b, ch}) = y[ch];
      }
    }
  return out;
}

struct Params {
  Tensor<double> q, k, v, o;
  std::size_t heads;
  AttentionParams<double> bind(Tape<double>& t) const {
    return {t.constant(q), t.constant(k), t.constant(v), t.constant(o), heads};
  }
};

Params random_params(std::size_t c, std::size_t heads, Rng& rng) {
  return {random_tensor({c, c}, rng), random_tensor({c, c}, rng), random_tensor({c, c}, rng),
          random_tensor({c, c}, rng), heads};
}

Params identity_params(std::size_t c) {
  Tensor<double> eye({c, c});
  for (std::size_t i = 0; i < c; ++i) eye.at({i, i}) = 1;
  return {eye, eye, eye, eye, 1};
}

Tensor<double> ramp(std::size_t h, std::size_t w, std::size_t c = 1) {
  Tensor<double> t({h, w, c});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = double(i);
  return t;
}

TEST(BlockTest, SingleBlockIsRowMajorFlattening) {
  Rng rng(1);
  Tape<double> t;
  const Tensor<double> f = random_tensor({4, 4, 3}, rng);
  const auto bf = block(t.constant(f), 4);
  ASSERT_EQ(bf.blocks(), 1u);
  EXPECT_EQ(bf.data.value().storage(), f.storage());
  EXPECT_EQ(unblock(bf).value(), f);
}

TEST(BlockTest, RampFirstBlockTokens) {
  Tape<double> t;
  const auto bf = block(t.constant(ramp(4, 4)), 2);
  ASSERT_EQ(bf.blocks(), 4u);
  const Tensor<double>& d = bf.data.value();
  const std::vector<double> expect{0, 1, 4, 5};
  for (std::size_t tok = 0; tok < 4; ++tok) EXPECT_EQ(d[tok * 4 + 0], expect[tok]);
  // Block 3 is the bottom-right cell.
  const std::vector<double> last{10, 11, 14, 15};
  for (std::size_t tok = 0; tok < 4; ++tok) EXPECT_EQ(d[tok * 4 + 3], last[tok]);
  EXPECT_EQ(unblock(bf).value(), ramp(4, 4));
}

TEST(BlockTest, RoundtripOnRandomShapes) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = 1 + rng.below(4);
    const std::size_t h = b * (1 + rng.below(4)), w = b * (1 + rng.below(4)), c = 1 + rng.below(5);
    Tape<float> t;
    const Tensor<float> f = random_tensor<float>({h, w, c}, rng);
    const auto bf = block(t.constant(f), b);
    EXPECT_EQ(bf.blocks(), (h / b) * (w / b));
    ASSERT_EQ(unblock(bf).value(), f) << h << "x" << w << "x" << c << " b=" << b;
    // block(unblock(bf)) reproduces the blocked tensor.
    EXPECT_EQ(block(unblock(bf), b).data.value(), bf.data.value());
  }
}

TEST(BlockTest, RejectsIndivisibleExtents) {
  Tape<double> t;
  EXPECT_THROW(block(t.constant(Tensor<double>({6, 4, 1})), 4), DimensionError);
}

TEST(DilatedBlockTest, UnitDilationEqualsStandardBlocking) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 1 + rng.below(4);
    const std::size_t h = b * (1 + rng.below(3)), w = b * (1 + rng.below(3));
    Tape<float> t;
    Var<float> f = t.constant(random_tensor<float>({h, w, 2}, rng));
    const auto dense = block(f, b);
    EXPECT_EQ(dilated_block(f, b, 1).data.value(), dense.data.value());
  }
}

TEST(DilatedBlockTest, ConstantMapGivesConstantBlocks) {
  Tape<double> t;
  const auto bf = dilated_block(t.constant(Tensor<double>({8, 8, 2}, 0.7)), 2, 3);
  for (double v : bf.data.value().values()) EXPECT_EQ(v, 0.7);
}

TEST(DilatedBlockTest, RampCellZeroSamplesReflectedCorners) {
  Tape<double> t;
  const Tensor<double> f = ramp(8, 8);
  const auto bf = dilated_block(t.constant(f), 2, 2);
  const Tensor<double>& d = bf.data.value();
  const std::size_t nb = bf.blocks();
  // Padded coordinates {-1, 1} x {-1, 1} reflect to {0, 1} x {0, 1}.
  const std::vector<double> expect{f.at({0, 0, 0}), f.at({0, 1, 0}), f.at({1, 0, 0}), f.at({1, 1, 0})};
  for (std::size_t tok = 0; tok < 4; ++tok) EXPECT_EQ(d[tok * nb], expect[tok]);
}

void check_window_enumeration(std::size_t b, std::size_t d) {
  const std::size_t h = 4 * b, w = 3 * b;
  const auto coords = dilated_block_coords(h, w, b, d);
  const auto rows = dilated_block_rows(h, w, b, d);
  const std::size_t nb = (h / b) * (w / b);
  ASSERT_EQ(coords.size(), nb * b * b);
  Tape<double> t;
  const Tensor<double> f = ramp(h, w);
  const Tensor<double>& data = dilated_block(t.constant(f), b, d).data.value();
  const std::int64_t pad = std::int64_t((d - 1) * b / 2 + b);
  for (std::size_t r = 0; r < h / b; ++r)
    for (std::size_t c = 0; c < w / b; ++c)
      for (std::size_t u = 0; u < b; ++u)
        for (std::size_t v = 0; v < b; ++v) {
          const std::size_t j = r * (w / b) + c, tok = u * b + v, row = tok * nb + j;
          const auto [y, x] = window_pixel(r, c, u, v, b, d);
          EXPECT_EQ(coords[row].y, y);
          EXPECT_EQ(coords[row].x, x);
          EXPECT_GE(y, -pad);
          EXPECT_LT(y, std::int64_t(h) + pad);
          const auto sy = std::size_t(reflect_index(y, std::int64_t(h)));
          const auto sx = std::size_t(reflect_index(x, std::int64_t(w)));
          EXPECT_EQ(rows[row], sy * w + sx);
          EXPECT_EQ(data[row], f.at({sy, sx, 0}));
        }
}

TEST(DilatedCoordTest, MatchesWindowEnumerationB2D2) { check_window_enumeration(2, 2); }
TEST(DilatedCoordTest, MatchesWindowEnumerationB2D3) { check_window_enumeration(2, 3); }
TEST(DilatedCoordTest, MatchesWindowEnumerationB4D2) { check_window_enumeration(4, 2); }
TEST(DilatedCoordTest, MatchesWindowEnumerationB8D2) { check_window_enumeration(8, 2); }

TEST(MhsaTest, IdenticalTokensReturnTheirValue) {
  Tape<double> t;
  const auto p = identity_params(3).bind(t);
  Tensor<double> f({4, 4, 3});
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = 0.1 * double(i % 3) - 0.4;
  const auto y = unblock(mhsa(block(t.constant(f), 2), p)).value();
  EXPECT_LE(max_abs_diff(y, f), 1e-15);
}

TEST(MhsaTest, OppositeTokensGiveTanh) {
  // Tokens +1, -1, +1, -1 with unit projections: each query sees scores
  // (+-1) and averages to tanh(1) with its own sign.
  Tape<double> t;
  const auto p = identity_params(1).bind(t);
  const Tensor<double> f({2, 2, 1}, {1, -1, 1, -1});
  const auto y = unblock(mhsa(block(t.constant(f), 2), p)).value();
  const double th = std::tanh(1.0);
  EXPECT_NEAR(y[0], th, 1e-12);
  EXPECT_NEAR(y[1], -th, 1e-12);
  EXPECT_NEAR(th, 0.76159, 1e-5);
}

TEST(MhsaTest, TwoTokenCoreGivesTanh) {
  Tape<double> t;
  Var<double> x = t.constant(Tensor<double>({2, 1, 1}, {1, -1}));
  const auto y = ops::attention(x, x, x, 1).value();
  EXPECT_NEAR(y[0], std::tanh(1.0), 1e-12);
  EXPECT_NEAR(y[1], -std::tanh(1.0), 1e-12);
}

TEST(MhsaTest, MatchesReferenceAndWeightsAreStochastic) {
  Rng rng(4);
  Tape<double> t;
  const Tensor<double> f = random_tensor({8, 4, 4}, rng);
  const Params pr = random_params(4, 2, rng);
  const auto p = pr.bind(t);
  const auto bf = block(t.constant(f), 4);
  const auto y = unblock(mhsa(bf, p)).value();
  EXPECT_LE(max_abs_diff(y, reference_attention(f, f, 4, 1, pr.q, pr.k, pr.v, pr.o, 2)), 1e-12);
  const Tensor<double> w = attention_weights(bf, bf, p);
  const std::size_t n = 16;
  for (std::size_t row = 0; row < w.size() / n; ++row) {
    double s = 0;
    for (std::size_t u = 0; u < n; ++u) s += w[row * n + u];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(CrossAttentionTest, IdenticalFramesCollapseToSelfAttention) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Tape<float> t;
    const std::size_t c = 4;
    AttentionParams<float> p{t.constant(random_tensor<float>({c, c}, rng)), t.constant(random_tensor<float>({c, c}, rng)),
                             t.constant(random_tensor<float>({c, c}, rng)), t.constant(random_tensor<float>({c, c}, rng)),
                             1 + rng.below(2) * 1};
    const auto bf = block(t.constant(random_tensor<float>({8, 8, c}, rng)), 4);
    const auto cross = cross_attention(bf, bf, p).data.value();
    const auto self = mhsa(bf, p).data.value();
    ASSERT_LE(max_abs_diff(cross, self), 1e-6f);
  }
}

TEST(CrossAttentionTest, ConstantValuesPassThrough) {
  Rng rng(6);
  Tape<double> t;
  const auto p = identity_params(2).bind(t);
  const auto q = block(t.constant(random_tensor({4, 4, 2}, rng)), 2);
  Tensor<double> kv({4, 4, 2});
  for (std::size_t i = 0; i < kv.size(); ++i) kv[i] = i % 2 ? 0.3 : -0.8;
  const auto y = unblock(cross_attention(q, block(t.constant(kv), 2), p)).value();
  EXPECT_LE(max_abs_diff(y, kv), 1e-12);
}

TEST(CrossAttentionTest, TwoTokenHandSoftmax) {
  // Query frame (2, 0), key/value frame (1, -1), one channel, unit weights.
  Tape<double> t;
  Var<double> q = t.constant(Tensor<double>({2, 1, 1}, {2, 0}));
  Var<double> kv = t.constant(Tensor<double>({2, 1, 1}, {1, -1}));
  const auto y = ops::attention(q, kv, kv, 1).value();
  const double w0 = std::exp(2.0) / (std::exp(2.0) + std::exp(-2.0));
  EXPECT_NEAR(y[0], w0 * 1 + (1 - w0) * -1, 1e-12);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
}

TEST(CrossAttentionTest, MatchesReferenceOnDistinctFrames) {
  Rng rng(7);
  Tape<double> t;
  const Tensor<double> fq = random_tensor({4, 8, 4}, rng), fkv = random_tensor({4, 8, 4}, rng);
  const Params pr = random_params(4, 2, rng);
  const auto y = unblock(cross_attention(block(t.constant(fq), 4), block(t.constant(fkv), 4), pr.bind(t))).value();
  EXPECT_LE(max_abs_diff(y, reference_attention(fq, fkv, 4, 1, pr.q, pr.k, pr.v, pr.o, 2)), 1e-12);
}

TEST(CrossAttentionTest, RejectsGeometryMismatch) {
  Tape<double> t;
  const auto p = identity_params(1).bind(t);
  EXPECT_THROW(cross_attention(block(t.constant(Tensor<double>({4, 4, 1})), 2),
                               block(t.constant(Tensor<double>({4, 4, 1})), 4), p),
               DimensionError);
}

TEST(DilatedCrossAttentionTest, UnitDilationEqualsCrossAttention) {
  Rng rng(8);
  Tape<double> t;
  Var<double> fq = t.constant(random_tensor({8, 8, 2}, rng)), fnb = t.constant(random_tensor({8, 8, 2}, rng));
  const auto p = random_params(2, 1, rng).bind(t);
  const auto a = dilated_cross_attention(fq, fnb, 4, 1, p).value();
  const auto b = unblock(cross_attention(block(fq, 4), block(fnb, 4), p)).value();
  EXPECT_EQ(a, b);
  // Bit-exact also when the neighbour map is copied to a fresh allocation.
  Var<double> fnb2 = t.constant(fnb.value());
  EXPECT_EQ(dilated_cross_attention(fq, fnb2, 4, 1, p).value(), a);
}

TEST(DilatedCrossAttentionTest, ConstantMapsGiveConstantOutput) {
  Tape<double> t;
  const Tensor<double> f({8, 8, 2}, 0.45);
  const auto y = dilated_cross_attention(t.constant(f), t.constant(f), 2, 3, identity_params(2).bind(t)).value();
  for (double v : y.values()) EXPECT_NEAR(v, 0.45, 1e-14);
}

TEST(DilatedCrossAttentionTest, RampPairMatchesComposedOracle) {
  Tape<double> t;
  const Tensor<double> fq = ramp(8, 8);
  Tensor<double> fnb = ramp(8, 8);
  for (auto& v : fnb.values()) v = std::sin(0.37 * v);
  Tensor<double> fq_scaled = fq;
  for (auto& v : fq_scaled.values()) v /= 64.0;
  Rng rng(9);
  const Params pr = random_params(1, 1, rng);
  const auto y = dilated_cross_attention(t.constant(fq_scaled), t.constant(fnb), 2, 2, pr.bind(t)).value();
  EXPECT_LE(max_abs_diff(y, reference_attention(fq_scaled, fnb, 2, 2, pr.q, pr.k, pr.v, pr.o, 1)), 1e-12);
}

TEST(DilatedCrossAttentionTest, MultiChannelMatchesOracle) {
  Rng rng(10);
  Tape<double> t;
  const Tensor<double> fq = random_tensor({8, 8, 4}, rng), fnb = random_tensor({8, 8, 4}, rng);
  const Params pr = random_params(4, 2, rng);
  for (std::size_t d : {2u, 3u}) {
    const auto y = dilated_cross_attention(t.constant(fq), t.constant(fnb), 4, d, pr.bind(t)).value();
    EXPECT_LE(max_abs_diff(y, reference_attention(fq, fnb, 4, d, pr.q, pr.k, pr.v, pr.o, 2)), 1e-12) << d;
  }
}

TEST(DilatedCrossAttentionTest, Gradcheck) {
  Rng rng(11);
  const std::vector<Tensor<double>> in{random_tensor({4, 4, 2}, rng), random_tensor({4, 4, 2}, rng),
                                       random_tensor({2, 2}, rng), random_tensor({2, 2}, rng),
                                       random_tensor({2, 2}, rng), random_tensor({2, 2}, rng)};
  const auto r = gradcheck(
      [](Tape<double>& t, std::span<const Var<double>> v) {
        AttentionParams<double> p{v[2], v[3], v[4], v[5], 2};
        Var<double> y = dilated_cross_attention(v[0], v[1], 2, 2, p);
        Rng w(3);
        return ops::sum_all(ops::mul(y, t.constant(random_tensor(y.dims(), w))));
      },
      in);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

FusionParams<double> random_fusion(Tape<double>& t, std::size_t n, std::size_t c, Rng& rng) {
  FusionParams<double> fp;
  for (std::size_t i = 0; i < n; ++i) {
    fp.kernels.push_back(t.constant(random_tensor({3, 3, c, 1}, rng)));
    fp.biases.push_back(t.constant(random_tensor({1}, rng)));
  }
  return fp;
}

TEST(FuseTest, SingleMapIsIdentity) {
  Rng rng(12);
  Tape<double> t;
  Var<double> a = t.constant(random_tensor({5, 6, 3}, rng));
  EXPECT_EQ(fuse(std::vector<Var<double>>{a}, random_fusion(t, 1, 3, rng)).value(), a.value());
}

TEST(FuseTest, EqualMapsAreReproduced) {
  Rng rng(13);
  Tape<double> t;
  Var<double> a = t.constant(random_tensor({5, 5, 2}, rng));
  const auto y = fuse(std::vector<Var<double>>{a, a, a}, random_fusion(t, 3, 2, rng)).value();
  EXPECT_LE(max_abs_diff(y, a.value()), 1e-15);
}

TEST(FuseTest, RiggedLogitsGiveQuarterThreeQuarterMixture) {
  Rng rng(14);
  Tape<double> t;
  Var<double> a1 = t.constant(random_tensor({4, 4, 2}, rng)), a2 = t.constant(random_tensor({4, 4, 2}, rng));
  FusionParams<double> fp{{t.constant(Tensor<double>({3, 3, 2, 1})), t.constant(Tensor<double>({3, 3, 2, 1}))},
                          {t.constant(Tensor<double>({1}, 0.0)), t.constant(Tensor<double>({1}, std::log(3.0)))}};
  const auto y = fuse(std::vector<Var<double>>{a1, a2}, fp).value();
  for (std::size_t i = 0; i < y.size(); ++i)
    EXPECT_NEAR(y[i], 0.25 * a1.value()[i] + 0.75 * a2.value()[i], 1e-14);
}

TEST(FuseTest, WeightsAreConvexAndOutputInsideEnvelope) {
  Rng rng(15);
  for (int draw = 0; draw < 100; ++draw) {
    Tape<float> t;
    const std::size_t n = 2 + rng.below(4);
    std::vector<Var<float>> maps;
    FusionParams<float> fp;
    for (std::size_t i = 0; i < n; ++i) {
      maps.push_back(t.constant(random_tensor<float>({6, 6, 3}, rng, -2, 2)));
      fp.kernels.push_back(t.constant(random_tensor<float>({3, 3, 3, 1}, rng)));
      fp.biases.push_back(t.constant(random_tensor<float>({1}, rng)));
    }
    const Tensor<float> w = fusion_weights(maps, fp).value();
    const Tensor<float> y = fuse(maps, fp).value();
    for (std::size_t p = 0; p < 36; ++p) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) {
        ASSERT_GE(w[p * n + i], 0.0f);
        s += w[p * n + i];
      }
      ASSERT_NEAR(s, 1.0, 1e-6);
      for (std::size_t c = 0; c < 3; ++c) {
        float lo = INFINITY, hi = -INFINITY;
        for (const auto& m : maps) {
          lo = std::min(lo, m.value()[p * 3 + c]);
          hi = std::max(hi, m.value()[p * 3 + c]);
        }
        ASSERT_GE(y[p * 3 + c], lo - 1e-6f);
        ASSERT_LE(y[p * 3 + c], hi + 1e-6f);
      }
    }
  }
}

TEST(FuseTest, RejectsMismatchedParameterCount) {
  Rng rng(16);
  Tape<double> t;
  Var<double> a = t.constant(random_tensor({4, 4, 2}, rng));
  EXPECT_THROW(fuse(std::vector<Var<double>>{a, a}, random_fusion(t, 3, 2, rng)), ConfigError);
}

TEST(FuseTest, Gradcheck) {
  Rng rng(17);
  const std::vector<Tensor<double>> in{random_tensor({4, 4, 2}, rng), random_tensor({4, 4, 2}, rng),
                                       random_tensor({3, 3, 2, 1}, rng), random_tensor({3, 3, 2, 1}, rng),
                                       random_tensor({1}, rng), random_tensor({1}, rng)};
  const auto r = gradcheck(
      [](Tape<double>& t, std::span<const Var<double>> v) {
        FusionParams<double> fp{{v[2], v[3]}, {v[4], v[5]}};
        Var<double> y = fuse(std::vector<Var<double>>{v[0], v[1]}, fp);
        Rng w(4);
        return ops::sum_all(ops::mul(y, t.constant(random_tensor(y.dims(), w))));
      },
      in);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

struct RcabTensors {
  std::vector<Tensor<double>> t;  // conv1 w, b, conv2 w, b, reduce w, b, expand w, b
  static RcabTensors random(std::size_t c, Rng& rng) {
    const std::size_t r = std::max<std::size_t>(1, c / 4);
    return {{random_tensor({3, 3, c, c}, rng, -0.3, 0.3), random_tensor({c}, rng),
             random_tensor({3, 3, c, c}, rng, -0.3, 0.3), random_tensor({c}, rng), random_tensor({c, r}, rng),
             random_tensor({r}, rng), random_tensor({r, c}, rng), random_tensor({c}, rng)}};
  }
};

RcabParams<double> rcab_params(std::span<const Var<double>> v) {
  return {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
}

TEST(RcabTest, ZeroSecondConvIsPureResidual) {
  Rng rng(18);
  RcabTensors p = RcabTensors::random(4, rng);
  p.t[2].fill(0);
  p.t[3].fill(0);
  Tape<double> t;
  std::vector<Var<double>> vars;
  for (const auto& x : p.t) vars.push_back(t.constant(x));
  const Tensor<double> f = random_tensor({6, 6, 4}, rng);
  EXPECT_EQ(rcab(t.constant(f), rcab_params(vars)).value(), f);
}

TEST(RcabTest, PreservesShape) {
  Rng rng(19);
  for (std::size_t c : {1u, 4u, 8u}) {
    RcabTensors p = RcabTensors::random(c, rng);
    Tape<double> t;
    std::vector<Var<double>> vars;
    for (const auto& x : p.t) vars.push_back(t.constant(x));
    const Shape dims{4, 6, c};
    EXPECT_EQ(rcab(t.constant(random_tensor(dims, rng)), rcab_params(vars)).dims(), dims);
  }
}

TEST(RcabTest, Gradcheck) {
  Rng rng(20);
  std::vector<Tensor<double>> in = RcabTensors::random(4, rng).t;
  in.push_back(random_tensor({6, 6, 4}, rng));
  const auto r = gradcheck(
      [](Tape<double>& t, std::span<const Var<double>> v) {
        Var<double> y = rcab(v[8], rcab_params(v.subspan(0, 8)));
        Rng w(5);
        return ops::sum_all(ops::mul(y, t.constant(random_tensor(y.dims(), w))));
      },
      in);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

}  // namespace
}  // namespace sxda
