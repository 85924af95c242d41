#include "sxda/selftest.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "sxda/attention.hpp"
#include "sxda/datagen.hpp"
#include "sxda/gradcheck.hpp"
#include "sxda/metrics.hpp"
#include "sxda/network.hpp"
#include "sxda/random.hpp"
#include "sxda/training.hpp"

namespace sxda {
namespace {

template <typename T>
Tensor<T> random_tensor(Shape dims, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<T> t(std::move(dims));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

std::string fmt(const char* f, double v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

PropertyResult grad_property(const std::string& name, const GradFn& f,
                             const std::vector<Tensor<double>>& inputs, double tol) {
  const GradcheckResult r = gradcheck(f, inputs);
  return {name, r.max_rel_error < tol, fmt("max relative error %.3g", r.max_rel_error)};
}

// Random weights turn a tensor-valued op into a scalar without symmetric
// cancellations.
Var<double> weighted_sum(Tape<double>& t, Var<double> y, std::uint64_t seed) {
  Rng rng(seed);
  return ops::sum_all(ops::mul(y, t.constant(random_tensor<double>(y.dims(), rng))));
}

}  // namespace

bool softmax_rows_sum_to_one(const SoftmaxImpl& impl, std::uint64_t seed, std::string* detail) {
  Rng rng(seed);
  const Tensor<double> x = random_tensor<double>({7, 5}, rng, -4, 4);
  const Tensor<double> y = impl(x);
  double worst = 0;
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) s += y[r * 5 + c];
    worst = std::max(worst, std::abs(s - 1));
  }
  if (detail) *detail = fmt("max |row sum - 1| = %.3g", worst);
  return worst < 1e-12;
}

Tensor<double> corrupted_softmax(const Tensor<double>& x) {
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor<double> y(x.dims());
  for (std::size_t c = 0; c < cols; ++c) {
    double mx = -INFINITY, s = 0;
    for (std::size_t r = 0; r < rows; ++r) mx = std::max(mx, x[r * cols + c]);
    for (std::size_t r = 0; r < rows; ++r) s += std::exp(x[r * cols + c] - mx);
    for (std::size_t r = 0; r < rows; ++r) y[r * cols + c] = std::exp(x[r * cols + c] - mx) / s;
  }
  return y;
}

std::vector<PropertyResult> run_selftest(std::uint64_t seed) {
  std::vector<PropertyResult> out;
  Rng rng(derive_seed(seed, "selftest"));
  auto rnd = [&](Shape d, double lo = -1, double hi = 1) { return random_tensor<double>(d, rng, lo, hi); };

  out.push_back(grad_property(
      "gradcheck matmul",
      [](Tape<double>& t, std::span<const Var<double>> v) {
        return weighted_sum(t, ops::matmul(v[0], v[1]), 1);
      },
      {rnd({3, 4}), rnd({4, 2})}, 1e-6));
  out.push_back(grad_property(
      "gradcheck conv2d",
      [](Tape<double>& t, std::span<const Var<double>> v) {
        return weighted_sum(t, ops::conv2d(v[0], v[1], v[2]), 2);
      },
      {rnd({5, 5, 2}), rnd({3, 3, 2, 3}), rnd({3})}, 1e-6));
  out.push_back(grad_property(
      "gradcheck strided conv2d",
      [](Tape<double>& t, std::span<const Var<double>> v) {
        return weighted_sum(t, ops::conv2d(v[0], v[1], 2), 3);
      },
      {rnd({6, 6, 2}), rnd({3, 3, 2, 2})}, 1e-6));
  out.push_back(grad_property(
      "gradcheck layer_norm",
      [](Tape<double>& t, std::span<const Var<double>> v) {
        return weighted_sum(t, ops::layer_norm(v[0], v[1], v[2]), 4);
      },
      {rnd({4, 6}), rnd({6}), rnd({6})}, 1e-5));
  out.push_back(grad_property(
      "gradcheck softmax(matmul)",
      [](Tape<double>& t, std::span<const Var<double>> v) {
        return weighted_sum(t, ops::softmax_rows(ops::matmul(v[0], v[1])), 5);
      },
      {rnd({3, 4}), rnd({4, 5})}, 1e-5));
  out.push_back(grad_property(
      "gradcheck gelu",
      [](Tape<double>& t, std::span<const Var<double>> v) { return weighted_sum(t, ops::gelu(v[0]), 6); },
      {rnd({4, 5}, -3, 3)}, 1e-6));
  out.push_back(grad_property(
      "gradcheck blocked attention",
      [](Tape<double>& t, std::span<const Var<double>> v) {
        return weighted_sum(t, ops::attention(v[0], v[1], v[2], 2), 7);
      },
      {rnd({4, 3, 4}), rnd({4, 3, 4}), rnd({4, 3, 4})}, 1e-5));

  {
    Tensor<double> f = rnd({6, 6, 4});
    std::vector<Tensor<double>> ins{f, rnd({3, 3, 4, 4}, -0.3, 0.3), rnd({4}), rnd({3, 3, 4, 4}, -0.3, 0.3),
                                    rnd({4}), rnd({4, 1}), rnd({1}), rnd({1, 4}), rnd({4})};
    out.push_back(grad_property(
        "gradcheck rcab",
        [](Tape<double>& t, std::span<const Var<double>> v) {
          RcabParams<double> p{v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]};
          return weighted_sum(t, rcab(v[0], p), 8);
        },
        ins, 1e-4));
  }
  out.push_back(grad_property(
      "gradcheck loss",
      [](Tape<double>&, std::span<const Var<double>> v) {
        return loss(v[0], v[1], 0.1).total;
      },
      {rnd({6, 6, 3}, 0, 1), rnd({6, 6, 3}, 0, 1)}, 1e-5));

  {
    std::string d;
    const bool ok = softmax_rows_sum_to_one(
        [](const Tensor<double>& x) {
          Tape<double> t;
          return ops::softmax_rows(t.constant(x)).value();
        },
        seed, &d);
    out.push_back({"softmax rows sum to one", ok, d});
    std::string dn;
    const bool caught = !softmax_rows_sum_to_one(corrupted_softmax, seed, &dn);
    out.push_back({"negative control: wrong-axis softmax is rejected", caught, dn});
  }

  {
    bool ok = true;
    for (auto [h, w, b] : {std::tuple{8, 12, 4}, {6, 6, 3}, {16, 8, 2}}) {
      Tape<float> t;
      Rng r2(derive_seed(seed, "geometry", static_cast<std::uint64_t>(h * w * b)));
      Var<float> f = t.constant(random_tensor<float>({std::size_t(h), std::size_t(w), 3}, r2));
      ok = ok && unblock(block(f, std::size_t(b))).value() == f.value();
      ok = ok && dilated_block(f, std::size_t(b), 1).data.value() == block(f, std::size_t(b)).data.value();
    }
    out.push_back({"block/unblock roundtrip and d=1 dilation", ok, ""});
  }

  {
    // Enumerate the (2b x 2b) window at stride 2 for b=2, d=2 by hand.
    const auto coords = dilated_block_coords(4, 4, 2, 2);
    bool ok = true;
    const std::size_t nb = 4;
    for (std::size_t j = 0; j < nb; ++j)
      for (std::size_t t = 0; t < 4; ++t) {
        const std::int64_t y = std::int64_t((j / 2) * 2) - 1 + 2 * std::int64_t(t / 2);
        const std::int64_t x = std::int64_t((j % 2) * 2) - 1 + 2 * std::int64_t(t % 2);
        ok = ok && coords[t * nb + j] == PixelCoord{y, x};
      }
    out.push_back({"dilated block coordinates (b=2, d=2)", ok, ""});
  }

  {
    Tape<float> t;
    Var<float> f = t.constant(random_tensor<float>({8, 8, 4}, rng));
    AttentionParams<float> p{t.constant(random_tensor<float>({4, 4}, rng)),
                             t.constant(random_tensor<float>({4, 4}, rng)),
                             t.constant(random_tensor<float>({4, 4}, rng)),
                             t.constant(random_tensor<float>({4, 4}, rng)), 2};
    const BlockedFeatures<float> bf = block(f, 4);
    const double diff = max_abs_diff(cross_attention(bf, bf, p).data.value(), mhsa(bf, p).data.value());
    out.push_back({"identical-frame collapse cross == self", diff <= 1e-6, fmt("max diff %.3g", diff)});
  }

  {
    Tape<double> t;
    std::vector<Var<double>> maps;
    FusionParams<double> fp;
    for (int n = 0; n < 3; ++n) {
      maps.push_back(t.constant(rnd({5, 5, 3})));
      fp.kernels.push_back(t.constant(rnd({3, 3, 3, 1})));
      fp.biases.push_back(t.constant(rnd({1})));
    }
    const Tensor<double> wts = fusion_weights(maps, fp).value();
    double worst = 0;
    for (std::size_t p = 0; p < 25; ++p)
      worst = std::max(worst, std::abs(wts[p * 3] + wts[p * 3 + 1] + wts[p * 3 + 2] - 1));
    FusionParams<double> one{{fp.kernels[0]}, {fp.biases[0]}};
    const bool ident = fuse(std::vector<Var<double>>{maps[0]}, one).value() == maps[0].value();
    out.push_back({"fusion weights sum to one", worst < 1e-12, fmt("max deviation %.3g", worst)});
    out.push_back({"single-map fusion is the identity", ident, ""});
  }

  {
    Image a({16, 16, 3}, 0.5f), b({16, 16, 3}, 0.6f);
    const double p = psnr(a, b);
    out.push_back({"psnr closed form", std::abs(p - 20.0) < 1e-3, fmt("%.6f dB at MSE 0.01", p)});
    out.push_back({"ssim(a, a) == 1", ssim(a, a) == 1.0, ""});
    const double expect = (2 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4);
    const double got = ssim(a, b);
    out.push_back({"constant-frame ssim closed form", std::abs(got - expect) < 1e-6,
                   fmt("error %.3g", std::abs(got - expect))});
    out.push_back({"flicker of a constant sequence is zero", temporal_flicker({a, a, a}) == 0.0, ""});
  }

  {
    ModelConfig cfg;
    cfg.stages = 2;
    cfg.base_channels = 4;
    cfg.block = 2;
    cfg.heads = {1, 1};
    const ModelParams<float> p = ModelParams<float>::init(cfg, seed);
    const auto path = std::filesystem::temp_directory_path() /
                      ("sxda-selftest-" + std::to_string(derive_seed(seed, "ckpt") % 1000000007) + ".ckpt");
    bool ok = false;
    std::string d;
    try {
      save_checkpoint(p, path);
      const ModelParams<float> q = load_checkpoint(path);
      ok = q.config == p.config && q.tensors == p.tensors;
    } catch (const std::exception& e) {
      d = e.what();
    }
    std::filesystem::remove(path);
    out.push_back({"checkpoint roundtrip is bit-exact", ok, d});
  }

  {
    const Image scene = gen_scene(seed, 32, 48);
    const std::string bytes = encode_ppm(scene);
    const std::string header = "P6\n48 32\n255\n";
    const bool ok = bytes.compare(0, header.size(), header) == 0 &&
                    bytes.size() == header.size() + 32 * 48 * 3 &&
                    decode_ppm(bytes) == quantize8(scene);
    out.push_back({"ppm header and 8-bit roundtrip", ok, ""});
  }

  {
    ModelConfig cfg;
    cfg.stages = 2;
    cfg.base_channels = 4;
    cfg.block = 2;
    cfg.heads = {1, 1};
    const ModelParams<float> p = ModelParams<float>::init(cfg, seed);
    Image x = random_tensor<float>({8, 8, 3}, rng, 0, 1);
    const Image y = enhance(p, x, x, x);
    bool ok = y.all_finite() && y.dims() == x.dims();
    for (float v : y.values()) ok = ok && v >= 0 && v <= 1;
    out.push_back({"tiny model forward is finite and clamped", ok, ""});
  }
  return out;
}

}  // namespace sxda
