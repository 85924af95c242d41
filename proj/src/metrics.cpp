#include "sxda/metrics.hpp"

#include <cmath>

#include "json.hpp"
#include "sxda/parallel.hpp"

namespace sxda {
namespace {

void same_shape(const char* op, const Image& a, const Image& b) {
  if (a.dims() != b.dims())
    throw DimensionError(std::string(op) + ": shapes differ " + shape_str(a.dims()) + " vs " +
                         shape_str(b.dims()));
}

constexpr std::size_t kWindow = 11;
constexpr double kSigma = 1.5;

std::vector<double> gaussian_window() {
  std::vector<double> g(kWindow);
  const double c = (kWindow - 1) / 2.0;
  double sum = 0;
  for (std::size_t i = 0; i < kWindow; ++i) {
    const double d = static_cast<double>(i) - c;
    g[i] = std::exp(-d * d / (2 * kSigma * kSigma));
    sum += g[i];
  }
  for (double& v : g) v /= sum;
  return g;
}

// Separable valid-region filter of an h x w plane.
std::vector<double> filter_valid(const std::vector<double>& src, std::size_t h, std::size_t w,
                                 const std::vector<double>& g) {
  const std::size_t ow = w - kWindow + 1, oh = h - kWindow + 1;
  std::vector<double> rows(h * ow);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0;
      for (std::size_t k = 0; k < kWindow; ++k) s += g[k] * src[y * w + x + k];
      rows[y * ow + x] = s;
    }
  std::vector<double> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0;
      for (std::size_t k = 0; k < kWindow; ++k) s += g[k] * rows[(y + k) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

double mean_abs_diff(const Image& a, const Image& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  return s / static_cast<double>(a.size());
}

double mse(const Image& a, const Image& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0 : s / static_cast<double>(v.size());
}

}  // namespace

double psnr(const Image& a, const Image& b, double peak) {
  same_shape("psnr", a, b);
  if (!(peak > 0)) throw ConfigError("psnr: peak must be positive");
  const double m = mse(a, b);
  if (m < 1e-12) return kPsnrInfinity;
  return 10 * std::log10(peak * peak / m);
}

double ssim(const Image& a, const Image& b) {
  same_shape("ssim", a, b);
  if (a.rank() != 3) throw DimensionError("ssim: expected H x W x C frames, got " + shape_str(a.dims()));
  const std::size_t h = a.dim(0), w = a.dim(1), ch = a.dim(2);
  if (h < kWindow || w < kWindow)
    throw ConfigError("ssim: frames of " + std::to_string(h) + "x" + std::to_string(w) +
                      " are smaller than the 11x11 window");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto g = gaussian_window();
  const std::size_t n = h * w;
  double total = 0;
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = a[i * ch + c];
      y[i] = b[i * ch + c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, g), my = filter_valid(y, h, w, g);
    const auto fxx = filter_valid(xx, h, w, g), fyy = filter_valid(yy, h, w, g);
    const auto fxy = filter_valid(xy, h, w, g);
    double sum = 0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = fxx[i] - mx[i] * mx[i];
      const double vy = fyy[i] - my[i] * my[i];
      const double cov = fxy[i] - mx[i] * my[i];
      sum += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += sum / static_cast<double>(mx.size());
  }
  return total / static_cast<double>(ch);
}

double temporal_flicker(const std::vector<Image>& frames) {
  if (frames.size() < 2)
    throw ContractError("temporal_flicker needs at least 2 frames, got " +
                        std::to_string(frames.size()));
  double s = 0;
  for (std::size_t t = 1; t < frames.size(); ++t) {
    same_shape("temporal_flicker", frames[t - 1], frames[t]);
    s += mean_abs_diff(frames[t - 1], frames[t]);
  }
  return s / static_cast<double>(frames.size() - 1);
}

std::string MetricReport::to_json() const {
  auto num = [](double v) -> nlohmann::json {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
  };
  nlohmann::json j;
  j["psnr_per_frame"] = nlohmann::json::array();
  for (double v : psnr_per_frame) j["psnr_per_frame"].push_back(num(v));
  j["ssim_per_frame"] = ssim_per_frame;
  j["psnr_mean"] = num(psnr_mean);
  j["ssim_mean"] = ssim_mean;
  j["psnr_in_mean"] = num(psnr_in_mean);
  j["ssim_in_mean"] = ssim_in_mean;
  j["flicker_in"] = flicker_in;
  j["flicker_out"] = flicker_out;
  j["mse_mean"] = mse_mean;
  j["frames"] = frames();
  j["psnr_peak"] = 1.0;
  j["flicker_note"] = "mean absolute inter-frame difference (temporal stability proxy)";
  return j.dump(2);
}

TripletIndex clamped_triplet(std::size_t t, std::size_t frames) {
  if (frames == 0 || t >= frames)
    throw ContractError("frame " + std::to_string(t) + " out of range for " +
                        std::to_string(frames) + " frames");
  return TripletIndex{t == 0 ? 0 : t - 1, t, t + 1 < frames ? t + 1 : frames - 1};
}

MetricReport eval_frames(const Clip& clip, const Enhancer& enhance, std::vector<Image>* outputs,
                         std::size_t threads) {
  clip.validate();
  const std::size_t n = clip.size();
  std::vector<Image> out(n);
  MetricReport r;
  r.psnr_per_frame.resize(n);
  r.ssim_per_frame.resize(n);
  std::vector<double> psnr_in(n), ssim_in(n), mses(n);
  parallel_for(n, threads, [&](std::size_t t) {
    const TripletIndex ix = clamped_triplet(t, n);
    out[t] = enhance(clip.frames[ix.prev], clip.frames[ix.cur], clip.frames[ix.next]);
    const Image& gt = clip.gt_for(t);
    r.psnr_per_frame[t] = psnr(out[t], gt);
    r.ssim_per_frame[t] = ssim(out[t], gt);
    psnr_in[t] = psnr(clip.frames[t], gt);
    ssim_in[t] = ssim(clip.frames[t], gt);
    mses[t] = mse(out[t], gt);
  });
  r.psnr_mean = mean(r.psnr_per_frame);
  r.ssim_mean = mean(r.ssim_per_frame);
  r.psnr_in_mean = mean(psnr_in);
  r.ssim_in_mean = mean(ssim_in);
  r.mse_mean = mean(mses);
  r.flicker_in = temporal_flicker(clip.frames);
  r.flicker_out = temporal_flicker(out);
  if (outputs) *outputs = std::move(out);
  return r;
}

MetricReport eval_clip(const ModelParams<float>& params, const Clip& clip,
                       std::vector<Image>* outputs, std::size_t threads) {
  clip.validate();
  params.config.check_extents(clip.height(), clip.width());
  return eval_frames(
      clip,
      [&](const Image& p, const Image& c, const Image& nx) { return enhance(params, p, c, nx); },
      outputs, threads);
}

}  // namespace sxda
