#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "sxda/datagen.hpp"
#include "sxda/network.hpp"

namespace sxda {

/// Reported in place of a PSNR when the MSE is below 1e-12.
inline constexpr double kPsnrInfinity = std::numeric_limits<double>::infinity();

/// 10 log10(peak^2 / MSE), or kPsnrInfinity for (near) identical frames.
double psnr(const Image& a, const Image& b, double peak = 1.0);

/// Mean SSIM over the valid region of an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1, averaged over channels.
double ssim(const Image& a, const Image& b);

/// Mean over consecutive pairs of the mean absolute per-pixel difference.
double temporal_flicker(const std::vector<Image>& frames);

struct MetricReport {
  std::vector<double> psnr_per_frame;
  std::vector<double> ssim_per_frame;
  double psnr_mean = 0;
  double ssim_mean = 0;
  double psnr_in_mean = 0;  // the degraded input against the same ground truth
  double ssim_in_mean = 0;
  double flicker_in = 0;
  double flicker_out = 0;
  double mse_mean = 0;  // output vs ground truth

  std::size_t frames() const { return psnr_per_frame.size(); }
  /// JSON object; infinite PSNR values are written as the string "inf".
  std::string to_json() const;
};

/// Produces the enhanced current frame from (prev, cur, next).
using Enhancer = std::function<Image(const Image&, const Image&, const Image&)>;

/// Triplet indices for frame t of a T-frame clip: (t-1, t, t+1) clamped to
/// the clip.
struct TripletIndex {
  std::size_t prev, cur, next;
};
TripletIndex clamped_triplet(std::size_t t, std::size_t frames);

/// Runs `enhance` on every frame and scores the outputs. `outputs`, when
/// given, receives the enhanced frames.
MetricReport eval_frames(const Clip& clip, const Enhancer& enhance,
                         std::vector<Image>* outputs = nullptr, std::size_t threads = 1);

/// eval_frames with the model's inference forward pass.
MetricReport eval_clip(const ModelParams<float>& params, const Clip& clip,
                       std::vector<Image>* outputs = nullptr, std::size_t threads = 1);

}  // namespace sxda
