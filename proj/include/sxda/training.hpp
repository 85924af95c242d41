#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sxda/datagen.hpp"
#include "sxda/network.hpp"

namespace sxda {

template <typename T>
struct LossTerms {
  Var<T> total, mse, edge;
};

/// MSE(pred, gt) + lambda_p * mean |Sobel(pred) - Sobel(gt)|, where Sobel
/// applies the horizontal and vertical 3x3 kernels to every channel with
/// reflected borders.
template <typename T>
LossTerms<T> loss(Var<T> pred, Var<T> gt, T lambda_p);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const std::vector<Tensor<float>>& params);
};

/// One bias-corrected Adam update. All gradients are checked before anything
/// is modified; a non-finite entry throws NumericError naming the parameter.
void adam_step(std::vector<Tensor<float>>& params, const std::vector<std::vector<float>>& grads,
               AdamState& state, const AdamConfig& cfg,
               const std::vector<std::string>& names = {});

/// Scales the gradients so their global L2 norm is at most max_norm. Returns
/// the norm before scaling.
double clip_global_norm(std::vector<std::vector<float>>& grads, double max_norm);

struct TrainSample {
  Image prev, cur, next, gt;
  std::size_t t = 0, oy = 0, ox = 0;
};

/// Uniform t in [1, T-2] and one uniform crop offset shared by the three
/// frames and the ground truth.
TrainSample sample_triplet(const Clip& clip, Rng& rng, std::size_t patch);

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch = 2;
  std::size_t iterations = 2000;
  std::size_t patch = 64;
  double lambda_p = 0.1;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double clip_norm = 1.0;  // 0 disables clipping
  std::uint64_t seed = 1;
  ModelConfig model;
  std::optional<std::filesystem::path> checkpoint;
  std::size_t log_interval = 10;
  std::size_t checkpoint_interval = 0;  // 0: only at the end
  std::size_t threads = 1;

  void validate() const;
};

struct LossRecord {
  std::size_t iter = 0;
  double loss = 0, mse = 0, edge = 0;
};

struct TrainResult {
  ModelParams<float> params;
  std::vector<LossRecord> history;          // every iteration
  std::vector<std::uint64_t> batch_hashes;  // one per iteration
};

/// `iter <n> loss <v> mse <v> edge <v>`
std::string format_log_line(const LossRecord& r);

/// Mean of the losses of iterations (i - window, i], 1-based i.
double smoothed_loss(const std::vector<LossRecord>& history, std::size_t iter,
                     std::size_t window = 50);

using LogSink = std::function<void(const std::string&)>;

/// Trains from a fresh initialization derived from cfg.seed. Clips must be
/// static or dynamic clips with at least 3 frames.
TrainResult train(const TrainConfig& cfg, const std::vector<Clip>& clips, const LogSink& log = {});

/// Loads the training split of a corpus directory.
std::vector<Clip> load_training_clips(const std::filesystem::path& corpus);

}  // namespace sxda
