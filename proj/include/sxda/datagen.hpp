#pragma once

// Synthetic scenes, low-light degradation, clips and their on-disk form.
//
// Images are H x W x 3 float tensors with values in [0, 1].

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sxda/random.hpp"
#include "sxda/tensor.hpp"

namespace sxda {

using Image = Tensor<float>;

class MissingManifestError : public DataError {
 public:
  using DataError::DataError;
};
class FrameCountError : public DataError {
 public:
  using DataError::DataError;
};
class PpmHeaderError : public DataError {
 public:
  using DataError::DataError;
};

struct DegradationSpec {
  double gamma = 2.5;
  double scale = 0.3;  // brightness factor a
  double sigma_r = 0.02;
  double sigma_s = 0.04;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const DegradationSpec&, const DegradationSpec&) = default;
};

/// Ranges that per-clip degradation parameters are drawn from.
struct DegradationRanges {
  double gamma_min = 2.0, gamma_max = 3.5;
  double scale_min = 0.15, scale_max = 0.5;
  double sigma_r = 0.02;
  double sigma_s = 0.04;

  void validate() const;
  DegradationSpec sample(Rng& rng) const;
};

struct Offset {
  double dx = 0, dy = 0;
  friend bool operator==(const Offset&, const Offset&) = default;
};
using Trajectory = std::vector<Offset>;

struct Clip {
  std::vector<Image> frames;
  std::vector<Image> gt;  // one shared frame (static) or one per frame
  std::optional<Trajectory> trajectory;
  DegradationSpec spec;

  std::size_t size() const { return frames.size(); }
  std::size_t height() const { return frames.at(0).dim(0); }
  std::size_t width() const { return frames.at(0).dim(1); }
  bool is_static() const { return gt.size() == 1; }
  /// Ground truth aligned with frame t.
  const Image& gt_for(std::size_t t) const { return is_static() ? gt.at(0) : gt.at(t); }
  void validate() const;
};

/// Gradient background, 5-15 anti-aliased rectangles/disks and a
/// band-limited texture. H, W >= 32.
Image gen_scene(std::uint64_t seed, std::size_t height, std::size_t width);

/// a * img^gamma plus heteroscedastic Gaussian noise, clipped to [0, 1].
Image degrade(const Image& img, const DegradationSpec& spec, std::uint64_t instance_seed);
/// degrade() before the final clip to [0, 1]; same noise draws.
Image degrade_unclipped(const Image& img, const DegradationSpec& spec, std::uint64_t instance_seed);

/// T independently degraded copies of one scene; frame t uses the noise seed
/// derive_seed(spec.seed, "frame", t).
Clip gen_static_clip(const Image& scene, const DegradationSpec& spec, std::size_t frames);

/// Content moved by (dx, dy) pixels: out(y, x) = img(y - dy, x - dx), bilinear,
/// symmetric reflection outside the frame.
Image translate(const Image& img, double dx, double dy);

/// Constant-velocity trajectory starting at (0, 0), at most `max_speed`
/// pixels per frame and within translation bounds.
Trajectory random_trajectory(Rng& rng, std::size_t frames, std::size_t height, std::size_t width,
                             double max_speed);

Clip gen_motion_clip(const Image& scene, const Trajectory& traj, const DegradationSpec& spec,
                     std::size_t frames);

/// Rounds to 8 bits and back, the same mapping the PPM writer applies.
Image quantize8(const Image& img);

std::string encode_ppm(const Image& img);
Image decode_ppm(const std::string& bytes, const std::string& source = "<memory>");
void write_ppm(const Image& img, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

/// dir/{frame_0000.ppm, ..., gt/frame_0000.ppm, ..., manifest.json}
void write_clip(const Clip& clip, const std::filesystem::path& dir);
Clip read_clip(const std::filesystem::path& dir);

struct CorpusConfig {
  std::size_t train_clips = 16;
  std::size_t test_static_clips = 4;
  std::size_t test_motion_clips = 8;
  std::size_t frames = 6;
  std::size_t size = 64;
  double max_speed = 2.0;
  DegradationRanges ranges;
  std::optional<std::filesystem::path> scenes_dir;  // PPM scenes instead of procedural ones
  std::uint64_t seed = 1;
  std::size_t threads = 1;

  void validate() const;
};

/// The corpus layout: train/, test_static/ and test_motion/ clip directories
/// plus index.json listing them.
struct CorpusIndex {
  std::vector<std::string> train, test_static, test_motion;
};

/// Generates the corpus into `dir` (which must not exist or be empty). Output
/// is written to a sibling temporary directory first and renamed into place.
CorpusIndex generate_corpus(const CorpusConfig& cfg, const std::filesystem::path& dir);

CorpusIndex read_corpus_index(const std::filesystem::path& dir);

}  // namespace sxda
