#pragma once

// Subcommand implementations behind the command-line tool. Each takes the
// resolved configuration and writes progress to `log`.

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "sxda/config.hpp"
#include "sxda/metrics.hpp"

namespace sxda {

/// Builds a corpus in `out`. With `force` an existing directory is removed
/// first; otherwise it must be absent or empty.
CorpusIndex cmd_gen_data(const RunConfig& cfg, const std::filesystem::path& out, bool force,
                         std::ostream& log);

/// Trains on the corpus's training split and writes `checkpoint`, plus
/// `<checkpoint>.log` (resolved config and loss lines) and
/// `<checkpoint>.batches` (one batch hash per iteration, hex).
TrainResult cmd_train(const RunConfig& cfg, const std::filesystem::path& corpus,
                      const std::filesystem::path& checkpoint, std::ostream& log);

/// Enhances every frame of the clip in `clip_dir` and writes a clip directory
/// with the same layout to `out_dir`. Returns the scores of the result.
MetricReport cmd_enhance(const std::filesystem::path& checkpoint, const std::filesystem::path& clip_dir,
                         const std::filesystem::path& out_dir, std::size_t threads);

MetricReport cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& clip_dir,
                      std::size_t threads);

/// One ablation variant: a model variant plus dilation, e.g. "full:3".
struct AblationVariant {
  std::string label;
  Variant variant = Variant::full;
  std::size_t dilation = 2;
};
std::vector<AblationVariant> parse_ablation_variants(const std::string& list, std::size_t default_dilation);

struct AblationRow {
  std::string label;
  std::vector<double> mse_per_seed;
  double psnr = 0, ssim = 0, flicker = 0, mse = 0;  // means over seeds and clips
  std::vector<std::uint64_t> batch_digest_per_seed;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string split;
  std::vector<std::uint64_t> seeds;
  double flicker_in = 0;
  bool batch_orders_match = true;

  std::string to_markdown() const;
  std::string to_json() const;
};

/// Trains every variant for every seed (seed, seed+1, ...) on the training
/// split and scores it on `eval.split`. Writes ablation.md and ablation.json
/// into `out_dir`.
AblationResult cmd_ablate(const RunConfig& cfg, const std::filesystem::path& corpus,
                          const std::filesystem::path& out_dir, std::ostream& log);

/// Order-sensitive digest of a run's batch hashes.
std::uint64_t batch_digest(const std::vector<std::uint64_t>& hashes);

}  // namespace sxda
