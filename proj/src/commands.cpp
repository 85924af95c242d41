#include "sxda/commands.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "sxda/random.hpp"

namespace sxda {
namespace fs = std::filesystem;

namespace {

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << text;
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

std::string fixed(double v, int digits) {
  if (std::isinf(v)) return "inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::vector<Clip> load_split(const fs::path& corpus, const std::string& split) {
  const CorpusIndex idx = read_corpus_index(corpus);
  const std::vector<std::string>* names = nullptr;
  if (split == "train") names = &idx.train;
  else if (split == "test_static") names = &idx.test_static;
  else if (split == "test_motion") names = &idx.test_motion;
  else throw ConfigError("unknown split '" + split + "' (train, test_static or test_motion)");
  std::vector<Clip> clips;
  for (const auto& n : *names) clips.push_back(read_clip(corpus / n));
  if (clips.empty()) throw DataError("split '" + split + "' of " + corpus.string() + " is empty");
  return clips;
}

}  // namespace

std::uint64_t batch_digest(const std::vector<std::uint64_t>& hashes) {
  std::uint64_t h = 0x9e3779b97f4a7c15ULL;
  for (std::uint64_t v : hashes) h = splitmix64(h ^ v);
  return h;
}

CorpusIndex cmd_gen_data(const RunConfig& cfg, const fs::path& out, bool force, std::ostream& log) {
  const CorpusConfig cc = cfg.corpus();
  if (force && fs::exists(out)) fs::remove_all(out);
  log << "generating corpus in " << out.string() << "\n";
  CorpusIndex idx = generate_corpus(cc, out);
  log << idx.train.size() << " train, " << idx.test_static.size() << " test_static, "
      << idx.test_motion.size() << " test_motion clips\n";
  return idx;
}

TrainResult cmd_train(const RunConfig& cfg, const fs::path& corpus, const fs::path& checkpoint,
                      std::ostream& log) {
  TrainConfig tc = cfg.train();
  tc.checkpoint = checkpoint;
  const std::vector<Clip> clips = load_training_clips(corpus);

  std::string log_text = cfg.echo();
  log << log_text;
  TrainResult r = train(tc, clips, [&](const std::string& line) {
    log << line << "\n" << std::flush;
    log_text += line + "\n";
  });

  std::string batches;
  for (std::uint64_t h : r.batch_hashes) batches += hex64(h) + "\n";
  write_text_atomic(checkpoint.string() + ".log", log_text);
  write_text_atomic(checkpoint.string() + ".batches", batches);
  return r;
}

MetricReport cmd_enhance(const fs::path& checkpoint, const fs::path& clip_dir, const fs::path& out_dir,
                         std::size_t threads) {
  const ModelParams<float> params = load_checkpoint(checkpoint);
  const Clip clip = read_clip(clip_dir);
  Clip result = clip;
  const MetricReport report = eval_clip(params, clip, &result.frames, threads);

  // Stage next to the destination so a failure leaves no partial directory.
  const fs::path staging = out_dir.parent_path() / ("." + out_dir.filename().string() + ".partial");
  fs::remove_all(staging);
  write_clip(result, staging);
  fs::remove_all(out_dir);
  fs::rename(staging, out_dir);
  return report;
}

MetricReport cmd_eval(const fs::path& checkpoint, const fs::path& clip_dir, std::size_t threads) {
  const ModelParams<float> params = load_checkpoint(checkpoint);
  return eval_clip(params, read_clip(clip_dir), nullptr, threads);
}

std::vector<AblationVariant> parse_ablation_variants(const std::string& list, std::size_t default_dilation) {
  std::vector<AblationVariant> out;
  std::stringstream ss(list);
  for (std::string item; std::getline(ss, item, ',');) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    AblationVariant v;
    v.label = item;
    v.dilation = default_dilation;
    const auto colon = item.find(':');
    v.variant = parse_variant(item.substr(0, colon));
    if (colon != std::string::npos) {
      if (v.variant != Variant::full) throw ConfigError("only the full variant takes a dilation: '" + item + "'");
      try {
        std::size_t used = 0;
        const std::string d = item.substr(colon + 1);
        const unsigned long n = std::stoul(d, &used);
        if (used != d.size() || n == 0) throw std::invalid_argument(d);
        v.dilation = n;
      } catch (const std::exception&) {
        throw ConfigError("bad dilation in ablation variant '" + item + "'");
      }
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("eval.variants lists no variants");
  return out;
}

std::string AblationResult::to_markdown() const {
  std::ostringstream s;
  s << "| variant | psnr (dB) | ssim | flicker | mse |";
  for (std::size_t i = 0; i < seeds.size(); ++i) s << " mse seed " << seeds[i] << " |";
  s << "\n|---|---|---|---|---|";
  for (std::size_t i = 0; i < seeds.size(); ++i) s << "---|";
  s << "\n";
  for (const auto& r : rows) {
    s << "| " << r.label << " | " << fixed(r.psnr, 3) << " | " << fixed(r.ssim, 4) << " | "
      << fixed(r.flicker, 5) << " | " << fixed(r.mse, 6) << " |";
    for (double m : r.mse_per_seed) s << " " << fixed(m, 6) << " |";
    s << "\n";
  }
  s << "\nsplit: " << split << "; input flicker " << fixed(flicker_in, 5)
    << "; batch order identical across variants: " << (batch_orders_match ? "yes" : "NO") << "\n";
  return s.str();
}

std::string AblationResult::to_json() const {
  nlohmann::ordered_json j;
  j["split"] = split;
  j["seeds"] = seeds;
  j["flicker_in"] = flicker_in;
  j["batch_orders_match"] = batch_orders_match;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json row;
    row["variant"] = r.label;
    row["psnr"] = std::isinf(r.psnr) ? nlohmann::ordered_json("inf") : nlohmann::ordered_json(r.psnr);
    row["ssim"] = r.ssim;
    row["flicker"] = r.flicker;
    row["mse"] = r.mse;
    row["mse_per_seed"] = r.mse_per_seed;
    std::vector<std::string> digests;
    for (auto d : r.batch_digest_per_seed) digests.push_back(hex64(d));
    row["batch_digest_per_seed"] = digests;
    j["rows"].push_back(row);
  }
  return j.dump(2) + "\n";
}

AblationResult cmd_ablate(const RunConfig& cfg, const fs::path& corpus, const fs::path& out_dir,
                          std::ostream& log) {
  const TrainConfig base_tc = cfg.train();
  const auto variants = parse_ablation_variants(cfg.get("eval.variants"), base_tc.model.dilation);
  const std::size_t n_seeds = cfg.get_size("eval.seeds");
  if (n_seeds == 0) throw ConfigError("eval.seeds must be positive");

  AblationResult res;
  res.split = cfg.get("eval.split");
  const std::vector<Clip> train_clips = load_training_clips(corpus);
  const std::vector<Clip> test_clips = load_split(corpus, res.split);
  for (std::size_t s = 0; s < n_seeds; ++s) res.seeds.push_back(base_tc.seed + s);
  log << cfg.echo();

  for (const auto& v : variants) {
    AblationRow row;
    row.label = v.label;
    double psnr_sum = 0, ssim_sum = 0, flicker_sum = 0, mse_sum = 0, flicker_in_sum = 0;
    std::size_t n = 0;
    for (std::uint64_t seed : res.seeds) {
      TrainConfig tc = base_tc;
      tc.seed = seed;
      tc.model.variant = v.variant;
      tc.model.dilation = v.dilation;
      tc.checkpoint.reset();
      tc.validate();
      log << "training " << v.label << " seed " << seed << "\n" << std::flush;
      std::string last;
      const TrainResult tr = train(tc, train_clips, [&](const std::string& line) { last = line; });
      log << "  " << last << "\n";
      row.batch_digest_per_seed.push_back(batch_digest(tr.batch_hashes));
      double seed_mse = 0;
      for (const Clip& clip : test_clips) {
        const MetricReport m = eval_clip(tr.params, clip, nullptr, tc.threads);
        psnr_sum += m.psnr_mean;
        ssim_sum += m.ssim_mean;
        flicker_sum += m.flicker_out;
        flicker_in_sum += m.flicker_in;
        mse_sum += m.mse_mean;
        seed_mse += m.mse_mean;
        ++n;
      }
      row.mse_per_seed.push_back(seed_mse / static_cast<double>(test_clips.size()));
      log << "  test mse " << fixed(row.mse_per_seed.back(), 6) << "\n" << std::flush;
    }
    row.psnr = psnr_sum / double(n);
    row.ssim = ssim_sum / double(n);
    row.flicker = flicker_sum / double(n);
    row.mse = mse_sum / double(n);
    res.flicker_in = flicker_in_sum / double(n);
    res.rows.push_back(row);
  }
  for (const auto& r : res.rows)
    if (r.batch_digest_per_seed != res.rows.front().batch_digest_per_seed) res.batch_orders_match = false;

  fs::create_directories(out_dir);
  write_text_atomic(out_dir / "ablation.md", res.to_markdown());
  write_text_atomic(out_dir / "ablation.json", res.to_json());
  log << res.to_markdown();
  return res;
}

}  // namespace sxda
