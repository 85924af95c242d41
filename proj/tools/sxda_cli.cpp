#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sxda/commands.hpp"
#include "sxda/platform.hpp"
#include "sxda/selftest.hpp"

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4, kSelftest = 5 };

std::string config_key_help() {
  std::string s = "Config keys (file `key = value` lines or --set key=value):\n";
  for (const auto& k : sxda::config_keys()) {
    std::string lhs = "  " + k.name + " = " + k.default_value;
    if (lhs.size() < 44) lhs.resize(44, ' ');
    s += lhs + " " + k.help + "\n";
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  sxda::tune_allocator();
  CLI::App app{"Low-light video enhancement with self-cross dilated attention"};
  app.require_subcommand(1);
  app.fallthrough();
  app.footer(config_key_help());

  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  app.add_option("--config", config_file, "config file to load before overrides")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "override a config key (key=value); repeatable");
  app.add_option("--seed", seed, "master seed (config key seed)");
  app.add_option("--threads", threads, "worker threads (config key threads)");

  std::string out, data, checkpoint, clip_dir;
  bool force = false;
  std::optional<std::size_t> clips, frames, size;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  gen->add_option("--out", out, "corpus directory")->required();
  gen->add_flag("--force", force, "replace an existing non-empty directory");
  gen->add_option("--clips", clips, "training clips (data.clips)");
  gen->add_option("--frames", frames, "frames per clip (data.frames)");
  gen->add_option("--size", size, "frame size (data.size)");

  auto* tr = app.add_subcommand("train", "train a model on a corpus's training split");
  tr->add_option("--data", data, "corpus directory")->required();
  tr->add_option("--out", checkpoint, "checkpoint path; .log and .batches files are written beside it")
      ->required();

  auto* en = app.add_subcommand("enhance", "enhance every frame of a clip");
  en->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  en->add_option("--clip", clip_dir, "clip directory")->required();
  en->add_option("--out", out, "output clip directory")->required();

  auto* ev = app.add_subcommand("eval", "print the metric report of a clip as JSON");
  ev->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  ev->add_option("--clip", clip_dir, "clip directory")->required();

  auto* ab = app.add_subcommand("ablate", "train and compare the variants listed in eval.variants");
  ab->add_option("--data", data, "corpus directory")->required();
  ab->add_option("--out", out, "directory for ablation.md and ablation.json")->required();

  auto* st = app.add_subcommand("selftest", "run the invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    sxda::RunConfig cfg;
    if (!config_file.empty()) cfg.load_file(config_file);
    if (clips) cfg.set("data.clips", std::to_string(*clips));
    if (frames) cfg.set("data.frames", std::to_string(*frames));
    if (size) cfg.set("data.size", std::to_string(*size));
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw sxda::ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.set("seed", std::to_string(*seed));
    if (threads) cfg.set("threads", std::to_string(*threads));
    const std::size_t nthreads = cfg.get_size("threads");

    if (*gen) {
      sxda::cmd_gen_data(cfg, out, force, std::cerr);
    } else if (*tr) {
      sxda::cmd_train(cfg, data, checkpoint, std::cerr);
    } else if (*en) {
      const auto r = sxda::cmd_enhance(checkpoint, clip_dir, out, nthreads);
      std::cerr << "wrote " << r.frames() << " frames to " << out << "\n";
      std::cout << r.to_json() << "\n";
    } else if (*ev) {
      std::cout << sxda::cmd_eval(checkpoint, clip_dir, nthreads).to_json() << "\n";
    } else if (*ab) {
      const auto r = sxda::cmd_ablate(cfg, data, out, std::cerr);
      std::cout << r.to_markdown();
    } else if (*st) {
      const auto results = sxda::run_selftest(cfg.get_u64("seed"));
      std::size_t failed = 0;
      for (const auto& p : results) {
        std::cout << (p.passed ? "PASS " : "FAIL ") << p.name;
        if (!p.detail.empty()) std::cout << " (" << p.detail << ")";
        std::cout << "\n";
        failed += !p.passed;
      }
      std::cout << results.size() - failed << "/" << results.size() << " properties passed\n";
      return failed ? kSelftest : kOk;
    }
  } catch (const sxda::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfig;
  } catch (const sxda::DimensionError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfig;
  } catch (const sxda::ContractError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfig;
  } catch (const sxda::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const sxda::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}
