#include "sxda/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace sxda {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"seed", "1", "master seed; every random stream is derived from it"},
      {"threads", "1", "worker threads for clip generation, batch elements and evaluation"},
      {"model.stages", "3", "number of resolution stages M (encoders + bottleneck)"},
      {"model.channels", "16", "channels at the first stage; doubles per stage"},
      {"model.block", "8", "attention block size b"},
      {"model.dilation", "2", "dilation factor d of the dilated cross attention"},
      {"model.heads", "2", "heads per stage: one value for all stages or a comma list"},
      {"model.variant", "full", "base, no-dilation or full"},
      {"train.lr", "1e-4", "Adam learning rate"},
      {"train.batch", "2", "triplets per iteration"},
      {"train.iterations", "2000", "optimizer steps"},
      {"train.patch", "64", "square crop size; multiple of block * 2^(stages-1)"},
      {"train.lambda_p", "0.1", "weight of the Sobel edge term in the loss"},
      {"train.beta1", "0.9", "Adam first-moment decay"},
      {"train.beta2", "0.999", "Adam second-moment decay"},
      {"train.eps", "1e-8", "Adam epsilon"},
      {"train.clip_norm", "1.0", "global gradient-norm clip (0 disables)"},
      {"train.log_interval", "10", "iterations between loss log lines"},
      {"train.checkpoint_interval", "0", "iterations between checkpoints (0: only the final one)"},
      {"data.clips", "16", "static training clips"},
      {"data.test_static", "4", "held-out static test clips"},
      {"data.test_motion", "8", "translation-motion test clips"},
      {"data.frames", "6", "frames per clip"},
      {"data.size", "64", "frame height and width in pixels"},
      {"data.gamma_min", "2.0", "lower bound of the darkening exponent"},
      {"data.gamma_max", "3.5", "upper bound of the darkening exponent"},
      {"data.scale_min", "0.15", "lower bound of the brightness scale"},
      {"data.scale_max", "0.5", "upper bound of the brightness scale"},
      {"data.sigma_r", "0.02", "read-noise standard deviation"},
      {"data.sigma_s", "0.04", "shot-noise variance per unit signal"},
      {"data.max_speed", "2.0", "maximum motion-clip speed in pixels per frame"},
      {"data.scenes_dir", "", "directory of PPM scenes to use instead of procedural ones"},
      {"eval.split", "test_motion", "corpus split scored by ablate"},
      {"eval.variants", "base,no-dilation,full:2,full:3", "ablation variants (full:<dilation>)"},
      {"eval.seeds", "3", "training seeds per ablation variant"},
  };
  return keys;
}

RunConfig::RunConfig() {
  for (const auto& k : config_keys()) values_[k.name] = k.default_value;
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  parse_text(ss.str(), path.string());
}

void RunConfig::parse_text(std::string_view text, const std::string& source) {
  std::string section;
  std::size_t lineno = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const std::string line = trim(std::string_view(raw).substr(0, raw.find('#')));
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section != "model" && section != "train" && section != "data" && section != "eval")
        throw ConfigError(where + ": unknown section '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
    try {
      set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const ConfigKey* spec = find_key(key);
  if (!spec) throw ConfigError("unknown config key '" + key + "'");
  const std::string old = values_[key];
  values_[key] = value;
  try {
    // Validate the value type eagerly so errors name the key.
    if (key == "model.variant") {
      parse_variant(value);
    } else if (key == "model.heads") {
      get_size_list(key);
    } else if (key == "data.scenes_dir" || key == "eval.variants" || key == "eval.split") {
    } else if (spec->default_value.find_first_of(".e") == std::string::npos) {
      get_u64(key);
    } else {
      get_double(key);
    }
  } catch (...) {
    values_[key] = old;
    throw;
  }
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  }
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ConfigError("config key '" + key + "': '" + v + "' is not a non-negative integer");
  return out;
}

std::size_t RunConfig::get_size(const std::string& key) const {
  return static_cast<std::size_t>(get_u64(key));
}

std::vector<std::size_t> RunConfig::get_size_list(const std::string& key) const {
  const std::string& v = get(key);
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    std::size_t n = 0;
    const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), n);
    if (item.empty() || ec != std::errc{} || p != item.data() + item.size())
      throw ConfigError("config key '" + key + "': '" + v + "' is not a comma list of integers");
    out.push_back(n);
  }
  if (out.empty()) throw ConfigError("config key '" + key + "' is empty");
  return out;
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  m.stages = get_size("model.stages");
  m.base_channels = get_size("model.channels");
  m.block = get_size("model.block");
  m.dilation = get_size("model.dilation");
  m.variant = parse_variant(get("model.variant"));
  auto heads = get_size_list("model.heads");
  if (heads.size() == 1) heads.assign(m.stages, heads[0]);
  m.heads = heads;
  m.validate();
  return m;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  t.model = model();
  t.lr = get_double("train.lr");
  t.batch = get_size("train.batch");
  t.iterations = get_size("train.iterations");
  t.patch = get_size("train.patch");
  t.lambda_p = get_double("train.lambda_p");
  t.beta1 = get_double("train.beta1");
  t.beta2 = get_double("train.beta2");
  t.eps = get_double("train.eps");
  t.clip_norm = get_double("train.clip_norm");
  t.log_interval = get_size("train.log_interval");
  t.checkpoint_interval = get_size("train.checkpoint_interval");
  t.seed = get_u64("seed");
  t.threads = get_size("threads");
  t.validate();
  return t;
}

CorpusConfig RunConfig::corpus() const {
  CorpusConfig c;
  c.train_clips = get_size("data.clips");
  c.test_static_clips = get_size("data.test_static");
  c.test_motion_clips = get_size("data.test_motion");
  c.frames = get_size("data.frames");
  c.size = get_size("data.size");
  c.max_speed = get_double("data.max_speed");
  c.ranges.gamma_min = get_double("data.gamma_min");
  c.ranges.gamma_max = get_double("data.gamma_max");
  c.ranges.scale_min = get_double("data.scale_min");
  c.ranges.scale_max = get_double("data.scale_max");
  c.ranges.sigma_r = get_double("data.sigma_r");
  c.ranges.sigma_s = get_double("data.sigma_s");
  if (!get("data.scenes_dir").empty()) c.scenes_dir = get("data.scenes_dir");
  c.seed = get_u64("seed");
  c.threads = get_size("threads");
  c.validate();
  return c;
}

std::string RunConfig::echo() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

}  // namespace sxda
