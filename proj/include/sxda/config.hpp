#pragma once

// Run configuration: `key = value` lines with `#` comments. Keys live in the
// sections model, train, data and eval, written either as `[section]`
// headers or as dotted keys (`train.lr = 1e-4`). `seed` and `threads` are
// top-level.

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "sxda/datagen.hpp"
#include "sxda/network.hpp"
#include "sxda/training.hpp"

namespace sxda {

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

/// Every accepted key with its default and description.
const std::vector<ConfigKey>& config_keys();

class RunConfig {
 public:
  RunConfig();

  /// Merges a config file; later calls override earlier ones.
  void load_file(const std::filesystem::path& path);
  void parse_text(std::string_view text, const std::string& source = "<text>");
  /// Sets one key; rejects unknown keys and malformed values.
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  std::vector<std::size_t> get_size_list(const std::string& key) const;

  ModelConfig model() const;
  TrainConfig train() const;
  CorpusConfig corpus() const;

  /// Every key in `key = value` form, sorted.
  std::string echo() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace sxda
