#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace iconsel::cli {

/// Where a resolved setting came from, lowest precedence first.
enum class Source { Default, File, Env, Flag };

std::string source_name(Source s);

struct Setting {
  std::string value;
  Source source = Source::Default;
};

/// Flat dotted-key configuration ("backend.kind", "scoring.epsilon", ...).
/// Every known key has a default; unknown keys are rejected wherever they
/// appear.
class Settings {
 public:
  Settings();

  static const std::map<std::string, std::string>& defaults();
  static bool known(const std::string& key);
  /// ICONSEL_ followed by the key upper-cased with dots as underscores.
  static std::string env_name(const std::string& key);

  void set(const std::string& key, std::string value, Source source);

  const std::string& str(const std::string& key) const;
  double number(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  bool flag(const std::string& key) const;

  const std::map<std::string, Setting>& entries() const { return entries_; }

  /// Key/value/source table, one line per key.
  std::string render_table() const;

  /// SHA-256 over the values that determine outputs; excludes resume,
  /// logging, concurrency and where outputs and the cache live.
  std::string config_hash() const;

  nlohmann::json to_json() const;

 private:
  std::map<std::string, Setting> entries_;
};

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

/// defaults < config file < environment < flags.
Settings resolve_settings(const std::optional<std::filesystem::path>& config_file,
                          const std::vector<std::pair<std::string, std::string>>& flag_values, const EnvLookup& env);

/// Reads `key = value` pairs from a TOML-style file; tables become key
/// prefixes. Throws ConfigError.
std::vector<std::pair<std::string, std::string>> read_config_file(const std::filesystem::path& path);

/// Entry point behind the iconsel executable. Returns the process exit code:
/// 0 success, 2 config error, 3 data error, 4 backend error, 5 incomplete
/// but resumable.
int run(int argc, const char* const* argv);

}  // namespace iconsel::cli
