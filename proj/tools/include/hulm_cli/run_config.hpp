#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace hulm::cli {

// Flat "section.key" -> value view of defaults, config file and flags.
class RunConfig {
 public:
  RunConfig() = default;
  explicit RunConfig(std::map<std::string, std::string> values) : values_(std::move(values)) {}

  const std::string& str(const std::string& key) const;
  double real(const std::string& key) const;
  std::size_t count(const std::string& key) const;  // non-negative integer
  std::uint64_t u64(const std::string& key) const;
  bool flag(const std::string& key) const;  // on/off, true/false, 1/0, yes/no
  std::vector<std::string> list(const std::string& key) const;  // comma separated
  // Empty values are treated as unset.
  std::optional<std::filesystem::path> path(const std::string& key) const;
  std::filesystem::path required_path(const std::string& key) const;

  const std::map<std::string, std::string>& values() const noexcept { return values_; }
  nlohmann::json to_json() const;

 private:
  std::map<std::string, std::string> values_;
};

// Every known key with its default for `subcommand` (probe uses its own
// optimizer defaults).
std::map<std::string, std::string> default_values(const std::string& subcommand);

// Parses "key = value" lines under "[section]" headers; '#' and ';' start
// comments. A ".json" file is read as a flat object of section.key entries.
// Throws ConfigError naming unknown keys or malformed lines.
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path,
                                                    const std::map<std::string, std::string>& known);

// Precedence: flags > file > defaults. Unknown keys in the file or flags
// throw ConfigError naming the key.
RunConfig resolve_config(const std::string& subcommand, const std::optional<std::filesystem::path>& file,
                         const std::map<std::string, std::string>& flags);

}  // namespace hulm::cli
