#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace mft {

/// Flat `key = value` text with `[section]` headers; keys are stored as
/// "section.key". `#` and `;` start comments.
class Config {
 public:
  static Config parse(const std::string& text, const std::string& origin = "<config>");
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  std::optional<std::string> find(const std::string& key) const;
  const std::map<std::string, std::string>& entries() const { return values_; }

  /// Sorted `key=value` lines; the basis of the config hash.
  std::string canonical() const;
  std::uint64_t hash() const;

 private:
  std::map<std::string, std::string> values_;
};

std::string hex64(std::uint64_t v);

/// One documented key: name, default (empty when there is none) and a short description.
struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

/// Typed reads against a fixed key registry. Unknown keys in the file are a
/// ConfigError naming the key; so are malformed values.
class ConfigReader {
 public:
  ConfigReader(const Config& config, const std::vector<ConfigKey>& registry);

  bool has(const std::string& key) const;
  std::string str(const std::string& key) const;
  std::string required(const std::string& key, const std::string& why = {}) const;
  std::int64_t integer(const std::string& key) const;
  std::size_t count(const std::string& key) const;  // non-negative integer
  double real(const std::string& key) const;
  bool boolean(const std::string& key) const;
  std::vector<std::string> list(const std::string& key) const;  // comma separated, blanks dropped
  std::vector<std::size_t> count_list(const std::string& key) const;

 private:
  const std::string& default_of(const std::string& key) const;
  std::optional<std::string> raw(const std::string& key) const;

  const Config& config_;
  std::map<std::string, std::string> defaults_;
};

}  // namespace mft
