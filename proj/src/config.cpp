#include "mft/config.hpp"

#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mft/error.hpp"
#include "mft/rng.hpp"

namespace mft {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.')) return false;
  return true;
}

}  // namespace

Config Config::parse(const std::string& text, const std::string& origin) {
  Config cfg;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto cut = line.find_first_of("#;");
    if (cut != std::string::npos) line.resize(cut);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!valid_name(section)) throw ConfigError(where + ": bad section name '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (!valid_name(key)) throw ConfigError(where + ": bad key '" + key + "'");
    const std::string full = section.empty() ? key : section + "." + key;
    if (cfg.values_.count(full)) throw ConfigError(where + ": duplicate key " + full);
    cfg.values_[full] = trim(line.substr(eq + 1));
  }
  return cfg;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void Config::set(const std::string& key, const std::string& value) { values_[key] = value; }

bool Config::has(const std::string& key) const { return values_.count(key) > 0; }

std::optional<std::string> Config::find(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string Config::canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

std::uint64_t Config::hash() const { return hash_string(canonical()); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

ConfigReader::ConfigReader(const Config& config, const std::vector<ConfigKey>& registry) : config_(config) {
  for (const auto& k : registry) defaults_[k.name] = k.default_value;
  for (const auto& [k, v] : config.entries())
    if (!defaults_.count(k)) throw ConfigError("unknown config key: " + k);
}

const std::string& ConfigReader::default_of(const std::string& key) const {
  auto it = defaults_.find(key);
  if (it == defaults_.end()) throw ConfigError("config key not registered: " + key);
  return it->second;
}

std::optional<std::string> ConfigReader::raw(const std::string& key) const {
  const std::string& def = default_of(key);
  if (auto v = config_.find(key)) return *v;
  if (def.empty()) return std::nullopt;
  return def;
}

bool ConfigReader::has(const std::string& key) const {
  auto v = raw(key);
  return v && !v->empty();
}

std::string ConfigReader::str(const std::string& key) const { return raw(key).value_or(""); }

std::string ConfigReader::required(const std::string& key, const std::string& why) const {
  auto v = raw(key);
  if (!v || v->empty())
    throw ConfigError("missing required config key: " + key + (why.empty() ? "" : " (" + why + ")"));
  return *v;
}

std::int64_t ConfigReader::integer(const std::string& key) const {
  const std::string s = required(key);
  std::int64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw ConfigError("config key " + key + ": '" + s + "' is not an integer");
  return v;
}

std::size_t ConfigReader::count(const std::string& key) const {
  const auto v = integer(key);
  if (v < 0) throw ConfigError("config key " + key + " must be >= 0, got " + std::to_string(v));
  return static_cast<std::size_t>(v);
}

double ConfigReader::real(const std::string& key) const {
  const std::string s = required(key);
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw ConfigError("config key " + key + ": '" + s + "' is not a number");
  return v;
}

bool ConfigReader::boolean(const std::string& key) const {
  const std::string s = required(key);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("config key " + key + ": '" + s + "' is not a boolean");
}

std::vector<std::string> ConfigReader::list(const std::string& key) const {
  std::vector<std::string> out;
  std::stringstream ss(str(key));
  std::string item;
  while (std::getline(ss, item, ','))
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

std::vector<std::size_t> ConfigReader::count_list(const std::string& key) const {
  std::vector<std::size_t> out;
  for (const auto& s : list(key)) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
      throw ConfigError("config key " + key + ": '" + s + "' is not a non-negative integer");
    out.push_back(v);
  }
  return out;
}

}  // namespace mft
