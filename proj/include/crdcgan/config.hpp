#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "crdcgan/core/errors.hpp"
#include "crdcgan/core/serialize.hpp"

namespace crdcgan {

// Flat dotted-key configuration. Precedence: built-in defaults < config file
// < --set overrides. Keys must exist in the defaults registry, so typos fail
// loudly instead of being silently ignored.
class Config {
 public:
  void declare(const std::string& key, const std::string& default_value) { kv_[key] = default_value; }

  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  void set(const std::string& key, const std::string& value) {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("unknown config key: " + key);
    it->second = value;
  }

  void apply_override(const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value, got: " + assignment);
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ArtifactError("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string s = trim(line);
      if (s.empty() || s[0] == '#') continue;
      auto eq = s.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
      }
      try {
        set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
      } catch (const ConfigError& e) {
        throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  std::string get_string(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
  }

  int64_t get_int(const std::string& key) const {
    const std::string s = get_string(key);
    size_t pos = 0;
    int64_t v = 0;
    try {
      v = std::stoll(s, &pos);
    } catch (...) {
      throw ConfigError("config key " + key + " is not an integer: '" + s + "'");
    }
    if (pos != s.size()) throw ConfigError("config key " + key + " is not an integer: '" + s + "'");
    return v;
  }

  double get_double(const std::string& key) const {
    const std::string s = get_string(key);
    size_t pos = 0;
    double v = 0;
    try {
      v = std::stod(s, &pos);
    } catch (...) {
      throw ConfigError("config key " + key + " is not a number: '" + s + "'");
    }
    if (pos != s.size()) throw ConfigError("config key " + key + " is not a number: '" + s + "'");
    return v;
  }

  bool get_bool(const std::string& key) const {
    const std::string s = get_string(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config key " + key + " is not a bool: '" + s + "'");
  }

  std::vector<std::string> get_list(const std::string& key) const {
    std::vector<std::string> out;
    std::string s = get_string(key);
    std::istringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  // Canonical sorted serialization; also the hash input.
  std::string serialize() const {
    std::ostringstream out;
    for (const auto& [k, v] : kv_) out << k << " = " << v << "\n";
    return out.str();
  }

  void write_snapshot(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ArtifactError("cannot write config snapshot: " + path);
    out << serialize();
  }

  uint64_t hash() const { return fnv1a64(serialize()); }

  static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace crdcgan
