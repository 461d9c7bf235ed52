#pragma once

#include <map>
#include <set>
#include <string>
#include <utility>

namespace steppref {

// ============================================================================
// Plain-text run configuration: "[section]" headers over "key = value" lines,
// '#' comments, blank lines ignored. Every key a run does not consume is an
// error — silent typos in experiment configs are how wrong numbers get
// published.
// ============================================================================

class ConfigMap {
 public:
  // Parse errors raise ConfigError with a line number.
  static ConfigMap parse(const std::string& text);
  static ConfigMap load(const std::string& path);  // IoError when unreadable

  bool has(const std::string& section, const std::string& key) const;

  // Typed getters returning `fallback` when the key is absent; present keys
  // that fail to parse raise ConfigError. Every get marks the key consumed.
  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const;
  long get_int(const std::string& section, const std::string& key, long fallback) const;
  double get_double(const std::string& section, const std::string& key,
                    double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;

  // ConfigError naming every never-consumed key.
  void require_all_consumed() const;

  const std::map<std::string, std::map<std::string, std::string>>& sections() const {
    return sections_;
  }

 private:
  const std::string* find(const std::string& section, const std::string& key) const;

  std::map<std::string, std::map<std::string, std::string>> sections_;
  mutable std::set<std::pair<std::string, std::string>> consumed_;
};

}  // namespace steppref
