#include "steppref/config.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "steppref/errors.hpp"

namespace steppref {

namespace {

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace

ConfigMap ConfigMap::parse(const std::string& text) {
  ConfigMap out;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) {
        throw ConfigError("line " + std::to_string(lineno) + ": empty section name");
      }
      out.sections_.try_emplace(section);
      continue;
    }

    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    }
    if (section.empty()) {
      throw ConfigError("line " + std::to_string(lineno) + ": key before any [section]");
    }
    if (!out.sections_[section].emplace(key, value).second) {
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + section +
                        "." + key + "'");
    }
  }
  return out;
}

ConfigMap ConfigMap::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

const std::string* ConfigMap::find(const std::string& section, const std::string& key) const {
  auto s = sections_.find(section);
  if (s == sections_.end()) return nullptr;
  auto k = s->second.find(key);
  if (k == s->second.end()) return nullptr;
  consumed_.emplace(section, key);
  return &k->second;
}

bool ConfigMap::has(const std::string& section, const std::string& key) const {
  auto s = sections_.find(section);
  return s != sections_.end() && s->second.count(key) > 0;
}

std::string ConfigMap::get_string(const std::string& section, const std::string& key,
                                  const std::string& fallback) const {
  const std::string* v = find(section, key);
  return v ? *v : fallback;
}

long ConfigMap::get_int(const std::string& section, const std::string& key,
                        long fallback) const {
  const std::string* v = find(section, key);
  if (!v) return fallback;
  try {
    size_t used = 0;
    long parsed = std::stol(*v, &used);
    if (used != v->size()) throw std::invalid_argument("");
    return parsed;
  } catch (const std::exception&) {
    throw ConfigError("'" + section + "." + key + "': not an integer: " + *v);
  }
}

double ConfigMap::get_double(const std::string& section, const std::string& key,
                             double fallback) const {
  const std::string* v = find(section, key);
  if (!v) return fallback;
  try {
    size_t used = 0;
    double parsed = std::stod(*v, &used);
    if (used != v->size()) throw std::invalid_argument("");
    return parsed;
  } catch (const std::exception&) {
    throw ConfigError("'" + section + "." + key + "': not a number: " + *v);
  }
}

bool ConfigMap::get_bool(const std::string& section, const std::string& key,
                         bool fallback) const {
  const std::string* v = find(section, key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
  if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
  throw ConfigError("'" + section + "." + key + "': not a boolean: " + *v);
}

void ConfigMap::require_all_consumed() const {
  std::string unknown;
  for (const auto& [section, keys] : sections_) {
    for (const auto& [key, value] : keys) {
      if (!consumed_.count({section, key})) {
        unknown += (unknown.empty() ? "" : ", ") + section + "." + key;
      }
    }
  }
  if (!unknown.empty()) throw ConfigError("unknown config keys: " + unknown);
}

}  // namespace steppref
