#pragma once

// Plain-text key/value files: one "key = value" per line, '#' starts a comment.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ecls/errors.hpp"

namespace ecls {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep))
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "config") {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
      const std::string key = trim(t.substr(0, eq));
      if (key.empty()) throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
      if (kv.values_.count(key)) throw ConfigError(origin + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
      kv.values_[key] = trim(t.substr(eq + 1));
    }
    return kv;
  }

  static KeyValues load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string str(const std::string& key, const std::string& fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double real(const std::string& key, double fallback) const {
    if (!has(key)) {
      used_.insert(key);
      return fallback;
    }
    const std::string v = str(key, "");
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    }
  }

  long long integer(const std::string& key, long long fallback) const {
    if (!has(key)) {
      used_.insert(key);
      return fallback;
    }
    const std::string v = str(key, "");
    long long out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
      throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
    return out;
  }

  bool flag(const std::string& key, bool fallback) const {
    if (!has(key)) {
      used_.insert(key);
      return fallback;
    }
    return parse_flag(key, str(key, ""));
  }

  static bool parse_flag(const std::string& key, const std::string& v) {
    if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
    if (v == "off" || v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("key '" + key + "': expected on/off, got '" + v + "'");
  }

  /// Keys present in the file that no accessor asked for.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace ecls
