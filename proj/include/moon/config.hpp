// Flat "section.key = value" configuration files.
//
//   # comment
//   model.strategy = switching
//   train.epochs   = 40
//   model.backbone.channels = 8, 16, 32, 64
//
// Keys are dotted identifiers; values are scalars or comma-separated lists.
// Later assignments override earlier ones.
#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "moon/error.hpp"

namespace moon {

namespace detail {
inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}
}  // namespace detail

class FlatConfig {
 public:
  FlatConfig() = default;

  static FlatConfig parse(std::string_view text) {
    FlatConfig cfg;
    std::size_t line_no = 0;
    while (!text.empty()) {
      const auto nl = text.find('\n');
      std::string_view line = text.substr(0, nl);
      text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos)
        throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
      const auto key = detail::trim(line.substr(0, eq));
      const auto value = detail::trim(line.substr(eq + 1));
      if (key.empty() || !valid_key(key))
        throw ConfigError("config line " + std::to_string(line_no) + ": invalid key '" + std::string(key) + "'");
      cfg.values_[std::string(key)] = std::string(value);
    }
    return cfg;
  }

  static FlatConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return to_double(key, it->second);
  }

  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return to_int(key, it->second);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const auto& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config key '" + key + "': expected boolean, got '" + v + "'");
  }

  std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    for (const auto& item : split_list(it->second)) out.push_back(to_double(key, item));
    return out;
  }

  std::vector<std::int64_t> get_ints(const std::string& key, std::vector<std::int64_t> fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<std::int64_t> out;
    for (const auto& item : split_list(it->second)) out.push_back(to_int(key, item));
    return out;
  }

  // Merge `other` on top of this config.
  void merge(const FlatConfig& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  // Canonical text form: sorted keys, one assignment per line.
  std::string to_text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  static bool valid_key(std::string_view key) {
    return std::all_of(key.begin(), key.end(), [](char c) {
      return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '.';
    });
  }

  static std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string_view rest = v;
    while (true) {
      const auto comma = rest.find(',');
      const auto item = detail::trim(rest.substr(0, comma));
      if (!item.empty()) out.emplace_back(item);
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
    return out;
  }

  static double to_double(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
    }
  }

  static std::int64_t to_int(const std::string& key, const std::string& v) {
    std::int64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
      throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
    return out;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace moon
