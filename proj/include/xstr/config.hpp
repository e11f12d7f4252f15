// SPDX-License-Identifier: Apache-2.0
//
// Line-oriented `section.key = value` configuration files. Blank lines and
// lines starting with '#' are ignored. Every key must be claimed by a
// consumer; leftovers are reported as errors.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "xstr/errors.hpp"

namespace xstr {

class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text, const std::string& origin = "<config>") {
    ConfigFile cfg;
    std::istringstream is(text);
    std::string line;
    for (std::size_t no = 1; std::getline(is, line); ++no) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      const std::string where = origin + ":" + std::to_string(no);
      require(eq != std::string::npos, ErrorCode::ConfigError, where + ": expected 'section.key = value'");
      const std::string key = trim(t.substr(0, eq));
      const std::string value = trim(t.substr(eq + 1));
      const auto dot = key.find('.');
      require(dot != std::string::npos && dot > 0 && dot + 1 < key.size(), ErrorCode::ConfigError,
              where + ": key '" + key + "' must look like section.key");
      require(!cfg.values_.contains(key), ErrorCode::ConfigError, where + ": duplicate key '" + key + "'");
      cfg.values_[key] = value;
      cfg.lines_[key] = where;
    }
    return cfg;
  }

  static ConfigFile load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::ConfigError, "cannot read config " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return parse(os.str(), path.string());
  }

  bool has(const std::string& key) const { return values_.contains(key); }

  /// Keys under `section.` with the section stripped, in sorted order.
  std::map<std::string, std::string> section(const std::string& name) const {
    std::map<std::string, std::string> out;
    const std::string prefix = name + ".";
    for (const auto& [k, v] : values_)
      if (k.starts_with(prefix)) out[k.substr(prefix.size())] = v;
    return out;
  }

  const std::string& raw(const std::string& key) const {
    claimed_.insert(key);
    return values_.at(key);
  }

  std::string str(const std::string& key, const std::string& fallback) const {
    return has(key) ? raw(key) : fallback;
  }

  std::uint64_t u64(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = raw(key);
    std::size_t pos = 0;
    unsigned long long n = 0;
    try {
      n = std::stoull(v, &pos);
    } catch (const std::logic_error&) {
      pos = 0;
    }
    require(pos == v.size() && !v.empty() && v[0] != '-', ErrorCode::ConfigError,
            where(key) + ": " + key + " expects a non-negative integer, got '" + v + "'");
    return n;
  }

  double real(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = raw(key);
    std::size_t pos = 0;
    double d = 0;
    try {
      d = std::stod(v, &pos);
    } catch (const std::logic_error&) {
      pos = 0;
    }
    require(pos == v.size() && !v.empty() && std::isfinite(d), ErrorCode::ConfigError,
            where(key) + ": " + key + " expects a number, got '" + v + "'");
    return d;
  }

  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = raw(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    fail(ErrorCode::ConfigError, where(key) + ": " + key + " expects true/false, got '" + v + "'");
  }

  std::vector<std::string> list(const std::string& key, const std::vector<std::string>& fallback) const {
    if (!has(key)) return fallback;
    std::vector<std::string> out;
    std::istringstream is(raw(key));
    for (std::string part; std::getline(is, part, ',');) {
      part = trim(part);
      require(!part.empty(), ErrorCode::ConfigError, where(key) + ": empty list item in " + key);
      out.push_back(part);
    }
    return out;
  }

  void claim(const std::string& key) const { claimed_.insert(key); }

  /// Fails on the first key nobody asked for.
  void reject_unclaimed() const {
    for (const auto& [k, _] : values_)
      require(claimed_.contains(k), ErrorCode::ConfigError, where(k) + ": unknown key '" + k + "'");
  }

  std::string where(const std::string& key) const {
    auto it = lines_.find(key);
    return it == lines_.end() ? "<config>" : it->second;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
  }

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> lines_;
  mutable std::set<std::string> claimed_;
};

}  // namespace xstr
