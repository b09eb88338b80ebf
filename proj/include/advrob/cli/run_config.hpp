#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "advrob/error.hpp"

namespace advrob::cli {

using json = nlohmann::ordered_json;

/// A parsed run-config file plus the directory relative paths resolve
/// against.
struct RunConfig {
  json root;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& p) const {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }
};

namespace detail {

inline std::vector<std::string> split_path(const std::string& dotted) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : dotted) {
    if (c == '.') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(cur);
  return parts;
}

inline bool is_index(const std::string& s) {
  return !s.empty() && s.find_first_not_of("0123456789") == std::string::npos;
}

}  // namespace detail

/// Applies one `dotted.path=value` override. The value is parsed as JSON
/// when possible (numbers, booleans, arrays) and taken as a string
/// otherwise. Numeric path segments index into arrays.
inline void apply_override(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &root;
  for (const auto& part : detail::split_path(key)) {
    if (part.empty()) throw ConfigError(key, "empty path segment");
    if (node->is_array() && detail::is_index(part)) {
      const auto i = std::stoul(part);
      if (i >= node->size()) throw ConfigError(key, "array index out of range");
      node = &(*node)[i];
    } else {
      if (!node->is_object() && !node->is_null()) throw ConfigError(key, "cannot descend into a non-object");
      node = &(*node)[part];
    }
  }
  *node = std::move(value);
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  if (!std::filesystem::is_regular_file(path)) throw ConfigError("config", "file not found: " + path.string());
  std::ifstream in(path);
  RunConfig cfg;
  try {
    cfg.root = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", std::string("invalid JSON: ") + e.what());
  }
  if (!cfg.root.is_object()) throw ConfigError("config", "top level must be an object");
  for (const auto& o : overrides) apply_override(cfg.root, o);
  cfg.base_dir = std::filesystem::absolute(path).parent_path();
  return cfg;
}

/// Typed, path-aware view of one config object. Every accessor reports
/// failures as ConfigError carrying the dotted field path.
class Section {
 public:
  Section(const json& node, std::string path) : node_(&node), path_(std::move(path)) {
    if (!node.is_object()) throw ConfigError(path_, "expected an object");
  }

  const std::string& path() const noexcept { return path_; }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return node_->contains(key) && !(*node_)[key].is_null(); }
  const json& raw(const std::string& key) const {
    if (!has(key)) throw ConfigError(field(key), "missing required field");
    return (*node_)[key];
  }

  Section section(const std::string& key) const { return Section(raw(key), field(key)); }

  std::vector<Section> sections(const std::string& key) const {
    const json& arr = raw(key);
    if (!arr.is_array()) throw ConfigError(field(key), "expected an array");
    std::vector<Section> out;
    for (std::size_t i = 0; i < arr.size(); ++i) out.emplace_back(arr[i], field(key) + "[" + std::to_string(i) + "]");
    return out;
  }

  std::string str(const std::string& key) const {
    const json& v = raw(key);
    if (!v.is_string()) throw ConfigError(field(key), "expected a string");
    return v.get<std::string>();
  }
  std::string str(const std::string& key, const std::string& def) const { return has(key) ? str(key) : def; }

  bool boolean(const std::string& key, bool def) const {
    if (!has(key)) return def;
    const json& v = raw(key);
    if (!v.is_boolean()) throw ConfigError(field(key), "expected true or false");
    return v.get<bool>();
  }

  /// Numbers may also be written as "a/b" strings, e.g. "8/255".
  double number(const std::string& key) const {
    const json& v = raw(key);
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
      const auto s = v.get<std::string>();
      const auto slash = s.find('/');
      try {
        if (slash == std::string::npos) return std::stod(s);
        const double den = std::stod(s.substr(slash + 1));
        if (den == 0.0) throw ConfigError(field(key), "division by zero");
        return std::stod(s.substr(0, slash)) / den;
      } catch (const std::logic_error&) {
      }
    }
    throw ConfigError(field(key), "expected a number");
  }
  double number(const std::string& key, double def) const { return has(key) ? number(key) : def; }
  std::optional<double> optional_number(const std::string& key) const {
    return has(key) ? std::optional<double>(number(key)) : std::nullopt;
  }

  std::uint64_t count(const std::string& key) const {
    const json& v = raw(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
      throw ConfigError(field(key), "expected a non-negative integer");
    return v.get<std::uint64_t>();
  }
  std::uint64_t count(const std::string& key, std::uint64_t def) const { return has(key) ? count(key) : def; }

  std::vector<double> numbers(const std::string& key) const {
    const json& v = raw(key);
    if (!v.is_array()) throw ConfigError(field(key), "expected an array of numbers");
    std::vector<double> out;
    for (const auto& x : v) {
      if (!x.is_number()) throw ConfigError(field(key), "expected an array of numbers");
      out.push_back(x.get<double>());
    }
    return out;
  }

 private:
  const json* node_;
  std::string path_;
};

}  // namespace advrob::cli
