#pragma once

// Flat key-value configuration with one INI section per module:
//
//   version = 1
//   [corpus]
//   n_queries = 2000
//   [clicks]
//   alpha = 0.25, 0.75
//
// Keys are addressed as "section.key".

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "opbm/common.hpp"

namespace opbm {

class Config {
 public:
  static constexpr int kVersion = 1;

  Config() = default;

  static Config parse(const std::string& text) {
    Config cfg;
    std::istringstream in(text);
    try {
      boost::property_tree::read_ini(in, cfg.tree_);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ParseError("config: " + e.message(), e.line());
    }
    cfg.check_version();
    return cfg;
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  bool has(const std::string& key) const { return tree_.get_optional<std::string>(key).has_value(); }

  std::optional<std::string> raw(const std::string& key) const {
    auto v = tree_.get_optional<std::string>(key);
    if (!v) return std::nullopt;
    return std::string(trim(*v));
  }

  /// Accepts "section.key=value".
  void set(const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("override must be key=value: " + assignment);
    set(std::string(trim(std::string_view(assignment).substr(0, eq))),
        std::string(trim(std::string_view(assignment).substr(eq + 1))));
  }

  void set(const std::string& key, const std::string& value) { tree_.put(key, value); }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    return raw(key).value_or(fallback);
  }

  double get_double(const std::string& key, double fallback) const {
    auto v = raw(key);
    return v ? parse_double(*v) : fallback;
  }

  template <class Int>
  Int get_int(const std::string& key, Int fallback) const {
    auto v = raw(key);
    return v ? parse_int<Int>(*v) : fallback;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto v = raw(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
    if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
    throw ParseError("config: '" + key + "' is not a boolean: " + *v);
  }

  std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& fallback) const {
    auto v = raw(key);
    if (!v) return fallback;
    std::vector<std::string> out;
    for (auto part : split_view(*v, ',')) {
      auto t = trim(part);
      if (!t.empty()) out.emplace_back(t);
    }
    return out;
  }

  std::vector<double> get_double_list(const std::string& key, const std::vector<double>& fallback) const {
    if (!has(key)) return fallback;
    std::vector<double> out;
    for (const auto& s : get_list(key, {})) out.push_back(parse_double(s));
    return out;
  }

  /// Sorted "section.key = value" lines; stable input for hashing.
  std::string canonical() const {
    std::map<std::string, std::string> flat;
    for (const auto& [name, node] : tree_) {
      if (node.empty()) {
        flat[name] = std::string(trim(node.data()));
      } else {
        for (const auto& [key, leaf] : node) flat[name + "." + key] = std::string(trim(leaf.data()));
      }
    }
    std::string out;
    for (const auto& [k, v] : flat) out += k + " = " + v + "\n";
    return out;
  }

  /// INI text that parses back to the same configuration.
  std::string to_ini() const {
    std::ostringstream out;
    boost::property_tree::write_ini(out, tree_);
    return out.str();
  }

 private:
  void check_version() const {
    auto v = raw("version");
    if (v && parse_int<int>(*v) != kVersion)
      throw ParseError("config: unsupported version " + *v);
  }

  boost::property_tree::ptree tree_;
};

}  // namespace opbm
