// toml_lite.hpp: a small TOML reader covering the subset experiment configs
// use: [section] / [a.b] headers, bare keys, strings with basic escapes,
// integers, floats, booleans, flat arrays, and # comments. Keys are exposed
// dotted ("decoding.final.temperature").

#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "capval/errors.hpp"

namespace capval {

struct TomlValue {
  std::variant<bool, std::int64_t, double, std::string, std::vector<TomlValue>> value;

  bool is_string() const { return std::holds_alternative<std::string>(value); }
  bool is_bool() const { return std::holds_alternative<bool>(value); }
  bool is_int() const { return std::holds_alternative<std::int64_t>(value); }
  bool is_float() const { return std::holds_alternative<double>(value); }
  bool is_array() const { return std::holds_alternative<std::vector<TomlValue>>(value); }
};

class TomlTable {
 public:
  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback = "") const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    if (!it->second.is_string()) throw ConfigError("config key '" + key + "' must be a string");
    return std::get<std::string>(it->second.value);
  }

  std::int64_t get_int(const std::string& key, std::int64_t fallback = 0) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    if (!it->second.is_int()) throw ConfigError("config key '" + key + "' must be an integer");
    return std::get<std::int64_t>(it->second.value);
  }

  double get_double(const std::string& key, double fallback = 0.0) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    if (it->second.is_int()) return static_cast<double>(std::get<std::int64_t>(it->second.value));
    if (!it->second.is_float()) throw ConfigError("config key '" + key + "' must be a number");
    return std::get<double>(it->second.value);
  }

  bool get_bool(const std::string& key, bool fallback = false) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    if (!it->second.is_bool()) throw ConfigError("config key '" + key + "' must be a boolean");
    return std::get<bool>(it->second.value);
  }

  std::vector<double> get_double_array(const std::string& key,
                                       const std::vector<double>& fallback = {}) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    if (!it->second.is_array()) throw ConfigError("config key '" + key + "' must be an array");
    std::vector<double> out;
    for (const auto& v : std::get<std::vector<TomlValue>>(it->second.value)) {
      if (v.is_int()) {
        out.push_back(static_cast<double>(std::get<std::int64_t>(v.value)));
      } else if (v.is_float()) {
        out.push_back(std::get<double>(v.value));
      } else {
        throw ConfigError("config key '" + key + "' must contain numbers");
      }
    }
    return out;
  }

  void set(const std::string& key, TomlValue v) { entries_[key] = std::move(v); }

  const std::map<std::string, TomlValue>& entries() const { return entries_; }

 private:
  std::map<std::string, TomlValue> entries_;
};

namespace toml_detail {

inline void skip_ws(const std::string& s, std::size_t& i) {
  while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
}

inline std::string parse_basic_string(const std::string& s, std::size_t& i, int lineno) {
  std::string out;
  ++i;  // opening quote
  while (i < s.size() && s[i] != '"') {
    if (s[i] == '\\') {
      ++i;
      if (i >= s.size()) break;
      switch (s[i]) {
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case 'r': out += '\r'; break;
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        default:
          throw ParseError("line " + std::to_string(lineno) + ": unsupported escape \\" +
                           std::string(1, s[i]));
      }
      ++i;
    } else {
      out += s[i++];
    }
  }
  if (i >= s.size()) throw ParseError("line " + std::to_string(lineno) + ": unterminated string");
  ++i;  // closing quote
  return out;
}

inline TomlValue parse_scalar(const std::string& token, int lineno) {
  if (token == "true") return TomlValue{true};
  if (token == "false") return TomlValue{false};
  const bool looks_float = token.find('.') != std::string::npos ||
                           token.find('e') != std::string::npos ||
                           token.find('E') != std::string::npos;
  try {
    std::size_t used = 0;
    if (looks_float) {
      const double d = std::stod(token, &used);
      if (used == token.size()) return TomlValue{d};
    } else {
      const std::int64_t n = std::stoll(token, &used);
      if (used == token.size()) return TomlValue{n};
    }
  } catch (const std::exception&) {
  }
  throw ParseError("line " + std::to_string(lineno) + ": cannot parse value '" + token + "'");
}

inline TomlValue parse_value(const std::string& s, std::size_t& i, int lineno);

inline TomlValue parse_array(const std::string& s, std::size_t& i, int lineno) {
  std::vector<TomlValue> items;
  ++i;  // '['
  while (true) {
    skip_ws(s, i);
    if (i >= s.size()) throw ParseError("line " + std::to_string(lineno) + ": unterminated array");
    if (s[i] == ']') {
      ++i;
      break;
    }
    items.push_back(parse_value(s, i, lineno));
    skip_ws(s, i);
    if (i < s.size() && s[i] == ',') ++i;
  }
  return TomlValue{items};
}

inline TomlValue parse_value(const std::string& s, std::size_t& i, int lineno) {
  skip_ws(s, i);
  if (i >= s.size()) throw ParseError("line " + std::to_string(lineno) + ": missing value");
  if (s[i] == '"') return TomlValue{parse_basic_string(s, i, lineno)};
  if (s[i] == '[') return parse_array(s, i, lineno);
  std::size_t start = i;
  while (i < s.size() && s[i] != ',' && s[i] != ']' && s[i] != '#' && s[i] != ' ' && s[i] != '\t') {
    ++i;
  }
  return parse_scalar(s.substr(start, i - start), lineno);
}

}  // namespace toml_detail

inline TomlTable parse_toml(const std::string& text) {
  TomlTable table;
  std::string prefix;
  int lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t eol = text.find('\n', pos);
    std::string line = text.substr(pos, eol == std::string::npos ? std::string::npos : eol - pos);
    pos = eol == std::string::npos ? text.size() + 1 : eol + 1;
    ++lineno;

    std::size_t i = 0;
    toml_detail::skip_ws(line, i);
    if (i >= line.size() || line[i] == '#') continue;

    if (line[i] == '[') {
      const std::size_t close = line.find(']', i);
      if (close == std::string::npos) {
        throw ParseError("line " + std::to_string(lineno) + ": unterminated section header");
      }
      prefix = line.substr(i + 1, close - i - 1);
      if (prefix.empty()) throw ParseError("line " + std::to_string(lineno) + ": empty section");
      prefix += '.';
      continue;
    }

    const std::size_t eq = line.find('=', i);
    if (eq == std::string::npos) {
      throw ParseError("line " + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = line.substr(i, eq - i);
    while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
    if (key.empty()) throw ParseError("line " + std::to_string(lineno) + ": empty key");

    std::size_t vi = eq + 1;
    TomlValue value = toml_detail::parse_value(line, vi, lineno);
    toml_detail::skip_ws(line, vi);
    if (vi < line.size() && line[vi] != '#') {
      throw ParseError("line " + std::to_string(lineno) + ": trailing characters after value");
    }
    table.set(prefix + key, std::move(value));
  }
  return table;
}

inline TomlTable load_toml(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_toml(text);
}

}  // namespace capval
