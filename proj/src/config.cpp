#include "deqr/config.hpp"

#include <fstream>
#include <sstream>

#include "deqr/errors.hpp"

namespace deqr {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

}  // namespace

double parse_number(const std::string& text, const std::string& context) {
  const auto slash = text.find('/');
  try {
    std::size_t used = 0;
    if (slash != std::string::npos) {
      const double num = std::stod(text.substr(0, slash), &used);
      if (trim(text.substr(0, slash)).size() != used) throw std::invalid_argument(text);
      const double den = std::stod(text.substr(slash + 1), &used);
      if (den == 0.0) {
        throw ConfigError(context + ": division by zero in '" + text + "'");
      }
      return num / den;
    }
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError(context + ": cannot parse number '" + text + "'");
  }
}

ConfigFile ConfigFile::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_text(buffer.str(), path);
}

ConfigFile ConfigFile::parse_text(const std::string& text,
                                  const std::string& origin) {
  ConfigFile cfg;
  cfg.origin_ = origin;
  std::stringstream stream(text);
  std::string line;
  std::string section;
  std::size_t line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    if (stripped.front() == '[') {
      if (stripped.back() != ']') {
        throw ConfigError(origin + ":" + std::to_string(line_no) +
                          ": unterminated section header");
      }
      section = trim(stripped.substr(1, stripped.size() - 2));
      if (section.empty()) {
        throw ConfigError(origin + ":" + std::to_string(line_no) +
                          ": empty section name");
      }
      continue;
    }
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) +
                        ": expected key = value");
    }
    const std::string key = trim(stripped.substr(0, eq));
    std::string value = trim(stripped.substr(eq + 1));
    const auto comment = value.find('#');
    if (comment != std::string::npos) value = trim(value.substr(0, comment));
    if (key.empty()) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
    }
    const std::string full = section.empty() ? key : section + "." + key;
    if (cfg.values_.count(full) != 0) {
      throw ConfigError(origin + ":" + std::to_string(line_no) +
                        ": duplicate key '" + full + "'");
    }
    cfg.values_[full] = value;
  }
  return cfg;
}

bool ConfigFile::has(const std::string& key) const {
  return values_.count(key) != 0;
}

std::string ConfigFile::lookup(const std::string& key) const {
  consumed_.insert(key);
  const auto it = values_.find(key);
  if (it == values_.end()) {
    throw ConfigError(origin_ + ": missing required key '" + key + "'");
  }
  return it->second;
}

std::string ConfigFile::get_string(const std::string& key,
                                   const std::string& fallback) const {
  consumed_.insert(key);
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::string ConfigFile::require_string(const std::string& key) const {
  return lookup(key);
}

double ConfigFile::get_number(const std::string& key, double fallback) const {
  consumed_.insert(key);
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  return parse_number(it->second, origin_ + ": key '" + key + "'");
}

std::uint64_t ConfigFile::get_uint(const std::string& key,
                                   std::uint64_t fallback) const {
  const double v = get_number(key, static_cast<double>(fallback));
  if (v < 0.0 || v != static_cast<double>(static_cast<std::uint64_t>(v))) {
    throw ConfigError(origin_ + ": key '" + key +
                      "' must be a non-negative integer");
  }
  return static_cast<std::uint64_t>(v);
}

bool ConfigFile::get_bool(const std::string& key, bool fallback) const {
  consumed_.insert(key);
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "yes" || v == "1" || v == "on") return true;
  if (v == "false" || v == "no" || v == "0" || v == "off") return false;
  throw ConfigError(origin_ + ": key '" + key + "' must be a boolean, got '" +
                    v + "'");
}

std::vector<std::string> ConfigFile::get_list(const std::string& key) const {
  consumed_.insert(key);
  const auto it = values_.find(key);
  std::vector<std::string> out;
  if (it == values_.end()) return out;
  std::stringstream stream(it->second);
  std::string item;
  while (std::getline(stream, item, ',')) {
    const std::string entry = trim(item);
    if (!entry.empty()) out.push_back(entry);
  }
  return out;
}

void ConfigFile::check_all_consumed() const {
  for (const auto& [key, value] : values_) {
    if (consumed_.count(key) == 0) {
      throw ConfigError(origin_ + ": unknown key '" + key + "'");
    }
  }
}

}  // namespace deqr
