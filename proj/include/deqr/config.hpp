#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace deqr {

// Line-oriented configuration: '#' comments, [section] headers, key = value
// pairs. Keys are addressed as "section.key" ("key" alone for the preamble).
// Values may be plain numbers or fractions like 8/255.
class ConfigFile {
 public:
  static ConfigFile parse_file(const std::string& path);
  static ConfigFile parse_text(const std::string& text,
                               const std::string& origin);

  bool has(const std::string& key) const;

  std::string get_string(const std::string& key,
                         const std::string& fallback) const;
  std::string require_string(const std::string& key) const;
  double get_number(const std::string& key, double fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Comma-separated list, empty string -> empty list.
  std::vector<std::string> get_list(const std::string& key) const;

  // Throws ConfigError when any key was never consumed (catches typos).
  void check_all_consumed() const;

  const std::string& origin() const { return origin_; }

 private:
  std::string lookup(const std::string& key) const;

  std::string origin_;
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
};

double parse_number(const std::string& text, const std::string& context);

}  // namespace deqr
