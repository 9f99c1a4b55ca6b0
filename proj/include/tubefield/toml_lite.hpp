#pragma once

// Single-purpose reader for the flat [section] key = value config layout
// this project ships: integers, floats, booleans and quoted strings, with
// '#' comments. Unknown keys are surfaced so the CLI can reject typos.

#include <cstdint>
#include <map>
#include <set>
#include <string>

namespace tubefield {

class TomlConfig {
public:
  static TomlConfig parse_file(const std::string& path);
  static TomlConfig parse_string(const std::string& text);

  bool has(const std::string& section, const std::string& key) const;
  int64_t get_int(const std::string& section, const std::string& key,
                  int64_t fallback) const;
  double get_double(const std::string& section, const std::string& key,
                    double fallback) const;
  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const;
  bool get_bool(const std::string& section, const std::string& key,
                bool fallback) const;

  // every (section, key) present in the file, for unknown-key validation
  std::set<std::pair<std::string, std::string>> keys() const;

private:
  std::map<std::string, std::map<std::string, std::string>> values_;
  const std::string* find(const std::string& section,
                          const std::string& key) const;
};

} // namespace tubefield
