#include "tubefield/toml_lite.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tubefield {

namespace {

std::string strip(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

// removes a trailing comment that is not inside a quoted string
std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') in_str = !in_str;
    if (s[i] == '#' && !in_str) return s.substr(0, i);
  }
  return s;
}

} // namespace

TomlConfig TomlConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_string(ss.str());
}

TomlConfig TomlConfig::parse_string(const std::string& text) {
  TomlConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::runtime_error("config: malformed section at line " +
                                 std::to_string(lineno));
      section = strip(line.substr(1, line.size() - 2));
      if (section.empty())
        throw std::runtime_error("config: empty section name at line " +
                                 std::to_string(lineno));
      cfg.values_[section];
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: expected key = value at line " +
                               std::to_string(lineno));
    std::string key = strip(line.substr(0, eq));
    std::string value = strip(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw std::runtime_error("config: empty key or value at line " +
                               std::to_string(lineno));
    cfg.values_[section][key] = value;
  }
  return cfg;
}

const std::string* TomlConfig::find(const std::string& section,
                                    const std::string& key) const {
  auto s = values_.find(section);
  if (s == values_.end()) return nullptr;
  auto k = s->second.find(key);
  if (k == s->second.end()) return nullptr;
  return &k->second;
}

bool TomlConfig::has(const std::string& section, const std::string& key) const {
  return find(section, key) != nullptr;
}

int64_t TomlConfig::get_int(const std::string& section, const std::string& key,
                            int64_t fallback) const {
  const std::string* v = find(section, key);
  if (!v) return fallback;
  size_t pos = 0;
  int64_t out = std::stoll(*v, &pos);
  if (pos != v->size())
    throw std::runtime_error("config: " + section + "." + key +
                             " is not an integer");
  return out;
}

double TomlConfig::get_double(const std::string& section,
                              const std::string& key, double fallback) const {
  const std::string* v = find(section, key);
  if (!v) return fallback;
  size_t pos = 0;
  double out = std::stod(*v, &pos);
  if (pos != v->size())
    throw std::runtime_error("config: " + section + "." + key +
                             " is not a number");
  return out;
}

std::string TomlConfig::get_string(const std::string& section,
                                   const std::string& key,
                                   const std::string& fallback) const {
  const std::string* v = find(section, key);
  if (!v) return fallback;
  if (v->size() >= 2 && v->front() == '"' && v->back() == '"')
    return v->substr(1, v->size() - 2);
  return *v;
}

bool TomlConfig::get_bool(const std::string& section, const std::string& key,
                          bool fallback) const {
  const std::string* v = find(section, key);
  if (!v) return fallback;
  if (*v == "true") return true;
  if (*v == "false") return false;
  throw std::runtime_error("config: " + section + "." + key +
                           " is not a boolean");
}

std::set<std::pair<std::string, std::string>> TomlConfig::keys() const {
  std::set<std::pair<std::string, std::string>> out;
  for (const auto& [sec, kv] : values_)
    for (const auto& [k, v] : kv) out.insert({sec, k});
  return out;
}

} // namespace tubefield
