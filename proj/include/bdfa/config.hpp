#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace bdfa {

// A TOML subset: `[section]` headers, `key = value` lines, `#` comments.
// Values are quoted strings, numbers, true/false, or flat arrays of those.
// Keys before the first header live in section "".
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<config>");
  static KeyValueConfig load(const std::filesystem::path& path);

  bool has(const std::string& section, const std::string& key) const;
  std::string get_string(const std::string& section, const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  long long get_int(const std::string& section, const std::string& key, long long fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  std::vector<std::string> get_list(const std::string& section, const std::string& key,
                                    const std::vector<std::string>& fallback) const;

  // Throws ConfigError naming the first key not in `allowed` ("section.key").
  void require_known(const std::set<std::string>& allowed) const;

 private:
  struct Value {
    std::vector<std::string> items;
    bool is_array = false;
    bool quoted = false;
    int line = 0;
  };
  const Value* find(const std::string& section, const std::string& key) const;
  std::string where(const Value& v) const;

  std::string origin_;
  std::map<std::string, std::map<std::string, Value>> sections_;
};

}  // namespace bdfa
