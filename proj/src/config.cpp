#include "bdfa/config.hpp"

#include <cctype>
#include <charconv>
#include <sstream>

#include <fmt/format.h>

#include "bdfa/error.hpp"
#include "bdfa/io.hpp"

namespace bdfa {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Drops a trailing comment that is not inside a quoted string.
std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_str = !in_str;
    if (line[i] == '#' && !in_str) return line.substr(0, i);
  }
  return line;
}

bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
  return true;
}

// Parses one scalar; returns (text, quoted).
std::pair<std::string, bool> parse_scalar(const std::string& raw, const std::string& ctx) {
  std::string s = trim(raw);
  if (s.empty()) throw ConfigError(ctx + ": missing value");
  if (s.front() == '"') {
    if (s.size() < 2 || s.back() != '"') throw ConfigError(ctx + ": unterminated string");
    std::string inner = s.substr(1, s.size() - 2);
    if (inner.find('"') != std::string::npos) throw ConfigError(ctx + ": stray quote in string");
    return {inner, true};
  }
  for (char c : s)
    if (c == ' ' || c == '\t' || c == '"') throw ConfigError(ctx + ": malformed value '" + s + "'");
  return {s, false};
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(const std::string& text, const std::string& origin) {
  KeyValueConfig cfg;
  cfg.origin_ = origin;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  cfg.sections_[""];
  while (std::getline(in, line)) {
    ++lineno;
    const std::string ctx = fmt::format("{}:{}", origin, lineno);
    std::string s = trim(strip_comment(line));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError(ctx + ": malformed section header");
      section = trim(s.substr(1, s.size() - 2));
      if (!valid_key(section)) throw ConfigError(ctx + ": invalid section name '" + section + "'");
      cfg.sections_[section];
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(ctx + ": expected 'key = value'");
    const std::string key = trim(s.substr(0, eq));
    if (!valid_key(key)) throw ConfigError(ctx + ": invalid key '" + key + "'");
    const std::string rhs = trim(s.substr(eq + 1));
    Value v;
    v.line = lineno;
    if (!rhs.empty() && rhs.front() == '[') {
      if (rhs.back() != ']') throw ConfigError(ctx + ": unterminated array");
      v.is_array = true;
      const std::string body = trim(rhs.substr(1, rhs.size() - 2));
      if (!body.empty()) {
        std::string item;
        std::istringstream parts(body);
        while (std::getline(parts, item, ',')) v.items.push_back(parse_scalar(item, ctx).first);
      }
    } else {
      auto [val, quoted] = parse_scalar(rhs, ctx);
      v.items.push_back(val);
      v.quoted = quoted;
    }
    auto& sec = cfg.sections_[section];
    if (sec.count(key)) throw ConfigError(ctx + ": duplicate key '" + key + "'");
    sec.emplace(key, std::move(v));
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse(read_text_file(path), path.string());
}

const KeyValueConfig::Value* KeyValueConfig::find(const std::string& section, const std::string& key) const {
  auto s = sections_.find(section);
  if (s == sections_.end()) return nullptr;
  auto k = s->second.find(key);
  return k == s->second.end() ? nullptr : &k->second;
}

std::string KeyValueConfig::where(const Value& v) const { return fmt::format("{}:{}", origin_, v.line); }

bool KeyValueConfig::has(const std::string& section, const std::string& key) const {
  return find(section, key) != nullptr;
}

std::string KeyValueConfig::get_string(const std::string& section, const std::string& key,
                                       const std::string& fallback) const {
  const Value* v = find(section, key);
  if (!v) return fallback;
  if (v->is_array) throw ConfigError(where(*v) + ": " + key + " must be a scalar");
  return v->items.front();
}

double KeyValueConfig::get_double(const std::string& section, const std::string& key, double fallback) const {
  const Value* v = find(section, key);
  if (!v) return fallback;
  const std::string s = get_string(section, key, "");
  double out = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (v->quoted || ec != std::errc() || p != s.data() + s.size())
    throw ConfigError(where(*v) + ": " + key + " expects a number, got '" + s + "'");
  return out;
}

long long KeyValueConfig::get_int(const std::string& section, const std::string& key, long long fallback) const {
  const Value* v = find(section, key);
  if (!v) return fallback;
  const std::string s = get_string(section, key, "");
  long long out = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (v->quoted || ec != std::errc() || p != s.data() + s.size())
    throw ConfigError(where(*v) + ": " + key + " expects an integer, got '" + s + "'");
  return out;
}

bool KeyValueConfig::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  const Value* v = find(section, key);
  if (!v) return fallback;
  const std::string s = get_string(section, key, "");
  if (!v->quoted && s == "true") return true;
  if (!v->quoted && s == "false") return false;
  throw ConfigError(where(*v) + ": " + key + " expects true or false");
}

std::vector<std::string> KeyValueConfig::get_list(const std::string& section, const std::string& key,
                                                  const std::vector<std::string>& fallback) const {
  const Value* v = find(section, key);
  if (!v) return fallback;
  return v->items;
}

void KeyValueConfig::require_known(const std::set<std::string>& allowed) const {
  for (const auto& [section, keys] : sections_)
    for (const auto& [key, v] : keys) {
      const std::string full = section.empty() ? key : section + "." + key;
      if (!allowed.count(full)) throw ConfigError(where(v) + ": unknown key '" + full + "'");
    }
}

}  // namespace bdfa
