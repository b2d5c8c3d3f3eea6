#include "envrobust/config.hpp"

#include <charconv>
#include <fstream>
#include <istream>

#include "envrobust/nn.hpp"

namespace envrobust {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues KeyValues::parse(std::istream& in, const std::string& source) {
  KeyValues kv;
  kv.source_ = source;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(n) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(n) + ": empty key");
    if (kv.values_.count(key)) throw ConfigError(source + ":" + std::to_string(n) + ": duplicate key " + key);
    kv.values_[key] = trim(line.substr(eq + 1));
    kv.lines_[key] = n;
  }
  return kv;
}

KeyValues KeyValues::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  return parse(in, path);
}

const std::string* KeyValues::find(const std::string& key) {
  const auto it = values_.find(key);
  if (it == values_.end()) return nullptr;
  used_.insert(key);
  return &it->second;
}

void KeyValues::fail(const std::string& key, const std::string& what) const {
  throw ConfigError(source_ + ":" + std::to_string(lines_.at(key)) + ": " + key + ": " + what);
}

std::string KeyValues::get_string(const std::string& key, const std::string& fallback) {
  const auto* v = find(key);
  return v ? *v : fallback;
}

double KeyValues::get_double(const std::string& key, double fallback) {
  const auto* v = find(key);
  if (!v) return fallback;
  try {
    std::size_t pos = 0;
    const double d = std::stod(*v, &pos);
    if (pos != v->size()) fail(key, "trailing characters in number");
    return d;
  } catch (const std::logic_error&) {
    fail(key, "not a number: " + *v);
  }
}

std::int64_t KeyValues::get_int(const std::string& key, std::int64_t fallback) {
  const auto* v = find(key);
  if (!v) return fallback;
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc() || ptr != v->data() + v->size()) {
    // Allow scientific notation for whole numbers such as 1e6.
    const double d = get_double(key, 0.0);
    if (d != static_cast<double>(static_cast<std::int64_t>(d))) fail(key, "not an integer: " + *v);
    return static_cast<std::int64_t>(d);
  }
  return out;
}

std::uint64_t KeyValues::get_uint(const std::string& key, std::uint64_t fallback) {
  if (!has(key)) return fallback;
  const auto v = get_int(key, 0);
  if (v < 0) fail(key, "must be non-negative");
  return static_cast<std::uint64_t>(v);
}

bool KeyValues::get_bool(const std::string& key, bool fallback) {
  const auto* v = find(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  fail(key, "not a boolean: " + *v);
}

std::vector<std::string> KeyValues::get_list(const std::string& key, const std::vector<std::string>& fallback) {
  const auto* v = find(key);
  if (!v) return fallback;
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= v->size()) {
    const auto comma = v->find(',', start);
    const auto piece = trim(v->substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (!piece.empty()) out.push_back(piece);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::vector<double> KeyValues::get_double_list(const std::string& key, const std::vector<double>& fallback) {
  if (!has(key)) return fallback;
  std::vector<double> out;
  for (const auto& s : get_list(key, {})) {
    try {
      out.push_back(std::stod(s));
    } catch (const std::logic_error&) {
      fail(key, "not a number: " + s);
    }
  }
  return out;
}

void KeyValues::finish() const {
  for (const auto& [key, value] : values_)
    if (!used_.count(key)) fail(key, "unknown key");
}

}  // namespace envrobust
