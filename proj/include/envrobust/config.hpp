#ifndef ENVROBUST_CONFIG_HPP_
#define ENVROBUST_CONFIG_HPP_

#include <cstdint>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace envrobust {

/// `key = value` text with `#` comments. Every accessor marks its key as
/// used; finish() rejects keys nobody asked for, which catches typos.
class KeyValues {
 public:
  static KeyValues parse(std::istream& in, const std::string& source = "config");
  static KeyValues load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string get_string(const std::string& key, const std::string& fallback);
  double get_double(const std::string& key, double fallback);
  std::int64_t get_int(const std::string& key, std::int64_t fallback);
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback);
  bool get_bool(const std::string& key, bool fallback);
  /// Comma-separated list; empty entries are dropped.
  std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& fallback);
  std::vector<double> get_double_list(const std::string& key, const std::vector<double>& fallback);

  /// Throws ConfigError naming the first unused key.
  void finish() const;

 private:
  const std::string* find(const std::string& key);
  [[noreturn]] void fail(const std::string& key, const std::string& what) const;

  std::string source_;
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
  std::set<std::string> used_;
};

}  // namespace envrobust

#endif  // ENVROBUST_CONFIG_HPP_
