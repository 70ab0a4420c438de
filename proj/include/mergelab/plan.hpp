// Experiment plan files: line-oriented `key = value` text grouped under
// `[section]` headers. Unknown sections or keys are fatal. A plan plus the
// global seed fully determines every output byte of a run.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mergelab {

class Plan {
 public:
  static Plan parse_file(const std::string& path);
  static Plan parse_text(const std::string& text, const std::string& origin = "<plan>");

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::string require_string(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_double_list(const std::string& key, std::vector<double> fallback) const;
  std::vector<std::int64_t> get_int_list(const std::string& key,
                                         std::vector<std::int64_t> fallback) const;
  std::vector<std::string> get_string_list(const std::string& key,
                                           std::vector<std::string> fallback) const;

  const std::map<std::string, std::string>& entries() const { return values_; }
  const std::string& origin() const { return origin_; }

 private:
  std::map<std::string, std::string> values_;  // "section.key" -> raw value
  std::string origin_;
};

// Every key a plan may contain, as "section.key". Parsing rejects anything
// not listed here.
const std::vector<std::string>& known_plan_keys();

}  // namespace mergelab
