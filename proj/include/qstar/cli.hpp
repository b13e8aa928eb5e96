#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qstar {

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string doc;
};

/// Pipeline settings read from `key = value` lines. Every key has a default; unknown keys
/// are rejected.
class RunConfig {
public:
  RunConfig();

  /// Blank lines and lines starting with '#' are ignored.
  static RunConfig parse(std::string_view text);
  static const std::vector<ConfigKey>& schema();

  void set(std::string_view key, std::string value);
  [[nodiscard]] const std::string& get(std::string_view key) const;
  [[nodiscard]] double real(std::string_view key) const;
  [[nodiscard]] std::size_t count(std::string_view key) const;
  [[nodiscard]] std::uint64_t u64(std::string_view key) const;

  /// Every key in name order, one `key = value` line each.
  [[nodiscard]] std::string canonical() const;
  /// content_hash of canonical().
  [[nodiscard]] std::string fingerprint() const;

private:
  std::map<std::string, std::string, std::less<>> values_;
};

/// Entry point of the qstar tool. Returns the process exit code:
/// 0 success, 1 internal error, 2 usage error, 3 upstream service failure,
/// 4 budget exhausted on at least one question.
int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err);

} // namespace qstar
