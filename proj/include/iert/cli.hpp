#pragma once

#include <iosfwd>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace iert::cli {

/// Resolved key=value settings of one subcommand run.
class RunConfig {
 public:
  /// Defaults of `subcommand`; throws config_error for an unknown subcommand.
  explicit RunConfig(const std::string& subcommand);

  const std::string& subcommand() const { return subcommand_; }
  /// Rejects keys the subcommand does not know.
  void set(const std::string& key, const std::string& value);
  /// `key=value` lines; blank lines and lines starting with '#' are ignored.
  void merge_file(const std::string& path);

  std::string text(const std::string& key) const;
  std::size_t size(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;

  /// The config file that reproduces this run.
  void write(std::ostream& out) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::string subcommand_;
  std::map<std::string, std::string> values_;
};

/// Subcommands in the order they appear in the help text.
std::vector<std::string> subcommands();

/// Executes one subcommand with an already resolved config.
void execute(const RunConfig& config, std::ostream& say);

/// Parses argv (without the program name), runs, and returns the exit
/// status. Failures print one `error: kind=... message="..."` line to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace iert::cli
