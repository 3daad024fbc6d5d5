#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mdt/experiment.h"

namespace mdt::cli {

/// Bad flags, unknown keys or values that fail validation; exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ValueType { integer, real, boolean, text };

struct ConfigKey {
  std::string name;
  ValueType type;
  std::string desk;   // laptop-scale default
  std::string paper;  // published setting
  std::string help;
};

/// Every recognised key, in the order the resolved file lists them.
const std::vector<ConfigKey>& config_keys();

using Assignments = std::vector<std::pair<std::string, std::string>>;

/// Flat key=value text; '#' starts a comment, blank lines are ignored.
Assignments parse_config_text(const std::string& text, const std::string& origin);
Assignments read_config_file(const std::filesystem::path& path);

/// Resolved settings of one command.
///
/// Precedence, lowest first: the preset's defaults (desk unless `preset` is
/// given in the file or on the command line), the config file, then flags.
class RunConfig {
 public:
  static RunConfig preset(const std::string& name);
  static RunConfig resolve(const Assignments& file, const Assignments& flags);

  /// Type-checks `value`; unknown keys throw UsageError.
  void set(const std::string& key, const std::string& value);

  const std::string& text(const std::string& key) const;
  std::size_t size(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  double number(const std::string& key) const;
  bool flag(const std::string& key) const;

  /// One key=value line per key in registry order.
  std::string to_text() const;
  void write(const std::filesystem::path& path) const;

  SyntheticSpec synthetic_spec() const;
  /// Model architecture for data with `layout`.
  ModelRecipe recipe(const TaskLayout& layout) const;
  TrainConfig train_config(int task) const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace mdt::cli
