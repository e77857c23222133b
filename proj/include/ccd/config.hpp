#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ccd/gradcheck.hpp"
#include "ccd/trainer.hpp"

namespace ccd {

/// Flat key=value run configuration. Every key has a default; unknown keys
/// are rejected. Lines starting with '#' and blank lines are ignored.
class RunConfig {
 public:
  RunConfig();

  static RunConfig from_file(const std::filesystem::path& path);
  /// Applies the assignments in `text`; `origin` names the source in errors.
  void parse(std::string_view text, const std::string& origin = "config");
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool has(const std::string& key) const;

  /// Every key in canonical order, one "key = value" line each.
  std::string dump() const;

  /// Throws ValidationError naming the key on malformed values.
  TrainConfig train_config() const;
  GradCheckConfig gradcheck_config() const;
  ModelConfig model_config() const;

 private:
  double number(const std::string& key) const;
  long integer(const std::string& key) const;

  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace ccd
