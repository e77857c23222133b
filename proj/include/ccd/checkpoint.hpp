#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ccd/model.hpp"

namespace ccd {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig cfg;
  ParamStore<float> student;
  std::optional<ParamStore<float>> teacher;
  std::vector<float> center;  ///< empty when not stored
  std::string run_config;     ///< effective key=value config of the producing run
  long step = 0;
};

/// One JSON header line {format_version, cfg, run_config, step, tensors:[{name, shape}]},
/// then little-endian float32 data in header order. Teacher tensors carry a
/// "teacher." prefix; the center is stored as "state.center".
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws ValidationError naming the offending field for corrupt or
/// mismatched files, RuntimeError for I/O failures.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string model_config_json(const ModelConfig& cfg);

}  // namespace ccd
