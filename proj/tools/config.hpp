#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "logvm/train.hpp"

namespace logvm::cli {

/// Bad configuration (exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flat JSON run description. Unknown keys are rejected.
struct RunConfig {
  train::TrainConfig train;
  std::size_t seeds = 3;    // ablation repeats
  std::size_t threads = 0;  // 0: LOGVM_THREADS or 1
};

/// Toy LoG-VMamba on blobs-all.
RunConfig default_config();
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);
std::string to_json(const RunConfig& cfg);

}  // namespace logvm::cli
