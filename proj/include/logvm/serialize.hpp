#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "logvm/tensor.hpp"

/// NDT1 tensor container: "NDT1", rank (u32), extents (u32 each), then the
/// row-major payload as little-endian f64.
namespace logvm::io {

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Writes one NDT1 file per tensor into `dir` plus a `manifest.tsv` with one
/// `name<TAB>relative path` line per tensor.
void save_checkpoint(const std::filesystem::path& dir,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors);
/// Reads the manifest in `dir` (or the manifest file itself).
std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::filesystem::path& manifest_or_dir);

}  // namespace logvm::io
