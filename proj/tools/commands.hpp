#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "config.hpp"
#include "gradsuite.hpp"

namespace logvm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitBadConfig = 2;

/// scope: ops | block | model. `extra` cases run after the built-in ones.
int cmd_gradcheck(const std::string& scope, std::uint64_t seed, std::ostream& out,
                  const std::vector<GradCase>& extra = {});

struct ScanBenchOptions {
  std::size_t len = 4096;
  std::size_t channels = 16;
  std::size_t state = 16;
  std::size_t threads = 1;
  std::size_t chunk = 256;
  std::size_t repeats = 1;  // median over repeats
  std::uint64_t seed = 1;
};

struct ScanBenchRow {
  std::string impl;
  std::size_t threads, len, channels;
  double secs, gflops;
};

/// Equivalence gate, then one sequential and one parallel timing row.
/// Throws std::runtime_error when the gate fails.
std::vector<ScanBenchRow> scan_bench(const ScanBenchOptions& opt);
int cmd_scanbench(const ScanBenchOptions& opt, std::ostream& out, std::ostream& err);

int cmd_train(const RunConfig& cfg, std::ostream& out);

struct AblationCell {
  std::string axis, cell;
  std::vector<double> dice, iou;  // final validation value per seed
};

/// Cells of one ablation axis: variant | strategy | directions.
std::vector<RunConfig> ablation_cells(const RunConfig& base, const std::string& axis, std::vector<std::string>& names);
/// Per-run metrics land in out_dir/ablate-<axis>/<cell>/seed<k>/metrics.csv.
std::vector<AblationCell> run_ablation(const RunConfig& base, const std::string& axis, std::ostream* log = nullptr);
void write_ablation_summary(std::ostream& os, const std::vector<AblationCell>& cells);
int cmd_ablate(const RunConfig& base, const std::string& axis, std::ostream& out);

int cmd_erf(const std::filesystem::path& checkpoint, std::size_t i, std::size_t j, const std::filesystem::path& out_path,
            std::size_t image_index, std::ostream& out);

/// Full command line front end.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace logvm::cli
