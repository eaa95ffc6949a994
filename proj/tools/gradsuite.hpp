#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "logvm/autodiff.hpp"

namespace logvm::cli {

struct GradCase {
  std::string name;
  std::vector<Tensor> inputs;
  autodiff::TapedFn fn;
  std::size_t max_coords = 0;  // 0: every coordinate
};

struct GradOutcome {
  std::string name;
  autodiff::GradcheckResult result;
  bool passed = false;
};

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kGradEps = 1e-5;

/// Every primitive op, the scan, the extractors and the loss.
std::vector<GradCase> op_cases(std::uint64_t seed);
/// Full blocks: all variants x M in {1,2,4}, all strategies, and a 3-D block.
std::vector<GradCase> block_cases(std::uint64_t seed);
/// 16x16 toy segmentation model, sampled coordinates.
std::vector<GradCase> model_cases(std::uint64_t seed);

/// Negative control: an op whose backward rule is deliberately wrong.
GradCase faulty_case();

/// Runs the cases, writing `name,max_rel_error,coords,status` per case.
std::vector<GradOutcome> run_grad_cases(const std::vector<GradCase>& cases, std::uint64_t seed, std::ostream& report);

}  // namespace logvm::cli
