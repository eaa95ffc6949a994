#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "logvm/extract.hpp"
#include "logvm/rng.hpp"
#include "logvm/s6.hpp"
#include "logvm/tensor.hpp"

namespace logvm::blocks {

enum class Variant { Vanilla, Local, Global, LocalGlobal };

std::string to_string(Variant v);
/// Accepts vanilla/local/global/log (and localglobal).
Variant parse_variant(const std::string& s);
bool uses_ltx(Variant v);
bool uses_gtx(Variant v);

/// Hyperparameters of one gated vision-Mamba block.
struct BlockConfig {
  std::size_t channels = 16;
  std::size_t expansion = 2;  // alpha
  Variant variant = Variant::LocalGlobal;
  std::size_t directions = 1;  // M
  std::size_t window = 3;      // R
  std::size_t squeeze = 1;     // S
  std::vector<std::size_t> gtx_stride{2, 2};  // K per spatial axis
  std::size_t gamma = 1;
  ConcatStrategy strategy = ConcatStrategy::Interleaved;
  std::size_t state_dim = 4;
  std::size_t dwc_kernel = 3;
  std::size_t gtx_kernel = 3;
  std::size_t gtx_dilation = 2;
  bool parallel_scan = false;
  std::size_t scan_chunk = 64;

  std::size_t inner_channels() const { return channels * expansion; }
  /// Channels of the tokens fed to the scan: C' for LTX variants, alpha*C otherwise.
  std::size_t token_channels(std::size_t spatial_rank = 2) const;
  extract::GtxGeometry gtx_geometry() const;
  /// Throws ShapeError when the config cannot run on `spatial`.
  void validate(const Shape& spatial) const;
};

struct BlockWeights {
  Tensor ln_gain, ln_bias;
  Tensor in_proj_w, in_proj_b;    // C -> 2*alpha*C
  Tensor extract_kernel;          // DWC (Vanilla/Global) or squeeze DWC (Local/LocalGlobal)
  Tensor gtx_kernel;              // Global/LocalGlobal only
  Tensor gtx_proj_w, gtx_proj_b;  // Global/LocalGlobal only
  std::vector<s6::S6Params> ssm;  // one per scan direction
  Tensor post_ln_gain, post_ln_bias;
  Tensor post_proj_w, post_proj_b;  // C' -> alpha*C, Local/LocalGlobal only
  Tensor out_proj_w, out_proj_b;    // alpha*C -> C

  static BlockWeights init(const BlockConfig& cfg, const Shape& spatial, Rng& rng);
  /// Stable names and handles of every defined parameter.
  std::vector<std::pair<std::string, Tensor*>> named_parameters(const std::string& prefix = "");
  void zero_out_projection();
};

/// LN -> in-projection split into (u, gate) -> extractor on u -> M directional
/// scans summed on the grid -> LN -> [linear C'->alpha*C] -> times SiLU(gate)
/// -> out-projection -> residual add. Shape preserving.
Tensor block_forward(const Tensor& x, const BlockConfig& cfg, const BlockWeights& w);

/// Tokens fed to the scan of direction `m` (exposed for inspection and tests).
TokenSequence block_scan_input(const Tensor& x, const BlockConfig& cfg, const BlockWeights& w, std::size_t m = 0);

/// Analytic flop count of one forward pass (2 flops per multiply), covering
/// norms, projections, extractor convolutions, activations, scans and gating.
std::uint64_t count_flops(const BlockConfig& cfg, const Shape& spatial);

}  // namespace logvm::blocks
