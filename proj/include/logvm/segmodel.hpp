#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "logvm/blocks.hpp"
#include "logvm/tensor.hpp"

namespace logvm::seg {

struct StageConfig {
  std::size_t channels = 8;
  std::size_t pool = 2;
  std::vector<std::size_t> gtx_stride{2, 2};  // K at this stage's resolution
  std::size_t squeeze = 1;                    // S
  std::size_t gamma = 1;
  bool mamba_block = true;  // decoder block at this stage
};

/// U-shaped 2-D network: per stage a 3x3 conv + SiLU + max-pool on the way
/// down; nearest upsample, skip concat, 1x1 fuse and one vision-Mamba block
/// on the way up; 1x1 head to class logits.
struct ModelConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t in_channels = 1;
  std::size_t classes = 2;
  std::vector<StageConfig> stages;
  /// Template for every decoder block; channels, K, S and gamma come from the stage.
  blocks::BlockConfig block;

  /// 32x32 input, stages (8,16,32), binary output.
  static ModelConfig toy(blocks::Variant variant);
  /// Spatial extents at stage `s` before its pooling.
  Shape stage_spatial(std::size_t s) const;
  blocks::BlockConfig block_for(std::size_t s) const;
  void validate() const;
};

struct ModelWeights {
  ModelConfig cfg;
  std::vector<Tensor> enc_w, enc_b;    // [9*Cin, C], [C]
  std::vector<Tensor> fuse_w, fuse_b;  // [Cup + C, C], [C]
  std::vector<blocks::BlockWeights> blocks;  // empty weights when the stage has no block
  Tensor head_w, head_b;

  std::vector<std::pair<std::string, Tensor*>> named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;
  std::size_t parameter_count() const;
  void zero_block_out_projections();
  /// Overwrites parameters by name; throws on unknown names or shape mismatch.
  void load(const std::vector<std::pair<std::string, Tensor>>& named);
};

/// Seeded construction; encoder, fuse and head weights come from streams
/// independent of the block variant.
ModelWeights build_model(const ModelConfig& cfg, std::uint64_t seed);

/// image [H, W, Cin] -> logits [H, W, classes].
Tensor model_forward(const Tensor& image, const ModelWeights& w);

}  // namespace logvm::seg
