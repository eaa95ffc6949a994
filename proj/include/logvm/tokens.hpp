#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "logvm/tensor.hpp"

namespace logvm {

/// Permutation that turns a token grid into a 1-D sequence. `axis_order`
/// lists the spatial axes from outermost (slowest) to innermost (fastest);
/// `reverse` walks that order back to front.
struct ScanDirection {
  std::vector<std::size_t> axis_order{0, 1};
  bool reverse = false;

  static ScanDirection horizontal(std::size_t spatial_rank = 2, bool backward = false);
  static ScanDirection vertical(std::size_t spatial_rank = 2, bool backward = false);

  std::string name() const;
  bool operator==(const ScanDirection&) const = default;
};

/// The M directions used by a block: 1 -> H; 2 -> H, V; 4 -> H, V, H-back, V-back.
std::vector<ScanDirection> scan_directions(std::size_t m, std::size_t spatial_rank = 2);

enum class ConcatStrategy { Head, Middle, Split, Interleaved };

std::string to_string(ConcatStrategy s);
/// Accepts head/middle/center/split/interleaved.
ConcatStrategy parse_strategy(const std::string& s);

/// Ordered token matrix plus the bookkeeping needed to undo token placement.
struct TokenSequence {
  Tensor tokens;                              // [L_seq, C']
  std::vector<std::size_t> global_positions;  // strictly increasing
  Shape spatial_shape;                        // (H, W) or (D, H, W)
  ScanDirection ordering;

  std::size_t local_count() const { return shape_numel(spatial_shape); }
  std::size_t global_count() const { return global_positions.size(); }
  std::size_t length() const { return tokens.dim(0); }
  std::size_t channels() const { return tokens.dim(1); }
};

}  // namespace logvm
