#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "logvm/tensor.hpp"
#include "logvm/tokens.hpp"

/// Token construction for the vision blocks. Inputs are channel-last maps
/// with two or three spatial axes.
namespace logvm::extract {

// ---- scan orderings -------------------------------------------------------

/// perm[s] = row-major grid index of the token placed at sequence position s.
std::vector<std::size_t> order_permutation(const Shape& spatial, const ScanDirection& dir);
/// [spatial..., C] -> [cells, C] in scan order.
Tensor order_tokens(const Tensor& grid, const ScanDirection& dir);
/// [cells, C] in scan order -> [spatial..., C].
Tensor inverse_order(const Tensor& seq, const ScanDirection& dir, const Shape& spatial);

// ---- global token placement ---------------------------------------------------

/// Sequence positions taken by `n_global` global tokens among `n_local` locals.
///   Head:        [0, N)
///   Middle:      [floor(L/2), floor(L/2) + N)
///   Split:       ceil(N/2) at the head, floor(N/2) at the tail
///   Interleaved: q = floor(L/N); global i at i*(q+1), leftover locals at the
///                end. When N > L, the first N-L globals go to the head and
///                the rest alternate with locals.
std::vector<std::size_t> global_positions(std::size_t n_local, std::size_t n_global, ConcatStrategy strategy);

/// Merges local [L, C'] and global [N, C'] tokens into one sequence.
TokenSequence concat_tokens(const Tensor& local, const Tensor& globals, ConcatStrategy strategy,
                            Shape spatial_shape = {}, ScanDirection ordering = {});
/// Local rows of a sequence, in sequence order.
Tensor strip_globals(const TokenSequence& seq);
/// Global rows of a sequence, in sequence order.
Tensor global_rows(const TokenSequence& seq);

// ---- extractors ---------------------------------------------------------------

/// C' = C * R^n / S for an n-dimensional window.
std::size_t ltx_channels(std::size_t channels, std::size_t window, std::size_t squeeze, std::size_t spatial_rank = 2);

/// DWC (kernel [k..., C], same padding) -> SiLU, channels unchanged.
Tensor vanilla_map(const Tensor& x, const Tensor& dwc_kernel);
/// vanilla_map followed by a row-major flatten.
TokenSequence vanilla_extract(const Tensor& x, const Tensor& dwc_kernel);

/// Channel squeeze (per-channel DWC with kernel [k..., C], then the sum of each
/// run of S channels) -> SiLU -> window^n unfold. Returns [spatial..., C'].
Tensor ltx_map(const Tensor& x, const Tensor& squeeze_kernel, std::size_t window, std::size_t squeeze);
/// ltx_map followed by a row-major flatten.
TokenSequence ltx(const Tensor& x, const Tensor& squeeze_kernel, std::size_t window, std::size_t squeeze);

struct GtxGeometry {
  std::vector<std::size_t> stride;  // K per spatial axis
  std::size_t gamma = 1;            // channels per global token
  std::size_t kernel = 3;
  std::size_t dilation = 2;
};

/// Strided dilated DWC, flatten, transpose to channel-major, and grouping of
/// gamma channels per token: [spatial..., C'] -> [C'/gamma, gamma*cells/K^n].
Tensor gtx_pre_projection(const Tensor& xl, const Tensor& dconv_kernel, const GtxGeometry& geom);
/// Projection width expected by gtx for a given input.
std::size_t gtx_feature_count(const Shape& spatial, std::size_t channels, const GtxGeometry& geom);
/// Global tokens [C'/gamma, C']: pre-projection groups -> linear -> SiLU.
Tensor gtx(const Tensor& xl, const Tensor& dconv_kernel, const Tensor& proj_weight, const Tensor& proj_bias,
           const GtxGeometry& geom);

}  // namespace logvm::extract
