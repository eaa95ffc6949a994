#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "logvm/tensor.hpp"

/// Primitive differentiable operations. Feature maps are channel-last:
/// [spatial..., C] with one to three spatial axes.
namespace logvm::ops {

using Extents = std::vector<std::size_t>;

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
/// x + bias broadcast over every axis but the last.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// y[..., j] = sum_i x[..., i] * weight[i, j] + bias[j]. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor());

Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
/// ln(1 + e^x), evaluated as x + ln(1 + e^-x) for x > 0.
Tensor softplus(const Tensor& x);
/// Softmax over the trailing axis.
Tensor softmax(const Tensor& x);
/// Normalizes over the trailing axis, then applies per-channel gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Per-channel convolution with zero padding. `kernel` is [k..., C]; stride,
/// dilation and padding hold one entry per spatial axis.
Tensor depthwise_conv(const Tensor& x, const Tensor& kernel, std::span<const std::size_t> stride,
                      std::span<const std::size_t> dilation, std::span<const std::size_t> padding);
/// Per-side padding that keeps extents unchanged at stride 1: (k-1)*dilation/2.
Extents same_padding(std::span<const std::size_t> kernel_extent, std::span<const std::size_t> dilation);
/// Spatial output extent of a strided, dilated window.
std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t dilation,
                            std::size_t pad);

/// Sums each run of `group` consecutive channels: [..., C] -> [..., C/group].
Tensor group_sum(const Tensor& x, std::size_t group);

/// Gathers the window^n neighborhood of every position into the channel axis,
/// zero outside the border. Output channel (o * C + c) holds channel c at
/// window offset o (offsets enumerated row-major, centered on the query).
Tensor unfold(const Tensor& x, std::size_t window);

/// Zero padding with per-axis before/after amounts (all axes).
Tensor pad(const Tensor& x, std::span<const std::size_t> before, std::span<const std::size_t> after);

/// Non-overlapping max pooling over spatial axes. Ties route to the first
/// maximum in row-major window order.
Tensor max_pool(const Tensor& x, std::span<const std::size_t> factor);
Tensor upsample_nearest(const Tensor& x, std::span<const std::size_t> factor);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
/// Rows of axis 0 picked by `rows` (repeats allowed).
Tensor index_select(const Tensor& x, std::span<const std::size_t> rows);

}  // namespace logvm::ops
