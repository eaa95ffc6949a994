#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>

namespace logvm {

/// Default worker count: LOGVM_THREADS if set, otherwise 1.
std::size_t default_threads();
void set_default_threads(std::size_t n);

/// Fork-join over [0, n). Calls fn(i) for every i; indices are split into
/// contiguous blocks, one per worker. Runs inline when threads <= 1.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

/// Multiply counter used to cross-check analytic FLOP formulas. Kernels add
/// the number of multiplies they actually executed while counting is on.
namespace flops {
void start();
std::uint64_t stop();
bool counting();
void add(std::uint64_t multiplies);
}  // namespace flops

}  // namespace logvm
