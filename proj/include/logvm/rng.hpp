#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "logvm/tensor.hpp"

namespace logvm {

/// Per-purpose seed from a root seed and a stream name, so that e.g. the
/// encoder of two model variants is initialized from the same stream.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t root, std::string_view stream) : engine_(derive_seed(root, stream)) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean, double sd) { return std::normal_distribution<double>(mean, sd)(engine_); }
  std::uint64_t next() { return engine_(); }
  /// Integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }

  Tensor uniform_tensor(Shape shape, double lo, double hi);
  Tensor normal_tensor(Shape shape, double mean, double sd);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace logvm
