#include "logvm/rng.hpp"

namespace logvm {

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : stream) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(root) ^ h);
}

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  double* p = t.mutable_data();
  for (std::size_t i = 0; i < t.numel(); ++i) p[i] = uniform(lo, hi);
  return t;
}

Tensor Rng::normal_tensor(Shape shape, double mean, double sd) {
  Tensor t(std::move(shape));
  double* p = t.mutable_data();
  for (std::size_t i = 0; i < t.numel(); ++i) p[i] = normal(mean, sd);
  return t;
}

}  // namespace logvm
