#include "logvm/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace logvm {

namespace {

std::size_t threads_from_env() {
  if (const char* env = std::getenv("LOGVM_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return 1;
}

std::size_t g_threads = threads_from_env();

thread_local bool t_counting = false;
thread_local std::uint64_t t_multiplies = 0;

}  // namespace

std::size_t default_threads() { return g_threads; }
void set_default_threads(std::size_t n) { g_threads = std::max<std::size_t>(1, n); }

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::min(std::max<std::size_t>(threads, 1), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(threads);
  workers.reserve(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    const std::size_t begin = n * w / threads;
    const std::size_t end = n * (w + 1) / threads;
    workers.emplace_back([&, w, begin, end] {
      try {
        for (std::size_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

namespace flops {
void start() {
  t_counting = true;
  t_multiplies = 0;
}
std::uint64_t stop() {
  t_counting = false;
  return t_multiplies;
}
bool counting() { return t_counting; }
void add(std::uint64_t multiplies) {
  if (t_counting) t_multiplies += multiplies;
}
}  // namespace flops

}  // namespace logvm
