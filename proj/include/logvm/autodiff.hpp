#pragma once

#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "logvm/tensor.hpp"

namespace logvm::autodiff {

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// One recorded operation. Inputs that do not require gradients are kept as
/// null entries so backward rules can address inputs positionally.
struct Node {
  using Rule = std::function<void(Node&)>;

  const char* op = "leaf";
  Shape shape;
  std::vector<std::shared_ptr<Node>> inputs;
  Rule rule;  // empty for leaves
  std::vector<double> grad;

  bool is_leaf() const { return !rule; }
  /// Gradient accumulator of input `i`, zero-initialized on first use; empty
  /// when that input does not require gradients.
  std::span<double> input_grad(std::size_t i);
};

/// Gradient recording is on by default; the guard disables it for a scope.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Attaches a node to `out` when recording is on and any input requires grad.
/// `rule` receives the node; `node.grad` holds dL/d(out) in row-major order.
Tensor record(Tensor out, const char* op, std::initializer_list<const Tensor*> inputs,
              Node::Rule rule);
Tensor record(Tensor out, const char* op, std::span<const Tensor* const> inputs,
              Node::Rule rule);

class Gradients {
 public:
  bool contains(const Tensor& t) const;
  /// Gradient for `t`; zeros of t's shape when `t` is not reachable from the loss.
  Tensor of(const Tensor& t) const;
  void set(const Node* node, Tensor grad) { map_[node] = std::move(grad); }
  std::size_t size() const { return map_.size(); }

 private:
  std::unordered_map<const Node*, Tensor> map_;
};

/// Reverse sweep from a scalar loss. Visits each node once in reverse
/// topological order and returns dloss/dleaf for every reachable leaf.
Gradients backward(const Tensor& loss);

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

using TapedFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Central finite-difference check of a scalar function.
/// Relative error is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
/// When `max_coords` is nonzero, that many coordinates are sampled with `seed`.
GradcheckResult gradcheck(const TapedFn& f, const std::vector<Tensor>& inputs,
                          double eps = 1e-5, std::size_t max_coords = 0,
                          std::uint64_t seed = 0);

}  // namespace logvm::autodiff
