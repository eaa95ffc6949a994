#include "logvm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <unordered_set>

namespace logvm::autodiff {

namespace {
thread_local bool t_grad_enabled = true;
}

std::span<double> Node::input_grad(std::size_t i) {
  if (i >= inputs.size() || !inputs[i]) return {};
  Node& in = *inputs[i];
  if (in.grad.empty()) in.grad.assign(shape_numel(in.shape), 0.0);
  return in.grad;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor record(Tensor out, const char* op, std::span<const Tensor* const> inputs, Node::Rule rule) {
  check_finite(out, op);
  if (!t_grad_enabled) {
    out.set_node(nullptr);
    return out;
  }
  bool any = false;
  for (const Tensor* t : inputs) any = any || (t && t->requires_grad());
  if (!any) {
    out.set_node(nullptr);
    return out;
  }
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = out.shape();
  node->rule = std::move(rule);
  node->inputs.reserve(inputs.size());
  for (const Tensor* t : inputs) node->inputs.push_back(t ? t->node() : nullptr);
  out.set_node(std::move(node));
  return out;
}

Tensor record(Tensor out, const char* op, std::initializer_list<const Tensor*> inputs,
              Node::Rule rule) {
  return record(std::move(out), op, std::span<const Tensor* const>(inputs.begin(), inputs.size()),
                std::move(rule));
}

bool Gradients::contains(const Tensor& t) const {
  return t.node() && map_.count(t.node().get()) != 0;
}

Tensor Gradients::of(const Tensor& t) const {
  if (t.node()) {
    auto it = map_.find(t.node().get());
    if (it != map_.end()) return it->second;
  }
  return Tensor::zeros(t.shape());
}

Gradients backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.node()) throw GraphError("backward: loss is not attached to a graph");

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  Node* root = loss.node().get();
  root->grad.assign(1, 1.0);
  Gradients result;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf()) continue;
    if (!n->grad.empty()) n->rule(*n);
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
  for (Node* n : order) {
    if (!n->is_leaf()) continue;
    if (n->grad.empty()) n->grad.assign(shape_numel(n->shape), 0.0);
    result.set(n, Tensor(n->shape, std::move(n->grad)));
    n->grad.clear();
  }
  return result;
}

GradcheckResult gradcheck(const TapedFn& f, const std::vector<Tensor>& inputs, double eps,
                          std::size_t max_coords, std::uint64_t seed) {
  if (eps < 1e-7 || eps > 1e-4) throw ValueError("gradcheck: eps outside [1e-7, 1e-4]");

  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    Tensor leaf(t.shape(), t.values());
    leaf.set_requires_grad(true);
    leaves.push_back(std::move(leaf));
  }
  Tensor out = f(leaves);
  if (out.numel() != 1) throw ShapeError("gradcheck: function is not scalar-valued");
  Gradients grads = backward(out);

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    for (std::size_t k = 0; k < leaves[i].numel(); ++k) coords.emplace_back(i, k);
  }
  if (max_coords != 0 && coords.size() > max_coords) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
    std::sort(coords.begin(), coords.end());
  }

  std::vector<Tensor> probe;
  for (const Tensor& t : leaves) probe.push_back(Tensor(t.shape(), t.values()));
  std::vector<std::vector<double>> analytic;
  for (const Tensor& t : leaves) analytic.push_back(grads.of(t).values());

  GradcheckResult res;
  NoGradGuard no_grad;
  for (auto [i, k] : coords) {
    double* p = probe[i].mutable_data();
    const double orig = p[k];
    p[k] = orig + eps;
    const double fp = f(probe).item();
    p[k] = orig - eps;
    const double fm = f(probe).item();
    p[k] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double ad = analytic[i][k];
    const double denom = std::max({std::abs(ad), std::abs(numeric), 1e-8});
    const double rel = std::abs(ad - numeric) / denom;
    ++res.checked;
    if (rel > res.max_rel_error || res.checked == 1) {
      res.max_rel_error = std::max(rel, res.max_rel_error);
      if (rel >= res.max_rel_error) {
        res.worst_input = i;
        res.worst_index = k;
        res.worst_analytic = ad;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace logvm::autodiff
