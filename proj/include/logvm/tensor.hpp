#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace logvm {

using Shape = std::vector<std::size_t>;

/// Raised for extent, rank and divisibility violations.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for numerically invalid values (NaN/Inf, non-positive steps, ...).
class ValueError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace autodiff {
struct Node;
}

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Strided N-d array of doubles.
///
/// Storage is shared between views; reshape/transpose/slice never copy unless
/// the requested view cannot be expressed with strides. A tensor optionally
/// carries an autodiff node; gradients are always laid out row-major over the
/// logical shape, so a contiguous copy can share the node of its source.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return shape_; }
  const std::vector<std::ptrdiff_t>& strides() const { return strides_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return shape_numel(shape_); }
  /// Extent along `axis`; negative axes count from the back.
  std::size_t dim(int axis) const;
  bool is_contiguous() const;

  double at(std::span<const std::size_t> index) const;
  double operator()(std::initializer_list<std::size_t> index) const {
    return at(std::span<const std::size_t>(index.begin(), index.size()));
  }
  double item() const;

  /// Row-major copy of the logical values.
  std::vector<double> values() const;
  /// Returns *this when already contiguous, otherwise a packed copy that
  /// keeps the autodiff node.
  Tensor contiguous() const;
  /// Pointer to the first logical element. Requires a contiguous tensor.
  const double* data() const;
  /// Mutable access for freshly built tensors and in-place parameter updates.
  double* mutable_data();

  // Views (differentiable, storage-sharing where possible).
  Tensor reshape(Shape shape) const;
  Tensor permute(std::span<const std::size_t> order) const;
  Tensor permute(std::initializer_list<std::size_t> order) const {
    return permute(std::span<const std::size_t>(order.begin(), order.size()));
  }
  Tensor transpose(std::size_t a, std::size_t b) const;
  Tensor slice(std::size_t axis, std::size_t begin, std::size_t end) const;
  /// Merges axes [first, last] into one.
  Tensor flatten(std::size_t first, std::size_t last) const;

  // Autodiff handle.
  bool requires_grad() const { return node_ != nullptr; }
  /// Turns this tensor into a gradient leaf (or detaches it when false).
  Tensor& set_requires_grad(bool on);
  Tensor detach() const;
  const std::shared_ptr<autodiff::Node>& node() const { return node_; }
  void set_node(std::shared_ptr<autodiff::Node> node) { node_ = std::move(node); }

 private:
  Tensor(std::shared_ptr<std::vector<double>> storage, Shape shape,
         std::vector<std::ptrdiff_t> strides, std::ptrdiff_t offset);

  std::shared_ptr<std::vector<double>> storage_;
  Shape shape_;
  std::vector<std::ptrdiff_t> strides_;
  std::ptrdiff_t offset_ = 0;
  std::shared_ptr<autodiff::Node> node_;
};

/// Row-major strides for a shape.
std::vector<std::ptrdiff_t> row_major_strides(const Shape& shape);

/// Enables the NaN/Inf boundary check. On by default in builds without NDEBUG.
void set_finite_checks(bool on);
bool finite_checks_enabled();
/// Throws ValueError naming `op` if checks are enabled and `t` has non-finite values.
void check_finite(const Tensor& t, const char* op);

}  // namespace logvm
