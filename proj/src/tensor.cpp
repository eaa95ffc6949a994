#include "logvm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "logvm/autodiff.hpp"

namespace logvm {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<std::ptrdiff_t> row_major_strides(const Shape& shape) {
  std::vector<std::ptrdiff_t> s(shape.size());
  std::ptrdiff_t acc = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    s[i] = acc;
    acc *= static_cast<std::ptrdiff_t>(shape[i]);
  }
  return s;
}

Tensor::Tensor(Shape shape)
    : storage_(std::make_shared<std::vector<double>>(shape_numel(shape), 0.0)),
      shape_(std::move(shape)),
      strides_(row_major_strides(shape_)) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), strides_(row_major_strides(shape_)) {
  if (values.size() != shape_numel(shape_)) {
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(shape_));
  }
  storage_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor::Tensor(std::shared_ptr<std::vector<double>> storage, Shape shape,
               std::vector<std::ptrdiff_t> strides, std::ptrdiff_t offset)
    : storage_(std::move(storage)),
      shape_(std::move(shape)),
      strides_(std::move(strides)),
      offset_(offset) {}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.storage_->begin(), t.storage_->end(), value);
  return t;
}

std::size_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("dim: axis out of range for " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(a)];
}

bool Tensor::is_contiguous() const {
  std::ptrdiff_t expect = 1;
  for (std::size_t i = shape_.size(); i-- > 0;) {
    if (shape_[i] != 1 && strides_[i] != expect) return false;
    expect *= static_cast<std::ptrdiff_t>(shape_[i]);
  }
  return true;
}

double Tensor::at(std::span<const std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("at: rank mismatch");
  std::ptrdiff_t off = offset_;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= shape_[i]) throw ShapeError("at: index out of range");
    off += static_cast<std::ptrdiff_t>(index[i]) * strides_[i];
  }
  return (*storage_)[static_cast<std::size_t>(off)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
  return (*storage_)[static_cast<std::size_t>(offset_)];
}

std::vector<double> Tensor::values() const {
  const std::size_t n = numel();
  std::vector<double> out(n);
  if (n == 0) return out;
  if (is_contiguous()) {
    std::copy_n(storage_->data() + offset_, n, out.begin());
    return out;
  }
  std::vector<std::size_t> idx(rank(), 0);
  const double* base = storage_->data();
  for (std::size_t k = 0; k < n; ++k) {
    std::ptrdiff_t off = offset_;
    for (std::size_t i = 0; i < idx.size(); ++i) off += static_cast<std::ptrdiff_t>(idx[i]) * strides_[i];
    out[k] = base[off];
    for (std::size_t i = idx.size(); i-- > 0;) {
      if (++idx[i] < shape_[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

Tensor Tensor::contiguous() const {
  if (is_contiguous()) return *this;
  Tensor out(shape_, values());
  out.node_ = node_;
  return out;
}

const double* Tensor::data() const {
  if (!is_contiguous()) throw ShapeError("data: tensor is not contiguous");
  return storage_->data() + offset_;
}

double* Tensor::mutable_data() {
  if (!is_contiguous()) throw ShapeError("mutable_data: tensor is not contiguous");
  return storage_->data() + offset_;
}

Tensor Tensor::reshape(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape));
  }
  Tensor base = contiguous();
  Tensor out(base.storage_, shape, row_major_strides(shape), base.offset_);
  return autodiff::record(std::move(out), "reshape", {this}, [](autodiff::Node& n) {
    auto g = n.input_grad(0);
    if (g.empty()) return;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

Tensor Tensor::permute(std::span<const std::size_t> order) const {
  if (order.size() != rank()) throw ShapeError("permute: order rank mismatch");
  std::vector<bool> seen(rank(), false);
  Shape shape(rank());
  std::vector<std::ptrdiff_t> strides(rank());
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] >= rank() || seen[order[i]]) throw ShapeError("permute: invalid axis order");
    seen[order[i]] = true;
    shape[i] = shape_[order[i]];
    strides[i] = strides_[order[i]];
  }
  Tensor out(storage_, shape, std::move(strides), offset_);
  const Shape in_shape = shape_;
  std::vector<std::size_t> ord(order.begin(), order.end());
  return autodiff::record(std::move(out), "permute", {this},
                          [in_shape, ord, shape](autodiff::Node& n) {
    auto g = n.input_grad(0);
    if (g.empty()) return;
    // Walk the output in row-major order and scatter to the input offset.
    const auto in_strides = row_major_strides(in_shape);
    std::vector<std::ptrdiff_t> mapped(ord.size());
    for (std::size_t i = 0; i < ord.size(); ++i) mapped[i] = in_strides[ord[i]];
    std::vector<std::size_t> idx(shape.size(), 0);
    std::ptrdiff_t off = 0;
    for (std::size_t k = 0; k < n.grad.size(); ++k) {
      g[static_cast<std::size_t>(off)] += n.grad[k];
      for (std::size_t i = idx.size(); i-- > 0;) {
        off += mapped[i];
        if (++idx[i] < shape[i]) break;
        off -= mapped[i] * static_cast<std::ptrdiff_t>(shape[i]);
        idx[i] = 0;
      }
    }
  });
}

Tensor Tensor::transpose(std::size_t a, std::size_t b) const {
  if (a >= rank() || b >= rank()) throw ShapeError("transpose: axis out of range");
  std::vector<std::size_t> order(rank());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[a], order[b]);
  return permute(order);
}

Tensor Tensor::slice(std::size_t axis, std::size_t begin, std::size_t end) const {
  if (axis >= rank() || begin > end || end > shape_[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_str(shape_));
  }
  Shape shape = shape_;
  shape[axis] = end - begin;
  Tensor out(storage_, shape, strides_, offset_ + static_cast<std::ptrdiff_t>(begin) * strides_[axis]);
  const Shape in_shape = shape_;
  return autodiff::record(std::move(out), "slice", {this},
                          [in_shape, shape, axis, begin](autodiff::Node& n) {
    auto g = n.input_grad(0);
    if (g.empty()) return;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= in_shape[i];
    for (std::size_t i = axis + 1; i < in_shape.size(); ++i) inner *= in_shape[i];
    const std::size_t len = shape[axis];
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t a = 0; a < len; ++a) {
        const double* src = n.grad.data() + (o * len + a) * inner;
        double* dst = g.data() + (o * in_shape[axis] + begin + a) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor Tensor::flatten(std::size_t first, std::size_t last) const {
  if (first > last || last >= rank()) throw ShapeError("flatten: invalid axis range");
  Shape shape;
  for (std::size_t i = 0; i < first; ++i) shape.push_back(shape_[i]);
  std::size_t merged = 1;
  for (std::size_t i = first; i <= last; ++i) merged *= shape_[i];
  shape.push_back(merged);
  for (std::size_t i = last + 1; i < rank(); ++i) shape.push_back(shape_[i]);
  return reshape(std::move(shape));
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!on) {
    node_.reset();
    return *this;
  }
  if (!node_) {
    node_ = std::make_shared<autodiff::Node>();
    node_->shape = shape_;
  }
  return *this;
}

Tensor Tensor::detach() const {
  Tensor out = *this;
  out.node_.reset();
  return out;
}

namespace {
#ifdef NDEBUG
bool g_finite_checks = false;
#else
bool g_finite_checks = true;
#endif
}  // namespace

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks_enabled() { return g_finite_checks; }

void check_finite(const Tensor& t, const char* op) {
  if (!g_finite_checks) return;
  const Tensor c = t.contiguous();
  const double* p = c.data();
  for (std::size_t i = 0; i < c.numel(); ++i) {
    if (!std::isfinite(p[i])) {
      throw ValueError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

}  // namespace logvm
