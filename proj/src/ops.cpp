#include "logvm/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "logvm/autodiff.hpp"
#include "logvm/parallel.hpp"

namespace logvm::ops {

using autodiff::Node;
using autodiff::record;

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <class F>
Tensor map_unary(const Tensor& x, F&& f) {
  const Tensor xc = x.contiguous();
  Tensor out(x.shape());
  const double* px = xc.data();
  double* po = out.mutable_data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = f(px[i]);
  return out;
}

/// Spatial layout of a channel-last map, padded to three spatial axes.
struct Grid {
  std::size_t rank = 0;  // real spatial rank
  std::size_t ext[3] = {1, 1, 1};
  std::size_t channels = 0;

  std::size_t cells() const { return ext[0] * ext[1] * ext[2]; }
  std::size_t index(std::size_t a, std::size_t b, std::size_t c) const {
    return (a * ext[1] + b) * ext[2] + c;
  }
};

Grid grid_of(const Tensor& x, const char* op) {
  if (x.rank() < 2 || x.rank() > 4) {
    throw ShapeError(std::string(op) + ": expected [spatial..., C] with 1-3 spatial axes, got " +
                     shape_str(x.shape()));
  }
  Grid g;
  g.rank = x.rank() - 1;
  for (std::size_t i = 0; i < g.rank; ++i) g.ext[3 - g.rank + i] = x.shape()[i];
  g.channels = x.shape().back();
  return g;
}

/// Spreads a per-spatial-axis vector over the padded three-axis layout.
std::array<std::size_t, 3> spread(std::span<const std::size_t> v, std::size_t rank, std::size_t fill,
                                  const char* op, const char* what) {
  if (v.size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " needs " + std::to_string(rank) + " entries");
  }
  std::array<std::size_t, 3> out = {fill, fill, fill};
  for (std::size_t i = 0; i < rank; ++i) out[3 - rank + i] = v[i];
  return out;
}

Shape with_spatial(const Grid& g, const std::array<std::size_t, 3>& ext, std::size_t channels) {
  Shape s;
  for (std::size_t i = 3 - g.rank; i < 3; ++i) s.push_back(ext[i]);
  s.push_back(channels);
  return s;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const Tensor ac = a.contiguous(), bc = b.contiguous();
  Tensor out(a.shape());
  double* po = out.mutable_data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = ac.data()[i] + bc.data()[i];
  return record(std::move(out), "add", {&a, &b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto g = n.input_grad(k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const Tensor ac = a.contiguous(), bc = b.contiguous();
  Tensor out(a.shape());
  double* po = out.mutable_data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = ac.data()[i] - bc.data()[i];
  return record(std::move(out), "sub", {&a, &b}, [](Node& n) {
    auto ga = n.input_grad(0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i];
    auto gb = n.input_grad(1);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= n.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const Tensor ac = a.contiguous().detach(), bc = b.contiguous().detach();
  Tensor out(a.shape());
  double* po = out.mutable_data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = ac.data()[i] * bc.data()[i];
  flops::add(out.numel());
  return record(std::move(out), "mul", {&a, &b}, [ac, bc](Node& n) {
    auto ga = n.input_grad(0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] * bc.data()[i];
    auto gb = n.input_grad(1);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += n.grad[i] * ac.data()[i];
  });
}

Tensor scale(const Tensor& x, double s) {
  Tensor out = map_unary(x, [s](double v) { return v * s; });
  return record(std::move(out), "scale", {&x}, [s](Node& n) {
    auto g = n.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * s;
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() == 0 || bias.rank() != 1 || bias.dim(0) != x.dim(-1)) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  const Tensor xc = x.contiguous(), bc = bias.contiguous();
  const std::size_t c = bias.numel();
  Tensor out(x.shape());
  double* po = out.mutable_data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = xc.data()[i] + bc.data()[i % c];
  return record(std::move(out), "add_bias", {&x, &bias}, [c](Node& n) {
    auto gx = n.input_grad(0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += n.grad[i];
    auto gb = n.input_grad(1);
    if (!gb.empty()) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) gb[i % c] += n.grad[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  const Tensor xc = x.contiguous();
  double acc = 0.0;
  for (std::size_t i = 0; i < xc.numel(); ++i) acc += xc.data()[i];
  return record(Tensor::scalar(acc), "sum", {&x}, [](Node& n) {
    auto g = n.input_grad(0);
    for (double& v : g) v += n.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() == 0 || weight.rank() != 2 || weight.dim(0) != x.dim(-1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  const std::size_t fin = weight.dim(0), fout = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != fout)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " vs " + std::to_string(fout) + " outputs");
  }
  const Tensor xc = x.contiguous().detach(), wc = weight.contiguous().detach();
  const Tensor bc = bias.defined() ? bias.contiguous() : Tensor();
  const std::size_t rows = x.numel() / fin;
  Shape shape = x.shape();
  shape.back() = fout;
  Tensor out(shape);
  double* po = out.mutable_data();
  const double* px = xc.data();
  const double* pw = wc.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* yr = po + r * fout;
    const double* xr = px + r * fin;
    for (std::size_t i = 0; i < fin; ++i) {
      const double xi = xr[i];
      const double* wi = pw + i * fout;
      for (std::size_t j = 0; j < fout; ++j) yr[j] += xi * wi[j];
    }
    if (bc.defined()) {
      for (std::size_t j = 0; j < fout; ++j) yr[j] += bc.data()[j];
    }
  }
  flops::add(rows * fin * fout);
  return record(std::move(out), "linear", {&x, &weight, bias.defined() ? &bias : nullptr},
                [xc, wc, rows, fin, fout](Node& n) {
    const double* g = n.grad.data();
    auto gx = n.input_grad(0);
    if (!gx.empty()) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < fin; ++i) {
          const double* wi = wc.data() + i * fout;
          double acc = 0.0;
          for (std::size_t j = 0; j < fout; ++j) acc += g[r * fout + j] * wi[j];
          gx[r * fin + i] += acc;
        }
      }
    }
    auto gw = n.input_grad(1);
    if (!gw.empty()) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < fin; ++i) {
          const double xi = xc.data()[r * fin + i];
          double* gwi = gw.data() + i * fout;
          for (std::size_t j = 0; j < fout; ++j) gwi[j] += xi * g[r * fout + j];
        }
      }
    }
    auto gb = n.input_grad(2);
    if (!gb.empty()) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < fout; ++j) gb[j] += g[r * fout + j];
      }
    }
  });
}

namespace {
double sigmoid_of(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

Tensor sigmoid(const Tensor& x) {
  Tensor out = map_unary(x, sigmoid_of);
  const Tensor y = out.detach();
  return record(std::move(out), "sigmoid", {&x}, [y](Node& n) {
    auto g = n.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = y.data()[i];
      g[i] += n.grad[i] * s * (1.0 - s);
    }
  });
}

Tensor silu(const Tensor& x) {
  const Tensor xc = x.contiguous().detach();
  Tensor out = map_unary(xc, [](double v) { return v * sigmoid_of(v); });
  flops::add(out.numel());
  return record(std::move(out), "silu", {&x}, [xc](Node& n) {
    auto g = n.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xc.data()[i];
      const double s = sigmoid_of(v);
      g[i] += n.grad[i] * (s + v * s * (1.0 - s));
    }
  });
}

Tensor softplus(const Tensor& x) {
  const Tensor xc = x.contiguous().detach();
  Tensor out = map_unary(xc, [](double v) {
    return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  });
  return record(std::move(out), "softplus", {&x}, [xc](Node& n) {
    auto g = n.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * sigmoid_of(xc.data()[i]);
  });
}

Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("softmax: scalar input");
  const Tensor xc = x.contiguous();
  const std::size_t c = x.dim(-1), rows = x.numel() / c;
  Tensor out(x.shape());
  double* po = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xc.data() + r * c;
    double* yr = po + r * c;
    const double m = *std::max_element(xr, xr + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (yr[j] = std::exp(xr[j] - m));
    for (std::size_t j = 0; j < c; ++j) yr[j] /= z;
  }
  const Tensor y = out.detach();
  return record(std::move(out), "softmax", {&x}, [y, c, rows](Node& n) {
    auto g = n.input_grad(0);
    if (g.empty()) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.data() + r * c;
      const double* gr = n.grad.data() + r * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += yr[j] * (gr[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (!(eps > 0)) throw ValueError("layer_norm: eps must be positive");
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t c = x.dim(-1), rows = x.numel() / c;
  if (gain.numel() != c || bias.numel() != c) throw ShapeError("layer_norm: gain/bias size mismatch");
  const Tensor xc = x.contiguous(), gc = gain.contiguous().detach(), bc = bias.contiguous();
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(rows);
  double* po = out.mutable_data();
  double* ph = xhat.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xc.data() + r * c;
    double m = 0.0;
    for (std::size_t j = 0; j < c; ++j) m += xr[j];
    m /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - m) * (xr[j] - m);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < c; ++j) {
      ph[r * c + j] = (xr[j] - m) * inv;
      po[r * c + j] = ph[r * c + j] * gc.data()[j] + bc.data()[j];
    }
  }
  flops::add(3 * x.numel());
  return record(std::move(out), "layer_norm", {&x, &gain, &bias},
                [xhat, gc, inv_std = std::move(inv_std), c, rows](Node& n) {
    auto gx = n.input_grad(0);
    auto gg = n.input_grad(1);
    auto gb = n.input_grad(2);
    std::vector<double> dxhat(c);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* dy = n.grad.data() + r * c;
      const double* h = xhat.data() + r * c;
      if (!gg.empty()) for (std::size_t j = 0; j < c; ++j) gg[j] += dy[j] * h[j];
      if (!gb.empty()) for (std::size_t j = 0; j < c; ++j) gb[j] += dy[j];
      if (gx.empty()) continue;
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        dxhat[j] = dy[j] * gc.data()[j];
        s1 += dxhat[j];
        s2 += dxhat[j] * h[j];
      }
      const double cn = static_cast<double>(c);
      for (std::size_t j = 0; j < c; ++j) {
        gx[r * c + j] += inv_std[r] / cn * (cn * dxhat[j] - s1 - h[j] * s2);
      }
    }
  });
}

std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t dilation,
                            std::size_t pad) {
  const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(dilation * (k - 1) + 1);
  const std::ptrdiff_t avail = static_cast<std::ptrdiff_t>(in + 2 * pad) - span;
  if (avail < 0) throw ShapeError("conv: window larger than padded input");
  return static_cast<std::size_t>(avail) / stride + 1;
}

Extents same_padding(std::span<const std::size_t> kernel_extent, std::span<const std::size_t> dilation) {
  Extents p(kernel_extent.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = (kernel_extent[i] - 1) * dilation[i] / 2;
  return p;
}

Tensor depthwise_conv(const Tensor& x, const Tensor& kernel, std::span<const std::size_t> stride,
                      std::span<const std::size_t> dilation, std::span<const std::size_t> padding) {
  const Grid g = grid_of(x, "depthwise_conv");
  if (kernel.rank() != x.rank()) {
    throw ShapeError("depthwise_conv: kernel rank " + std::to_string(kernel.rank()) + " vs input rank " +
                     std::to_string(x.rank()));
  }
  if (kernel.dim(-1) != g.channels) {
    throw ShapeError("depthwise_conv: kernel has " + std::to_string(kernel.dim(-1)) +
                     " filters for " + std::to_string(g.channels) + " channels");
  }
  for (std::size_t v : stride) if (v == 0) throw ShapeError("depthwise_conv: stride must be positive");
  for (std::size_t v : dilation) if (v == 0) throw ShapeError("depthwise_conv: dilation must be positive");
  const auto st = spread(stride, g.rank, 1, "depthwise_conv", "stride");
  const auto dl = spread(dilation, g.rank, 1, "depthwise_conv", "dilation");
  const auto pd = spread(padding, g.rank, 0, "depthwise_conv", "padding");
  std::array<std::size_t, 3> k = {1, 1, 1};
  for (std::size_t i = 0; i < g.rank; ++i) k[3 - g.rank + i] = kernel.shape()[i];
  std::array<std::size_t, 3> oe{};
  for (int a = 0; a < 3; ++a) oe[a] = conv_out_extent(g.ext[a], k[a], st[a], dl[a], pd[a]);

  const std::size_t C = g.channels;
  const Tensor xc = x.contiguous().detach(), kc = kernel.contiguous().detach();
  Tensor out(with_spatial(g, oe, C));
  double* po = out.mutable_data();
  const double* px = xc.data();
  const double* pk = kc.data();

  // Visits every (output cell, valid tap) pair in row-major tap order.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t o0 = 0; o0 < oe[0]; ++o0)
      for (std::size_t o1 = 0; o1 < oe[1]; ++o1)
        for (std::size_t o2 = 0; o2 < oe[2]; ++o2) {
          const std::size_t ocell = (o0 * oe[1] + o1) * oe[2] + o2;
          std::size_t tap = 0;
          for (std::size_t t0 = 0; t0 < k[0]; ++t0)
            for (std::size_t t1 = 0; t1 < k[1]; ++t1)
              for (std::size_t t2 = 0; t2 < k[2]; ++t2, ++tap) {
                const std::ptrdiff_t i0 = static_cast<std::ptrdiff_t>(o0 * st[0] + t0 * dl[0]) - static_cast<std::ptrdiff_t>(pd[0]);
                const std::ptrdiff_t i1 = static_cast<std::ptrdiff_t>(o1 * st[1] + t1 * dl[1]) - static_cast<std::ptrdiff_t>(pd[1]);
                const std::ptrdiff_t i2 = static_cast<std::ptrdiff_t>(o2 * st[2] + t2 * dl[2]) - static_cast<std::ptrdiff_t>(pd[2]);
                if (i0 < 0 || i1 < 0 || i2 < 0 || i0 >= static_cast<std::ptrdiff_t>(g.ext[0]) ||
                    i1 >= static_cast<std::ptrdiff_t>(g.ext[1]) || i2 >= static_cast<std::ptrdiff_t>(g.ext[2])) {
                  continue;
                }
                const std::size_t icell = g.index(static_cast<std::size_t>(i0), static_cast<std::size_t>(i1),
                                                  static_cast<std::size_t>(i2));
                fn(ocell, icell, tap);
              }
        }
  };

  std::uint64_t taps = 0;
  for_each_tap([&](std::size_t ocell, std::size_t icell, std::size_t tap) {
    double* y = po + ocell * C;
    const double* xi = px + icell * C;
    const double* w = pk + tap * C;
    for (std::size_t c = 0; c < C; ++c) y[c] += xi[c] * w[c];
    ++taps;
  });
  flops::add(taps * C);

  return record(std::move(out), "depthwise_conv", {&x, &kernel}, [xc, kc, for_each_tap, C](Node& n) {
    auto gx = n.input_grad(0);
    auto gk = n.input_grad(1);
    const double* gy = n.grad.data();
    for_each_tap([&](std::size_t ocell, std::size_t icell, std::size_t tap) {
      const double* go = gy + ocell * C;
      if (!gx.empty()) {
        const double* w = kc.data() + tap * C;
        double* gi = gx.data() + icell * C;
        for (std::size_t c = 0; c < C; ++c) gi[c] += go[c] * w[c];
      }
      if (!gk.empty()) {
        const double* xi = xc.data() + icell * C;
        double* gw = gk.data() + tap * C;
        for (std::size_t c = 0; c < C; ++c) gw[c] += go[c] * xi[c];
      }
    });
  });
}

Tensor group_sum(const Tensor& x, std::size_t group) {
  if (x.rank() == 0 || group == 0 || x.dim(-1) % group != 0) {
    throw ShapeError("group_sum: group " + std::to_string(group) + " does not divide channels of " +
                     shape_str(x.shape()));
  }
  const std::size_t c = x.dim(-1), co = c / group, rows = x.numel() / c;
  const Tensor xc = x.contiguous();
  Shape shape = x.shape();
  shape.back() = co;
  Tensor out(shape);
  double* po = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < co; ++o) {
      double acc = 0.0;
      for (std::size_t s = 0; s < group; ++s) acc += xc.data()[r * c + o * group + s];
      po[r * co + o] = acc;
    }
  return record(std::move(out), "group_sum", {&x}, [c, co, group, rows](Node& n) {
    auto g = n.input_grad(0);
    for (std::size_t r = 0; r < rows && !g.empty(); ++r)
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t s = 0; s < group; ++s) g[r * c + o * group + s] += n.grad[r * co + o];
  });
}

Tensor unfold(const Tensor& x, std::size_t window) {
  const Grid g = grid_of(x, "unfold");
  if (window == 0 || window % 2 == 0) throw ShapeError("unfold: window must be odd");
  const std::size_t C = g.channels;
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(window / 2);
  std::array<std::size_t, 3> k = {1, 1, 1};
  for (std::size_t i = 0; i < g.rank; ++i) k[3 - g.rank + i] = window;
  const std::size_t taps = k[0] * k[1] * k[2];
  std::array<std::size_t, 3> ext = {g.ext[0], g.ext[1], g.ext[2]};
  const Tensor xc = x.contiguous();
  Tensor out(with_spatial(g, ext, taps * C));
  double* po = out.mutable_data();

  // (out cell, tap) -> input cell or npos at the border.
  std::vector<std::size_t> source(g.cells() * taps, static_cast<std::size_t>(-1));
  auto off = [&](std::size_t t, int axis) {
    return k[axis] == 1 ? std::ptrdiff_t{0} : static_cast<std::ptrdiff_t>(t) - half;
  };
  for (std::size_t a = 0; a < ext[0]; ++a)
    for (std::size_t b = 0; b < ext[1]; ++b)
      for (std::size_t c = 0; c < ext[2]; ++c) {
        const std::size_t cell = g.index(a, b, c);
        std::size_t tap = 0;
        for (std::size_t t0 = 0; t0 < k[0]; ++t0)
          for (std::size_t t1 = 0; t1 < k[1]; ++t1)
            for (std::size_t t2 = 0; t2 < k[2]; ++t2, ++tap) {
              const std::ptrdiff_t i0 = static_cast<std::ptrdiff_t>(a) + off(t0, 0);
              const std::ptrdiff_t i1 = static_cast<std::ptrdiff_t>(b) + off(t1, 1);
              const std::ptrdiff_t i2 = static_cast<std::ptrdiff_t>(c) + off(t2, 2);
              if (i0 < 0 || i1 < 0 || i2 < 0 || i0 >= static_cast<std::ptrdiff_t>(ext[0]) ||
                  i1 >= static_cast<std::ptrdiff_t>(ext[1]) || i2 >= static_cast<std::ptrdiff_t>(ext[2])) {
                continue;
              }
              source[cell * taps + tap] = g.index(static_cast<std::size_t>(i0), static_cast<std::size_t>(i1),
                                                  static_cast<std::size_t>(i2));
            }
      }
  for (std::size_t cell = 0; cell < g.cells(); ++cell)
    for (std::size_t tap = 0; tap < taps; ++tap) {
      const std::size_t src = source[cell * taps + tap];
      if (src == static_cast<std::size_t>(-1)) continue;
      std::copy_n(xc.data() + src * C, C, po + (cell * taps + tap) * C);
    }
  return record(std::move(out), "unfold", {&x}, [source = std::move(source), taps, C](Node& n) {
    auto g = n.input_grad(0);
    if (g.empty()) return;
    for (std::size_t e = 0; e < source.size(); ++e) {
      if (source[e] == static_cast<std::size_t>(-1)) continue;
      const double* src = n.grad.data() + e * C;
      double* dst = g.data() + source[e] * C;
      for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
    }
    (void)taps;
  });
}

Tensor pad(const Tensor& x, std::span<const std::size_t> before, std::span<const std::size_t> after) {
  if (before.size() != x.rank() || after.size() != x.rank()) throw ShapeError("pad: one entry per axis required");
  Shape shape = x.shape();
  for (std::size_t i = 0; i < shape.size(); ++i) shape[i] += before[i] + after[i];
  Tensor out(shape);
  const Tensor xc = x.contiguous();
  const auto ostr = row_major_strides(shape);
  std::vector<std::size_t> src_to_dst(x.numel());
  std::vector<std::size_t> idx(x.rank(), 0);
  for (std::size_t k = 0; k < x.numel(); ++k) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) off += (idx[i] + before[i]) * static_cast<std::size_t>(ostr[i]);
    src_to_dst[k] = off;
    out.mutable_data()[off] = xc.data()[k];
    for (std::size_t i = idx.size(); i-- > 0;) {
      if (++idx[i] < x.shape()[i]) break;
      idx[i] = 0;
    }
  }
  return record(std::move(out), "pad", {&x}, [src_to_dst = std::move(src_to_dst)](Node& n) {
    auto g = n.input_grad(0);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[src_to_dst[k]];
  });
}

Tensor max_pool(const Tensor& x, std::span<const std::size_t> factor) {
  const Grid g = grid_of(x, "max_pool");
  const auto f = spread(factor, g.rank, 1, "max_pool", "factor");
  std::array<std::size_t, 3> oe{};
  for (int a = 0; a < 3; ++a) {
    if (f[a] == 0 || g.ext[a] % f[a] != 0) throw ShapeError("max_pool: factor must divide extent");
    oe[a] = g.ext[a] / f[a];
  }
  const std::size_t C = g.channels;
  const Tensor xc = x.contiguous();
  Tensor out(with_spatial(g, oe, C));
  std::vector<std::size_t> argmax(out.numel());
  double* po = out.mutable_data();
  for (std::size_t o0 = 0; o0 < oe[0]; ++o0)
    for (std::size_t o1 = 0; o1 < oe[1]; ++o1)
      for (std::size_t o2 = 0; o2 < oe[2]; ++o2) {
        const std::size_t ocell = (o0 * oe[1] + o1) * oe[2] + o2;
        for (std::size_t c = 0; c < C; ++c) {
          bool first = true;
          double best = 0.0;
          std::size_t where = 0;
          for (std::size_t t0 = 0; t0 < f[0]; ++t0)
            for (std::size_t t1 = 0; t1 < f[1]; ++t1)
              for (std::size_t t2 = 0; t2 < f[2]; ++t2) {
                const std::size_t e = g.index(o0 * f[0] + t0, o1 * f[1] + t1, o2 * f[2] + t2) * C + c;
                if (first || xc.data()[e] > best) {
                  best = xc.data()[e];
                  where = e;
                  first = false;
                }
              }
          po[ocell * C + c] = best;
          argmax[ocell * C + c] = where;
        }
      }
  return record(std::move(out), "max_pool", {&x}, [argmax = std::move(argmax)](Node& n) {
    auto g = n.input_grad(0);
    if (g.empty()) return;
    for (std::size_t k = 0; k < argmax.size(); ++k) g[argmax[k]] += n.grad[k];
  });
}

Tensor upsample_nearest(const Tensor& x, std::span<const std::size_t> factor) {
  const Grid g = grid_of(x, "upsample_nearest");
  const auto f = spread(factor, g.rank, 1, "upsample_nearest", "factor");
  std::array<std::size_t, 3> oe{};
  for (int a = 0; a < 3; ++a) {
    if (f[a] == 0) throw ShapeError("upsample_nearest: factor must be positive");
    oe[a] = g.ext[a] * f[a];
  }
  const std::size_t C = g.channels;
  const Tensor xc = x.contiguous();
  Tensor out(with_spatial(g, oe, C));
  std::vector<std::size_t> source(oe[0] * oe[1] * oe[2]);
  for (std::size_t a = 0; a < oe[0]; ++a)
    for (std::size_t b = 0; b < oe[1]; ++b)
      for (std::size_t c = 0; c < oe[2]; ++c) {
        const std::size_t ocell = (a * oe[1] + b) * oe[2] + c;
        source[ocell] = g.index(a / f[0], b / f[1], c / f[2]);
        std::copy_n(xc.data() + source[ocell] * C, C, out.mutable_data() + ocell * C);
      }
  return record(std::move(out), "upsample_nearest", {&x}, [source = std::move(source), C](Node& n) {
    auto g = n.input_grad(0);
    if (g.empty()) return;
    for (std::size_t o = 0; o < source.size(); ++o)
      for (std::size_t c = 0; c < C; ++c) g[source[o] * C + c] += n.grad[o * C + c];
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.shape()[i] != first[i]) {
        throw ShapeError("concat: extent mismatch " + shape_str(p.shape()) + " vs " + shape_str(first));
      }
    }
    shape[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Tensor out(shape);
  std::vector<std::size_t> lens;
  std::size_t at = 0;
  for (const Tensor& p : parts) {
    const Tensor pc = p.contiguous();
    const std::size_t len = p.shape()[axis];
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pc.data() + o * len * inner, len * inner,
                  out.mutable_data() + (o * shape[axis] + at) * inner);
    }
    at += len;
    lens.push_back(len);
  }
  std::vector<const Tensor*> inputs;
  for (const Tensor& p : parts) inputs.push_back(&p);
  const std::size_t total = shape[axis];
  return record(std::move(out), "concat", inputs, [lens, outer, inner, total](Node& n) {
    std::size_t at = 0;
    for (std::size_t k = 0; k < lens.size(); ++k) {
      auto g = n.input_grad(k);
      if (!g.empty()) {
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t e = 0; e < lens[k] * inner; ++e)
            g[o * lens[k] * inner + e] += n.grad[(o * total + at) * inner + e];
      }
      at += lens[k];
    }
  });
}

Tensor index_select(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() == 0) throw ShapeError("index_select: scalar input");
  const std::size_t n_rows = x.dim(0), row = x.numel() / std::max<std::size_t>(n_rows, 1);
  for (std::size_t r : rows) {
    if (r >= n_rows) throw ShapeError("index_select: row " + std::to_string(r) + " out of range");
  }
  Shape shape = x.shape();
  shape[0] = rows.size();
  const Tensor xc = x.contiguous();
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(xc.data() + rows[i] * row, row, out.mutable_data() + i * row);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return record(std::move(out), "index_select", {&x}, [idx = std::move(idx), row](Node& n) {
    auto g = n.input_grad(0);
    if (g.empty()) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t e = 0; e < row; ++e) g[idx[i] * row + e] += n.grad[i * row + e];
  });
}

}  // namespace logvm::ops
