#include "logvm/extract.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "logvm/ops.hpp"

namespace logvm {

ScanDirection ScanDirection::horizontal(std::size_t spatial_rank, bool backward) {
  ScanDirection d;
  d.axis_order.resize(spatial_rank);
  std::iota(d.axis_order.begin(), d.axis_order.end(), std::size_t{0});
  d.reverse = backward;
  return d;
}

ScanDirection ScanDirection::vertical(std::size_t spatial_rank, bool backward) {
  ScanDirection d = horizontal(spatial_rank, backward);
  if (spatial_rank >= 2) std::swap(d.axis_order[spatial_rank - 1], d.axis_order[spatial_rank - 2]);
  return d;
}

std::string ScanDirection::name() const {
  const bool vert = axis_order.size() >= 2 && axis_order.back() != axis_order.size() - 1;
  return std::string(vert ? "V" : "H") + (reverse ? "Backward" : "Forward");
}

std::vector<ScanDirection> scan_directions(std::size_t m, std::size_t spatial_rank) {
  switch (m) {
    case 1:
      return {ScanDirection::horizontal(spatial_rank)};
    case 2:
      return {ScanDirection::horizontal(spatial_rank), ScanDirection::vertical(spatial_rank)};
    case 4:
      return {ScanDirection::horizontal(spatial_rank), ScanDirection::vertical(spatial_rank),
              ScanDirection::horizontal(spatial_rank, true), ScanDirection::vertical(spatial_rank, true)};
    default:
      throw ShapeError("scan_directions: M must be 1, 2 or 4, got " + std::to_string(m));
  }
}

std::string to_string(ConcatStrategy s) {
  switch (s) {
    case ConcatStrategy::Head: return "head";
    case ConcatStrategy::Middle: return "center";
    case ConcatStrategy::Split: return "split";
    case ConcatStrategy::Interleaved: return "interleaved";
  }
  return "?";
}

ConcatStrategy parse_strategy(const std::string& s) {
  if (s == "head") return ConcatStrategy::Head;
  if (s == "middle" || s == "center") return ConcatStrategy::Middle;
  if (s == "split") return ConcatStrategy::Split;
  if (s == "interleaved") return ConcatStrategy::Interleaved;
  throw std::invalid_argument("unknown concatenation strategy '" + s + "'");
}

}  // namespace logvm

namespace logvm::extract {

namespace {

Shape spatial_of(const Tensor& x, const char* op) {
  if (x.rank() < 3 || x.rank() > 4) {
    throw ShapeError(std::string(op) + ": expected [H, W, C] or [D, H, W, C], got " + shape_str(x.shape()));
  }
  return Shape(x.shape().begin(), x.shape().end() - 1);
}

Tensor flatten_grid(const Tensor& grid) { return grid.reshape({shape_numel(Shape(grid.shape().begin(), grid.shape().end() - 1)), grid.dim(-1)}); }

std::vector<std::size_t> ones(std::size_t n) { return std::vector<std::size_t>(n, 1); }

}  // namespace

std::vector<std::size_t> order_permutation(const Shape& spatial, const ScanDirection& dir) {
  const std::size_t rank = spatial.size();
  if (dir.axis_order.size() != rank) {
    throw ShapeError("order_permutation: direction " + dir.name() + " does not match spatial rank " +
                     std::to_string(rank));
  }
  std::vector<bool> seen(rank, false);
  for (std::size_t a : dir.axis_order) {
    if (a >= rank || seen[a]) throw ShapeError("order_permutation: invalid axis order");
    seen[a] = true;
  }
  const auto strides = row_major_strides(spatial);
  const std::size_t cells = shape_numel(spatial);
  std::vector<std::size_t> perm(cells);
  std::vector<std::size_t> idx(rank, 0);  // indexed by position in axis_order
  for (std::size_t s = 0; s < cells; ++s) {
    std::size_t flat = 0;
    for (std::size_t i = 0; i < rank; ++i) flat += idx[i] * static_cast<std::size_t>(strides[dir.axis_order[i]]);
    perm[s] = flat;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < spatial[dir.axis_order[i]]) break;
      idx[i] = 0;
    }
  }
  if (dir.reverse) std::reverse(perm.begin(), perm.end());
  return perm;
}

Tensor order_tokens(const Tensor& grid, const ScanDirection& dir) {
  const Shape spatial = spatial_of(grid, "order_tokens");
  const auto perm = order_permutation(spatial, dir);
  return ops::index_select(flatten_grid(grid), perm);
}

Tensor inverse_order(const Tensor& seq, const ScanDirection& dir, const Shape& spatial) {
  if (seq.rank() != 2 || seq.dim(0) != shape_numel(spatial)) {
    throw ShapeError("inverse_order: sequence " + shape_str(seq.shape()) + " does not cover grid " +
                     shape_str(spatial));
  }
  const auto perm = order_permutation(spatial, dir);
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t s = 0; s < perm.size(); ++s) inv[perm[s]] = s;
  Shape shape = spatial;
  shape.push_back(seq.dim(1));
  return ops::index_select(seq, inv).reshape(shape);
}

std::vector<std::size_t> global_positions(std::size_t n_local, std::size_t n_global, ConcatStrategy strategy) {
  std::vector<std::size_t> pos;
  pos.reserve(n_global);
  const std::size_t total = n_local + n_global;
  switch (strategy) {
    case ConcatStrategy::Head:
      for (std::size_t i = 0; i < n_global; ++i) pos.push_back(i);
      break;
    case ConcatStrategy::Middle:
      for (std::size_t i = 0; i < n_global; ++i) pos.push_back(n_local / 2 + i);
      break;
    case ConcatStrategy::Split: {
      const std::size_t head = (n_global + 1) / 2, tail = n_global / 2;
      for (std::size_t i = 0; i < head; ++i) pos.push_back(i);
      for (std::size_t i = 0; i < tail; ++i) pos.push_back(total - tail + i);
      break;
    }
    case ConcatStrategy::Interleaved: {
      if (n_global == 0) break;
      const std::size_t q = n_local / n_global;
      if (q >= 1) {
        for (std::size_t i = 0; i < n_global; ++i) pos.push_back(i * (q + 1));
      } else {
        const std::size_t extra = n_global - n_local;
        for (std::size_t i = 0; i < extra; ++i) pos.push_back(i);
        for (std::size_t i = 0; i < n_local; ++i) pos.push_back(extra + 2 * i);
      }
      break;
    }
  }
  return pos;
}

TokenSequence concat_tokens(const Tensor& local, const Tensor& globals, ConcatStrategy strategy, Shape spatial_shape,
                            ScanDirection ordering) {
  if (local.rank() != 2 || globals.rank() != 2) throw ShapeError("concat_tokens: tokens must be matrices");
  if (local.dim(1) != globals.dim(1)) {
    throw ShapeError("concat_tokens: local tokens have " + std::to_string(local.dim(1)) +
                     " channels, global tokens " + std::to_string(globals.dim(1)));
  }
  const std::size_t n_local = local.dim(0), n_global = globals.dim(0);
  if (spatial_shape.empty()) spatial_shape = {n_local};
  if (shape_numel(spatial_shape) != n_local) throw ShapeError("concat_tokens: spatial shape does not match locals");
  if (ordering.axis_order.size() != spatial_shape.size()) ordering = ScanDirection::horizontal(spatial_shape.size());

  TokenSequence seq;
  seq.global_positions = global_positions(n_local, n_global, strategy);
  seq.spatial_shape = std::move(spatial_shape);
  seq.ordering = std::move(ordering);
  // Rows of the stacked [globals; locals] matrix in sequence order.
  std::vector<std::size_t> rows(n_local + n_global);
  std::size_t next_global = 0, next_local = 0;
  for (std::size_t s = 0; s < rows.size(); ++s) {
    if (next_global < n_global && seq.global_positions[next_global] == s) {
      rows[s] = next_global++;
    } else {
      rows[s] = n_global + next_local++;
    }
  }
  if (n_global == 0) {
    seq.tokens = local;
    return seq;
  }
  const Tensor parts[] = {globals, local};
  seq.tokens = ops::index_select(ops::concat(parts, 0), rows);
  return seq;
}

Tensor strip_globals(const TokenSequence& seq) {
  if (seq.global_positions.empty()) return seq.tokens;
  std::vector<std::size_t> rows;
  rows.reserve(seq.length() - seq.global_count());
  std::size_t g = 0;
  for (std::size_t s = 0; s < seq.length(); ++s) {
    if (g < seq.global_positions.size() && seq.global_positions[g] == s) {
      ++g;
      continue;
    }
    rows.push_back(s);
  }
  return ops::index_select(seq.tokens, rows);
}

Tensor global_rows(const TokenSequence& seq) { return ops::index_select(seq.tokens, seq.global_positions); }

std::size_t ltx_channels(std::size_t channels, std::size_t window, std::size_t squeeze, std::size_t spatial_rank) {
  if (squeeze == 0 || channels % squeeze != 0) {
    throw ShapeError("ltx: squeeze factor " + std::to_string(squeeze) + " does not divide " +
                     std::to_string(channels) + " channels");
  }
  if (window % 2 == 0) throw ShapeError("ltx: window must be odd, got " + std::to_string(window));
  std::size_t taps = 1;
  for (std::size_t i = 0; i < spatial_rank; ++i) taps *= window;
  return channels / squeeze * taps;
}

Tensor vanilla_map(const Tensor& x, const Tensor& dwc_kernel) {
  const Shape spatial = spatial_of(x, "vanilla_extract");
  const Shape kext(dwc_kernel.shape().begin(), dwc_kernel.shape().end() - 1);
  const auto dil = ones(spatial.size());
  return ops::silu(ops::depthwise_conv(x, dwc_kernel, ones(spatial.size()), dil, ops::same_padding(kext, dil)));
}

TokenSequence vanilla_extract(const Tensor& x, const Tensor& dwc_kernel) {
  TokenSequence seq;
  seq.spatial_shape = spatial_of(x, "vanilla_extract");
  seq.ordering = ScanDirection::horizontal(seq.spatial_shape.size());
  seq.tokens = flatten_grid(vanilla_map(x, dwc_kernel));
  return seq;
}

Tensor ltx_map(const Tensor& x, const Tensor& squeeze_kernel, std::size_t window, std::size_t squeeze) {
  const Shape spatial = spatial_of(x, "ltx");
  ltx_channels(x.dim(-1), window, squeeze, spatial.size());
  const Shape kext(squeeze_kernel.shape().begin(), squeeze_kernel.shape().end() - 1);
  for (std::size_t k : kext) {
    if (k % 2 == 0) throw ShapeError("ltx: squeeze kernel extents must be odd");
  }
  const auto dil = ones(spatial.size());
  Tensor squeezed = ops::depthwise_conv(x, squeeze_kernel, ones(spatial.size()), dil, ops::same_padding(kext, dil));
  if (squeeze > 1) squeezed = ops::group_sum(squeezed, squeeze);
  return ops::unfold(ops::silu(squeezed), window);
}

TokenSequence ltx(const Tensor& x, const Tensor& squeeze_kernel, std::size_t window, std::size_t squeeze) {
  TokenSequence seq;
  seq.spatial_shape = spatial_of(x, "ltx");
  seq.ordering = ScanDirection::horizontal(seq.spatial_shape.size());
  seq.tokens = flatten_grid(ltx_map(x, squeeze_kernel, window, squeeze));
  return seq;
}

std::size_t gtx_feature_count(const Shape& spatial, std::size_t channels, const GtxGeometry& geom) {
  if (geom.stride.size() != spatial.size()) throw ShapeError("gtx: one stride per spatial axis required");
  if (geom.gamma == 0 || channels % geom.gamma != 0) {
    throw ShapeError("gtx: gamma " + std::to_string(geom.gamma) + " does not divide " + std::to_string(channels) +
                     " channels");
  }
  std::size_t cells = 1;
  for (std::size_t i = 0; i < spatial.size(); ++i) {
    if (geom.stride[i] == 0 || spatial[i] % geom.stride[i] != 0) {
      throw ShapeError("gtx: stride " + std::to_string(geom.stride[i]) + " does not divide extent " +
                       std::to_string(spatial[i]));
    }
    cells *= spatial[i] / geom.stride[i];
  }
  return geom.gamma * cells;
}

Tensor gtx_pre_projection(const Tensor& xl, const Tensor& dconv_kernel, const GtxGeometry& geom) {
  const Shape spatial = spatial_of(xl, "gtx");
  const std::size_t c = xl.dim(-1);
  const std::size_t features = gtx_feature_count(spatial, c, geom);
  const std::vector<std::size_t> dil(spatial.size(), geom.dilation);
  const std::vector<std::size_t> kext(spatial.size(), geom.kernel);
  for (std::size_t i = 0; i < spatial.size(); ++i) {
    if (dconv_kernel.rank() != spatial.size() + 1 || dconv_kernel.shape()[i] != geom.kernel) {
      throw ShapeError("gtx: dilated kernel shape " + shape_str(dconv_kernel.shape()) + " does not match geometry");
    }
  }
  const Tensor pooled = ops::depthwise_conv(xl, dconv_kernel, geom.stride, dil, ops::same_padding(kext, dil));
  const std::size_t cells = pooled.numel() / c;
  return pooled.reshape({cells, c}).transpose(0, 1).reshape({c / geom.gamma, features});
}

Tensor gtx(const Tensor& xl, const Tensor& dconv_kernel, const Tensor& proj_weight, const Tensor& proj_bias,
           const GtxGeometry& geom) {
  const Tensor groups = gtx_pre_projection(xl, dconv_kernel, geom);
  if (proj_weight.rank() != 2 || proj_weight.dim(0) != groups.dim(1)) {
    throw ShapeError("gtx: projection weight " + shape_str(proj_weight.shape()) + " expects a different stage size (" +
                     std::to_string(groups.dim(1)) + " features per token)");
  }
  return ops::silu(ops::linear(groups, proj_weight, proj_bias));
}

}  // namespace logvm::extract
