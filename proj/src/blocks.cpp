#include "logvm/blocks.hpp"

#include <cmath>

#include "logvm/ops.hpp"

namespace logvm::blocks {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Vanilla: return "vanilla";
    case Variant::Local: return "local";
    case Variant::Global: return "global";
    case Variant::LocalGlobal: return "log";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "vanilla") return Variant::Vanilla;
  if (s == "local") return Variant::Local;
  if (s == "global") return Variant::Global;
  if (s == "log" || s == "localglobal") return Variant::LocalGlobal;
  throw std::invalid_argument("unknown block variant '" + s + "'");
}

bool uses_ltx(Variant v) { return v == Variant::Local || v == Variant::LocalGlobal; }
bool uses_gtx(Variant v) { return v == Variant::Global || v == Variant::LocalGlobal; }

std::size_t BlockConfig::token_channels(std::size_t spatial_rank) const {
  if (uses_ltx(variant)) return extract::ltx_channels(inner_channels(), window, squeeze, spatial_rank);
  return inner_channels();
}

extract::GtxGeometry BlockConfig::gtx_geometry() const {
  return {gtx_stride, gamma, gtx_kernel, gtx_dilation};
}

void BlockConfig::validate(const Shape& spatial) const {
  if (channels == 0 || expansion == 0 || state_dim == 0) throw ShapeError("block: channels, alpha and N must be positive");
  if (directions != 1 && directions != 2 && directions != 4) {
    throw ShapeError("block: M must be 1, 2 or 4, got " + std::to_string(directions));
  }
  if (spatial.size() < 2 || spatial.size() > 3) throw ShapeError("block: expected 2 or 3 spatial axes");
  if (dwc_kernel % 2 == 0) throw ShapeError("block: DWC kernel must be odd");
  const std::size_t cp = token_channels(spatial.size());
  if (uses_gtx(variant)) extract::gtx_feature_count(spatial, cp, gtx_geometry());
}

namespace {

Tensor kernel_for(std::size_t extent, std::size_t rank, std::size_t channels, Rng& rng) {
  Shape shape(rank, extent);
  shape.push_back(channels);
  const double bound = 1.0 / std::sqrt(std::pow(static_cast<double>(extent), static_cast<double>(rank)));
  return rng.uniform_tensor(shape, -bound, bound);
}

Tensor dense(std::size_t fin, std::size_t fout, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fin));
  return rng.uniform_tensor({fin, fout}, -bound, bound);
}

}  // namespace

BlockWeights BlockWeights::init(const BlockConfig& cfg, const Shape& spatial, Rng& rng) {
  cfg.validate(spatial);
  const std::size_t rank = spatial.size(), c = cfg.channels, e = cfg.inner_channels();
  const std::size_t cp = cfg.token_channels(rank);
  BlockWeights w;
  w.ln_gain = Tensor::ones({c});
  w.ln_bias = Tensor::zeros({c});
  w.in_proj_w = dense(c, 2 * e, rng);
  w.in_proj_b = Tensor::zeros({2 * e});
  w.extract_kernel = kernel_for(cfg.dwc_kernel, rank, e, rng);
  if (uses_gtx(cfg.variant)) {
    const std::size_t features = extract::gtx_feature_count(spatial, cp, cfg.gtx_geometry());
    w.gtx_kernel = kernel_for(cfg.gtx_kernel, rank, cp, rng);
    w.gtx_proj_w = dense(features, cp, rng);
    w.gtx_proj_b = Tensor::zeros({cp});
  }
  for (std::size_t m = 0; m < cfg.directions; ++m) w.ssm.push_back(s6::S6Params::init(cp, cfg.state_dim, rng));
  w.post_ln_gain = Tensor::ones({cp});
  w.post_ln_bias = Tensor::zeros({cp});
  if (uses_ltx(cfg.variant)) {
    w.post_proj_w = dense(cp, e, rng);
    w.post_proj_b = Tensor::zeros({e});
  }
  w.out_proj_w = dense(e, c, rng);
  w.out_proj_b = Tensor::zeros({c});
  return w;
}

std::vector<std::pair<std::string, Tensor*>> BlockWeights::named_parameters(const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor*>> out;
  auto add = [&](const std::string& name, Tensor& t) {
    if (t.defined()) out.emplace_back(prefix + name, &t);
  };
  add("ln.gain", ln_gain);
  add("ln.bias", ln_bias);
  add("in_proj.weight", in_proj_w);
  add("in_proj.bias", in_proj_b);
  add("extract.kernel", extract_kernel);
  add("gtx.kernel", gtx_kernel);
  add("gtx.proj.weight", gtx_proj_w);
  add("gtx.proj.bias", gtx_proj_b);
  for (std::size_t m = 0; m < ssm.size(); ++m) {
    const std::string p = "ssm" + std::to_string(m) + ".";
    add(p + "a_log", ssm[m].a_log);
    add(p + "delta_weight", ssm[m].delta_weight);
    add(p + "delta_bias", ssm[m].delta_bias);
    add(p + "b_weight", ssm[m].b_weight);
    add(p + "c_weight", ssm[m].c_weight);
    add(p + "skip", ssm[m].skip);
  }
  add("post_ln.gain", post_ln_gain);
  add("post_ln.bias", post_ln_bias);
  add("post_proj.weight", post_proj_w);
  add("post_proj.bias", post_proj_b);
  add("out_proj.weight", out_proj_w);
  add("out_proj.bias", out_proj_b);
  return out;
}

void BlockWeights::zero_out_projection() {
  out_proj_w = Tensor::zeros(out_proj_w.shape());
  out_proj_b = Tensor::zeros(out_proj_b.shape());
}

namespace {

struct Branch {
  Tensor grid;     // extractor output [spatial..., C']
  Tensor globals;  // [N_global, C'] or undefined
  Tensor gate;     // SiLU(second half of the in-projection)
};

Branch run_branch(const Tensor& x, const BlockConfig& cfg, const BlockWeights& w) {
  const Shape spatial(x.shape().begin(), x.shape().end() - 1);
  cfg.validate(spatial);
  if (x.dim(-1) != cfg.channels) {
    throw ShapeError("block: input has " + std::to_string(x.dim(-1)) + " channels, config expects " +
                     std::to_string(cfg.channels));
  }
  const std::size_t e = cfg.inner_channels();
  const std::size_t last = x.rank() - 1;
  const Tensor normed = ops::layer_norm(x, w.ln_gain, w.ln_bias);
  const Tensor proj = ops::linear(normed, w.in_proj_w, w.in_proj_b);
  const Tensor u = proj.slice(last, 0, e);
  Branch b;
  b.gate = ops::silu(proj.slice(last, e, 2 * e));
  b.grid = uses_ltx(cfg.variant) ? extract::ltx_map(u, w.extract_kernel, cfg.window, cfg.squeeze)
                                 : extract::vanilla_map(u, w.extract_kernel);
  if (uses_gtx(cfg.variant)) {
    b.globals = extract::gtx(b.grid, w.gtx_kernel, w.gtx_proj_w, w.gtx_proj_b, cfg.gtx_geometry());
  }
  return b;
}

TokenSequence direction_sequence(const Branch& b, const BlockConfig& cfg, const Shape& spatial,
                                 const ScanDirection& dir) {
  const Tensor local = extract::order_tokens(b.grid, dir);
  if (!b.globals.defined()) {
    TokenSequence seq;
    seq.tokens = local;
    seq.spatial_shape = spatial;
    seq.ordering = dir;
    return seq;
  }
  return extract::concat_tokens(local, b.globals, cfg.strategy, spatial, dir);
}

}  // namespace

TokenSequence block_scan_input(const Tensor& x, const BlockConfig& cfg, const BlockWeights& w, std::size_t m) {
  const Shape spatial(x.shape().begin(), x.shape().end() - 1);
  const Branch b = run_branch(x, cfg, w);
  const auto dirs = scan_directions(cfg.directions, spatial.size());
  if (m >= dirs.size()) throw ShapeError("block_scan_input: direction index out of range");
  return direction_sequence(b, cfg, spatial, dirs[m]);
}

Tensor block_forward(const Tensor& x, const BlockConfig& cfg, const BlockWeights& w) {
  const Shape spatial(x.shape().begin(), x.shape().end() - 1);
  const Branch b = run_branch(x, cfg, w);
  const auto dirs = scan_directions(cfg.directions, spatial.size());
  if (w.ssm.size() != dirs.size()) throw ShapeError("block: weights hold a different number of scan directions");

  Tensor merged;
  for (std::size_t m = 0; m < dirs.size(); ++m) {
    const TokenSequence seq = direction_sequence(b, cfg, spatial, dirs[m]);
    const TokenSequence out = s6::s6_forward(seq, w.ssm[m], cfg.parallel_scan, cfg.scan_chunk);
    const Tensor grid = extract::inverse_order(extract::strip_globals(out), dirs[m], spatial);
    merged = merged.defined() ? ops::add(merged, grid) : grid;
  }
  Tensor y = ops::layer_norm(merged, w.post_ln_gain, w.post_ln_bias);
  if (uses_ltx(cfg.variant)) y = ops::linear(y, w.post_proj_w, w.post_proj_b);
  y = ops::mul(y, b.gate);
  y = ops::linear(y, w.out_proj_w, w.out_proj_b);
  return ops::add(x, y);
}

namespace {

/// Number of (output cell, in-bounds tap) pairs of a strided, dilated window.
std::uint64_t valid_taps(const Shape& spatial, std::size_t k, std::size_t stride, std::size_t dilation,
                         std::size_t pad) {
  std::uint64_t total = 1;
  for (std::size_t extent : spatial) {
    const std::size_t out = ops::conv_out_extent(extent, k, stride, dilation, pad);
    std::uint64_t axis = 0;
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t t = 0; t < k; ++t) {
        const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(o * stride + t * dilation) - static_cast<std::ptrdiff_t>(pad);
        if (i >= 0 && i < static_cast<std::ptrdiff_t>(extent)) ++axis;
      }
    total *= axis;
  }
  return total;
}

}  // namespace

std::uint64_t count_flops(const BlockConfig& cfg, const Shape& spatial) {
  cfg.validate(spatial);
  const std::uint64_t P = shape_numel(spatial), C = cfg.channels, E = cfg.inner_channels();
  const std::uint64_t Cp = cfg.token_channels(spatial.size()), N = cfg.state_dim;
  std::uint64_t mults = 0;
  mults += 3 * P * C;       // input layer norm
  mults += P * C * 2 * E;   // in-projection
  mults += P * E;           // SiLU on the gate branch
  const std::size_t dpad = (cfg.dwc_kernel - 1) / 2;
  if (uses_ltx(cfg.variant)) {
    mults += valid_taps(spatial, cfg.dwc_kernel, 1, 1, dpad) * E;  // squeeze DWC
    mults += P * (E / cfg.squeeze);                                 // SiLU before unfold
  } else {
    mults += valid_taps(spatial, cfg.dwc_kernel, 1, 1, dpad) * E;  // DWC
    mults += P * E;                                                 // SiLU
  }
  std::uint64_t n_global = 0;
  if (uses_gtx(cfg.variant)) {
    const auto geom = cfg.gtx_geometry();
    const std::size_t gpad = (geom.kernel - 1) * geom.dilation / 2;
    std::uint64_t taps = 1;
    for (std::size_t i = 0; i < spatial.size(); ++i) {
      taps *= valid_taps({spatial[i]}, geom.kernel, geom.stride[i], geom.dilation, gpad);
    }
    const std::uint64_t features = extract::gtx_feature_count(spatial, Cp, geom);
    n_global = Cp / geom.gamma;
    mults += taps * Cp;                // dilated strided DWC
    mults += n_global * features * Cp; // projection
    mults += n_global * Cp;            // SiLU
  }
  const std::uint64_t L = P + n_global;
  const std::uint64_t scan = L * Cp * (1 + 2 * N)  // delta, B and C projections
                             + L * Cp * N * 5      // discretize, state update, readout
                             + L * Cp;             // skip term
  mults += cfg.directions * scan;
  mults += 3 * P * Cp;                           // post-scan layer norm
  if (uses_ltx(cfg.variant)) mults += P * Cp * E;  // post projection
  mults += P * E;                                // gating
  mults += P * E * C;                            // out-projection
  return 2 * mults;
}

}  // namespace logvm::blocks
