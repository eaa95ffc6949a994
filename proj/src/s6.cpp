#include "logvm/s6.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "logvm/autodiff.hpp"
#include "logvm/parallel.hpp"

namespace logvm::s6 {

namespace {

double softplus_of(double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }
double sigmoid_of(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

/// Token-wise quantities shared by the forward scan and the backward sweep.
struct Projections {
  std::size_t L = 0, D = 0, N = 0;
  std::vector<double> a;      // [D, N], A = -exp(a_log)
  std::vector<double> z;      // [L, D], pre-softplus
  std::vector<double> delta;  // [L, D]
  std::vector<double> bt;     // [L, N]
  std::vector<double> ct;     // [L, N]
};

struct Packed {
  Tensor x, a_log, dw, db, bw, cw, skip;
};

Packed pack(const Tensor& x, const S6Params& p) {
  return {x.contiguous().detach(),        p.a_log.contiguous().detach(), p.delta_weight.contiguous().detach(),
          p.delta_bias.contiguous().detach(), p.b_weight.contiguous().detach(), p.c_weight.contiguous().detach(),
          p.skip.contiguous().detach()};
}

Projections project(const Packed& in, std::size_t threads) {
  Projections pr;
  pr.L = in.x.dim(0);
  pr.D = in.x.dim(1);
  pr.N = in.a_log.dim(1);
  const std::size_t L = pr.L, D = pr.D, N = pr.N;
  pr.a.resize(D * N);
  for (std::size_t i = 0; i < D * N; ++i) pr.a[i] = -std::exp(in.a_log.data()[i]);
  pr.z.resize(L * D);
  pr.delta.resize(L * D);
  pr.bt.assign(L * N, 0.0);
  pr.ct.assign(L * N, 0.0);
  const double* x = in.x.data();
  const std::size_t blocks = std::max<std::size_t>(1, std::min(threads, L));
  parallel_for(blocks, threads, [&](std::size_t blk) {
    for (std::size_t t = L * blk / blocks; t < L * (blk + 1) / blocks; ++t) {
      const double* xt = x + t * D;
      double dot = 0.0;
      for (std::size_t d = 0; d < D; ++d) dot += xt[d] * in.dw.data()[d];
      for (std::size_t d = 0; d < D; ++d) {
        pr.z[t * D + d] = dot + in.db.data()[d];
        pr.delta[t * D + d] = softplus_of(pr.z[t * D + d]);
      }
      double* b = pr.bt.data() + t * N;
      double* c = pr.ct.data() + t * N;
      for (std::size_t d = 0; d < D; ++d) {
        for (std::size_t n = 0; n < N; ++n) {
          b[n] += xt[d] * in.bw.data()[d * N + n];
          c[n] += xt[d] * in.cw.data()[d * N + n];
        }
      }
    }
  });
  flops::add(L * D * (1 + 2 * N));
  return pr;
}

/// Advances the recurrence over tokens [begin, end) from `h` (D*N), writing
/// y rows and, when `trace` is non-null, every state.
void run_span(const Projections& pr, const double* x, const double* skip, std::size_t begin, std::size_t end,
              std::vector<double>& h, double* y, double* trace) {
  const std::size_t D = pr.D, N = pr.N;
  for (std::size_t t = begin; t < end; ++t) {
    const double* xt = x + t * D;
    const double* b = pr.bt.data() + t * N;
    const double* c = pr.ct.data() + t * N;
    for (std::size_t d = 0; d < D; ++d) {
      const double dt = pr.delta[t * D + d];
      double acc = 0.0;
      double* hd = h.data() + d * N;
      for (std::size_t n = 0; n < N; ++n) {
        const double abar = std::exp(dt * pr.a[d * N + n]);
        const double u = dt * b[n] * xt[d];
        hd[n] = abar * hd[n] + u;
        acc += c[n] * hd[n];
      }
      y[t * D + d] = acc + skip[d] * xt[d];
    }
    if (trace) std::copy(h.begin(), h.end(), trace + t * D * N);
  }
}

struct Forward {
  std::vector<double> y;
  std::vector<double> states;  // [L, D, N], empty unless saved
};

Forward forward_impl(const Packed& in, const Projections& pr, std::size_t chunk, std::size_t threads,
                     bool save_states) {
  const std::size_t L = pr.L, D = pr.D, N = pr.N, DN = D * N;
  Forward out;
  out.y.assign(L * D, 0.0);
  if (save_states) out.states.assign(L * DN, 0.0);
  double* trace = save_states ? out.states.data() : nullptr;
  const double* x = in.x.data();
  const double* skip = in.skip.data();

  if (chunk == 0 || chunk >= L) {
    std::vector<double> h(DN, 0.0);
    run_span(pr, x, skip, 0, L, h, out.y.data(), trace);
    flops::add(L * DN * 5 + L * D);
    return out;
  }

  const std::size_t chunks = (L + chunk - 1) / chunk;
  // Phase 1: per-chunk reduction of the affine elements (a_t, u_t).
  std::vector<ScanElement> agg(chunks);
  parallel_for(chunks, threads, [&](std::size_t k) {
    ScanElement e = ScanElement::identity(DN);
    for (std::size_t t = k * chunk; t < std::min(L, (k + 1) * chunk); ++t) {
      const double* xt = x + t * D;
      const double* b = pr.bt.data() + t * N;
      for (std::size_t d = 0; d < D; ++d) {
        const double dt = pr.delta[t * D + d];
        for (std::size_t n = 0; n < N; ++n) {
          const double abar = std::exp(dt * pr.a[d * N + n]);
          const double u = dt * b[n] * xt[d];
          e.b[d * N + n] = abar * e.b[d * N + n] + u;
          e.a[d * N + n] = abar * e.a[d * N + n];
        }
      }
    }
    agg[k] = std::move(e);
  });
  // Phase 2: sequential carry across chunk boundaries.
  std::vector<std::vector<double>> carry(chunks, std::vector<double>(DN, 0.0));
  for (std::size_t k = 1; k < chunks; ++k) {
    for (std::size_t i = 0; i < DN; ++i) carry[k][i] = agg[k - 1].a[i] * carry[k - 1][i] + agg[k - 1].b[i];
  }
  // Phase 3: each chunk replays its tokens from the carried-in state.
  parallel_for(chunks, threads, [&](std::size_t k) {
    std::vector<double> h = carry[k];
    run_span(pr, x, skip, k * chunk, std::min(L, (k + 1) * chunk), h, out.y.data(), trace);
  });
  return out;
}

void check_inputs(const Tensor& x, const S6Params& p) {
  p.validate();
  if (x.rank() != 2) throw ShapeError("selective_scan: x must be [L, D], got " + shape_str(x.shape()));
  if (x.dim(0) == 0) throw ShapeError("selective_scan: empty sequence");
  if (x.dim(1) != p.channels()) {
    throw ShapeError("selective_scan: x has " + std::to_string(x.dim(1)) + " channels, params expect " +
                     std::to_string(p.channels()));
  }
}

Tensor scan(const Tensor& x, const S6Params& p, std::size_t chunk, std::size_t threads) {
  check_inputs(x, p);
  if (threads == 0) threads = default_threads();
  Packed in = pack(x, p);
  const bool taped = autodiff::grad_enabled() &&
                     (x.requires_grad() || p.a_log.requires_grad() || p.delta_weight.requires_grad() ||
                      p.delta_bias.requires_grad() || p.b_weight.requires_grad() ||
                      p.c_weight.requires_grad() || p.skip.requires_grad());
  auto pr = std::make_shared<Projections>(project(in, threads));
  Forward fw = forward_impl(in, *pr, chunk, threads, taped);
  Tensor out(Shape{pr->L, pr->D}, std::move(fw.y));
  if (!taped) {
    check_finite(out, "selective_scan");
    return out;
  }

  auto states = std::make_shared<std::vector<double>>(std::move(fw.states));
  return autodiff::record(
      std::move(out), "selective_scan",
      {&x, &p.a_log, &p.delta_weight, &p.delta_bias, &p.b_weight, &p.c_weight, &p.skip},
      [in, pr, states](autodiff::Node& node) {
        const std::size_t L = pr->L, D = pr->D, N = pr->N, DN = D * N;
        const double* dy = node.grad.data();
        const double* x = in.x.data();
        const double* hs = states->data();
        std::vector<double> dx(L * D, 0.0), ddelta(L * D, 0.0), dbt(L * N, 0.0), dct(L * N, 0.0);
        std::vector<double> da(DN, 0.0), dskip(D, 0.0), carry(DN, 0.0);
        for (std::size_t t = L; t-- > 0;) {
          const double* xt = x + t * D;
          const double* b = pr->bt.data() + t * N;
          const double* c = pr->ct.data() + t * N;
          const double* h = hs + t * DN;
          const double* hprev = t > 0 ? hs + (t - 1) * DN : nullptr;
          for (std::size_t d = 0; d < D; ++d) {
            const double g = dy[t * D + d];
            const double dt = pr->delta[t * D + d];
            double dd = 0.0, dxd = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t i = d * N + n;
              const double dh = g * c[n] + carry[i];
              dct[t * N + n] += g * h[i];
              const double abar = std::exp(dt * pr->a[i]);
              const double dabar = hprev ? dh * hprev[i] : 0.0;
              dd += dabar * abar * pr->a[i] + dh * b[n] * xt[d];
              da[i] += dabar * abar * dt;
              dbt[t * N + n] += dh * dt * xt[d];
              dxd += dh * dt * b[n];
              carry[i] = abar * dh;
            }
            ddelta[t * D + d] = dd;
            dx[t * D + d] += dxd + in.skip.data()[d] * g;
            dskip[d] += g * xt[d];
          }
        }
        std::vector<double> ddw(D, 0.0), ddb(D, 0.0), dbw(DN, 0.0), dcw(DN, 0.0);
        for (std::size_t t = 0; t < L; ++t) {
          const double* xt = x + t * D;
          double dsum = 0.0;
          for (std::size_t d = 0; d < D; ++d) {
            const double dz = ddelta[t * D + d] * sigmoid_of(pr->z[t * D + d]);
            ddb[d] += dz;
            dsum += dz;
          }
          for (std::size_t d = 0; d < D; ++d) {
            ddw[d] += dsum * xt[d];
            double acc = dsum * in.dw.data()[d];
            for (std::size_t n = 0; n < N; ++n) {
              dbw[d * N + n] += xt[d] * dbt[t * N + n];
              dcw[d * N + n] += xt[d] * dct[t * N + n];
              acc += in.bw.data()[d * N + n] * dbt[t * N + n] + in.cw.data()[d * N + n] * dct[t * N + n];
            }
            dx[t * D + d] += acc;
          }
        }
        auto accumulate = [&node](std::size_t slot, const std::vector<double>& src) {
          auto g = node.input_grad(slot);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
        };
        for (std::size_t i = 0; i < DN; ++i) da[i] *= pr->a[i];  // dA/da_log = A
        accumulate(0, dx);
        accumulate(1, da);
        accumulate(2, ddw);
        accumulate(3, ddb);
        accumulate(4, dbw);
        accumulate(5, dcw);
        accumulate(6, dskip);
      });
}

}  // namespace

S6Params S6Params::init(std::size_t channels, std::size_t state_dim, Rng& rng) {
  if (channels == 0 || state_dim == 0) throw ShapeError("S6Params: channels and state_dim must be positive");
  S6Params p;
  p.a_log = Tensor(Shape{channels, state_dim});
  for (std::size_t d = 0; d < channels; ++d)
    for (std::size_t n = 0; n < state_dim; ++n) p.a_log.mutable_data()[d * state_dim + n] = std::log(n + 1.0);
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  p.delta_weight = rng.uniform_tensor({channels, 1}, -bound, bound);
  p.delta_bias = Tensor::full({channels}, std::log(std::expm1(1e-2)));
  p.b_weight = rng.uniform_tensor({channels, state_dim}, -bound, bound);
  p.c_weight = rng.uniform_tensor({channels, state_dim}, -bound, bound);
  p.skip = Tensor::ones({channels});
  return p;
}

std::vector<Tensor*> S6Params::parameters() {
  return {&a_log, &delta_weight, &delta_bias, &b_weight, &c_weight, &skip};
}

std::vector<const Tensor*> S6Params::parameters() const {
  return {&a_log, &delta_weight, &delta_bias, &b_weight, &c_weight, &skip};
}

void S6Params::validate() const {
  if (a_log.rank() != 2) throw ShapeError("S6Params: a_log must be [D, N]");
  const std::size_t D = channels(), N = state_dim();
  if (delta_weight.shape() != Shape{D, 1} || delta_bias.shape() != Shape{D} || b_weight.shape() != Shape{D, N} ||
      c_weight.shape() != Shape{D, N} || skip.shape() != Shape{D}) {
    throw ShapeError("S6Params: inconsistent parameter shapes for D=" + std::to_string(D) +
                     ", N=" + std::to_string(N));
  }
}

ScanElement ScanElement::identity(std::size_t size) {
  return {std::vector<double>(size, 1.0), std::vector<double>(size, 0.0)};
}

ScanElement compose(const ScanElement& later, const ScanElement& earlier) {
  if (later.a.size() != earlier.a.size()) throw ShapeError("compose: element size mismatch");
  ScanElement out = ScanElement::identity(later.a.size());
  for (std::size_t i = 0; i < out.a.size(); ++i) {
    out.a[i] = later.a[i] * earlier.a[i];
    out.b[i] = later.a[i] * earlier.b[i] + later.b[i];
  }
  return out;
}

std::vector<ScanElement> inclusive_scan_seq(std::span<const ScanElement> elems) {
  std::vector<ScanElement> out;
  out.reserve(elems.size());
  for (std::size_t t = 0; t < elems.size(); ++t) {
    out.push_back(t == 0 ? elems[0] : compose(elems[t], out.back()));
  }
  return out;
}

std::vector<ScanElement> inclusive_scan_chunked(std::span<const ScanElement> elems, std::size_t chunk,
                                                std::size_t threads) {
  if (chunk == 0) throw ValueError("inclusive_scan_chunked: chunk must be >= 1");
  if (elems.empty()) return {};
  if (threads == 0) threads = default_threads();
  const std::size_t L = elems.size(), size = elems[0].a.size();
  const std::size_t chunks = (L + chunk - 1) / chunk;
  std::vector<ScanElement> out(L);
  // Local inclusive scans, one chunk per task.
  parallel_for(chunks, threads, [&](std::size_t k) {
    const std::size_t begin = k * chunk, end = std::min(L, begin + chunk);
    out[begin] = elems[begin];
    for (std::size_t t = begin + 1; t < end; ++t) out[t] = compose(elems[t], out[t - 1]);
  });
  // Carry of everything before chunk k.
  std::vector<ScanElement> carry(chunks, ScanElement::identity(size));
  for (std::size_t k = 1; k < chunks; ++k) {
    const std::size_t last = std::min(L, k * chunk) - 1;
    carry[k] = compose(out[last], carry[k - 1]);
  }
  parallel_for(chunks, threads, [&](std::size_t k) {
    if (k == 0) return;
    for (std::size_t t = k * chunk; t < std::min(L, (k + 1) * chunk); ++t) out[t] = compose(out[t], carry[k]);
  });
  return out;
}

std::pair<Tensor, Tensor> discretize(const Tensor& a, const Tensor& b_t, const Tensor& delta_t) {
  if (a.rank() != 2 || b_t.shape() != a.shape() || delta_t.rank() != 1 || delta_t.dim(0) != a.dim(0)) {
    throw ShapeError("discretize: expected A,B [D,N] and delta [D]");
  }
  const std::size_t D = a.dim(0), N = a.dim(1);
  const auto av = a.values(), bv = b_t.values(), dv = delta_t.values();
  Tensor abar(Shape{D, N}), bbar(Shape{D, N});
  for (std::size_t d = 0; d < D; ++d) {
    if (!(dv[d] > 0)) throw ValueError("discretize: step size must be positive");
    for (std::size_t n = 0; n < N; ++n) {
      abar.mutable_data()[d * N + n] = std::exp(dv[d] * av[d * N + n]);
      bbar.mutable_data()[d * N + n] = dv[d] * bv[d * N + n];
    }
  }
  return {abar, bbar};
}

std::vector<double> run_recurrence(std::span<const double> abar, std::span<const double> u,
                                   std::span<const double> c, std::size_t length, std::size_t channels,
                                   std::size_t state) {
  const std::size_t DN = channels * state;
  if (abar.size() != length * DN || u.size() != length * DN || c.size() != length * state) {
    throw ShapeError("run_recurrence: buffer sizes do not match [L, D, N]");
  }
  std::vector<double> h(DN, 0.0), y(length * channels, 0.0);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t d = 0; d < channels; ++d) {
      double acc = 0.0;
      for (std::size_t n = 0; n < state; ++n) {
        const std::size_t i = d * state + n;
        h[i] = abar[t * DN + i] * h[i] + u[t * DN + i];
        acc += c[t * state + n] * h[i];
      }
      y[t * channels + d] = acc;
    }
  }
  return y;
}

Tensor selective_scan_seq(const Tensor& x, const S6Params& params) { return scan(x, params, 0, 1); }

Tensor selective_scan_parallel(const Tensor& x, const S6Params& params, std::size_t chunk, std::size_t threads) {
  if (chunk == 0) throw ValueError("selective_scan_parallel: chunk must be >= 1");
  return scan(x, params, chunk, threads);
}

double max_rel_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_rel_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto va = a.values(), vb = b.values();
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i) {
    diff = std::max(diff, std::abs(va[i] - vb[i]));
    scale = std::max(scale, std::abs(va[i]));
  }
  if (diff == 0.0) return 0.0;
  return diff / std::max(scale, std::numeric_limits<double>::min());
}

TokenSequence s6_forward(const TokenSequence& seq, const S6Params& params, bool use_parallel, std::size_t chunk) {
  if (seq.tokens.rank() != 2 || seq.channels() != params.channels()) {
    throw ShapeError("s6_forward: sequence has " + std::to_string(seq.tokens.rank() == 2 ? seq.channels() : 0) +
                     " channels, params expect " + std::to_string(params.channels()));
  }
  TokenSequence out = seq;
  out.tokens = use_parallel ? selective_scan_parallel(seq.tokens, params, chunk) : selective_scan_seq(seq.tokens, params);
  return out;
}

}  // namespace logvm::s6
