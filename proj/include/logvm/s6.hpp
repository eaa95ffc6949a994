#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "logvm/rng.hpp"
#include "logvm/tensor.hpp"
#include "logvm/tokens.hpp"

/// Selective state space layer (S6): input-dependent step size and B/C
/// projections over a diagonal, strictly stable state matrix.
///
/// Per token x_t (D channels), with N states per channel:
///   delta_t[d] = softplus(x_t . delta_weight + delta_bias[d])
///   B_t[n] = x_t . b_weight[:, n],  C_t[n] = x_t . c_weight[:, n]
///   Abar = exp(delta_t[d] * A[d,n]),  Bbar = delta_t[d] * B_t[n]
///   h_t = Abar * h_{t-1} + Bbar * x_t[d]
///   y_t[d] = sum_n C_t[n] h_t[d,n] + skip[d] * x_t[d]
namespace logvm::s6 {

struct S6Params {
  Tensor a_log;         // [D, N]; A = -exp(a_log)
  Tensor delta_weight;  // [D, 1]
  Tensor delta_bias;    // [D]
  Tensor b_weight;      // [D, N]
  Tensor c_weight;      // [D, N]
  Tensor skip;          // [D]

  std::size_t channels() const { return a_log.dim(0); }
  std::size_t state_dim() const { return a_log.dim(1); }

  /// a_log[d,n] = ln(n+1); delta_bias gives softplus(.) = 1e-2; B/C weights
  /// uniform in +-1/sqrt(D); delta_weight uniform in +-1/sqrt(D); skip = 1.
  static S6Params init(std::size_t channels, std::size_t state_dim, Rng& rng);
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  void validate() const;
};

/// Affine map h -> a*h + b, elementwise over [D x N].
struct ScanElement {
  std::vector<double> a;
  std::vector<double> b;

  static ScanElement identity(std::size_t size);
};

/// later o earlier = (a2*a1, a2*b1 + b2): apply `earlier` first.
ScanElement compose(const ScanElement& later, const ScanElement& earlier);

/// Inclusive scan of affine elements; out[t] = e_t o ... o e_0.
std::vector<ScanElement> inclusive_scan_seq(std::span<const ScanElement> elems);
/// Same result via independent per-chunk reductions, a sequential carry pass
/// across chunk boundaries, and parallel per-chunk fixups.
std::vector<ScanElement> inclusive_scan_chunked(std::span<const ScanElement> elems, std::size_t chunk,
                                                std::size_t threads);

/// Zero-order hold for A, Euler for B: Abar = exp(delta*A), Bbar = delta*B.
/// `a` and `b_t` are [D, N]; `delta_t` is [D] and must be strictly positive.
std::pair<Tensor, Tensor> discretize(const Tensor& a, const Tensor& b_t, const Tensor& delta_t);

/// The bare recurrence with precomputed Abar [L,D,N], Bbar*x [L,D,N], C [L,N]:
/// h_t = Abar_t h_{t-1} + U_t, y_t[d] = sum_n C_t[n] h_t[d,n]. Returns [L, D].
std::vector<double> run_recurrence(std::span<const double> abar, std::span<const double> u,
                                   std::span<const double> c, std::size_t length, std::size_t channels,
                                   std::size_t state);

/// Reference scan, one token at a time. x is [L, D]. Differentiable w.r.t.
/// x and every parameter (analytic reverse recurrence).
Tensor selective_scan_seq(const Tensor& x, const S6Params& params);
/// Chunked scan over the affine monoid; chunk = tokens per chunk. Same result
/// as the sequential scan up to rounding (bitwise when chunk == 1).
Tensor selective_scan_parallel(const Tensor& x, const S6Params& params, std::size_t chunk,
                               std::size_t threads = 0);

/// max |a - b| over max |a|: the normwise relative difference used to
/// compare scan implementations.
double max_rel_diff(const Tensor& a, const Tensor& b);

/// Runs the scan over the full ordered sequence (global tokens included).
TokenSequence s6_forward(const TokenSequence& seq, const S6Params& params, bool use_parallel = false,
                         std::size_t chunk = 64);

}  // namespace logvm::s6
