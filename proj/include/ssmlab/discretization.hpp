#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "ssmlab/numerics.hpp"

namespace ssmlab {

/// One discretized channel: a_bar = exp(delta a), b_bar = a^-1 (a_bar - I) b.
struct DiscretePair {
  ComplexDiag a_bar;
  std::vector<cdouble> b_bar;
};

/// Zero-order hold. b_bar is evaluated as delta * phi(delta a) * b, which
/// equals a^-1 (a_bar - 1) b but stays defined as delta a -> 0.
inline DiscretePair zoh(const ComplexDiag& a, std::span<const cdouble> b, double delta) {
  if (!(delta >= 0.0)) throw std::domain_error("zoh: delta must be nonnegative");
  if (a.size() != b.size()) throw std::invalid_argument("zoh: diagonal/input size mismatch");
  if (delta > 0.0) validate_state_diag(a);
  DiscretePair out;
  out.a_bar.entries.resize(a.size());
  out.b_bar.resize(a.size());
  for (std::size_t m = 0; m < a.size(); ++m) {
    cdouble z = delta * a[m];
    out.a_bar[m] = std::exp(z);
    out.b_bar[m] = delta * phi(z) * b[m];
  }
  return out;
}

/// Per-channel sampling interval of an S4D unit, delta = exp(b).
inline double s4d_delta(double b_param) {
  if (!std::isfinite(b_param)) throw std::domain_error("s4d_delta: non-finite input");
  return std::exp(b_param);
}

/// Input-dependent sampling interval of an S6 unit.
inline double s6_delta(std::span<const double> w, std::span<const double> u_k, double b_channel) {
  if (w.size() != u_k.size()) throw std::invalid_argument("s6_delta: dimension mismatch");
  double z = b_channel;
  for (std::size_t i = 0; i < w.size(); ++i) z += w[i] * u_k[i];
  return softplus(z);
}

/// Per-block sampling interval; s6_delta restricted to one block of width p.
inline double b2s6_delta(std::span<const double> block_w, std::span<const double> block_u,
                         double b_channel) {
  return s6_delta(block_w, block_u, b_channel);
}

}  // namespace ssmlab
