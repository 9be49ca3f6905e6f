#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "ssmlab/discretization.hpp"

namespace ssmlab {

enum class FieldType { real, complex_valued };
enum class ScanMode { sequential, associative };

/// An L x d real-valued sequence, row major.
struct Sequence {
  std::vector<double> data;
  int length = 0;
  int width = 0;

  Sequence() = default;
  Sequence(int L, int d) : data(static_cast<std::size_t>(L) * d, 0.0), length(L), width(d) {}

  double& at(int k, int c) { return data[static_cast<std::size_t>(k) * width + c]; }
  double at(int k, int c) const { return data[static_cast<std::size_t>(k) * width + c]; }
  std::span<const double> row(int k) const {
    return {data.data() + static_cast<std::size_t>(k) * width, static_cast<std::size_t>(width)};
  }
};

inline void validate_sequence(const Sequence& u) {
  if (u.length < 1 || u.width < 1) throw std::invalid_argument("sequence: L and d must be >= 1");
  if (u.data.size() != static_cast<std::size_t>(u.length) * u.width) {
    throw std::invalid_argument("sequence: storage does not match L x d");
  }
  for (double v : u.data) {
    if (!std::isfinite(v)) throw std::domain_error("sequence: entries must be finite");
  }
}

// ---------------------------------------------------------------------------
// Unit parameter sets
// ---------------------------------------------------------------------------

/// Channel-independent diagonal recurrences; delta^(i) = exp(b_delta^(i)).
struct S4DParams {
  int n = 0;
  int d = 0;
  FieldType field = FieldType::complex_valued;
  ComplexDiag a;                // n, shared across channels
  std::vector<cdouble> b_cols;  // d x n, channel major: b_cols[i*n + m]
  std::vector<cdouble> c_rows;  // d x n, channel major
  std::vector<double> b_delta;  // d
};

/// Input-selective recurrence with shared input/output maps across channels.
struct S6Params {
  int n = 0;
  int d = 0;
  FieldType field = FieldType::real;
  ComplexDiag a;               // n (imaginary parts zero in real mode)
  std::vector<double> b_mat;   // n x d, row major: b_mat[m*d + c]
  std::vector<double> c_mat;   // d x n, row major: c_mat[c*n + m]
  std::vector<double> w;       // d
  std::vector<double> b_delta; // d
};

/// Block-partitioned selective recurrence with a channel-specific input bias.
/// h blocks of width p; the unit width is h*p.
struct B2S6Params {
  int n = 0;
  int h = 0;
  int p = 0;
  FieldType field = FieldType::complex_valued;
  bool bias_enabled = true;
  ComplexDiag a;                 // n, shared
  std::vector<cdouble> b_weight; // h x n x p: b_weight[(j*n + m)*p + c]
  std::vector<cdouble> b_bias;   // h x n x p: column i is the channel-i injection
  std::vector<double> c_mat;     // h x p x n: c_mat[(j*p + c)*n + m]
  std::vector<double> w;         // h x p
  std::vector<double> b_delta;   // h x p

  int dim() const { return h * p; }
};

using UnitParams = std::variant<S4DParams, S6Params, B2S6Params>;

enum class UnitKind { s4d, s6, b2s6 };

inline int unit_width(const UnitParams& unit) {
  return std::visit([](const auto& p) -> int {
    using T = std::decay_t<decltype(p)>;
    if constexpr (std::is_same_v<T, B2S6Params>) return p.dim();
    else return p.d;
  }, unit);
}

inline int unit_state_size(const UnitParams& unit) {
  return std::visit([](const auto& p) { return p.n; }, unit);
}

inline UnitKind unit_kind(const UnitParams& unit) {
  if (std::holds_alternative<S4DParams>(unit)) return UnitKind::s4d;
  if (std::holds_alternative<S6Params>(unit)) return UnitKind::s6;
  return UnitKind::b2s6;
}

inline std::string unit_name(UnitKind k) {
  switch (k) {
    case UnitKind::s4d: return "s4d";
    case UnitKind::s6: return "s6";
    default: return "b2s6";
  }
}

// ---------------------------------------------------------------------------
// First-order linear recurrence kernel
// ---------------------------------------------------------------------------

namespace detail {

// Inclusive scan of (a, b) transition pairs under
// (a, b) o (a', b') = (a a', a' b + b'), over a balanced tree so the
// reduction order is fixed regardless of how the work is scheduled.
inline void scan_transitions(std::span<cdouble> a, std::span<cdouble> b) {
  const std::size_t n = a.size();
  if (n <= 1) return;
  const std::size_t mid = n / 2;
  scan_transitions(a.first(mid), b.first(mid));
  scan_transitions(a.subspan(mid), b.subspan(mid));
  const cdouble al = a[mid - 1];
  const cdouble bl = b[mid - 1];
  for (std::size_t i = mid; i < n; ++i) {
    b[i] += a[i] * bl;
    a[i] *= al;
  }
}

}  // namespace detail

/// States of x_k = a_k x_{k-1} + b_k with x_0 = 0, for k = 1..L.
inline std::vector<cdouble> selective_recurrence(std::span<const cdouble> a_seq,
                                                 std::span<const cdouble> b_seq,
                                                 ScanMode mode = ScanMode::sequential) {
  if (a_seq.size() != b_seq.size()) {
    throw std::invalid_argument("selective_recurrence: length mismatch");
  }
  const std::size_t L = a_seq.size();
  if (mode == ScanMode::sequential) {
    std::vector<cdouble> x(L);
    cdouble state = 0.0;
    for (std::size_t k = 0; k < L; ++k) {
      state = a_seq[k] * state + b_seq[k];
      x[k] = state;
    }
    return x;
  }
  std::vector<cdouble> a(a_seq.begin(), a_seq.end());
  std::vector<cdouble> x(b_seq.begin(), b_seq.end());
  detail::scan_transitions(std::span<cdouble>(a), std::span<cdouble>(x));
  return x;  // x_0 = 0, so the scanned offsets are the states
}

// ---------------------------------------------------------------------------
// Unit forward passes
// ---------------------------------------------------------------------------

namespace detail {

inline void check_width(int have, int want, const char* who) {
  if (have != want) throw std::invalid_argument(std::string(who) + ": input width mismatch");
}

}  // namespace detail

/// S4D forward pass. Output is the real part of the channel readouts.
inline Sequence s4d_scan(const S4DParams& prm, const Sequence& u,
                         ScanMode mode = ScanMode::sequential) {
  detail::check_width(u.width, prm.d, "s4d_scan");
  const int L = u.length, n = prm.n, d = prm.d;
  Sequence y(L, d);
  std::vector<cdouble> a_seq(L), b_seq(L);
  std::vector<std::vector<cdouble>> x(n);
  for (int i = 0; i < d; ++i) {
    DiscretePair disc =
        zoh(prm.a, {prm.b_cols.data() + static_cast<std::size_t>(i) * n, static_cast<std::size_t>(n)},
            s4d_delta(prm.b_delta[i]));
    for (int m = 0; m < n; ++m) {
      for (int k = 0; k < L; ++k) {
        a_seq[k] = disc.a_bar[m];
        b_seq[k] = disc.b_bar[m] * u.at(k, i);
      }
      x[m] = selective_recurrence(a_seq, b_seq, mode);
    }
    for (int k = 0; k < L; ++k) {
      cdouble acc = 0.0;
      for (int m = 0; m < n; ++m) acc += prm.c_rows[static_cast<std::size_t>(i) * n + m] * x[m][k];
      y.at(k, i) = acc.real();
    }
  }
  return y;
}

/// S6 forward pass. The sampling interval, input matrix, and readout are
/// recomputed from u_k at every step.
inline Sequence s6_scan(const S6Params& prm, const Sequence& u,
                        ScanMode mode = ScanMode::sequential) {
  detail::check_width(u.width, prm.d, "s6_scan");
  const int L = u.length, n = prm.n, d = prm.d;
  Sequence y(L, d);

  std::vector<double> wtu(L, 0.0);
  std::vector<double> bu(static_cast<std::size_t>(L) * n, 0.0);
  std::vector<double> cbar(static_cast<std::size_t>(L) * n, 0.0);
  for (int k = 0; k < L; ++k) {
    for (int c = 0; c < d; ++c) wtu[k] += prm.w[c] * u.at(k, c);
    for (int m = 0; m < n; ++m) {
      double s = 0.0;
      for (int c = 0; c < d; ++c) s += prm.b_mat[static_cast<std::size_t>(m) * d + c] * u.at(k, c);
      bu[static_cast<std::size_t>(k) * n + m] = s;
    }
    for (int m = 0; m < n; ++m) {
      double s = 0.0;
      for (int c = 0; c < d; ++c) s += u.at(k, c) * prm.c_mat[static_cast<std::size_t>(c) * n + m];
      cbar[static_cast<std::size_t>(k) * n + m] = s;
    }
  }

  std::vector<cdouble> a_seq(static_cast<std::size_t>(n) * L), b_seq(static_cast<std::size_t>(n) * L);
  std::vector<std::vector<cdouble>> x(n);
  for (int i = 0; i < d; ++i) {
    for (int k = 0; k < L; ++k) {
      double delta = softplus(wtu[k] + prm.b_delta[i]);
      for (int m = 0; m < n; ++m) {
        cdouble z = delta * prm.a[m];
        a_seq[static_cast<std::size_t>(m) * L + k] = std::exp(z);
        b_seq[static_cast<std::size_t>(m) * L + k] =
            delta * phi(z) * bu[static_cast<std::size_t>(k) * n + m] * u.at(k, i);
      }
    }
    for (int m = 0; m < n; ++m) {
      x[m] = selective_recurrence(
          {a_seq.data() + static_cast<std::size_t>(m) * L, static_cast<std::size_t>(L)},
          {b_seq.data() + static_cast<std::size_t>(m) * L, static_cast<std::size_t>(L)}, mode);
    }
    for (int k = 0; k < L; ++k) {
      cdouble acc = 0.0;
      for (int m = 0; m < n; ++m) acc += cbar[static_cast<std::size_t>(k) * n + m] * x[m][k];
      y.at(k, i) = acc.real();
    }
  }
  return y;
}

/// B2S6 forward pass: an independent selective recurrence per block, with a
/// channel-specific bias added to the input injection.
inline Sequence b2s6_scan(const B2S6Params& prm, const Sequence& u,
                          ScanMode mode = ScanMode::sequential) {
  if (prm.h < 1 || prm.p < 1) throw std::invalid_argument("b2s6_scan: invalid block layout");
  detail::check_width(u.width, prm.dim(), "b2s6_scan");
  const int L = u.length, n = prm.n, h = prm.h, p = prm.p;
  Sequence y(L, u.width);

  std::vector<double> wtu(L);
  std::vector<cdouble> bwu(static_cast<std::size_t>(L) * n);
  std::vector<double> cbar(static_cast<std::size_t>(L) * n);
  std::vector<cdouble> a_seq(static_cast<std::size_t>(n) * L), b_seq(static_cast<std::size_t>(n) * L);
  std::vector<std::vector<cdouble>> x(n);

  for (int j = 0; j < h; ++j) {
    const int base = j * p;
    for (int k = 0; k < L; ++k) {
      double s = 0.0;
      for (int c = 0; c < p; ++c) s += prm.w[base + c] * u.at(k, base + c);
      wtu[k] = s;
      for (int m = 0; m < n; ++m) {
        cdouble acc = 0.0;
        for (int c = 0; c < p; ++c) {
          acc += prm.b_weight[(static_cast<std::size_t>(j) * n + m) * p + c] * u.at(k, base + c);
        }
        bwu[static_cast<std::size_t>(k) * n + m] = acc;
        double r = 0.0;
        for (int c = 0; c < p; ++c) {
          r += u.at(k, base + c) * prm.c_mat[(static_cast<std::size_t>(base) + c) * n + m];
        }
        cbar[static_cast<std::size_t>(k) * n + m] = r;
      }
    }
    for (int i = 0; i < p; ++i) {
      for (int k = 0; k < L; ++k) {
        double delta = softplus(wtu[k] + prm.b_delta[base + i]);
        for (int m = 0; m < n; ++m) {
          cdouble inj = bwu[static_cast<std::size_t>(k) * n + m];
          if (prm.bias_enabled) inj += prm.b_bias[(static_cast<std::size_t>(j) * n + m) * p + i];
          cdouble z = delta * prm.a[m];
          a_seq[static_cast<std::size_t>(m) * L + k] = std::exp(z);
          b_seq[static_cast<std::size_t>(m) * L + k] = delta * phi(z) * inj * u.at(k, base + i);
        }
      }
      for (int m = 0; m < n; ++m) {
        x[m] = selective_recurrence(
            {a_seq.data() + static_cast<std::size_t>(m) * L, static_cast<std::size_t>(L)},
            {b_seq.data() + static_cast<std::size_t>(m) * L, static_cast<std::size_t>(L)}, mode);
      }
      for (int k = 0; k < L; ++k) {
        cdouble acc = 0.0;
        for (int m = 0; m < n; ++m) acc += cbar[static_cast<std::size_t>(k) * n + m] * x[m][k];
        y.at(k, base + i) = acc.real();
      }
    }
  }
  return y;
}

inline Sequence unit_scan(const UnitParams& unit, const Sequence& u,
                          ScanMode mode = ScanMode::sequential) {
  return std::visit([&](const auto& p) {
    using T = std::decay_t<decltype(p)>;
    if constexpr (std::is_same_v<T, S4DParams>) return s4d_scan(p, u, mode);
    else if constexpr (std::is_same_v<T, S6Params>) return s6_scan(p, u, mode);
    else return b2s6_scan(p, u, mode);
  }, unit);
}

// ---------------------------------------------------------------------------
// Quadratic encoder of a width-broadcast selective unit at fixed delta
// ---------------------------------------------------------------------------

/// The scalar functional F(u) = u_L sum_j (q_bar a_bar^{L-j} p_bar) u_j^2
/// through which a broadcast-encoded selective unit with fixed delta sees its
/// whole input. F depends on each u_j only through u_j^2.
struct QuadraticEncoder {
  std::vector<cdouble> p_bar;  // n
  std::vector<cdouble> q_bar;  // n
  ComplexDiag a_bar;           // n, at the fixed delta
};

/// Builds the encoder for one channel of an S6 unit driven through a
/// broadcast encoder. Requires the fixed-delta regime (w = 0).
inline QuadraticEncoder make_quadratic_encoder(const S6Params& prm,
                                               std::span<const double> encoder, int channel) {
  if (static_cast<int>(encoder.size()) != prm.d) {
    throw std::invalid_argument("make_quadratic_encoder: encoder width mismatch");
  }
  for (double wi : prm.w) {
    if (wi != 0.0) throw std::invalid_argument("make_quadratic_encoder: requires w = 0");
  }
  const int n = prm.n, d = prm.d;
  QuadraticEncoder enc;
  enc.p_bar.resize(n);
  enc.q_bar.resize(n);
  enc.a_bar.entries.resize(n);
  double delta = softplus(prm.b_delta[channel]);
  for (int m = 0; m < n; ++m) {
    double bm = 0.0, qm = 0.0;
    for (int c = 0; c < d; ++c) {
      bm += prm.b_mat[static_cast<std::size_t>(m) * d + c] * encoder[c];
      qm += encoder[c] * prm.c_mat[static_cast<std::size_t>(c) * n + m];
    }
    cdouble z = delta * prm.a[m];
    enc.a_bar[m] = std::exp(z);
    enc.p_bar[m] = delta * phi(z) * bm;
    enc.q_bar[m] = qm;
  }
  return enc;
}

/// Evaluates F on a width-1 sequence whose last entry equals 1.
inline double quadratic_encoder(const QuadraticEncoder& enc, const Sequence& u) {
  if (u.width != 1) throw std::invalid_argument("quadratic_encoder: univariate input required");
  const int L = u.length;
  if (u.at(L - 1, 0) != 1.0) {
    throw std::invalid_argument("quadratic_encoder: last input must equal 1");
  }
  const int n = static_cast<int>(enc.a_bar.size());
  cdouble total = 0.0;
  std::vector<cdouble> pw(n, 1.0);  // a_bar^{L-j}, built from j = L downward
  for (int j = L; j >= 1; --j) {
    double uj = u.at(j - 1, 0);
    cdouble acc = 0.0;
    for (int m = 0; m < n; ++m) acc += enc.q_bar[m] * pw[m] * enc.p_bar[m];
    total += acc * (uj * uj);
    for (int m = 0; m < n; ++m) pw[m] *= enc.a_bar[m];
  }
  return (u.at(L - 1, 0) * total).real();
}

}  // namespace ssmlab
