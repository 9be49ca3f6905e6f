#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ssmlab {

using cdouble = std::complex<double>;

inline constexpr double kPi = 3.14159265358979323846;

// ---------------------------------------------------------------------------
// Scalar kernels
// ---------------------------------------------------------------------------

/// log(1 + e^x) without overflow for large |x|.
inline double softplus(double x) {
  if (!std::isfinite(x)) throw std::domain_error("softplus: non-finite input");
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

/// 1 / (1 + e^-x), the derivative of softplus.
inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

/// e^z - 1 with full relative accuracy near z = 0.
/// cos(y) - 1 is rewritten as -2 sin^2(y/2) so neither part cancels.
inline cdouble expm1c(cdouble z) {
  double em = std::expm1(z.real());
  double sy = std::sin(z.imag());
  double sh = std::sin(0.5 * z.imag());
  double cy = std::cos(z.imag());
  return {em * cy - 2.0 * sh * sh, (em + 1.0) * sy};
}

/// (e^z - 1) / z with the removable singularity filled: phi(0) = 1.
inline cdouble phi(cdouble z) {
  if (std::abs(z) < 1e-4) {
    return 1.0 + z * (1.0 / 2.0 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z * (1.0 / 120.0))));
  }
  return expm1c(z) / z;
}

/// (e^z (z - 1) + 1) / z^2, the derivative weight d(z phi(z))/dz split as
/// e^z = phi(z) + z psi(z). psi(0) = 1/2.
inline cdouble psi(cdouble z) {
  if (std::abs(z) < 1e-2) {
    // sum_{k>=0} (k+1) z^k / (k+2)!
    return 1.0 / 2.0 +
           z * (1.0 / 3.0 +
                z * (1.0 / 8.0 + z * (1.0 / 30.0 + z * (1.0 / 144.0 + z * (1.0 / 840.0)))));
  }
  return (std::exp(z) * (z - 1.0) + 1.0) / (z * z);
}

/// Same weight when e^z is already at hand (avoids a second exp in backward
/// sweeps). Falls back to the series where the subtraction would cancel.
inline cdouble psi_from_exp(cdouble z, cdouble ez) {
  if (std::abs(z) < 1e-2) return psi(z);
  return (ez * (z - 1.0) + 1.0) / (z * z);
}

/// phi(z) when e^z is already at hand.
inline cdouble phi_from_exp(cdouble z, cdouble ez) {
  if (std::abs(z) < 1e-4) return phi(z);
  return (ez - 1.0) / z;
}

// ---------------------------------------------------------------------------
// Diagonal state matrices
// ---------------------------------------------------------------------------

/// Diagonal of a state matrix A (or of exp(delta A)).
struct ComplexDiag {
  std::vector<cdouble> entries;

  ComplexDiag() = default;
  explicit ComplexDiag(std::vector<cdouble> e) : entries(std::move(e)) {}
  std::size_t size() const { return entries.size(); }
  cdouble& operator[](std::size_t i) { return entries[i]; }
  const cdouble& operator[](std::size_t i) const { return entries[i]; }
};

/// A state diagonal must be nonempty and sit in the open left half plane.
inline void validate_state_diag(const ComplexDiag& a) {
  if (a.entries.empty()) throw std::invalid_argument("state diagonal must be nonempty");
  for (const cdouble& z : a.entries) {
    if (!(z.real() < 0.0)) throw std::domain_error("state diagonal needs Re < 0");
  }
}

// ---------------------------------------------------------------------------
// Log-log slope fitting
// ---------------------------------------------------------------------------

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
  int n_points = 0;
};

/// Ordinary least squares on (log x, log y).
inline SlopeFit fit_loglog_slope(std::span<const std::pair<double, double>> points) {
  if (points.size() < 2) throw std::invalid_argument("fit_loglog_slope: need at least 2 points");
  std::vector<double> lx(points.size()), ly(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!(points[i].first > 0.0) || !(points[i].second > 0.0)) {
      throw std::domain_error("fit_loglog_slope: coordinates must be strictly positive");
    }
    lx[i] = std::log(points[i].first);
    ly[i] = std::log(points[i].second);
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= static_cast<double>(lx.size());
  my /= static_cast<double>(lx.size());
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    double dx = lx[i] - mx, dy = ly[i] - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (sxx == 0.0) throw std::invalid_argument("fit_loglog_slope: degenerate abscissae");
  SlopeFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.n_points = static_cast<int>(points.size());
  if (syy == 0.0) {
    fit.r_squared = 1.0;  // all y equal, the horizontal line is an exact fit
  } else {
    double res = syy - sxy * sxy / sxx;
    double r2 = 1.0 - res / syy;
    fit.r_squared = r2 < 0.0 ? 0.0 : (r2 > 1.0 ? 1.0 : r2);
  }
  return fit;
}

inline SlopeFit fit_loglog_slope(const std::vector<std::pair<double, double>>& points) {
  return fit_loglog_slope(std::span<const std::pair<double, double>>(points));
}

// ---------------------------------------------------------------------------
// Seeded, splittable randomness
// ---------------------------------------------------------------------------

/// Identifies one reproducible random stream. Identical (seed, stream_id)
/// reproduce identical draws bit for bit on one build.
struct RngSpec {
  std::uint64_t seed = 0;
  std::uint64_t stream_id = 0;
};

/// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Derives a child stream. Distinct lanes give decorrelated streams, so
/// per-trial and per-sample substreams are order independent.
inline RngSpec fork(RngSpec spec, std::uint64_t lane) {
  return {spec.seed, mix64(spec.stream_id + 0x9E3779B97F4A7C15ull * (lane + 1))};
}

inline RngSpec fork(RngSpec spec, std::string_view tag) { return fork(spec, fnv1a64(tag)); }

/// Counter-based generator (splitmix64) with a Box-Muller normal sampler.
class Rng {
 public:
  explicit Rng(RngSpec spec) {
    state_ = mix64(spec.seed + 0x9E3779B97F4A7C15ull);
    state_ = mix64(state_ ^ mix64(spec.stream_id + 0xC2B2AE3D27D4EB4Full));
  }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    return mix64(state_);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1]; safe under log.
  double uniform_open() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// One standard normal draw.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double r = std::sqrt(-2.0 * std::log(uniform_open()));
    double t = 2.0 * kPi * uniform();
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

  /// Complex normal with total variance stddev^2.
  cdouble cgaussian(double stddev) {
    double s = stddev / std::sqrt(2.0);
    double re = gaussian();
    double im = gaussian();
    return {s * re, s * im};
  }

  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound) { return next_u64() % bound; }

 private:
  std::uint64_t state_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Round-trip-exact decimal rendering of a 64-bit float.
inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// n independent normal draws, deterministic given the spec.
inline std::vector<double> gaussian(RngSpec spec, double mean, double stddev, std::size_t count) {
  if (stddev < 0.0) throw std::domain_error("gaussian: stddev must be nonnegative");
  Rng rng(spec);
  std::vector<double> out(count);
  for (double& v : out) v = rng.gaussian(mean, stddev);
  return out;
}

}  // namespace ssmlab
