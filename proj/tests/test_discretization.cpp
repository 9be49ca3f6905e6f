#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>

#include "ssmlab/discretization.hpp"

using namespace ssmlab;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

TEST_CASE("zoh pinned example a = -1, delta = ln 2") {
  ComplexDiag a{{cdouble(-1.0, 0.0)}};
  std::vector<cdouble> b{cdouble(1.0, 0.0)};
  DiscretePair dp = zoh(a, b, std::log(2.0));
  REQUIRE_THAT(dp.a_bar[0].real(), WithinRel(0.5, 1e-14));
  REQUIRE_THAT(dp.b_bar[0].real(), WithinRel(0.5, 1e-14));  // (-1)^-1 (0.5 - 1) * 1
}

TEST_CASE("zoh at delta = 0 gives identity dynamics and zero injection") {
  ComplexDiag a{{cdouble(-0.3, 2.0), cdouble(-1.5, -0.7)}};
  std::vector<cdouble> b{cdouble(1.0, -1.0), cdouble(0.5, 0.25)};
  DiscretePair dp = zoh(a, b, 0.0);
  for (int m = 0; m < 2; ++m) {
    REQUIRE(dp.a_bar[m] == cdouble(1.0, 0.0));
    REQUIRE(dp.b_bar[m] == cdouble(0.0, 0.0));
  }
}

TEST_CASE("zoh matches the direct formula in extended precision") {
  ComplexDiag a{{cdouble(-0.5, 3.0)}};
  std::vector<cdouble> b{cdouble(1.0, -1.0)};
  double delta = 0.01;
  DiscretePair dp = zoh(a, b, delta);
  std::complex<long double> al(-0.5L, 3.0L), bl(1.0L, -1.0L);
  std::complex<long double> abar = std::exp(0.01L * al);
  std::complex<long double> bbar = (abar - 1.0L) / al * bl;
  REQUIRE(std::abs(dp.a_bar[0] - cdouble(static_cast<double>(abar.real()),
                                         static_cast<double>(abar.imag()))) < 1e-14);
  REQUIRE(std::abs(dp.b_bar[0] - cdouble(static_cast<double>(bbar.real()),
                                         static_cast<double>(bbar.imag()))) <
          1e-12 * std::abs(bbar));
}

TEST_CASE("zoh error paths") {
  ComplexDiag a{{cdouble(-1.0, 0.0)}};
  std::vector<cdouble> b{cdouble(1.0, 0.0)};
  REQUIRE_THROWS_AS(zoh(a, b, -0.1), std::domain_error);
  std::vector<cdouble> b2{cdouble(1.0, 0.0), cdouble(2.0, 0.0)};
  REQUIRE_THROWS_AS(zoh(a, b2, 0.1), std::invalid_argument);
  ComplexDiag unstable{{cdouble(0.5, 0.0)}};
  REQUIRE_THROWS_AS(zoh(unstable, b, 0.1), std::domain_error);
}

TEST_CASE("zoh contraction and small-delta expansion") {
  Rng rng({5, 0});
  for (int t = 0; t < 100; ++t) {
    int n = 1 + static_cast<int>(rng.below(4));
    ComplexDiag a;
    std::vector<cdouble> b;
    for (int m = 0; m < n; ++m) {
      a.entries.push_back({rng.uniform(-10.0, -0.1), rng.uniform(-10.0, 10.0)});
      b.push_back(rng.cgaussian(1.0));
    }
    double delta = std::exp(rng.uniform(std::log(1e-5), std::log(1e-3)));
    DiscretePair dp = zoh(a, b, delta);
    for (int m = 0; m < n; ++m) {
      REQUIRE(std::abs(dp.a_bar[m]) < 1.0);
      // first-order hold: |b_bar - delta b| <= C delta^2 with C ~ |a||b|
      double err = std::abs(dp.b_bar[m] - delta * b[m]);
      REQUIRE(err <= 1.01 * std::abs(a[m]) * std::abs(b[m]) * delta * delta);
    }
  }
}

TEST_CASE("zoh semigroup property on a_bar") {
  Rng rng({5, 1});
  for (int t = 0; t < 50; ++t) {
    ComplexDiag a{{cdouble(rng.uniform(-2.0, -0.1), rng.uniform(-3.0, 3.0))}};
    std::vector<cdouble> b{cdouble(1.0, 0.0)};
    double s = std::exp(rng.uniform(std::log(1e-3), std::log(0.2)));
    int reps = 1 + static_cast<int>(rng.below(10));
    DiscretePair once = zoh(a, b, s);
    DiscretePair many = zoh(a, b, s * reps);
    cdouble powed = std::pow(once.a_bar[0], reps);
    REQUIRE(std::abs(powed - many.a_bar[0]) <= 1e-10 * std::max(1.0, std::abs(many.a_bar[0])));
  }
}

TEST_CASE("delta selectors") {
  SECTION("s4d reparameterization") {
    REQUIRE_THAT(s4d_delta(0.0), WithinAbs(1.0, 1e-15));
    REQUIRE_THAT(s4d_delta(-6.9077552790), WithinRel(0.001, 1e-9));
    REQUIRE_THAT(s4d_delta(std::log(0.05)), WithinRel(0.05, 1e-14));
  }
  SECTION("s6 softplus selection") {
    std::vector<double> w{0.0, 0.0};
    std::vector<double> u{3.0, -7.0};
    REQUIRE_THAT(s6_delta(w, u, 0.0), WithinRel(std::log(2.0), 1e-14));
    std::vector<double> w2{1.0, 0.0};
    std::vector<double> u2{3.0, 5.0};
    REQUIRE_THAT(s6_delta(w2, u2, -3.0), WithinRel(std::log(2.0), 1e-14));
    std::vector<double> w3{0.2, -0.1};
    std::vector<double> u3{1.0, 2.0};
    REQUIRE_THAT(s6_delta(w3, u3, 0.5), WithinRel(softplus(0.5), 1e-14));
    REQUIRE_THAT(softplus(0.5), WithinRel(0.974076984180848791, 1e-12));
    std::vector<double> short_u{1.0};
    REQUIRE_THROWS_AS(s6_delta(w3, short_u, 0.0), std::invalid_argument);
  }
  SECTION("b2s6 block selection matches s6 on the sliced inputs") {
    Rng rng({5, 2});
    for (int t = 0; t < 50; ++t) {
      int p = 1 + static_cast<int>(rng.below(5));
      std::vector<double> w(p), u(p);
      for (auto& v : w) v = rng.gaussian();
      for (auto& v : u) v = rng.gaussian();
      double b = rng.gaussian();
      REQUIRE(b2s6_delta(w, u, b) == s6_delta(w, u, b));
    }
    std::vector<double> zero{0.0, 0.0};
    std::vector<double> any{4.0, -2.0};
    REQUIRE_THAT(b2s6_delta(zero, any, 0.7), WithinRel(softplus(0.7), 1e-15));
  }
  SECTION("selectors stay strictly positive and finite") {
    Rng rng({5, 3});
    for (int t = 0; t < 200; ++t) {
      double v = s4d_delta(rng.uniform(-40.0, 5.0));
      REQUIRE(v > 0.0);
      REQUIRE(std::isfinite(v));
      std::vector<double> w{rng.gaussian()}, u{rng.gaussian()};
      double s = s6_delta(w, u, rng.uniform(-30.0, 5.0));
      REQUIRE(s >= 0.0);
      REQUIRE(std::isfinite(s));
    }
  }
}
