#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ssmlab/units.hpp"
#include "support/oracles.hpp"

using namespace ssmlab;
using Catch::Matchers::WithinAbs;

namespace {

double max_rel_diff(const Sequence& y, const std::vector<double>& ref) {
  double scale = 0.0;
  for (double v : ref) scale = std::max(scale, std::abs(v));
  scale = std::max(scale, 1e-12);
  double worst = 0.0;
  for (std::size_t i = 0; i < y.data.size(); ++i) {
    worst = std::max(worst, std::abs(y.data[i] - ref[i]) / scale);
  }
  return worst;
}

}  // namespace

TEST_CASE("selective_recurrence basics") {
  SECTION("all a = 1 gives prefix sums") {
    std::vector<cdouble> a(6, 1.0), b{1, 2, 3, 4, 5, 6};
    auto x = selective_recurrence(a, b);
    REQUIRE(x[0] == cdouble(1.0));
    REQUIRE(x[5] == cdouble(21.0));
    auto xt = selective_recurrence(a, b, ScanMode::associative);
    for (int k = 0; k < 6; ++k) REQUIRE(std::abs(x[k] - xt[k]) < 1e-14);
  }
  SECTION("all b = 0 gives zero states") {
    std::vector<cdouble> a{0.5, -0.25, 2.0}, b(3, 0.0);
    for (auto mode : {ScanMode::sequential, ScanMode::associative}) {
      for (auto& xk : selective_recurrence(a, b, mode)) REQUIRE(xk == cdouble(0.0));
    }
  }
  SECTION("length mismatch") {
    std::vector<cdouble> a(3, 1.0), b(2, 1.0);
    REQUIRE_THROWS_AS(selective_recurrence(a, b), std::invalid_argument);
  }
  SECTION("sequential vs associative on random length 1000") {
    Rng rng({31, 0});
    std::vector<cdouble> a(1000), b(1000);
    for (auto& v : a) v = std::polar(rng.uniform(0.0, 1.0), rng.uniform(-kPi, kPi));
    for (auto& v : b) v = rng.cgaussian(1.0);
    auto xs = selective_recurrence(a, b);
    auto xa = selective_recurrence(a, b, ScanMode::associative);
    double scale = 0.0;
    for (auto& v : xs) scale = std::max(scale, std::abs(v));
    for (std::size_t k = 0; k < xs.size(); ++k) {
      REQUIRE(std::abs(xs[k] - xa[k]) <= 1e-10 * std::max(scale, 1.0));
    }
    auto ref = oracle::naive_recurrence(a, b);
    for (std::size_t k = 0; k < xs.size(); ++k) {
      REQUIRE(std::abs(xs[k] - ref[k]) <= 1e-11 * std::max(scale, 1.0));
    }
  }
}

TEST_CASE("zero input maps to zero output for every unit") {
  Rng rng({31, 1});
  Sequence zero(6, 4);
  auto s4 = oracle::random_s4d(rng, 3, 4, FieldType::complex_valued);
  auto s6 = oracle::random_s6(rng, 3, 4, FieldType::real);
  auto bb = oracle::random_b2s6(rng, 3, 2, 2, FieldType::complex_valued);
  for (double v : s4d_scan(s4, zero).data) REQUIRE(v == 0.0);
  for (double v : s6_scan(s6, zero).data) REQUIRE(v == 0.0);
  for (double v : b2s6_scan(bb, zero).data) REQUIRE(v == 0.0);
}

TEST_CASE("s4d linearity") {
  Rng rng({31, 2});
  auto prm = oracle::random_s4d(rng, 3, 2, FieldType::complex_valued);
  Sequence u = oracle::random_sequence(rng, 5, 2);
  Sequence v = oracle::random_sequence(rng, 5, 2);

  // power-of-two scaling is exact in floating point
  Sequence u2 = u;
  for (double& x : u2.data) x *= 2.0;
  Sequence y = s4d_scan(prm, u), y2 = s4d_scan(prm, u2);
  for (std::size_t i = 0; i < y.data.size(); ++i) REQUIRE(y2.data[i] == 2.0 * y.data[i]);

  Sequence sum = u;
  for (std::size_t i = 0; i < sum.data.size(); ++i) sum.data[i] += v.data[i];
  Sequence ysum = s4d_scan(prm, sum), yv = s4d_scan(prm, v);
  double scale = 0.0;
  for (double x : ysum.data) scale = std::max(scale, std::abs(x));
  for (std::size_t i = 0; i < ysum.data.size(); ++i) {
    REQUIRE(std::abs(ysum.data[i] - (y.data[i] + yv.data[i])) <= 1e-12 * std::max(1.0, scale));
  }
}

TEST_CASE("s6 cubic homogeneity at w = 0") {
  Rng rng({31, 3});
  auto prm = oracle::random_s6(rng, 3, 2, FieldType::real, /*zero_w=*/true);
  Sequence u = oracle::random_sequence(rng, 6, 2);
  Sequence u2 = u;
  for (double& x : u2.data) x *= 2.0;
  Sequence y = s6_scan(prm, u), y2 = s6_scan(prm, u2);
  const int L = 6;
  for (int i = 0; i < 2; ++i) {
    REQUIRE(y2.at(L - 1, i) == 8.0 * y.at(L - 1, i));
  }
}

TEST_CASE("scan outputs equal the naive recurrence oracle") {
  Rng rng({31, 4});
  for (int t = 0; t < 60; ++t) {
    const int n = 1 + static_cast<int>(rng.below(4));
    const int d = 1 + static_cast<int>(rng.below(8));
    const int L = 2 + static_cast<int>(rng.below(31));
    FieldType f = rng.below(2) ? FieldType::complex_valued : FieldType::real;
    Sequence u = oracle::random_sequence(rng, L, d);

    auto s4 = oracle::random_s4d(rng, n, d, f);
    REQUIRE(max_rel_diff(s4d_scan(s4, u), oracle::naive_s4d_scan(s4, u)) < 1e-12);
    auto s6 = oracle::random_s6(rng, n, d, f);
    REQUIRE(max_rel_diff(s6_scan(s6, u), oracle::naive_s6_scan(s6, u)) < 1e-12);

    const int h = d % 2 == 0 ? 2 : 1;
    auto bb = oracle::random_b2s6(rng, n, h, d / h, f);
    REQUIRE(max_rel_diff(b2s6_scan(bb, u), oracle::naive_b2s6_scan(bb, u)) < 1e-12);

    // associative mode agrees with the sequential loop
    REQUIRE(max_rel_diff(s6_scan(s6, u, ScanMode::associative),
                         oracle::naive_s6_scan(s6, u)) < 1e-10);
  }
}

TEST_CASE("b2s6 with one block and no bias reduces to s6") {
  Rng rng({31, 5});
  for (int t = 0; t < 20; ++t) {
    const int n = 1 + static_cast<int>(rng.below(3));
    const int d = 1 + static_cast<int>(rng.below(6));
    const int L = 2 + static_cast<int>(rng.below(12));
    auto bb = oracle::random_b2s6(rng, n, 1, d, FieldType::real, /*bias=*/false);
    S6Params s6;
    s6.n = n;
    s6.d = d;
    s6.field = FieldType::real;
    s6.a = bb.a;
    s6.b_mat.resize(static_cast<std::size_t>(n) * d);
    for (int m = 0; m < n; ++m) {
      for (int c = 0; c < d; ++c) {
        s6.b_mat[static_cast<std::size_t>(m) * d + c] =
            bb.b_weight[static_cast<std::size_t>(m) * d + c].real();
      }
    }
    s6.c_mat = bb.c_mat;
    s6.w = bb.w;
    s6.b_delta = bb.b_delta;
    Sequence u = oracle::random_sequence(rng, L, d);
    Sequence ya = b2s6_scan(bb, u), yb = s6_scan(s6, u);
    double scale = 1.0;
    for (double v : yb.data) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < ya.data.size(); ++i) {
      REQUIRE(std::abs(ya.data[i] - yb.data[i]) <= 1e-14 * scale);
    }
  }
}

TEST_CASE("b2s6 blocks are isolated") {
  Rng rng({31, 6});
  auto bb = oracle::random_b2s6(rng, 2, 3, 2, FieldType::complex_valued);
  Sequence u = oracle::random_sequence(rng, 7, 6);
  Sequence y0 = b2s6_scan(bb, u);
  Sequence u2 = u;
  for (int k = 0; k < 7; ++k) {
    u2.at(k, 2) += rng.gaussian();  // perturb block 1 only
    u2.at(k, 3) += rng.gaussian();
  }
  Sequence y1 = b2s6_scan(bb, u2);
  for (int k = 0; k < 7; ++k) {
    for (int c : {0, 1, 4, 5}) REQUIRE(y0.at(k, c) == y1.at(k, c));
  }
}

TEST_CASE("width mismatches raise shape errors") {
  Rng rng({31, 7});
  Sequence u(4, 3);
  auto s4 = oracle::random_s4d(rng, 2, 2, FieldType::complex_valued);
  REQUIRE_THROWS_AS(s4d_scan(s4, u), std::invalid_argument);
  auto s6 = oracle::random_s6(rng, 2, 2, FieldType::real);
  REQUIRE_THROWS_AS(s6_scan(s6, u), std::invalid_argument);
  auto bb = oracle::random_b2s6(rng, 2, 2, 2, FieldType::real);
  REQUIRE_THROWS_AS(b2s6_scan(bb, u), std::invalid_argument);
}

TEST_CASE("quadratic encoder") {
  Rng rng({31, 8});
  const int n = 2, L = 4;
  auto prm = oracle::random_s6(rng, n, 1, FieldType::real, /*zero_w=*/true);
  std::vector<double> enc_row{rng.gaussian()};
  QuadraticEncoder enc = make_quadratic_encoder(prm, enc_row, 0);

  SECTION("impulse at the last position") {
    Sequence u(L, 1);
    u.at(L - 1, 0) = 1.0;
    double f = quadratic_encoder(enc, u);
    cdouble direct = 0.0;
    for (int m = 0; m < n; ++m) direct += enc.q_bar[m] * enc.p_bar[m];
    REQUIRE_THAT(f, WithinAbs(direct.real(), 1e-14));
  }
  SECTION("sign symmetry is exact") {
    Sequence u(L, 1);
    for (int k = 0; k < L - 1; ++k) u.at(k, 0) = rng.gaussian();
    u.at(L - 1, 0) = 1.0;
    Sequence v = u;
    for (int k = 0; k < L - 1; ++k) v.at(k, 0) = -v.at(k, 0);
    REQUIRE(quadratic_encoder(enc, u) == quadratic_encoder(enc, v));
  }
  SECTION("matches the scan through the broadcast encoder") {
    Sequence u(L, 1);
    for (int k = 0; k < L - 1; ++k) u.at(k, 0) = rng.gaussian();
    u.at(L - 1, 0) = 1.0;
    double f = quadratic_encoder(enc, u);
    Sequence emb(L, 1);
    for (int k = 0; k < L; ++k) emb.at(k, 0) = enc_row[0] * u.at(k, 0);
    Sequence y = s6_scan(prm, emb);
    REQUIRE(std::abs(y.at(L - 1, 0) - enc_row[0] * f) <=
            1e-12 * std::max(1.0, std::abs(y.at(L - 1, 0))));
  }
  SECTION("precondition on the last entry") {
    Sequence u(L, 1);
    u.at(L - 1, 0) = 0.5;
    REQUIRE_THROWS_AS(quadratic_encoder(enc, u), std::invalid_argument);
  }
  SECTION("encoder construction requires w = 0") {
    auto prm2 = oracle::random_s6(rng, n, 1, FieldType::real, /*zero_w=*/false);
    REQUIRE_THROWS_AS(make_quadratic_encoder(prm2, enc_row, 0), std::invalid_argument);
  }
}

TEST_CASE("sequential vs associative scan at path-x length") {
  Rng rng({31, 9});
  const int L = 16384;
  std::vector<cdouble> a(L), b(L);
  for (auto& v : a) v = std::polar(rng.uniform(0.8, 1.0), rng.uniform(-0.1, 0.1));
  for (auto& v : b) v = rng.cgaussian(1.0);
  auto xs = selective_recurrence(a, b);
  auto xa = selective_recurrence(a, b, ScanMode::associative);
  double scale = 0.0;
  for (auto& v : xs) scale = std::max(scale, std::abs(v));
  for (int k = 0; k < L; ++k) {
    REQUIRE(std::abs(xs[k] - xa[k]) <= 1e-10 * std::max(1.0, scale));
  }
}
