#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>

#include "ssmlab/tasks.hpp"

using namespace ssmlab;
using Catch::Matchers::WithinAbs;

TEST_CASE("wavesum generator") {
  const int L = 64;
  const double dt = 2.0 * kPi / L;
  Dataset ds = gen_wavesum(32, L, dt, {55, 0});
  REQUIRE(ds.size() == 32);
  REQUIRE(ds.out_width() == 10);

  SECTION("u(0) equals the coefficient sum") {
    for (std::size_t s = 0; s < ds.size(); ++s) {
      double sum = 0.0;
      for (double g : ds.targets[s]) sum += g;
      REQUIRE_THAT(ds.inputs[s].at(0, 0), WithinAbs(sum, 1e-12));
    }
  }
  SECTION("stored inputs reconstruct from stored coefficients") {
    for (std::size_t s = 0; s < ds.size(); ++s) {
      for (int k = 0; k < L; ++k) {
        double want = 0.0;
        for (std::size_t i = 0; i < kWaveSumPrimes.size(); ++i) {
          want += ds.targets[s][i] * std::cos(kWaveSumPrimes[i] * k * dt);
        }
        REQUIRE_THAT(ds.inputs[s].at(k, 0), WithinAbs(want, 1e-12));
      }
    }
  }
  SECTION("single-component input is a pure cosine") {
    // any sample whose coefficients are replaced by e_1 reconstructs cos(2t);
    // the generator contract is the formula, checked through the first prime
    Sequence ref(L, 1);
    for (int k = 0; k < L; ++k) ref.at(k, 0) = std::cos(2.0 * k * dt);
    double resid = 0.0;
    for (int k = 0; k < L; ++k) {
      double proj = 0.0;
      for (std::size_t i = 0; i < kWaveSumPrimes.size(); ++i) {
        proj += (i == 0 ? 1.0 : 0.0) * std::cos(kWaveSumPrimes[i] * k * dt);
      }
      resid = std::max(resid, std::abs(proj - ref.at(k, 0)));
    }
    REQUIRE(resid == 0.0);
  }
  SECTION("regeneration is bitwise identical") {
    Dataset again = gen_wavesum(32, L, dt, {55, 0});
    for (std::size_t s = 0; s < ds.size(); ++s) {
      REQUIRE(ds.inputs[s].data == again.inputs[s].data);
      REQUIRE(ds.targets[s] == again.targets[s]);
    }
  }
}

TEST_CASE("copy-magnitude generator") {
  const int L = 12, d = 8;
  Dataset ds = gen_copy_magnitude(64, L, d, 0.5, 2.0, {55, 1});

  SECTION("interior rows are exactly zero and the first row is constant") {
    for (const Sequence& u : ds.inputs) {
      for (int k = 1; k < L - 1; ++k) {
        for (int c = 0; c < d; ++c) REQUIRE(u.at(k, c) == 0.0);
      }
      for (int c = 1; c < d; ++c) REQUIRE(u.at(0, c) == u.at(0, 0));
    }
  }
  SECTION("targets equal |u1|") {
    for (std::size_t s = 0; s < ds.size(); ++s) {
      REQUIRE(ds.targets[s][0] == std::abs(ds.inputs[s].at(0, 0)));
    }
  }
  SECTION("sigma2 = 0 zeroes the last row but keeps the target") {
    Dataset quiet = gen_copy_magnitude(8, L, d, 0.5, 0.0, {55, 2});
    for (const Sequence& u : quiet.inputs) {
      for (int c = 0; c < d; ++c) REQUIRE(u.at(L - 1, c) == 0.0);
    }
    for (std::size_t s = 0; s < quiet.size(); ++s) {
      REQUIRE(quiet.targets[s][0] == std::abs(quiet.inputs[s].at(0, 0)));
    }
  }
  SECTION("empirical stddev of u1 tracks sigma1") {
    Dataset big = gen_copy_magnitude(100000, 3, 1, 0.5, 1.0, {55, 3});
    double mean = 0.0;
    for (const Sequence& u : big.inputs) mean += u.at(0, 0);
    mean /= double(big.size());
    double var = 0.0;
    for (const Sequence& u : big.inputs) var += (u.at(0, 0) - mean) * (u.at(0, 0) - mean);
    double sd = std::sqrt(var / double(big.size() - 1));
    REQUIRE(sd > 0.5 * 0.99);
    REQUIRE(sd < 0.5 * 1.01);
  }
}

TEST_CASE("linear-combination generator") {
  const int L = 10;
  SECTION("theta = e_L reads the last input") {
    std::vector<double> theta(L, 0.0);
    theta[L - 1] = 1.0;
    Dataset ds = gen_linear_combination(16, L, theta, NoiseTag::none, {55, 4});
    for (std::size_t s = 0; s < ds.size(); ++s) {
      REQUIRE(ds.targets[s][0] == ds.inputs[s].at(L - 1, 0));
    }
  }
  SECTION("theta = 0 gives zero targets") {
    std::vector<double> theta(L, 0.0);
    Dataset ds = gen_linear_combination(16, L, theta, NoiseTag::none, {55, 5});
    for (std::size_t s = 0; s < ds.size(); ++s) REQUIRE(ds.targets[s][0] == 0.0);
  }
  SECTION("targets recompute from stored inputs") {
    std::vector<double> theta(L);
    Rng rng({55, 6});
    for (double& t : theta) t = rng.gaussian();
    Dataset ds = gen_linear_combination(32, L, theta, NoiseTag::none, {55, 7});
    for (std::size_t s = 0; s < ds.size(); ++s) {
      double want = 0.0;
      for (int k = 0; k < L; ++k) want += theta[k] * ds.inputs[s].at(k, 0);
      REQUIRE_THAT(ds.targets[s][0], WithinAbs(want, 1e-13));
    }
  }
  SECTION("theta length must match L") {
    std::vector<double> theta(L - 1, 0.0);
    REQUIRE_THROWS_AS(gen_linear_combination(4, L, theta, NoiseTag::none, RngSpec{55, 8}),
                      std::invalid_argument);
  }
}

TEST_CASE("gaussian-sequence generator") {
  SECTION("c = 0 gives zero sequences, clamp pins the last entry") {
    Dataset ds = gen_gaussian_sequences(8, 6, 0.0, {55, 9}, /*clamp_last=*/true);
    for (const Sequence& u : ds.inputs) {
      for (int k = 0; k < 5; ++k) REQUIRE(u.at(k, 0) == 0.0);
      REQUIRE(u.at(5, 0) == 1.0);
    }
  }
  SECTION("entries scale with c") {
    Dataset ds = gen_gaussian_sequences(1000, 100, 2.0, {55, 10});
    double var = 0.0;
    std::size_t count = 0;
    for (const Sequence& u : ds.inputs) {
      for (double v : u.data) {
        var += v * v;
        ++count;
      }
    }
    double sd = std::sqrt(var / double(count));
    REQUIRE(sd > 1.98);
    REQUIRE(sd < 2.02);
  }
}

TEST_CASE("dataset container round trip") {
  Dataset ds = gen_copy_magnitude(12, 7, 3, 1.0, 0.5, {56, 0});
  validate_dataset(ds);
  const std::string path = "dataset_test.bin";
  save_dataset(path, ds);
  Dataset back = load_dataset(path);
  REQUIRE(back.size() == ds.size());
  for (std::size_t s = 0; s < ds.size(); ++s) {
    REQUIRE(back.inputs[s].data == ds.inputs[s].data);
    REQUIRE(back.inputs[s].length == ds.inputs[s].length);
    REQUIRE(back.inputs[s].width == ds.inputs[s].width);
    REQUIRE(back.targets[s] == ds.targets[s]);
  }
  std::ifstream sidecar(path + ".spec.json");
  REQUIRE(sidecar.good());
  std::string text((std::istreambuf_iterator<char>(sidecar)), std::istreambuf_iterator<char>());
  REQUIRE(text.find("copy_magnitude") != std::string::npos);

  export_dataset_csv("dataset_test.csv", ds);
  std::ifstream csv("dataset_test.csv");
  REQUIRE(csv.good());
  std::string header;
  std::getline(csv, header);
  REQUIRE(header == "sample,position,u0,u1,u2,targets");

  std::remove(path.c_str());
  std::remove((path + ".spec.json").c_str());
  std::remove("dataset_test.csv");
}
