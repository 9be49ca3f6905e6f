#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ssmlab/units.hpp"

namespace ssmlab {

/// Generator name, its numeric parameters, and the stream that produced the
/// data; enough to regenerate the dataset bitwise.
struct DatasetSpec {
  std::string name;
  std::vector<std::pair<std::string, double>> params;
  RngSpec seed;
};

struct Dataset {
  std::vector<Sequence> inputs;
  std::vector<std::vector<double>> targets;
  DatasetSpec spec;

  int out_width() const { return targets.empty() ? 0 : static_cast<int>(targets[0].size()); }
  std::size_t size() const { return inputs.size(); }
};

inline void validate_dataset(const Dataset& ds) {
  if (ds.inputs.size() != ds.targets.size()) {
    throw std::invalid_argument("dataset: input/target count mismatch");
  }
  for (const Sequence& s : ds.inputs) validate_sequence(s);
  for (const std::vector<double>& t : ds.targets) {
    for (double v : t) {
      if (!std::isfinite(v)) throw std::domain_error("dataset: non-finite target");
    }
  }
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

inline constexpr std::array<int, 10> kWaveSumPrimes = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29};

/// Coefficient-recovery task: u(t; g) = sum_i g_i cos(p_i t) sampled at
/// t = k dt, target the coefficient vector g drawn i.i.d. standard normal.
inline Dataset gen_wavesum(int n_samples, int L, double dt, RngSpec seed) {
  if (L < 2) throw std::invalid_argument("gen_wavesum: L must be >= 2");
  if (!(dt > 0.0)) throw std::domain_error("gen_wavesum: dt must be positive");
  Dataset ds;
  ds.spec = {"wavesum", {{"n_samples", double(n_samples)}, {"L", double(L)}, {"dt", dt}}, seed};
  ds.inputs.reserve(n_samples);
  ds.targets.reserve(n_samples);
  for (int s = 0; s < n_samples; ++s) {
    Rng rng(fork(seed, static_cast<std::uint64_t>(s)));
    std::vector<double> g(kWaveSumPrimes.size());
    for (double& v : g) v = rng.gaussian();
    Sequence u(L, 1);
    for (int k = 0; k < L; ++k) {
      double t = k * dt;
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * std::cos(kWaveSumPrimes[i] * t);
      u.at(k, 0) = acc;
    }
    ds.inputs.push_back(std::move(u));
    ds.targets.push_back(std::move(g));
  }
  return ds;
}

/// Copy-magnitude task: input (u1 * ones, 0, ..., 0, uL) with
/// u1 ~ N(0, sigma1^2) shared across channels and uL ~ N(0, sigma2^2 I);
/// target |u1|.
inline Dataset gen_copy_magnitude(int n_samples, int L, int d, double sigma1, double sigma2,
                                  RngSpec seed) {
  if (L < 3) throw std::invalid_argument("gen_copy_magnitude: L must be >= 3");
  if (!(sigma1 > 0.0) || sigma2 < 0.0) {
    throw std::domain_error("gen_copy_magnitude: invalid noise scales");
  }
  Dataset ds;
  ds.spec = {"copy_magnitude",
             {{"n_samples", double(n_samples)},
              {"L", double(L)},
              {"d", double(d)},
              {"sigma1", sigma1},
              {"sigma2", sigma2}},
             seed};
  for (int s = 0; s < n_samples; ++s) {
    Rng rng(fork(seed, static_cast<std::uint64_t>(s)));
    double u1 = rng.gaussian(0.0, sigma1);
    Sequence u(L, d);
    for (int c = 0; c < d; ++c) u.at(0, c) = u1;
    for (int c = 0; c < d; ++c) u.at(L - 1, c) = rng.gaussian(0.0, sigma2);
    ds.inputs.push_back(std::move(u));
    ds.targets.push_back({std::abs(u1)});
  }
  return ds;
}

enum class NoiseTag { none };

/// Fixed linear readout task: target sum_j theta_j u_j on i.i.d. standard
/// normal scalar inputs.
inline Dataset gen_linear_combination(int n_samples, int L, std::span<const double> theta,
                                      NoiseTag /*noise*/, RngSpec seed) {
  if (static_cast<int>(theta.size()) != L) {
    throw std::invalid_argument("gen_linear_combination: theta length must equal L");
  }
  Dataset ds;
  ds.spec = {"linear_combination", {{"n_samples", double(n_samples)}, {"L", double(L)}}, seed};
  for (int s = 0; s < n_samples; ++s) {
    Rng rng(fork(seed, static_cast<std::uint64_t>(s)));
    Sequence u(L, 1);
    double acc = 0.0;
    for (int k = 0; k < L; ++k) {
      double v = rng.gaussian();
      u.at(k, 0) = v;
      acc += theta[k] * v;
    }
    ds.inputs.push_back(std::move(u));
    ds.targets.push_back({acc});
  }
  return ds;
}

/// Scalar sequences with entries N(0, c^2); optionally ends pinned to 1.
inline Dataset gen_gaussian_sequences(int n_trials, int L, double c, RngSpec seed,
                                      bool clamp_last = false) {
  if (c < 0.0) throw std::domain_error("gen_gaussian_sequences: c must be nonnegative");
  Dataset ds;
  ds.spec = {"gaussian_sequences",
             {{"n_trials", double(n_trials)},
              {"L", double(L)},
              {"c", c},
              {"clamp_last", clamp_last ? 1.0 : 0.0}},
             seed};
  for (int s = 0; s < n_trials; ++s) {
    Rng rng(fork(seed, static_cast<std::uint64_t>(s)));
    Sequence u(L, 1);
    for (int k = 0; k < L; ++k) u.at(k, 0) = rng.gaussian(0.0, c);
    if (clamp_last) u.at(L - 1, 0) = 1.0;
    ds.inputs.push_back(std::move(u));
    ds.targets.push_back({});
  }
  return ds;
}

// ---------------------------------------------------------------------------
// On-disk container: fixed binary header + row-major float64 payloads, with
// a sidecar text spec. All sequences in a file share one (L, d) shape.
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr char kDatasetMagic[8] = {'S', 'S', 'M', 'L', 'A', 'B', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

template <class T>
void write_pod(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_pod(std::ifstream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
}

}  // namespace detail

inline void save_dataset(const std::string& path, const Dataset& ds) {
  if (ds.inputs.empty()) throw std::invalid_argument("save_dataset: empty dataset");
  const int L = ds.inputs[0].length, d = ds.inputs[0].width, o = ds.out_width();
  for (const Sequence& s : ds.inputs) {
    if (s.length != L || s.width != d) {
      throw std::invalid_argument("save_dataset: mixed sequence shapes");
    }
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_dataset: cannot open " + path);
  os.write(detail::kDatasetMagic, sizeof detail::kDatasetMagic);
  detail::write_pod(os, detail::kDatasetVersion);
  detail::write_pod(os, std::uint32_t{0});
  detail::write_pod(os, static_cast<std::uint64_t>(ds.size()));
  detail::write_pod(os, static_cast<std::uint64_t>(L));
  detail::write_pod(os, static_cast<std::uint64_t>(d));
  detail::write_pod(os, static_cast<std::uint64_t>(o));
  for (const Sequence& s : ds.inputs) {
    os.write(reinterpret_cast<const char*>(s.data.data()),
             static_cast<std::streamsize>(s.data.size() * sizeof(double)));
  }
  for (const std::vector<double>& t : ds.targets) {
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("save_dataset: write failed for " + path);

  std::ofstream spec(path + ".spec.json");
  spec << "{\n  \"generator\": \"" << ds.spec.name << "\",\n";
  spec << "  \"seed\": " << ds.spec.seed.seed << ",\n";
  spec << "  \"stream_id\": " << ds.spec.seed.stream_id;
  for (const auto& [key, value] : ds.spec.params) {
    spec << ",\n  \"" << key << "\": " << format_g17(value);
  }
  spec << "\n}\n";
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_dataset: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, detail::kDatasetMagic, sizeof magic) != 0) {
    throw std::runtime_error("load_dataset: bad magic in " + path);
  }
  std::uint32_t version = 0, reserved = 0;
  detail::read_pod(is, version);
  detail::read_pod(is, reserved);
  if (version != detail::kDatasetVersion) {
    throw std::runtime_error("load_dataset: unsupported version");
  }
  std::uint64_t count = 0, L = 0, d = 0, o = 0;
  detail::read_pod(is, count);
  detail::read_pod(is, L);
  detail::read_pod(is, d);
  detail::read_pod(is, o);
  Dataset ds;
  ds.inputs.reserve(count);
  ds.targets.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Sequence s(static_cast<int>(L), static_cast<int>(d));
    is.read(reinterpret_cast<char*>(s.data.data()),
            static_cast<std::streamsize>(s.data.size() * sizeof(double)));
    ds.inputs.push_back(std::move(s));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    std::vector<double> t(o);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    ds.targets.push_back(std::move(t));
  }
  if (!is) throw std::runtime_error("load_dataset: truncated file " + path);
  return ds;
}

/// Flat CSV export for inspection: one row per (sample, position).
inline void export_dataset_csv(const std::string& path, const Dataset& ds) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("export_dataset_csv: cannot open " + path);
  const int d = ds.inputs.empty() ? 0 : ds.inputs[0].width;
  os << "sample,position";
  for (int c = 0; c < d; ++c) os << ",u" << c;
  os << ",targets\n";
  for (std::size_t s = 0; s < ds.size(); ++s) {
    const Sequence& u = ds.inputs[s];
    for (int k = 0; k < u.length; ++k) {
      os << s << ',' << k;
      for (int c = 0; c < u.width; ++c) os << ',' << format_g17(u.at(k, c));
      if (k == 0) {
        os << ',';
        for (std::size_t q = 0; q < ds.targets[s].size(); ++q) {
          if (q) os << ';';
          os << format_g17(ds.targets[s][q]);
        }
      } else {
        os << ',';
      }
      os << '\n';
    }
  }
}

}  // namespace ssmlab
