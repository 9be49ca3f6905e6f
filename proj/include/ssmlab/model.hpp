#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "ssmlab/gradients.hpp"
#include "ssmlab/tasks.hpp"

namespace ssmlab {

// ---------------------------------------------------------------------------
// Activations and losses
// ---------------------------------------------------------------------------

enum class Activation { identity, relu, tanh_fn, gelu };

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::tanh_fn: return std::tanh(x);
    case Activation::gelu: return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
  }
  return x;
}

inline double activate_grad(Activation a, double x) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::tanh_fn: {
      double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::gelu: {
      double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
      double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi);
      return cdf + x * pdf;
    }
  }
  return 1.0;
}

enum class LossKind { mse };

// ---------------------------------------------------------------------------
// The single-layer model: encoder -> unit -> bias -> activation -> decoder
// ---------------------------------------------------------------------------

struct ModelParams {
  std::vector<double> m_enc;  // d, broadcast encoder for scalar inputs
  std::vector<double> n_dec;  // d x o: n_dec[c*o + q]
  std::vector<double> theta;  // d
  Activation activation = Activation::gelu;
  UnitParams unit;
  bool use_encoder = true;  // width-d tasks feed the unit directly
  int out_width = 1;

  int width() const { return unit_width(unit); }
};

struct ArchSpec {
  UnitKind kind = UnitKind::s4d;
  int n = 4;
  int d = 8;
  int h = 1;  // b2s6 block count; p = d / h
  std::optional<FieldType> field;
  bool bias_enabled = true;
  Activation activation = Activation::gelu;
  int out_width = 1;
  bool use_encoder = true;
};

enum class ParamGroup { main, delta };

namespace detail {

template <class Model, class Fn>
void visit_params(Model& model, Fn&& fn) {
  using D = std::conditional_t<std::is_const_v<Model>, const double, double>;
  auto cvec = [&](auto& v, FieldType f, ParamGroup g) {
    for (auto& z : v) {
      D* parts = reinterpret_cast<D*>(&z);
      fn(parts[0], g);
      if (f == FieldType::complex_valued) fn(parts[1], g);
    }
  };
  auto rvec = [&](auto& v, ParamGroup g) {
    for (auto& x : v) fn(x, g);
  };
  std::visit([&](auto& p) {
    using T = std::decay_t<decltype(p)>;
    if constexpr (std::is_same_v<T, S4DParams>) {
      cvec(p.a.entries, p.field, ParamGroup::main);
      cvec(p.b_cols, p.field, ParamGroup::main);
      cvec(p.c_rows, p.field, ParamGroup::main);
      rvec(p.b_delta, ParamGroup::delta);
    } else if constexpr (std::is_same_v<T, S6Params>) {
      cvec(p.a.entries, p.field, ParamGroup::main);
      rvec(p.b_mat, ParamGroup::main);
      rvec(p.c_mat, ParamGroup::main);
      rvec(p.w, ParamGroup::delta);
      rvec(p.b_delta, ParamGroup::delta);
    } else {
      cvec(p.a.entries, p.field, ParamGroup::main);
      cvec(p.b_weight, p.field, ParamGroup::main);
      if (p.bias_enabled) cvec(p.b_bias, p.field, ParamGroup::main);
      rvec(p.c_mat, ParamGroup::main);
      rvec(p.w, ParamGroup::delta);
      rvec(p.b_delta, ParamGroup::delta);
    }
  }, model.unit);
  if (model.use_encoder) rvec(model.m_enc, ParamGroup::main);
  rvec(model.n_dec, ParamGroup::main);
  rvec(model.theta, ParamGroup::main);
}

}  // namespace detail

/// Visits every trainable real component in a fixed order. Complex entries
/// appear as (real, imaginary) pairs; real-mode units expose real parts only.
template <class Fn>
void for_each_param(ModelParams& model, Fn&& fn) {
  detail::visit_params(model, std::forward<Fn>(fn));
}

template <class Fn>
void for_each_param(const ModelParams& model, Fn&& fn) {
  detail::visit_params(model, std::forward<Fn>(fn));
}

struct ParamRef {
  double* value;
  ParamGroup group;
};

inline std::vector<ParamRef> collect_params(ModelParams& model) {
  std::vector<ParamRef> out;
  for_each_param(model, [&](double& x, ParamGroup g) { out.push_back({&x, g}); });
  return out;
}

inline std::vector<double> pack_params(const ModelParams& model) {
  std::vector<double> out;
  for_each_param(model, [&](const double& x, ParamGroup) { out.push_back(x); });
  return out;
}

inline void unpack_params(ModelParams& model, std::span<const double> flat) {
  std::size_t i = 0;
  for_each_param(model, [&](double& x, ParamGroup) { x = flat[i++]; });
  if (i != flat.size()) throw std::invalid_argument("unpack_params: size mismatch");
}

/// A gradient record with the same shape as the parameters, zero filled.
inline ModelParams zero_grads_like(const ModelParams& model) {
  ModelParams g = model;
  std::visit([](auto& p) {
    using T = std::decay_t<decltype(p)>;
    std::fill(p.a.entries.begin(), p.a.entries.end(), cdouble(0.0));
    std::fill(p.b_delta.begin(), p.b_delta.end(), 0.0);
    if constexpr (std::is_same_v<T, S4DParams>) {
      std::fill(p.b_cols.begin(), p.b_cols.end(), cdouble(0.0));
      std::fill(p.c_rows.begin(), p.c_rows.end(), cdouble(0.0));
    } else if constexpr (std::is_same_v<T, S6Params>) {
      std::fill(p.b_mat.begin(), p.b_mat.end(), 0.0);
      std::fill(p.c_mat.begin(), p.c_mat.end(), 0.0);
      std::fill(p.w.begin(), p.w.end(), 0.0);
    } else {
      std::fill(p.b_weight.begin(), p.b_weight.end(), cdouble(0.0));
      std::fill(p.b_bias.begin(), p.b_bias.end(), cdouble(0.0));
      std::fill(p.c_mat.begin(), p.c_mat.end(), 0.0);
      std::fill(p.w.begin(), p.w.end(), 0.0);
    }
  }, g.unit);
  std::fill(g.m_enc.begin(), g.m_enc.end(), 0.0);
  std::fill(g.n_dec.begin(), g.n_dec.end(), 0.0);
  std::fill(g.theta.begin(), g.theta.end(), 0.0);
  return g;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace detail {

inline void init_state_diag(ComplexDiag& a, int n, FieldType f, Rng& rng) {
  a.entries.resize(n);
  if (f == FieldType::complex_valued) {
    for (int m = 0; m < n; ++m) a[m] = cdouble(-0.5, kPi * m);
  } else {
    for (int m = 0; m < n; ++m) a[m] = cdouble(rng.uniform(-1.0, -0.5), 0.0);
  }
}

inline double log_uniform_delta(Rng& rng) {
  return std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
}

inline cdouble draw(Rng& rng, double stddev, FieldType f) {
  if (f == FieldType::complex_valued) return rng.cgaussian(stddev);
  return cdouble(rng.gaussian(0.0, stddev), 0.0);
}

}  // namespace detail

/// Deterministic initialization; Re(a) < 0 is guaranteed in both field modes
/// and the sampling intervals start log-uniform in [1e-3, 1e-1].
inline ModelParams init_model(const ArchSpec& arch, RngSpec seed) {
  if (arch.n < 1 || arch.d < 1) throw std::invalid_argument("init_model: invalid sizes");
  if (arch.kind == UnitKind::b2s6 && (arch.h < 1 || arch.d % arch.h != 0)) {
    throw std::invalid_argument("init_model: block layout must satisfy h * p = d");
  }
  Rng rng(fork(seed, "init"));
  const int n = arch.n, d = arch.d;
  ModelParams model;
  model.activation = arch.activation;
  model.use_encoder = arch.use_encoder;
  model.out_width = arch.out_width;

  if (arch.kind == UnitKind::s4d) {
    S4DParams p;
    p.n = n;
    p.d = d;
    p.field = arch.field.value_or(FieldType::complex_valued);
    detail::init_state_diag(p.a, n, p.field, rng);
    p.b_cols.resize(static_cast<std::size_t>(d) * n);
    p.c_rows.resize(static_cast<std::size_t>(d) * n);
    p.b_delta.resize(d);
    for (auto& z : p.b_cols) z = detail::draw(rng, 1.0, p.field);
    for (auto& z : p.c_rows) z = detail::draw(rng, 1.0 / std::sqrt(double(n)), p.field);
    for (double& b : p.b_delta) b = std::log(detail::log_uniform_delta(rng));
    model.unit = std::move(p);
  } else if (arch.kind == UnitKind::s6) {
    S6Params p;
    p.n = n;
    p.d = d;
    p.field = arch.field.value_or(FieldType::real);
    detail::init_state_diag(p.a, n, p.field, rng);
    p.b_mat.resize(static_cast<std::size_t>(n) * d);
    p.c_mat.resize(static_cast<std::size_t>(d) * n);
    p.w.resize(d);
    p.b_delta.resize(d);
    for (double& v : p.b_mat) v = rng.gaussian(0.0, 1.0 / std::sqrt(double(d)));
    for (double& v : p.c_mat) v = rng.gaussian(0.0, 1.0 / std::sqrt(double(n)));
    for (double& v : p.w) v = rng.gaussian(0.0, 1.0 / std::sqrt(double(d)));
    // b solves softplus(b) = delta
    for (double& b : p.b_delta) {
      double delta = detail::log_uniform_delta(rng);
      b = std::log(std::expm1(delta));
    }
    model.unit = std::move(p);
  } else {
    B2S6Params p;
    p.n = n;
    p.h = arch.h;
    p.p = d / arch.h;
    p.field = arch.field.value_or(FieldType::complex_valued);
    p.bias_enabled = arch.bias_enabled;
    detail::init_state_diag(p.a, n, p.field, rng);
    const int bw = p.p;
    p.b_weight.resize(static_cast<std::size_t>(p.h) * n * bw);
    p.b_bias.resize(static_cast<std::size_t>(p.h) * n * bw);
    p.c_mat.resize(static_cast<std::size_t>(p.h) * bw * n);
    p.w.resize(static_cast<std::size_t>(p.h) * bw);
    p.b_delta.resize(static_cast<std::size_t>(p.h) * bw);
    const double sb = 1.0 / std::sqrt(double(bw));
    for (auto& z : p.b_weight) z = detail::draw(rng, sb, p.field);
    for (auto& z : p.b_bias) z = p.bias_enabled ? detail::draw(rng, sb, p.field) : cdouble(0.0);
    for (double& v : p.c_mat) v = rng.gaussian(0.0, 1.0 / std::sqrt(double(n)));
    for (double& v : p.w) v = rng.gaussian(0.0, sb);
    for (double& b : p.b_delta) {
      double delta = detail::log_uniform_delta(rng);
      b = std::log(std::expm1(delta));
    }
    model.unit = std::move(p);
  }

  model.m_enc.resize(d);
  for (double& v : model.m_enc) v = rng.gaussian(0.0, 1.0);
  model.n_dec.resize(static_cast<std::size_t>(d) * arch.out_width);
  for (double& v : model.n_dec) v = rng.gaussian(0.0, 1.0 / std::sqrt(double(d)));
  model.theta.assign(d, 0.0);
  return model;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

namespace detail {

inline Sequence embed(const ModelParams& model, const Sequence& u) {
  const int d = model.width();
  if (model.use_encoder) {
    if (u.width != 1) throw std::invalid_argument("forward: univariate input required");
    Sequence emb(u.length, d);
    for (int k = 0; k < u.length; ++k) {
      for (int c = 0; c < d; ++c) emb.at(k, c) = model.m_enc[c] * u.at(k, 0);
    }
    return emb;
  }
  if (u.width != d) throw std::invalid_argument("forward: input width mismatch");
  return u;
}

inline std::vector<double> decode_last(const ModelParams& model, std::span<const double> y_last) {
  const int d = model.width(), o = model.out_width;
  std::vector<double> out(o, 0.0);
  for (int c = 0; c < d; ++c) {
    double s = activate(model.activation, y_last[c] + model.theta[c]);
    for (int q = 0; q < o; ++q) out[q] += model.n_dec[static_cast<std::size_t>(c) * o + q] * s;
  }
  return out;
}

}  // namespace detail

/// N sigma(unit(embedded u)_L + theta), decoded to out_width values.
inline std::vector<double> forward(const ModelParams& model, const Sequence& u) {
  Sequence emb = detail::embed(model, u);
  UnitCache cache;
  std::span<const double> y_last = unit_forward_cached(model.unit, emb, cache);
  return detail::decode_last(model, y_last);
}

// ---------------------------------------------------------------------------
// Reverse-mode gradients of the mean batch loss
// ---------------------------------------------------------------------------

struct BpttResult {
  ModelParams grads;
  double loss = 0.0;
  bool finite = true;
};

/// Exact gradients via one reverse sweep per sample; per-step quantities are
/// checkpointed by the forward pass, so the backward sweep is purely
/// multiplicative.
inline BpttResult bptt(const ModelParams& model, std::span<const Sequence> inputs,
                       std::span<const std::vector<double>> targets,
                       LossKind loss_kind = LossKind::mse) {
  if (inputs.size() != targets.size() || inputs.empty()) {
    throw std::invalid_argument("bptt: batch shape mismatch");
  }
  (void)loss_kind;  // mse is the only loss
  const int d = model.width(), o = model.out_width;
  if (o < 1) throw std::invalid_argument("bptt: out_width must be >= 1");
  const double batch = static_cast<double>(inputs.size());
  BpttResult res;
  res.grads = zero_grads_like(model);
  UnitCache cache;
  std::vector<double> gy(d), v(d), s(d);
  for (std::size_t idx = 0; idx < inputs.size(); ++idx) {
    if (static_cast<int>(targets[idx].size()) != o) {
      throw std::invalid_argument("bptt: target width mismatch");
    }
    Sequence emb = detail::embed(model, inputs[idx]);
    std::span<const double> y_last = unit_forward_cached(model.unit, emb, cache);
    for (int c = 0; c < d; ++c) {
      v[c] = y_last[c] + model.theta[c];
      s[c] = activate(model.activation, v[c]);
    }
    std::vector<double> out(o, 0.0);
    for (int c = 0; c < d; ++c) {
      for (int q = 0; q < o; ++q) out[q] += model.n_dec[static_cast<std::size_t>(c) * o + q] * s[c];
    }
    std::vector<double> dout(o);
    for (int q = 0; q < o; ++q) {
      const double e = out[q] - targets[idx][q];
      res.loss += e * e / (batch * o);
      dout[q] = 2.0 * e / (batch * o);
    }
    for (int c = 0; c < d; ++c) {
      double ds = 0.0;
      for (int q = 0; q < o; ++q) {
        res.grads.n_dec[static_cast<std::size_t>(c) * o + q] += dout[q] * s[c];
        ds += model.n_dec[static_cast<std::size_t>(c) * o + q] * dout[q];
      }
      const double dv = ds * activate_grad(model.activation, v[c]);
      res.grads.theta[c] += dv;
      gy[c] = dv;
    }
    if (model.use_encoder) {
      Sequence du(emb.length, d);
      unit_backward(model.unit, emb, cache, gy, &res.grads.unit, &du);
      for (int k = 0; k < emb.length; ++k) {
        const double uk = inputs[idx].at(k, 0);
        for (int c = 0; c < d; ++c) res.grads.m_enc[c] += du.at(k, c) * uk;
      }
    } else {
      unit_backward(model.unit, emb, cache, gy, &res.grads.unit, nullptr);
    }
  }
  res.finite = std::isfinite(res.loss);
  return res;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class Optimizer { adam, sgd };

struct TrainConfig {
  Optimizer optimizer = Optimizer::adam;
  double lr_main = 1e-3;
  double lr_delta = 1e-3;  // learning rate of the {w, b_delta} group; 0 freezes it
  double weight_decay = 0.0;
  int batch_size = 32;
  int epochs = 1;
  RngSpec seed;
  LossKind loss = LossKind::mse;
  bool halt_on_divergence = false;
};

struct TrainRow {
  int epoch = 0;
  int step = 0;
  double train_loss = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
  bool diverged = false;
};

struct TrainLog {
  std::vector<TrainRow> rows;
  ModelParams final_params;
  int divergence_count = 0;
};

/// Mini-batch first-order training with two parameter groups. Non-finite
/// steps are recorded, the poisoned update is rolled back, and training
/// continues unless halt_on_divergence is set.
inline TrainLog train(const ModelParams& init, const Dataset& data, const TrainConfig& cfg) {
  if (cfg.lr_delta > cfg.lr_main) {
    throw std::invalid_argument("train: lr_delta must not exceed lr_main");
  }
  if (cfg.batch_size < 1 || cfg.epochs < 0) throw std::invalid_argument("train: bad config");
  if (data.inputs.empty()) throw std::invalid_argument("train: empty dataset");
  if (data.out_width() != init.out_width) {
    throw std::invalid_argument("train: target width mismatch");
  }

  TrainLog log;
  ModelParams params = init;
  std::vector<ParamRef> refs = collect_params(params);
  const std::size_t P = refs.size();
  std::vector<double> adam_m(P, 0.0), adam_v(P, 0.0);
  std::vector<double> snapshot(P);
  for (std::size_t i = 0; i < P; ++i) snapshot[i] = *refs[i].value;
  long adam_t = 0;

  const std::size_t N = data.inputs.size();
  std::vector<std::size_t> order(N);
  std::vector<Sequence> batch_in;
  std::vector<std::vector<double>> batch_tgt;
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    Rng shuffle(fork(fork(cfg.seed, "shuffle"), static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = N; i > 1; --i) {
      std::size_t j = shuffle.below(i);
      std::swap(order[i - 1], order[j]);
    }
    for (std::size_t start = 0; start < N; start += cfg.batch_size) {
      auto t0 = std::chrono::steady_clock::now();
      const std::size_t stop = std::min(N, start + cfg.batch_size);
      batch_in.clear();
      batch_tgt.clear();
      for (std::size_t i = start; i < stop; ++i) {
        batch_in.push_back(data.inputs[order[i]]);
        batch_tgt.push_back(data.targets[order[i]]);
      }
      BpttResult res = bptt(params, batch_in, batch_tgt, cfg.loss);
      double gnorm = 0.0;
      for_each_param(res.grads, [&](const double& g, ParamGroup) { gnorm += g * g; });
      gnorm = std::sqrt(gnorm);

      TrainRow row;
      row.epoch = epoch;
      row.step = step;
      row.train_loss = res.loss;
      row.grad_norm = gnorm;
      if (!res.finite || !std::isfinite(gnorm)) {
        // roll back the update that produced this loss and skip the step
        row.diverged = true;
        ++log.divergence_count;
        for (std::size_t i = 0; i < P; ++i) *refs[i].value = snapshot[i];
        row.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0).count();
        log.rows.push_back(row);
        ++step;
        if (cfg.halt_on_divergence) {
          log.final_params = params;
          return log;
        }
        continue;
      }

      for (std::size_t i = 0; i < P; ++i) snapshot[i] = *refs[i].value;
      std::vector<double> flat_grads;
      flat_grads.reserve(P);
      for_each_param(res.grads, [&](const double& g, ParamGroup) { flat_grads.push_back(g); });
      ++adam_t;
      const double bc1 = 1.0 - std::pow(0.9, double(adam_t));
      const double bc2 = 1.0 - std::pow(0.999, double(adam_t));
      for (std::size_t i = 0; i < P; ++i) {
        const double lr = refs[i].group == ParamGroup::delta ? cfg.lr_delta : cfg.lr_main;
        if (lr == 0.0) continue;
        double g = flat_grads[i] + cfg.weight_decay * (*refs[i].value);
        if (cfg.optimizer == Optimizer::sgd) {
          *refs[i].value -= lr * g;
        } else {
          adam_m[i] = 0.9 * adam_m[i] + 0.1 * g;
          adam_v[i] = 0.999 * adam_v[i] + 0.001 * g * g;
          const double mhat = adam_m[i] / bc1;
          const double vhat = adam_v[i] / bc2;
          *refs[i].value -= lr * mhat / (std::sqrt(vhat) + 1e-8);
        }
      }
      row.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0).count();
      log.rows.push_back(row);
      ++step;
    }
  }
  log.final_params = params;
  return log;
}

/// CSV with header epoch,step,train_loss,grad_norm,wall_ms.
inline void write_trainlog_csv(const std::string& path, const TrainLog& log) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_trainlog_csv: cannot open " + path);
  os << "epoch,step,train_loss,grad_norm,wall_ms\n";
  for (const TrainRow& r : log.rows) {
    os << r.epoch << ',' << r.step << ',' << format_g17(r.train_loss) << ','
       << format_g17(r.grad_norm) << ',' << format_g17(r.wall_ms) << '\n';
  }
}

}  // namespace ssmlab
