#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ssmlab/model.hpp"
#include "support/oracles.hpp"

using namespace ssmlab;
using Catch::Matchers::WithinAbs;

TEST_CASE("init_model is deterministic and validates shapes") {
  ArchSpec arch;
  arch.kind = UnitKind::b2s6;
  arch.n = 3;
  arch.d = 8;
  arch.h = 4;
  ModelParams a = init_model(arch, {17, 4});
  ModelParams b = init_model(arch, {17, 4});
  REQUIRE(pack_params(a) == pack_params(b));
  ModelParams c = init_model(arch, {18, 4});
  REQUIRE(pack_params(a) != pack_params(c));

  ArchSpec bad = arch;
  bad.h = 3;  // 8 % 3 != 0
  REQUIRE_THROWS_AS(init_model(bad, {17, 4}), std::invalid_argument);
}

TEST_CASE("initialized models keep Re(a) < 0 and produce bounded outputs") {
  Rng rng({91, 0});
  for (UnitKind kind : {UnitKind::s4d, UnitKind::s6, UnitKind::b2s6}) {
    ArchSpec arch;
    arch.kind = kind;
    arch.n = 4;
    arch.d = 8;
    arch.h = kind == UnitKind::b2s6 ? 2 : 1;
    arch.out_width = 3;
    ModelParams model = init_model(arch, {91, rng.below(1000)});
    std::visit([](const auto& p) { validate_state_diag(p.a); }, model.unit);
    Sequence u = oracle::random_sequence(rng, 32, 1);
    auto out = forward(model, u);
    REQUIRE(out.size() == 3);
    for (double v : out) {
      REQUIRE(std::isfinite(v));
      REQUIRE(std::abs(v) < 1e3);
    }
  }
}

TEST_CASE("forward pipeline") {
  Rng rng({91, 1});
  ArchSpec arch;
  arch.kind = UnitKind::s4d;
  arch.n = 3;
  arch.d = 4;
  arch.out_width = 2;
  arch.activation = Activation::identity;
  ModelParams model = init_model(arch, {91, 7});
  for (double& v : model.theta) v = rng.gaussian();

  SECTION("zero decoder maps everything to zero") {
    ModelParams z = model;
    std::fill(z.n_dec.begin(), z.n_dec.end(), 0.0);
    Sequence u = oracle::random_sequence(rng, 6, 1);
    for (double v : forward(z, u)) REQUIRE(v == 0.0);
  }
  SECTION("zero input with identity activation reads N^T theta") {
    Sequence zero(6, 1);
    auto out = forward(model, zero);
    for (int q = 0; q < 2; ++q) {
      double want = 0.0;
      for (int c = 0; c < 4; ++c) want += model.n_dec[static_cast<std::size_t>(c) * 2 + q] *
                                          model.theta[c];
      REQUIRE_THAT(out[q], WithinAbs(want, 1e-15));
    }
  }
  SECTION("matches a hand-composed pipeline of the individual operations") {
    ModelParams gm = model;
    gm.activation = Activation::gelu;
    Sequence u = oracle::random_sequence(rng, 6, 1);
    Sequence emb(6, 4);
    for (int k = 0; k < 6; ++k) {
      for (int c = 0; c < 4; ++c) emb.at(k, c) = gm.m_enc[c] * u.at(k, 0);
    }
    Sequence y = s4d_scan(std::get<S4DParams>(gm.unit), emb);
    std::vector<double> want(2, 0.0);
    for (int c = 0; c < 4; ++c) {
      double s = activate(Activation::gelu, y.at(5, c) + gm.theta[c]);
      for (int q = 0; q < 2; ++q) want[q] += gm.n_dec[static_cast<std::size_t>(c) * 2 + q] * s;
    }
    auto out = forward(gm, u);
    for (int q = 0; q < 2; ++q) REQUIRE_THAT(out[q], WithinAbs(want[q], 1e-13));
  }
  SECTION("rejects non-univariate input when the encoder is active") {
    Sequence u(6, 2);
    REQUIRE_THROWS_AS(forward(model, u), std::invalid_argument);
  }
}

namespace {

Dataset tiny_dataset(int n_samples, int L, RngSpec seed) {
  std::vector<double> theta(L, 0.0);
  theta[L - 1] = 1.0;
  return gen_linear_combination(n_samples, L, theta, NoiseTag::none, seed);
}

}  // namespace

TEST_CASE("train basics") {
  ArchSpec arch;
  arch.kind = UnitKind::s6;
  arch.n = 2;
  arch.d = 4;
  ModelParams model = init_model(arch, {92, 0});
  Dataset data = tiny_dataset(16, 6, {92, 1});

  SECTION("zero learning rates leave parameters untouched") {
    TrainConfig cfg;
    cfg.lr_main = 0.0;
    cfg.lr_delta = 0.0;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = {92, 2};
    TrainLog log = train(model, data, cfg);
    REQUIRE(pack_params(log.final_params) == pack_params(model));
    REQUIRE(log.rows.size() == 8);
  }
  SECTION("one sgd step moves by exactly minus lr times the gradient") {
    TrainConfig cfg;
    cfg.optimizer = Optimizer::sgd;
    cfg.lr_main = 0.05;
    cfg.lr_delta = 0.05;
    cfg.epochs = 1;
    cfg.batch_size = 16;  // single full batch
    cfg.seed = {92, 3};
    TrainLog log = train(model, data, cfg);
    // reproduce the shuffled batch to evaluate the gradient at the start
    std::vector<std::size_t> order(16);
    for (std::size_t i = 0; i < 16; ++i) order[i] = i;
    Rng shuffle(fork(fork(cfg.seed, "shuffle"), 0));
    for (std::size_t i = 16; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    std::vector<Sequence> ins;
    std::vector<std::vector<double>> tgts;
    for (std::size_t i : order) {
      ins.push_back(data.inputs[i]);
      tgts.push_back(data.targets[i]);
    }
    BpttResult res = bptt(model, ins, tgts);
    auto p0 = pack_params(model);
    auto g = pack_params(res.grads);
    auto p1 = pack_params(log.final_params);
    for (std::size_t i = 0; i < p0.size(); ++i) {
      REQUIRE(p1[i] == p0[i] - 0.05 * g[i]);
    }
  }
  SECTION("frozen delta group stays bitwise unchanged") {
    TrainConfig cfg;
    cfg.lr_main = 1e-2;
    cfg.lr_delta = 0.0;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.seed = {92, 4};
    TrainLog log = train(model, data, cfg);
    const S6Params& before = std::get<S6Params>(model.unit);
    const S6Params& after = std::get<S6Params>(log.final_params.unit);
    REQUIRE(after.w == before.w);
    REQUIRE(after.b_delta == before.b_delta);
    REQUIRE(after.b_mat != before.b_mat);  // the main group did move
  }
  SECTION("training is deterministic") {
    TrainConfig cfg;
    cfg.lr_main = 1e-2;
    cfg.lr_delta = 1e-2;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = {92, 5};
    TrainLog a = train(model, data, cfg);
    TrainLog b = train(model, data, cfg);
    REQUIRE(pack_params(a.final_params) == pack_params(b.final_params));
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
      REQUIRE(a.rows[i].train_loss == b.rows[i].train_loss);
      REQUIRE(a.rows[i].grad_norm == b.rows[i].grad_norm);
    }
  }
  SECTION("lr_delta above lr_main is rejected") {
    TrainConfig cfg;
    cfg.lr_main = 1e-3;
    cfg.lr_delta = 1e-2;
    REQUIRE_THROWS_AS(train(model, data, cfg), std::invalid_argument);
  }
}

TEST_CASE("one adam step follows the textbook update") {
  ArchSpec arch;
  arch.kind = UnitKind::s4d;
  arch.n = 2;
  arch.d = 2;
  ModelParams model = init_model(arch, {93, 0});
  Dataset data = tiny_dataset(4, 5, {93, 1});
  TrainConfig cfg;
  cfg.optimizer = Optimizer::adam;
  cfg.lr_main = 0.01;
  cfg.lr_delta = 0.01;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.seed = {93, 2};
  TrainLog log = train(model, data, cfg);

  std::vector<std::size_t> order{0, 1, 2, 3};
  Rng shuffle(fork(fork(cfg.seed, "shuffle"), 0));
  for (std::size_t i = 4; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
  std::vector<Sequence> ins;
  std::vector<std::vector<double>> tgts;
  for (std::size_t i : order) {
    ins.push_back(data.inputs[i]);
    tgts.push_back(data.targets[i]);
  }
  auto g = pack_params(bptt(model, ins, tgts).grads);
  auto p0 = pack_params(model);
  auto p1 = pack_params(log.final_params);
  for (std::size_t i = 0; i < p0.size(); ++i) {
    // after one step the bias-corrected moments collapse to g and g^2
    double want = p0[i] - 0.01 * g[i] / (std::abs(g[i]) + 1e-8);
    REQUIRE_THAT(p1[i], WithinAbs(want, 1e-12));
  }
}

TEST_CASE("trainlog csv serialization") {
  ArchSpec arch;
  arch.kind = UnitKind::s4d;
  arch.n = 2;
  arch.d = 2;
  ModelParams model = init_model(arch, {94, 0});
  Dataset data = tiny_dataset(8, 5, {94, 1});
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.seed = {94, 2};
  TrainLog log = train(model, data, cfg);
  std::string path = "trainlog_test.csv";
  write_trainlog_csv(path, log);
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  REQUIRE(header == "epoch,step,train_loss,grad_norm,wall_ms");
  int rows = 0;
  std::string line;
  while (std::getline(is, line)) ++rows;
  REQUIRE(rows == static_cast<int>(log.rows.size()));
  std::remove(path.c_str());
}
