#include <doctest.h>

#include "diffcast/backbones.hpp"
#include "testing_util.hpp"

using namespace diffcast;
using diffcast::testing::random_tensor;

namespace {

ModelConfig toy_config(int64_t L_in = 5, int64_t L_out = 8, int64_t hidden = 8) {
  ModelConfig cfg;
  cfg.L_in = L_in;
  cfg.L_out = L_out;
  cfg.K = L_out;
  cfg.T = 10;
  cfg.sample_steps = 5;
  cfg.hidden_size = hidden;
  cfg.channel_mults = {1, 2};
  cfg.depth = 2;
  return cfg;
}

Tensor uniform_frames(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform();
  return t;
}

}  // namespace

TEST_CASE("deterministic_loss: exact cases and summation oracle") {
  Rng rng(3);
  Tensor y = random_tensor({2, 2, 2, 1}, rng);
  CHECK(deterministic_loss(y, y) == 0.0);

  Tensor off = y;
  for (int64_t i = 0; i < off.numel(); ++i) off[i] += 0.1;
  CHECK(deterministic_loss(off, y) == doctest::Approx(0.01).epsilon(1e-9));

  Tensor mu = random_tensor({2, 2, 2, 1}, rng);
  real oracle = 0.0;
  for (int64_t i = 0; i < mu.numel(); ++i) oracle += (mu[i] - y[i]) * (mu[i] - y[i]);
  oracle /= static_cast<real>(mu.numel());
  CHECK(testing::rel_err(deterministic_loss(mu, y), oracle) < 1e-7);

  Tensor bad({2, 2});
  CHECK_THROWS_AS(deterministic_loss(bad, y), std::invalid_argument);
}

TEST_CASE("backbones honor the shape contract and zero-init head") {
  for (BackboneKind kind : {BackboneKind::ConvGRU, BackboneKind::SimVP}) {
    ModelConfig cfg = toy_config();
    cfg.backbone = kind;
    Rng rng(7);
    auto model = make_backbone(cfg, 1, rng);

    Rng drng(11);
    Tensor x = uniform_frames({5, 1, 32, 32}, drng);
    Tensor mu = model->predict_frames(x);
    CHECK(mu.shape() == Shape{8, 1, 32, 32});
    // Zero-initialized output head: untrained prediction is identically zero.
    for (int64_t i = 0; i < mu.numel(); ++i) CHECK(mu[i] == 0.0);
  }
}

TEST_CASE("predict is deterministic given fixed parameters") {
  ModelConfig cfg = toy_config();
  Rng rng(13);
  auto model = conv_gru_predictor(cfg, 1, rng);
  // Nudge the head away from zero so the output is nontrivial.
  for (nn::Param* p : model->parameters())
    for (int64_t i = 0; i < p->value().numel(); ++i)
      if (p->value()[i] == 0.0) p->value_mut()[i] = 0.01;
  Rng drng(17);
  Tensor x = uniform_frames({5, 1, 16, 16}, drng);
  Tensor a = model->predict_frames(x);
  Tensor b = model->predict_frames(x);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  CHECK(a.max() != 0.0);
}

TEST_CASE("shape contract holds across divisible spatial sizes; others rejected") {
  ModelConfig cfg = toy_config(2, 2, 4);
  for (BackboneKind kind : {BackboneKind::ConvGRU, BackboneKind::SimVP}) {
    cfg.backbone = kind;
    Rng rng(19);
    auto model = make_backbone(cfg, 1, rng);
    for (int64_t hw : {16, 32, 64}) {
      Rng drng(23);
      Tensor x = uniform_frames({2, 1, hw, hw}, drng);
      CHECK(model->predict_frames(x).shape() == Shape{2, 1, hw, hw});
    }
    Rng drng(29);
    Tensor bad = uniform_frames({2, 1, 18, 18}, drng);
    CHECK_THROWS_AS(model->predict_frames(bad), std::invalid_argument);
  }
}

TEST_CASE("parameter count is stable across constructions with equal config") {
  ModelConfig cfg = toy_config();
  Rng r1(31), r2(77);
  auto a = conv_gru_predictor(cfg, 1, r1);
  auto b = conv_gru_predictor(cfg, 1, r2);
  CHECK(a->parameter_count() == b->parameter_count());
  auto c = simvp_lite_predictor(cfg, 1, r1);
  auto d = simvp_lite_predictor(cfg, 1, r2);
  CHECK(c->parameter_count() == d->parameter_count());
}

TEST_CASE("backbone gradients match finite differences at toy size") {
  for (BackboneKind kind : {BackboneKind::ConvGRU, BackboneKind::SimVP}) {
    ModelConfig cfg = toy_config(2, 2, 4);
    cfg.backbone = kind;
    Rng rng(37);
    auto model = make_backbone(cfg, 1, rng);
    // Perturb all parameters (zero-init head included) so gradients are live.
    Rng prng(41);
    for (nn::Param* p : model->parameters())
      for (int64_t i = 0; i < p->value().numel(); ++i) p->value_mut()[i] += 0.05 * prng.normal();

    Rng drng(43);
    ag::Var x(uniform_frames({2, 1, 16, 16}, drng), false);
    ag::Var y(uniform_frames({2, 1, 16, 16}, drng), false);
    auto loss = [&] { return ag::mse(model->predict(x), y); };
    auto fails = testing::fd_check_params(loss, model->named_parameters(), drng, 2, 1e-3);
    for (const auto& f : fails)
      MESSAGE("fd mismatch at ", f.where, ": analytic=", f.analytic, " numeric=", f.numeric);
    CHECK(fails.empty());
  }
}

TEST_CASE("a backbone can overfit one event; prediction approaches the target") {
  ModelConfig cfg = toy_config(2, 2, 8);
  cfg.lr = 3e-3;
  Rng rng(47);
  auto model = conv_gru_predictor(cfg, 1, rng);

  Rng drng(53);
  // Smooth target: a blurred random field, which a tiny model can memorize.
  Tensor x = uniform_frames({2, 1, 16, 16}, drng);
  Tensor y({2, 1, 16, 16});
  for (int64_t f = 0; f < 2; ++f)
    for (int64_t i = 0; i < 16; ++i)
      for (int64_t j = 0; j < 16; ++j)
        y[(f * 16 + i) * 16 + j] = 0.5 + 0.3 * std::sin(0.4 * i + 0.1 * f) * std::cos(0.4 * j);

  ag::Var xv(x, false);
  ag::Var yv(y, false);
  nn::Adam adam(cfg.lr);
  real loss_val = 1.0;
  for (int step = 0; step < 3000 && loss_val >= 1e-4; ++step) {
    model->zero_grad();
    ag::Var loss = ag::mse(model->predict(xv), yv);
    loss_val = loss.item();
    ag::backward(loss);
    adam.step(model->parameters());
  }
  REQUIRE(loss_val < 1e-4);
  Tensor mu = model->predict_frames(x);
  real max_abs = 0.0;
  for (int64_t i = 0; i < mu.numel(); ++i) max_abs = std::max(max_abs, std::abs(mu[i] - y[i]));
  CHECK(max_abs < 0.05);
}
