#include <doctest.h>

#include <cmath>

#include "diffcast/framework.hpp"
#include "testing_util.hpp"

using namespace diffcast;
using diffcast::testing::random_tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.L_in = 2;
  cfg.L_out = 4;
  cfg.K = 2;
  cfg.T = 10;
  cfg.sample_steps = 4;
  cfg.alpha = 0.5;
  cfg.hidden_size = 4;
  cfg.channel_mults = {1, 2};
  cfg.depth = 2;
  cfg.sampler = Sampler::DDIM;
  cfg.seed = 5;
  return cfg;
}

EventSample random_event(const ModelConfig& cfg, int64_t hw, Rng& rng, const std::string& id) {
  EventSample ev;
  Tensor x({cfg.L_in, hw, hw, 1});
  Tensor y({cfg.L_out, hw, hw, 1});
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform();
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = rng.uniform();
  ev.x = RadarSequence{std::move(x), {0.0, 1.0}};
  ev.y = RadarSequence{std::move(y), {0.0, 1.0}};
  ev.id = id;
  return ev;
}

}  // namespace

TEST_CASE("compute_residual: exact identities") {
  Rng rng(3);
  Tensor y = random_tensor({4, 2, 2, 1}, rng);
  Tensor zero = Tensor::zeros_like(y);
  Tensor r0 = compute_residual(y, y);
  for (int64_t i = 0; i < r0.numel(); ++i) CHECK(r0[i] == 0.0);
  Tensor ry = compute_residual(y, zero);
  for (int64_t i = 0; i < ry.numel(); ++i) CHECK(ry[i] == y[i]);

  Tensor mu = random_tensor({4, 2, 2, 1}, rng);
  Tensor r = compute_residual(y, mu);
  for (int64_t i = 0; i < r.numel(); ++i) CHECK(r[i] + mu[i] == y[i]);  // bit-exact round trip

  CHECK_THROWS_AS(compute_residual(y, Tensor::zeros({2, 2})), std::invalid_argument);
}

TEST_CASE("group_segments: index arithmetic and partition property") {
  Rng rng(5);
  Tensor r = random_tensor({20, 2, 2, 1}, rng);
  auto segs = group_segments(r, 5);
  REQUIRE(segs.size() == 4);
  for (size_t j = 0; j < 4; ++j) {
    CHECK(segs[j].index == static_cast<int64_t>(j + 1));
    CHECK(segs[j].value.shape() == Shape{5, 2, 2, 1});
    for (int64_t i = 0; i < segs[j].value.numel(); ++i)
      CHECK(segs[j].value[i] == r[static_cast<int64_t>(j) * segs[j].value.numel() + i]);
  }

  auto one = group_segments(r, 20);
  REQUIRE(one.size() == 1);
  for (int64_t i = 0; i < r.numel(); ++i) CHECK(one[0].value[i] == r[i]);

  CHECK_THROWS_AS(group_segments(r, 3), std::invalid_argument);

  // Partition property over random lengths and all valid K.
  for (int64_t L : {6, 12}) {
    Tensor rr = random_tensor({L, 3}, rng);
    for (int64_t K = 1; K <= L; ++K) {
      if (L % K != 0) continue;
      auto parts = group_segments(rr, K);
      int64_t offset = 0;
      for (const auto& seg : parts) {
        for (int64_t i = 0; i < seg.value.numel(); ++i) CHECK(seg.value[i] == rr[offset + i]);
        offset += seg.value.numel();
      }
      CHECK(offset == rr.numel());
    }
  }
}

TEST_CASE("loss combination identity and alpha collapses") {
  ModelConfig cfg = tiny_config();
  Rng drng(7);
  std::vector<EventSample> batch = {random_event(cfg, 16, drng, "a"), random_event(cfg, 16, drng, "b")};

  SUBCASE("alpha = 0 reduces to the deterministic loss") {
    cfg.alpha = 0.0;
    DiffCastModel model(cfg);
    Rng rng(11);
    auto rep = model.training_step(batch, rng);
    CHECK(std::abs(rep.loss_total - rep.loss_deterministic) < 1e-6);
    CHECK(rep.grad_norm_denoiser == 0.0);
    CHECK(rep.grad_norm_globalnet == 0.0);
    CHECK(rep.grad_norm_backbone > 0.0);
  }

  SUBCASE("alpha = 1 reduces to the summed denoising loss") {
    cfg.alpha = 1.0;
    DiffCastModel model(cfg);
    Rng rng(13);
    auto rep = model.training_step(batch, rng);
    CHECK(std::abs(rep.loss_total - rep.loss_denoising_sum()) < 1e-6);
    CHECK(rep.grad_norm_denoiser > 0.0);
  }

  SUBCASE("combination identity holds at alpha = 0.3") {
    cfg.alpha = 0.3;
    DiffCastModel model(cfg);
    Rng rng(17);
    for (int step = 0; step < 3; ++step) {
      auto rep = model.training_step(batch, rng);
      const real expect = 0.3 * rep.loss_denoising_sum() + 0.7 * rep.loss_deterministic;
      CHECK(std::abs(rep.loss_total - expect) < 1e-6);
      REQUIRE(rep.loss_denoising_per_segment.size() == 2);
    }
  }
}

TEST_CASE("denoising loss alone sends gradient into the backbone (end-to-end)") {
  ModelConfig cfg = tiny_config();
  cfg.alpha = 0.5;
  DiffCastModel model(cfg);
  Rng drng(19);
  std::vector<EventSample> batch = {random_event(cfg, 16, drng, "a")};
  Rng rng(23);
  TrainStepOptions opts;
  opts.drop_deterministic_term = true;
  auto rep = model.training_step(batch, rng, opts);
  CHECK(rep.grad_norm_backbone > 0.0);
  CHECK(rep.grad_norm_denoiser > 0.0);
  CHECK(rep.grad_norm_globalnet > 0.0);
}

TEST_CASE("frozen backbone: zero gradient and excluded from updates") {
  ModelConfig cfg = tiny_config();
  DiffCastModel model(cfg);
  Rng drng(29);
  std::vector<EventSample> batch = {random_event(cfg, 16, drng, "a")};

  model.set_training_mode(true, true, 0.5);
  Rng rng(31);
  std::vector<Tensor> before;
  for (nn::Param* p : model.backbone_params()) before.push_back(p->value());
  auto rep = model.training_step(batch, rng);
  CHECK(rep.grad_norm_backbone == 0.0);
  CHECK(rep.grad_norm_denoiser > 0.0);
  auto after = model.backbone_params();
  for (size_t i = 0; i < after.size(); ++i)
    for (int64_t k = 0; k < before[i].numel(); ++k) CHECK(after[i]->value()[k] == before[i][k]);

  model.set_training_mode(false, true, 0.5);
  auto rep2 = model.training_step(batch, rng);
  CHECK(rep2.grad_norm_backbone > 0.0);
}

TEST_CASE("set_training_mode alpha change shows up in the next report") {
  ModelConfig cfg = tiny_config();
  DiffCastModel model(cfg);
  Rng drng(37);
  std::vector<EventSample> batch = {random_event(cfg, 16, drng, "a")};
  Rng rng(41);
  model.set_training_mode(false, true, 0.9);
  auto rep = model.training_step(batch, rng);
  const real expect = 0.9 * rep.loss_denoising_sum() + 0.1 * rep.loss_deterministic;
  CHECK(std::abs(rep.loss_total - expect) < 1e-6);
}

TEST_CASE("non-finite loss aborts the step with diagnostics") {
  ModelConfig cfg = tiny_config();
  DiffCastModel model(cfg);
  // Poison one backbone parameter.
  model.backbone_params()[0]->var.value_mut()[0] = std::numeric_limits<real>::quiet_NaN();
  Rng drng(43);
  std::vector<EventSample> batch = {random_event(cfg, 16, drng, "a")};
  Rng rng(47);
  CHECK_THROWS_AS(model.training_step(batch, rng), TrainingDiverged);
}

TEST_CASE("teacher forcing provenance: ground truth in training, generated at inference") {
  ModelConfig cfg = tiny_config();
  DiffCastModel model(cfg);
  Rng drng(53);
  std::vector<EventSample> batch = {random_event(cfg, 16, drng, "a")};

  ConditioningTrace train_trace;
  Rng rng(59);
  model.training_step(batch, rng, {}, &train_trace);
  REQUIRE(train_trace.sources.size() == 2);
  CHECK(train_trace.sources[0] == "zero");
  CHECK(train_trace.sources[1] == "ground_truth");

  ConditioningTrace inf_trace;
  Rng frng(61);
  model.forecast(batch[0].x, frng, &inf_trace);
  REQUIRE(inf_trace.sources.size() == 2);
  CHECK(inf_trace.sources[0] == "zero");
  CHECK(inf_trace.sources[1] == "generated");
}

TEST_CASE("forecast: composition identity, determinism, shapes") {
  ModelConfig cfg = tiny_config();
  DiffCastModel model(cfg);
  Rng drng(67);
  EventSample ev = random_event(cfg, 16, drng, "a");

  Rng ra(71);
  Prediction p1 = model.forecast(ev.x, ra);
  CHECK(p1.mu.shape() == Shape{4, 16, 16, 1});
  CHECK(p1.y_hat.shape() == Shape{4, 16, 16, 1});
  for (int64_t i = 0; i < p1.y_hat.numel(); ++i) {
    CHECK(p1.y_hat[i] == p1.mu[i] + p1.residual_hat[i]);
    CHECK(p1.y_hat_clamped[i] >= 0.0);
    CHECK(p1.y_hat_clamped[i] <= 1.0);
  }

  Rng rb(71);
  Prediction p2 = model.forecast(ev.x, rb);
  for (int64_t i = 0; i < p1.y_hat.numel(); ++i) CHECK(p1.y_hat[i] == p2.y_hat[i]);

  SUBCASE("ddpm sampling path also runs and is seeded") {
    ModelConfig cfg2 = tiny_config();
    cfg2.sampler = Sampler::DDPM;
    cfg2.sample_steps = cfg2.T;
    DiffCastModel m2(cfg2);
    Rng rc(73), rd(73);
    Prediction q1 = m2.forecast(ev.x, rc);
    Prediction q2 = m2.forecast(ev.x, rd);
    for (int64_t i = 0; i < q1.y_hat.numel(); ++i) CHECK(q1.y_hat[i] == q2.y_hat[i]);
  }
}

TEST_CASE("forecast without GlobalNet produces valid shapes end-to-end") {
  ModelConfig cfg = tiny_config();
  cfg.use_globalnet = false;
  DiffCastModel model(cfg);
  CHECK(model.globalnet() == nullptr);
  Rng drng(79);
  EventSample ev = random_event(cfg, 16, drng, "a");
  Rng rng(83);
  Prediction p = model.forecast(ev.x, rng);
  CHECK(p.y_hat.shape() == Shape{4, 16, 16, 1});

  // And training runs with zero globalnet gradient group.
  Rng rng2(89);
  auto rep = model.training_step({ev}, rng2);
  CHECK(rep.grad_norm_globalnet == 0.0);
}

TEST_CASE("checkpoint round-trip preserves parameters and step counter") {
  ModelConfig cfg = tiny_config();
  DiffCastModel model(cfg);
  Rng drng(97);
  std::vector<EventSample> batch = {random_event(cfg, 16, drng, "a")};
  Rng rng(101);
  model.training_step(batch, rng);
  model.training_step(batch, rng);

  const std::string path = std::filesystem::temp_directory_path() / "diffcast_ckpt_test.bin";
  model.save_checkpoint(path);

  DiffCastModel fresh(cfg);
  fresh.load_checkpoint(path);
  CHECK(fresh.steps_taken() == model.steps_taken());
  auto a = model.denoiser_params();
  auto b = fresh.denoiser_params();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i)
    for (int64_t k = 0; k < a[i]->value().numel(); ++k) CHECK(a[i]->value()[k] == b[i]->value()[k]);

  // Architecture mismatch is rejected.
  ModelConfig other = cfg;
  other.hidden_size = 8;
  DiffCastModel wrong(other);
  CHECK_THROWS_WITH_AS(wrong.load_checkpoint(path), doctest::Contains("mismatch"), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("per-segment t variant runs") {
  ModelConfig cfg = tiny_config();
  cfg.per_segment_t = true;
  DiffCastModel model(cfg);
  Rng drng(103);
  std::vector<EventSample> batch = {random_event(cfg, 16, drng, "a")};
  Rng rng(107);
  auto rep = model.training_step(batch, rng);
  CHECK(std::isfinite(rep.loss_total));
}
