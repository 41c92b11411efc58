#include <doctest.h>

#include <cmath>

#include "diffcast/metrics.hpp"
#include "diffcast/rng.hpp"
#include "testing_util.hpp"

using namespace diffcast;
using namespace diffcast::metrics;

namespace {

Tensor random_mask(int64_t h, int64_t w, Rng& rng, real p = 0.4) {
  Tensor m({h, w});
  for (int64_t i = 0; i < m.numel(); ++i) m[i] = rng.bernoulli(p) ? 1.0 : 0.0;
  return m;
}

// Independent per-pixel enumeration.
ConfusionCounts brute_counts(const Tensor& pred, const Tensor& truth) {
  ConfusionCounts c;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    const bool p = pred[i] == 1.0, t = truth[i] == 1.0;
    if (p && t) ++c.tp;
    if (p && !t) ++c.fp;
    if (!p && t) ++c.fn;
    if (!p && !t) ++c.tn;
  }
  return c;
}

}  // namespace

TEST_CASE("binarize: thresholds in physical units with >= boundary") {
  Tensor zeros({2, 2});
  Tensor out = binarize(zeros, 16.0, {0.0, 255.0});
  for (int64_t i = 0; i < 4; ++i) CHECK(out[i] == 0.0);

  // Value exactly at the threshold maps to 1.
  Tensor at({1}, {20.0 / 255.0});
  CHECK(binarize(at, 20.0, {0.0, 255.0})[0] == 1.0);

  Tensor frame({2, 2}, {10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0, 5.0 / 255.0});
  Tensor mask = binarize(frame, 20.0, {0.0, 255.0});
  CHECK(mask[0] == 0.0);
  CHECK(mask[1] == 1.0);
  CHECK(mask[2] == 1.0);
  CHECK(mask[3] == 0.0);

  CHECK_THROWS_AS(binarize(frame, 300.0, {0.0, 255.0}), std::invalid_argument);
}

TEST_CASE("confusion_counts: exact cases plus brute-force oracle") {
  Rng rng(3);
  Tensor same = random_mask(4, 4, rng);
  ConfusionCounts c = confusion_counts(same, same);
  CHECK(c.fp == 0);
  CHECK(c.fn == 0);
  CHECK(c.tp == static_cast<int64_t>(same.sum()));
  CHECK(c.total() == 16);

  Tensor comp = same;
  for (int64_t i = 0; i < comp.numel(); ++i) comp[i] = 1.0 - comp[i];
  ConfusionCounts cc = confusion_counts(same, comp);
  CHECK(cc.tp == 0);
  CHECK(cc.tn == 0);

  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_mask(8, 8, rng);
    Tensor b = random_mask(8, 8, rng);
    ConfusionCounts got = confusion_counts(a, b);
    ConfusionCounts want = brute_counts(a, b);
    CHECK(got.tp == want.tp);
    CHECK(got.fp == want.fp);
    CHECK(got.fn == want.fn);
    CHECK(got.tn == want.tn);
  }

  Tensor notbin({1}, {0.5});
  CHECK_THROWS_AS(confusion_counts(notbin, notbin), std::invalid_argument);
}

TEST_CASE("csi: formula, conventions, and IoU equivalence") {
  CHECK(csi({10, 0, 0, 6}) == 1.0);
  CHECK(csi({0, 3, 4, 9}) == 0.0);
  CHECK(csi({2, 1, 1, 0}) == doctest::Approx(0.5));
  CHECK(csi({0, 0, 0, 5}) == 0.0);  // 0/0 convention

  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor a = random_mask(8, 8, rng);
    Tensor b = random_mask(8, 8, rng);
    // IoU computed independently.
    int64_t inter = 0, uni = 0;
    for (int64_t i = 0; i < 64; ++i) {
      if (a[i] == 1.0 && b[i] == 1.0) ++inter;
      if (a[i] == 1.0 || b[i] == 1.0) ++uni;
    }
    const real iou = uni == 0 ? 0.0 : static_cast<real>(inter) / static_cast<real>(uni);
    CHECK(csi(confusion_counts(a, b)) == doctest::Approx(iou).epsilon(1e-12));
  }
}

TEST_CASE("hss: formula, chance level, frozen value, swap symmetry") {
  CHECK(hss({5, 0, 0, 7}) == 1.0);
  CHECK(hss({1, 1, 1, 1}) == 0.0);  // marginal-matched chance forecast
  CHECK(hss({3, 1, 1, 11}) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(hss({0, 0, 0, 0}) == 0.0);

  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    ConfusionCounts c{rng.uniform_int(0, 20), rng.uniform_int(0, 20), rng.uniform_int(0, 20),
                      rng.uniform_int(0, 20)};
    ConfusionCounts swapped{c.tn, c.fn, c.fp, c.tp};
    CHECK(hss(c) == doctest::Approx(hss(swapped)).epsilon(1e-12));
  }
}

TEST_CASE("pooled_csi: degenerate pool equals csi; near-miss is forgiven") {
  Rng rng(13);
  Tensor pred({4, 4}), truth({4, 4});
  for (int64_t i = 0; i < 16; ++i) {
    pred[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    truth[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  }
  const real plain = csi(confusion_counts(pred, truth));
  CHECK(pooled_csi(pred, truth, 0.5, 1, {0.0, 1.0}) == doctest::Approx(plain).epsilon(1e-12));

  // Single hit displaced by one pixel inside one pooled cell.
  Tensor p2({4, 4}), t2({4, 4});
  p2[0 * 4 + 1] = 1.0;  // (0,1)
  t2[0 * 4 + 0] = 1.0;  // (0,0)
  CHECK(csi(confusion_counts(p2, t2)) == 0.0);
  CHECK(pooled_csi(p2, t2, 0.5, 2, {0.0, 1.0}) == 1.0);

  Tensor zero({4, 4});
  CHECK(pooled_csi(zero, zero, 0.5, 2, {0.0, 1.0}) == 0.0);

  Tensor odd({3, 3});
  CHECK_THROWS_AS(pooled_csi(odd, odd, 0.5, 2, {0.0, 1.0}), std::invalid_argument);
}

TEST_CASE("ssim: identity, constant offset closed form, inverted checkerboard") {
  Rng rng(17);
  Tensor frame({12, 12});
  for (int64_t i = 0; i < frame.numel(); ++i) frame[i] = rng.uniform();
  CHECK(ssim(frame, frame) == doctest::Approx(1.0).epsilon(1e-12));

  // Constant vs constant: variances and covariance vanish, leaving the
  // luminance term only; scalar oracle evaluated independently.
  const real a = 0.4, b = 0.55;
  Tensor ca = Tensor::full({12, 12}, a);
  Tensor cb = Tensor::full({12, 12}, b);
  const real C1 = 0.01 * 0.01;
  const real expect = (2.0 * a * b + C1) / (a * a + b * b + C1);
  CHECK(ssim(ca, cb) == doctest::Approx(expect).epsilon(1e-12));

  Tensor board({12, 12}), inv({12, 12});
  for (int64_t i = 0; i < 12; ++i)
    for (int64_t j = 0; j < 12; ++j) {
      board[i * 12 + j] = static_cast<real>((i + j) % 2);
      inv[i * 12 + j] = 1.0 - board[i * 12 + j];
    }
  CHECK(ssim(board, inv) < 0.0);

  Tensor small({8, 8});
  CHECK_THROWS_AS(ssim(small, small), std::invalid_argument);   // smaller than 11x11 window
  CHECK_NOTHROW(ssim(small, small, 5));                          // explicit smaller window
}

TEST_CASE("evaluate: perfect forecast scores 1 everywhere") {
  Rng rng(19);
  std::vector<Prediction> preds;
  std::vector<RadarSequence> targets;
  for (int e = 0; e < 3; ++e) {
    Tensor y({4, 16, 16, 1});
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = rng.uniform();
    targets.push_back(RadarSequence{y, {0.0, 1.0}});
    preds.push_back(make_prediction(y, Tensor::zeros_like(y)));
  }
  MetricReport rep = evaluate(preds, targets, {0.2, 0.4, 0.6, 0.8}, {4, 16}, 5);
  CHECK(rep.mean_csi == doctest::Approx(1.0));
  CHECK(rep.mean_hss == doctest::Approx(1.0));
  CHECK(rep.ssim == doctest::Approx(1.0));
  REQUIRE(rep.framewise_csi.size() == 4);
  for (real v : rep.framewise_csi) CHECK(v == doctest::Approx(1.0));
  for (const auto& [thr, s] : rep.per_threshold) {
    CHECK(s.csi == doctest::Approx(1.0));
    CHECK(s.csi_pool4 == doctest::Approx(1.0));
    CHECK(s.csi_pool16 == doctest::Approx(1.0));
  }
}

TEST_CASE("evaluate: single event matches an un-batched oracle") {
  Rng rng(23);
  Tensor y({2, 16, 16, 1});
  Tensor yhat({2, 16, 16, 1});
  for (int64_t i = 0; i < y.numel(); ++i) {
    y[i] = rng.uniform();
    yhat[i] = rng.uniform();
  }
  RadarSequence target{y, {0.0, 1.0}};
  Prediction pred = make_prediction(yhat, Tensor::zeros_like(yhat));

  MetricReport rep = evaluate({pred}, {target}, {0.5}, {4}, 5);

  // Oracle: accumulate counts over frames directly.
  ConfusionCounts total;
  real ssim_sum = 0.0;
  for (int64_t f = 0; f < 2; ++f) {
    Tensor pf = pred.y_hat_clamped.slice_axis0(f, 1).reshaped({16, 16});
    Tensor tf = y.slice_axis0(f, 1).reshaped({16, 16});
    total += confusion_counts(binarize(pf, 0.5, {0.0, 1.0}), binarize(tf, 0.5, {0.0, 1.0}));
    ssim_sum += ssim(pf, tf, 5);
  }
  CHECK(rep.per_threshold.at(0.5).csi == doctest::Approx(csi(total)).epsilon(1e-12));
  CHECK(rep.per_threshold.at(0.5).hss == doctest::Approx(hss(total)).epsilon(1e-12));
  CHECK(rep.ssim == doctest::Approx(ssim_sum / 2.0).epsilon(1e-12));
}

TEST_CASE("evaluate is permutation-invariant over events") {
  Rng rng(29);
  std::vector<Prediction> preds;
  std::vector<RadarSequence> targets;
  for (int e = 0; e < 4; ++e) {
    Tensor y({2, 16, 16, 1}), m({2, 16, 16, 1});
    for (int64_t i = 0; i < y.numel(); ++i) {
      y[i] = rng.uniform();
      m[i] = rng.uniform();
    }
    targets.push_back(RadarSequence{y, {0.0, 1.0}});
    preds.push_back(make_prediction(m, Tensor::zeros_like(m)));
  }
  MetricReport a = evaluate(preds, targets, {0.3, 0.7}, {4}, 5);
  std::vector<Prediction> rp = {preds[2], preds[0], preds[3], preds[1]};
  std::vector<RadarSequence> rt = {targets[2], targets[0], targets[3], targets[1]};
  MetricReport b = evaluate(rp, rt, {0.3, 0.7}, {4}, 5);
  CHECK(a.mean_csi == doctest::Approx(b.mean_csi).epsilon(1e-12));
  CHECK(a.mean_hss == doctest::Approx(b.mean_hss).epsilon(1e-12));
  CHECK(a.ssim == doctest::Approx(b.ssim).epsilon(1e-12));

  CHECK_THROWS_AS(evaluate(preds, {targets[0]}, {0.3}, {4}, 5), std::invalid_argument);
}
