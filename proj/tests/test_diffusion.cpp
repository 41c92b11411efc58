#include <doctest.h>

#include <cmath>

#include "diffcast/diffusion.hpp"
#include "testing_util.hpp"

using namespace diffcast;
using diffcast::testing::random_tensor;

TEST_CASE("linear schedule: hand-computed products at T=4") {
  NoiseSchedule s = make_linear_schedule(4, 0.1, 0.4);
  CHECK(s.beta(1) == doctest::Approx(0.1));
  CHECK(s.beta(2) == doctest::Approx(0.2));
  CHECK(s.beta(3) == doctest::Approx(0.3));
  CHECK(s.beta(4) == doctest::Approx(0.4));
  CHECK(s.alpha_bar(1) == doctest::Approx(0.9));
  CHECK(s.alpha_bar(2) == doctest::Approx(0.72));
  CHECK(s.alpha_bar(3) == doctest::Approx(0.504));
  CHECK(s.alpha_bar(4) == doctest::Approx(0.3024));
}

TEST_CASE("linear schedule: single step") {
  NoiseSchedule s = make_linear_schedule(1, 0.07, 0.07);
  CHECK(s.alpha_bar(1) == doctest::Approx(1.0 - 0.07));
}

TEST_CASE("linear schedule: golden running product at the paper-standard setting") {
  NoiseSchedule s = make_linear_schedule(1000, 1e-4, 0.02);
  // Frozen from an independent high-precision product oracle.
  CHECK(s.alpha_bar(1000) == doctest::Approx(4.0358297653756833e-05).epsilon(1e-10));
  // Re-derive with an in-test long double oracle as well.
  long double prod = 1.0L;
  for (int i = 0; i < 1000; ++i) {
    const long double beta = 1e-4L + (0.02L - 1e-4L) * static_cast<long double>(i) / 999.0L;
    prod *= (1.0L - beta);
  }
  CHECK(s.alpha_bar(1000) == doctest::Approx(static_cast<double>(prod)).epsilon(1e-12));
}

TEST_CASE("schedule invariants: monotone alpha_bar, valid betas, sigma options") {
  NoiseSchedule s = make_linear_schedule(50, 1e-4, 0.2);
  for (int64_t t = 1; t <= 50; ++t) {
    CHECK(s.beta(t) > 0.0);
    CHECK(s.beta(t) < 1.0);
    if (t > 1) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    CHECK(s.posterior_sigma(t) >= 0.0);
    CHECK(s.posterior_sigma(t) == doctest::Approx(std::sqrt(s.beta(t))));
  }
  CHECK(s.alpha_bar(50) < s.alpha_bar(1));
  CHECK(s.alpha_bar(1) <= 1.0);

  NoiseSchedule sp = make_linear_schedule(50, 1e-4, 0.2, SigmaKind::Posterior);
  CHECK(sp.posterior_sigma(1) == doctest::Approx(0.0));  // beta_tilde_1 = 0
  for (int64_t t = 2; t <= 50; ++t) {
    const real beta_tilde = (1.0 - sp.alpha_bar(t - 1)) / (1.0 - sp.alpha_bar(t)) * sp.beta(t);
    CHECK(sp.posterior_sigma(t) == doctest::Approx(std::sqrt(beta_tilde)));
  }
}

TEST_CASE("schedule rejects invalid endpoints") {
  CHECK_THROWS_AS(make_linear_schedule(0, 0.1, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_linear_schedule(10, 0.0, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_linear_schedule(10, 0.3, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_linear_schedule(10, 0.1, 1.0), std::invalid_argument);
}

TEST_CASE("forward_diffuse limit cases") {
  NoiseSchedule s = make_linear_schedule(4, 0.1, 0.4);
  Rng rng(5);
  Tensor x0 = random_tensor({2, 3}, rng);
  Tensor zero = Tensor::zeros({2, 3});
  Tensor eps = random_tensor({2, 3}, rng);

  Tensor no_noise = forward_diffuse(x0, 2, zero, s);
  for (int64_t i = 0; i < x0.numel(); ++i)
    CHECK(no_noise[i] == doctest::Approx(std::sqrt(0.72) * x0[i]));

  Tensor pure_noise = forward_diffuse(zero, 3, eps, s);
  for (int64_t i = 0; i < eps.numel(); ++i)
    CHECK(pure_noise[i] == doctest::Approx(std::sqrt(1.0 - 0.504) * eps[i]));

  CHECK_THROWS_AS(forward_diffuse(x0, 0, eps, s), std::out_of_range);
  CHECK_THROWS_AS(forward_diffuse(x0, 5, eps, s), std::out_of_range);
  Tensor bad = Tensor::zeros({2, 2});
  CHECK_THROWS_AS(forward_diffuse(x0, 1, bad, s), std::invalid_argument);
}

TEST_CASE("ddpm reverse step: frozen scalar example") {
  // betas {0.2, 0.1} give alpha_2 = 0.9, abar_2 = 0.72 as in the worked example.
  NoiseSchedule s(std::vector<real>{0.2, 0.1}, SigmaKind::SqrtBeta);
  REQUIRE(s.alpha(2) == doctest::Approx(0.9));
  REQUIRE(s.alpha_bar(2) == doctest::Approx(0.72));
  Tensor xt = Tensor::scalar(1.0);
  Tensor eps_hat = Tensor::scalar(0.5);
  Tensor noise = Tensor::scalar(0.0);
  Tensor out = ddpm_reverse_step(xt, 2, eps_hat, noise, s);
  CHECK(out[0] == doctest::Approx(0.9544901692782604).epsilon(1e-12));
}

TEST_CASE("ddpm reverse step: eps_hat=0 collapses to xt/sqrt(alpha)") {
  NoiseSchedule s = make_linear_schedule(4, 0.1, 0.4);
  Rng rng(7);
  Tensor xt = random_tensor({3, 3}, rng);
  Tensor out = ddpm_reverse_step(xt, 3, Tensor::zeros({3, 3}), Tensor::zeros({3, 3}), s);
  for (int64_t i = 0; i < xt.numel(); ++i)
    CHECK(out[i] == doctest::Approx(xt[i] / std::sqrt(s.alpha(3))));
}

TEST_CASE("ddpm reverse step rejects nonzero noise at t=1") {
  NoiseSchedule s = make_linear_schedule(4, 0.1, 0.4);
  Tensor x = Tensor::scalar(1.0);
  Tensor nz = Tensor::scalar(0.3);
  CHECK_THROWS_AS(ddpm_reverse_step(x, 1, x, nz, s), std::invalid_argument);
  CHECK_THROWS_AS(ddpm_reverse_step(x, 0, x, Tensor::scalar(0.0), s), std::out_of_range);
  CHECK_THROWS_AS(ddpm_reverse_step(x, 9, x, Tensor::scalar(0.0), s), std::out_of_range);
}

TEST_CASE("ddpm round-trip: reversing the forward mean with the true eps") {
  // x_t = sqrt(abar) x0 + sqrt(1-abar) eps reversed with eps_hat = eps and
  // noise = 0 must land on the noiseless posterior mean mu_t, checked on
  // random scalars against an independent evaluation of the formula.
  NoiseSchedule s = make_linear_schedule(10, 0.05, 0.3);
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t t = rng.uniform_int(1, 10);
    const real x0 = rng.normal();
    const real eps = rng.normal();
    Tensor xt = forward_diffuse(Tensor::scalar(x0), t, Tensor::scalar(eps), s);
    Tensor rec = ddpm_reverse_step(xt, t, Tensor::scalar(eps), Tensor::scalar(0.0), s);
    const real mu = (xt[0] - s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t)) * eps) / std::sqrt(s.alpha(t));
    CHECK(rec[0] == doctest::Approx(mu).epsilon(1e-12));
  }
}

TEST_CASE("ddim with the true eps recovers the interpolation at t_prev") {
  // Substitute-and-simplify: if eps_hat equals the eps used in the forward
  // corruption, the eta=0 step yields sqrt(abar_prev) x0 + sqrt(1-abar_prev) eps.
  NoiseSchedule s = make_linear_schedule(20, 0.02, 0.3);
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t t = rng.uniform_int(2, 20);
    const int64_t t_prev = rng.uniform_int(1, t - 1);
    const real x0 = rng.normal();
    const real eps = rng.normal();
    Tensor xt = forward_diffuse(Tensor::scalar(x0), t, Tensor::scalar(eps), s);
    Tensor out = ddim_reverse_step(xt, t, t_prev, Tensor::scalar(eps), s, 0.0);
    const real expect = std::sqrt(s.alpha_bar(t_prev)) * x0 + std::sqrt(1.0 - s.alpha_bar(t_prev)) * eps;
    CHECK(out[0] == doctest::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("ddim terminal step returns x0_hat exactly") {
  NoiseSchedule s = make_linear_schedule(10, 0.05, 0.3);
  Rng rng(17);
  Tensor xt = random_tensor({4}, rng);
  Tensor eps_hat = random_tensor({4}, rng);
  Tensor out = ddim_reverse_step(xt, 6, 0, eps_hat, s, 0.0);
  for (int64_t i = 0; i < 4; ++i) {
    const real x0_hat = (xt[i] - std::sqrt(1.0 - s.alpha_bar(6)) * eps_hat[i]) / std::sqrt(s.alpha_bar(6));
    CHECK(out[i] == doctest::Approx(x0_hat).epsilon(1e-12));
  }
  CHECK_THROWS_AS(ddim_reverse_step(xt, 3, 5, eps_hat, s, 0.0), std::invalid_argument);
}

TEST_CASE("ddim eta=0 is a pure function of its inputs") {
  NoiseSchedule s = make_linear_schedule(10, 0.05, 0.3);
  Rng rng(19);
  Tensor xt = random_tensor({5}, rng);
  Tensor eps_hat = random_tensor({5}, rng);
  Tensor a = ddim_reverse_step(xt, 8, 3, eps_hat, s, 0.0);
  Tensor b = ddim_reverse_step(xt, 8, 3, eps_hat, s, 0.0);
  for (int64_t i = 0; i < 5; ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("sampling_times covers both endpoints with a uniform stride") {
  auto t1 = sampling_times(100, 4);
  REQUIRE(t1.size() == 4);
  CHECK(t1.front() == 100);
  CHECK(t1.back() == 1);
  for (size_t i = 1; i < t1.size(); ++i) CHECK(t1[i] < t1[i - 1]);

  auto t2 = sampling_times(7, 7);
  REQUIRE(t2.size() == 7);
  for (int64_t i = 0; i < 7; ++i) CHECK(t2[static_cast<size_t>(i)] == 7 - i);

  CHECK(sampling_times(50, 1) == std::vector<int64_t>{50});
}

TEST_CASE("sample_loop with a zero denoiser matches the closed-form rescale") {
  // DDIM, eta=0, eps_hat = 0: every step multiplies by sqrt(abar_prev/abar_t),
  // so the loop telescopes to x_T / sqrt(abar_T).
  NoiseSchedule s = make_linear_schedule(40, 0.01, 0.2);
  SampleOptions opts{Sampler::DDIM, 8, 0.0};
  auto zero_denoiser = [](const Tensor& state, int64_t) { return Tensor::zeros_like(state); };

  Rng rng_a(23);
  Tensor out = sample_loop(zero_denoiser, {3, 2}, s, opts, rng_a);
  Rng rng_b(23);
  Tensor init = rng_b.normal_tensor({3, 2});
  for (int64_t i = 0; i < out.numel(); ++i)
    CHECK(out[i] == doctest::Approx(init[i] / std::sqrt(s.alpha_bar(40))).epsilon(1e-10));
}

TEST_CASE("sample_loop ddpm with steps=T reproduces the per-step recursion") {
  NoiseSchedule s = make_linear_schedule(6, 0.05, 0.3);
  SampleOptions opts{Sampler::DDPM, 6, 0.0};
  auto denoiser = [](const Tensor& state, int64_t t) {
    Tensor e = state;
    e.scale_(0.1 * static_cast<real>(t));
    return e;
  };
  Rng rng_a(29);
  Tensor got = sample_loop(denoiser, {2, 2}, s, opts, rng_a);

  Rng rng_b(29);
  Tensor state = rng_b.normal_tensor({2, 2});
  for (int64_t t = 6; t >= 1; --t) {
    Tensor eps_hat = denoiser(state, t);
    Tensor noise = Tensor::zeros_like(state);
    if (t > 1) rng_b.fill_normal(noise);
    state = ddpm_reverse_step(state, t, eps_hat, noise, s);
  }
  for (int64_t i = 0; i < got.numel(); ++i) CHECK(got[i] == state[i]);
}

TEST_CASE("sample_loop is bit-reproducible under a fixed seed") {
  NoiseSchedule s = make_linear_schedule(30, 0.01, 0.2);
  auto denoiser = [](const Tensor& state, int64_t t) {
    Tensor e = state;
    e.scale_(0.05 * static_cast<real>(t % 3));
    return e;
  };
  for (Sampler sampler : {Sampler::DDIM, Sampler::DDPM}) {
    SampleOptions opts{sampler, 10, 0.0};
    Rng a(31), b(31);
    Tensor ra = sample_loop(denoiser, {2, 3}, s, opts, a);
    Tensor rb = sample_loop(denoiser, {2, 3}, s, opts, b);
    for (int64_t i = 0; i < ra.numel(); ++i) CHECK(ra[i] == rb[i]);
  }
}

TEST_CASE("sample_loop surfaces denoiser shape violations") {
  NoiseSchedule s = make_linear_schedule(10, 0.05, 0.2);
  SampleOptions opts{Sampler::DDIM, 4, 0.0};
  auto bad = [](const Tensor&, int64_t) { return Tensor::zeros({1, 1}); };
  Rng rng(37);
  CHECK_THROWS_WITH_AS(sample_loop(bad, {2, 2}, s, opts, rng), doctest::Contains("denoiser returned shape"),
                       std::runtime_error);
}

TEST_CASE("forward marginal variance matches the closed form within 5%") {
  // Var(x_t) = abar_t * Var(x0) + (1 - abar_t) = 1 for unit-variance x0.
  NoiseSchedule s = make_linear_schedule(100, 1e-3, 0.1);
  Rng rng(41);
  const int64_t n = 100000;
  for (int64_t t : {int64_t(1), int64_t(50), int64_t(100)}) {
    real sum = 0.0, sum2 = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      Tensor x0 = Tensor::scalar(rng.normal());
      Tensor eps = Tensor::scalar(rng.normal());
      const real v = forward_diffuse(x0, t, eps, s)[0];
      sum += v;
      sum2 += v * v;
    }
    const real mean = sum / n;
    const real var = sum2 / n - mean * mean;
    CHECK(std::abs(var - 1.0) < 0.05);
  }
}
