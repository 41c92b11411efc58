#include "diffcast/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace diffcast {

NoiseSchedule::NoiseSchedule(std::vector<real> betas, SigmaKind sigma_kind) : betas_(std::move(betas)) {
  if (betas_.empty()) throw std::invalid_argument("noise schedule needs T >= 1");
  alphas_.reserve(betas_.size());
  alpha_bars_.reserve(betas_.size());
  sigmas_.reserve(betas_.size());
  real running = 1.0;
  for (size_t i = 0; i < betas_.size(); ++i) {
    const real b = betas_[i];
    if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("beta_t must lie in (0,1)");
    const real a = 1.0 - b;
    alphas_.push_back(a);
    running *= a;
    alpha_bars_.push_back(running);
    if (sigma_kind == SigmaKind::SqrtBeta) {
      sigmas_.push_back(std::sqrt(b));
    } else {
      // beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t, abar_0 = 1.
      const real abar_prev = (i == 0) ? 1.0 : alpha_bars_[i - 1];
      const real beta_tilde = (1.0 - abar_prev) / (1.0 - running) * b;
      sigmas_.push_back(std::sqrt(std::max<real>(beta_tilde, 0.0)));
    }
  }
  for (size_t i = 1; i < alpha_bars_.size(); ++i)
    if (!(alpha_bars_[i] < alpha_bars_[i - 1]))
      throw std::logic_error("alpha_bar must be strictly decreasing");
}

size_t NoiseSchedule::at(int64_t t) const {
  if (t < 1 || t > steps()) throw std::out_of_range("diffusion step t out of [1,T]");
  return static_cast<size_t>(t - 1);
}

real NoiseSchedule::alpha_bar(int64_t t) const {
  if (t == 0) return 1.0;
  return alpha_bars_[at(t)];
}

NoiseSchedule make_linear_schedule(int64_t T, real beta_start, real beta_end, SigmaKind sigma_kind) {
  if (T < 1) throw std::invalid_argument("make_linear_schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
    throw std::invalid_argument("make_linear_schedule: need 0 < beta_start <= beta_end < 1");
  std::vector<real> betas(static_cast<size_t>(T));
  if (T == 1) {
    betas[0] = beta_start;
  } else {
    for (int64_t i = 0; i < T; ++i)
      betas[static_cast<size_t>(i)] =
          beta_start + (beta_end - beta_start) * static_cast<real>(i) / static_cast<real>(T - 1);
  }
  return NoiseSchedule(std::move(betas), sigma_kind);
}

Tensor forward_diffuse(const Tensor& x0, int64_t t, const Tensor& eps, const NoiseSchedule& sched) {
  check_same_shape(x0, eps, "forward_diffuse");
  if (t < 1 || t > sched.steps()) throw std::out_of_range("forward_diffuse: t out of [1,T]");
  const real abar = sched.alpha_bar(t);
  const real c0 = std::sqrt(abar);
  const real c1 = std::sqrt(1.0 - abar);
  Tensor out = x0;
  real* d = out.data();
  const real* e = eps.data();
  for (int64_t i = 0; i < out.numel(); ++i) d[i] = c0 * d[i] + c1 * e[i];
  return out;
}

Tensor ddpm_reverse_step(const Tensor& xt, int64_t t, const Tensor& eps_hat, const Tensor& noise,
                         const NoiseSchedule& sched) {
  check_same_shape(xt, eps_hat, "ddpm_reverse_step");
  check_same_shape(xt, noise, "ddpm_reverse_step");
  if (t < 1 || t > sched.steps()) throw std::out_of_range("ddpm_reverse_step: t out of [1,T]");
  if (t == 1) {
    for (int64_t i = 0; i < noise.numel(); ++i)
      if (noise[i] != 0.0) throw std::invalid_argument("ddpm_reverse_step: noise must be zero at t=1");
  }
  const real inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(t));
  const real coef = sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t));
  const real sigma = sched.posterior_sigma(t);
  Tensor out = xt;
  real* d = out.data();
  const real* e = eps_hat.data();
  const real* z = noise.data();
  for (int64_t i = 0; i < out.numel(); ++i) d[i] = inv_sqrt_alpha * (d[i] - coef * e[i]) + sigma * z[i];
  return out;
}

Tensor ddim_reverse_step(const Tensor& xt, int64_t t, int64_t t_prev, const Tensor& eps_hat,
                         const NoiseSchedule& sched, real eta, const Tensor* noise) {
  check_same_shape(xt, eps_hat, "ddim_reverse_step");
  if (t < 1 || t > sched.steps()) throw std::out_of_range("ddim_reverse_step: t out of [1,T]");
  if (t_prev < 0 || t_prev >= t) throw std::invalid_argument("ddim_reverse_step: need 0 <= t_prev < t");
  if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("ddim_reverse_step: eta out of [0,1]");
  const real abar_t = sched.alpha_bar(t);
  const real abar_prev = sched.alpha_bar(t_prev);
  // sigma^2 = eta^2 (1-abar_prev)/(1-abar_t) (1 - abar_t/abar_prev)
  const real sigma =
      eta * std::sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * std::sqrt(1.0 - abar_t / abar_prev);
  const real dir_coef = std::sqrt(std::max<real>(1.0 - abar_prev - sigma * sigma, 0.0));
  const real inv_sqrt_abar_t = 1.0 / std::sqrt(abar_t);
  const real sqrt_one_minus_abar_t = std::sqrt(1.0 - abar_t);
  const real sqrt_abar_prev = std::sqrt(abar_prev);

  if (sigma > 0.0 && noise == nullptr)
    throw std::invalid_argument("ddim_reverse_step: eta > 0 requires a noise tensor");
  if (noise) check_same_shape(xt, *noise, "ddim_reverse_step noise");

  Tensor out = xt;
  real* d = out.data();
  const real* e = eps_hat.data();
  for (int64_t i = 0; i < out.numel(); ++i) {
    const real x0_hat = (d[i] - sqrt_one_minus_abar_t * e[i]) * inv_sqrt_abar_t;
    real v = sqrt_abar_prev * x0_hat + dir_coef * e[i];
    if (sigma > 0.0) v += sigma * (*noise)[i];
    d[i] = v;
  }
  return out;
}

std::vector<int64_t> sampling_times(int64_t T, int64_t steps) {
  if (T < 1) throw std::invalid_argument("sampling_times: T must be >= 1");
  if (steps < 1 || steps > T) throw std::invalid_argument("sampling_times: need 1 <= steps <= T");
  std::vector<int64_t> times;
  if (steps == 1) {
    times.push_back(T);
    return times;
  }
  for (int64_t i = 0; i < steps; ++i) {
    const real f = static_cast<real>(i) / static_cast<real>(steps - 1);
    const int64_t t = T - static_cast<int64_t>(std::llround(f * static_cast<real>(T - 1)));
    if (times.empty() || times.back() != t) times.push_back(t);
  }
  return times;  // descending, starts at T, ends at 1
}

Tensor sample_loop(const DenoiseFn& denoiser, Shape shape, const NoiseSchedule& sched,
                   const SampleOptions& opts, Rng& rng) {
  const int64_t T = sched.steps();
  const int64_t steps = opts.steps == 0 ? T : opts.steps;
  if (steps > T) throw std::invalid_argument("sample_loop: sample_steps must be <= T");
  const std::vector<int64_t> times = sampling_times(T, steps);

  Tensor state = rng.normal_tensor(std::move(shape));
  for (size_t i = 0; i < times.size(); ++i) {
    const int64_t t = times[i];
    const bool last = (i + 1 == times.size());
    Tensor eps_hat = denoiser(state, t);
    if (!same_shape(eps_hat, state))
      throw std::runtime_error("sample_loop: denoiser returned shape " + eps_hat.shape_str() +
                               ", expected " + state.shape_str());
    if (opts.sampler == Sampler::DDPM) {
      Tensor noise = Tensor::zeros_like(state);
      if (!last && t > 1) rng.fill_normal(noise);
      state = ddpm_reverse_step(state, t, eps_hat, noise, sched);
    } else {
      const int64_t t_prev = last ? 0 : times[i + 1];
      if (opts.eta > 0.0) {
        Tensor noise = Tensor::zeros_like(state);
        if (t_prev > 0) rng.fill_normal(noise);
        state = ddim_reverse_step(state, t, t_prev, eps_hat, sched, opts.eta, &noise);
      } else {
        state = ddim_reverse_step(state, t, t_prev, eps_hat, sched, 0.0);
      }
    }
  }
  return state;
}

}  // namespace diffcast
