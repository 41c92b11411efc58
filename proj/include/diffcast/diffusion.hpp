#pragma once

#include <functional>
#include <vector>

#include "diffcast/core.hpp"
#include "diffcast/rng.hpp"
#include "diffcast/tensor.hpp"

namespace diffcast {

// Coefficient tables for a T-step diffusion process. Step indices are
// 1-based to match the usual t = 1..T convention; alpha_bar(0) == 1.
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<real> betas, SigmaKind sigma_kind);

  int64_t steps() const { return static_cast<int64_t>(betas_.size()); }
  real beta(int64_t t) const { return betas_[at(t)]; }
  real alpha(int64_t t) const { return alphas_[at(t)]; }
  real alpha_bar(int64_t t) const;
  real posterior_sigma(int64_t t) const { return sigmas_[at(t)]; }

  const std::vector<real>& betas() const { return betas_; }
  const std::vector<real>& alphas() const { return alphas_; }
  const std::vector<real>& alpha_bars() const { return alpha_bars_; }
  const std::vector<real>& posterior_sigmas() const { return sigmas_; }

 private:
  size_t at(int64_t t) const;
  std::vector<real> betas_, alphas_, alpha_bars_, sigmas_;
};

NoiseSchedule make_linear_schedule(int64_t T, real beta_start, real beta_end,
                                   SigmaKind sigma_kind = SigmaKind::SqrtBeta);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, t in [1,T].
Tensor forward_diffuse(const Tensor& x0, int64_t t, const Tensor& eps, const NoiseSchedule& sched);

// x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) eps_hat)/sqrt(alpha_t) + sigma_t * noise.
// noise must be all-zero when t == 1.
Tensor ddpm_reverse_step(const Tensor& xt, int64_t t, const Tensor& eps_hat, const Tensor& noise,
                         const NoiseSchedule& sched);

// Implicit step from level t to t_prev < t; eta = 0 is fully deterministic.
// noise is only consumed when eta > 0 (pass nullptr for eta == 0).
Tensor ddim_reverse_step(const Tensor& xt, int64_t t, int64_t t_prev, const Tensor& eps_hat,
                         const NoiseSchedule& sched, real eta, const Tensor* noise = nullptr);

// Strictly decreasing t-subsequence covering [1,T]: both endpoints included,
// uniformly strided in between.
std::vector<int64_t> sampling_times(int64_t T, int64_t steps);

struct SampleOptions {
  Sampler sampler = Sampler::DDIM;
  int64_t steps = 0;  // 0 means "all T steps"
  real eta = 0.0;
};

// Denoiser callback: conditioning is bound by the caller.
using DenoiseFn = std::function<Tensor(const Tensor& state, int64_t t)>;

// Draws x_T from the standard normal, applies reverse steps, returns x_0.
Tensor sample_loop(const DenoiseFn& denoiser, Shape shape, const NoiseSchedule& sched,
                   const SampleOptions& opts, Rng& rng);

}  // namespace diffcast
