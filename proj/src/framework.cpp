#include "diffcast/framework.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "diffcast/checkpoint.hpp"

namespace diffcast {

using namespace ag;
using nn::Param;
using nn::Var;

Tensor compute_residual(const Tensor& y, const Tensor& mu) {
  check_same_shape(y, mu, "compute_residual");
  Tensor r = y;
  real* d = r.data();
  const real* m = mu.data();
  for (int64_t i = 0; i < r.numel(); ++i) d[i] -= m[i];
  return r;
}

std::vector<Segment> group_segments(const Tensor& r, int64_t K) {
  if (r.ndim() < 1) throw std::invalid_argument("group_segments: rank-0 input");
  if (K < 1) throw std::invalid_argument("group_segments: K must be >= 1");
  const int64_t L = r.size(0);
  if (L % K != 0) throw std::invalid_argument("group_segments: K must divide the sequence length");
  std::vector<Segment> out;
  out.reserve(static_cast<size_t>(L / K));
  for (int64_t j = 1; j <= L / K; ++j) out.push_back({r.slice_axis0((j - 1) * K, K), j});
  return out;
}

real TrainStepReport::loss_denoising_sum() const {
  real s = 0.0;
  for (real v : loss_denoising_per_segment) s += v;
  return s;
}

std::string TrainStepReport::to_json_line() const {
  nlohmann::json j;
  j["step"] = step;
  j["loss_total"] = loss_total;
  j["loss_deterministic"] = loss_deterministic;
  j["loss_denoising_per_segment"] = loss_denoising_per_segment;
  j["loss_denoising_sum"] = loss_denoising_sum();
  j["grad_norm_backbone"] = grad_norm_backbone;
  j["grad_norm_denoiser"] = grad_norm_denoiser;
  j["grad_norm_globalnet"] = grad_norm_globalnet;
  return j.dump();
}

DiffCastModel::DiffCastModel(ModelConfig cfg, int64_t data_channels)
    : cfg_(std::move(cfg)),
      data_channels_(data_channels),
      schedule_(make_linear_schedule(cfg_.T, cfg_.beta_start, cfg_.beta_end, cfg_.sigma_kind)),
      adam_(cfg_.lr) {
  const auto violations = validate_config(cfg_);
  if (!violations.empty()) {
    std::ostringstream os;
    os << "invalid ModelConfig:";
    for (const auto& v : violations) os << " [" << v << "]";
    throw std::invalid_argument(os.str());
  }
  Rng init(cfg_.seed);
  Rng rb = init.fork(1), rd = init.fork(2), rg = init.fork(3);
  backbone_ = make_backbone(cfg_, data_channels_, rb);
  denoiser_ = std::make_unique<GTUNet>(cfg_, data_channels_, rd);
  if (cfg_.use_globalnet) globalnet_ = std::make_unique<GlobalNet>(cfg_, data_channels_, rg);
}

std::vector<Param*> DiffCastModel::backbone_params() const { return backbone_->parameters(); }
std::vector<Param*> DiffCastModel::denoiser_params() const { return denoiser_->parameters(); }
std::vector<Param*> DiffCastModel::globalnet_params() const {
  return globalnet_ ? globalnet_->parameters() : std::vector<Param*>{};
}

void DiffCastModel::set_training_mode(bool frozen_backbone, bool use_globalnet, real alpha) {
  cfg_.frozen_backbone = frozen_backbone;
  if (use_globalnet && !globalnet_)
    // Built without GlobalNet; the toggle is recorded but there is no h path.
    use_globalnet = false;
  cfg_.use_globalnet = use_globalnet;
  cfg_.alpha = alpha;
}

namespace {

void validate_event(const EventSample& ev, const ModelConfig& cfg) {
  if (ev.x.length() != cfg.L_in)
    throw std::invalid_argument("event " + ev.id + ": x length != L_in");
  if (ev.y.length() != cfg.L_out)
    throw std::invalid_argument("event " + ev.id + ": y length != L_out");
  if (ev.x.height() != ev.y.height() || ev.x.width() != ev.y.width() ||
      ev.x.channels() != ev.y.channels())
    throw std::invalid_argument("event " + ev.id + ": x/y spatial or channel mismatch");
}

}  // namespace

TrainStepReport DiffCastModel::training_step(const std::vector<EventSample>& batch, Rng& rng,
                                             const TrainStepOptions& opts, ConditioningTrace* trace) {
  if (batch.empty()) throw std::invalid_argument("training_step: empty batch");
  const int64_t n_segments = cfg_.L_out / cfg_.K;
  const real inv_b = 1.0 / static_cast<real>(batch.size());

  backbone_->zero_grad();
  denoiser_->zero_grad();
  if (globalnet_) globalnet_->zero_grad();

  std::vector<Var> det_losses;
  std::vector<std::vector<Var>> den_losses(static_cast<size_t>(n_segments));

  for (const EventSample& ev : batch) {
    validate_event(ev, cfg_);
    Var x(to_nchw(ev.x.frames), false);
    Var y(to_nchw(ev.y.frames), false);

    Var mu = backbone_->predict(x);
    Var mu_used = cfg_.frozen_backbone ? detach(mu) : mu;

    Var r = sub(y, mu_used);

    GlobalHidden h;
    const bool use_g = cfg_.use_globalnet && globalnet_;
    if (use_g) h = globalnet_->encode(mu_used);

    // One diffusion step per batch item, shared across its segments.
    const int64_t t_shared = rng.uniform_int(1, cfg_.T);

    const Shape seg_shape = {cfg_.K, data_channels_, ev.y.height(), ev.y.width()};
    for (int64_t j = 1; j <= n_segments; ++j) {
      const int64_t t = cfg_.per_segment_t ? rng.uniform_int(1, cfg_.T) : t_shared;
      Var s_j = narrow(r, 0, (j - 1) * cfg_.K, cfg_.K);
      Var s_prev = (j == 1) ? Var(Tensor::zeros(seg_shape), false) : narrow(r, 0, (j - 2) * cfg_.K, cfg_.K);
      if (trace) trace->sources.push_back(j == 1 ? "zero" : "ground_truth");

      Tensor eps = rng.normal_tensor(seg_shape);
      const real c0 = std::sqrt(schedule_.alpha_bar(t));
      const real c1 = std::sqrt(1.0 - schedule_.alpha_bar(t));
      Tensor eps_scaled = eps;
      eps_scaled.scale_(c1);
      Var s_t = add(scale(s_j, c0), Var(std::move(eps_scaled), false));

      Var eps_hat = denoiser_->denoise(s_t, s_prev, use_g ? &h : nullptr, t, j);
      den_losses[static_cast<size_t>(j - 1)].push_back(mse(eps_hat, Var(eps, false)));
    }

    det_losses.push_back(mse(mu_used, y));
  }

  auto average = [&](const std::vector<Var>& terms) {
    Var acc = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return scale(acc, inv_b);
  };

  Var loss_det = average(det_losses);
  std::vector<Var> loss_den;
  for (auto& terms : den_losses) loss_den.push_back(average(terms));

  Var den_sum = loss_den[0];
  for (size_t i = 1; i < loss_den.size(); ++i) den_sum = add(den_sum, loss_den[i]);

  Var loss_total = opts.drop_deterministic_term
                       ? scale(den_sum, cfg_.alpha)
                       : add(scale(den_sum, cfg_.alpha), scale(loss_det, 1.0 - cfg_.alpha));

  TrainStepReport report;
  report.loss_total = loss_total.item();
  report.loss_deterministic = loss_det.item();
  for (const Var& v : loss_den) report.loss_denoising_per_segment.push_back(v.item());

  if (!std::isfinite(report.loss_total)) {
    std::ostringstream os;
    os << "training_step: non-finite loss (total=" << report.loss_total
       << ", deterministic=" << report.loss_deterministic << ", denoising=[";
    for (size_t i = 0; i < report.loss_denoising_per_segment.size(); ++i)
      os << (i ? "," : "") << report.loss_denoising_per_segment[i];
    os << "])";
    throw TrainingDiverged(os.str());
  }

  ag::backward(loss_total);

  report.grad_norm_backbone = nn::grad_norm(backbone_params());
  report.grad_norm_denoiser = nn::grad_norm(denoiser_params());
  report.grad_norm_globalnet = nn::grad_norm(globalnet_params());

  std::vector<Param*> update;
  if (!cfg_.frozen_backbone)
    for (Param* p : backbone_params()) update.push_back(p);
  for (Param* p : denoiser_params()) update.push_back(p);
  for (Param* p : globalnet_params()) update.push_back(p);
  adam_.step(update);

  report.step = adam_.steps_taken();
  return report;
}

Prediction DiffCastModel::forecast(const RadarSequence& x, Rng& rng, ConditioningTrace* trace) const {
  if (x.length() != cfg_.L_in) throw std::invalid_argument("forecast: input length != L_in");
  Var xv(to_nchw(x.frames), false);
  Var mu = backbone_->predict(xv);

  GlobalHidden h;
  const bool use_g = cfg_.use_globalnet && globalnet_;
  if (use_g) h = globalnet_->encode(mu);

  const int64_t n_segments = cfg_.L_out / cfg_.K;
  const Shape seg_shape = {cfg_.K, data_channels_, x.height(), x.width()};

  SampleOptions sample_opts;
  sample_opts.sampler = cfg_.sampler;
  sample_opts.steps = cfg_.sample_steps;
  sample_opts.eta = cfg_.ddim_eta;

  Tensor prev = Tensor::zeros(seg_shape);
  std::vector<Tensor> segments;
  for (int64_t j = 1; j <= n_segments; ++j) {
    if (trace) trace->sources.push_back(j == 1 ? "zero" : "generated");
    auto denoise_fn = [&](const Tensor& state, int64_t t) {
      return denoiser_->denoise_frames(state, prev, use_g ? &h : nullptr, t, j);
    };
    Tensor s_j = sample_loop(denoise_fn, seg_shape, schedule_, sample_opts, rng);
    segments.push_back(s_j);
    prev = std::move(s_j);
  }

  Tensor r_hat({cfg_.L_out, data_channels_, x.height(), x.width()});
  {
    int64_t offset = 0;
    for (const Tensor& s : segments) {
      std::copy_n(s.data(), s.numel(), r_hat.data() + offset);
      offset += s.numel();
    }
  }

  return make_prediction(from_nchw(mu.value()), from_nchw(r_hat));
}

void DiffCastModel::save_checkpoint(const std::string& path) const {
  checkpoint::save(path, *this);
}

void DiffCastModel::load_checkpoint(const std::string& path) {
  checkpoint::load_into(path, *this);
}

}  // namespace diffcast
