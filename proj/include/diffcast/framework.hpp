#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "diffcast/backbones.hpp"
#include "diffcast/core.hpp"
#include "diffcast/diffusion.hpp"
#include "diffcast/gtunet.hpp"

namespace diffcast {

// K-frame slice of a residual sequence; index 0 is the reserved zero segment.
struct Segment {
  Tensor value;  // [K, ...]
  int64_t index = 0;
};

// r = y - mu, exact elementwise subtraction.
Tensor compute_residual(const Tensor& y, const Tensor& mu);

// Disjoint, covering, order-preserving K-frame segments of r along axis 0,
// indexed from 1. Requires K to divide the leading dimension.
std::vector<Segment> group_segments(const Tensor& r, int64_t K);

struct TrainStepReport {
  real loss_total = 0.0;
  real loss_deterministic = 0.0;
  std::vector<real> loss_denoising_per_segment;
  real grad_norm_backbone = 0.0;
  real grad_norm_denoiser = 0.0;
  real grad_norm_globalnet = 0.0;
  int64_t step = 0;

  real loss_denoising_sum() const;
  std::string to_json_line() const;
};

// Conditioning-provenance instrumentation: one entry per segment processed,
// "zero" | "ground_truth" | "generated".
struct ConditioningTrace {
  std::vector<std::string> sources;
};

struct TrainStepOptions {
  // Diagnostic: drop the (1-alpha)*L_P term so only the denoising loss drives
  // gradients. Reports still include the true deterministic loss.
  bool drop_deterministic_term = false;
};

class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(const std::string& what) : std::runtime_error(what) {}
};

// The composed model: deterministic backbone, GTUNet denoiser, optional
// GlobalNet, schedule, and the Adam optimizer over all three groups.
class DiffCastModel {
 public:
  DiffCastModel(ModelConfig cfg, int64_t data_channels = 1);

  const ModelConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  DeterministicPredictor& backbone() { return *backbone_; }
  GTUNet& denoiser() { return *denoiser_; }
  GlobalNet* globalnet() { return globalnet_.get(); }
  const DeterministicPredictor& backbone() const { return *backbone_; }
  const GTUNet& denoiser() const { return *denoiser_; }
  const GlobalNet* globalnet() const { return globalnet_.get(); }

  std::vector<nn::Param*> backbone_params() const;
  std::vector<nn::Param*> denoiser_params() const;
  std::vector<nn::Param*> globalnet_params() const;

  // One pass of the training algorithm over a batch; applies one Adam update.
  TrainStepReport training_step(const std::vector<EventSample>& batch, Rng& rng,
                                const TrainStepOptions& opts = {}, ConditioningTrace* trace = nullptr);

  // Full autoregressive forecast for one conditioning sequence.
  Prediction forecast(const RadarSequence& x, Rng& rng, ConditioningTrace* trace = nullptr) const;

  // Runtime toggles. use_globalnet can only be disabled at runtime when the
  // model was built with it; re-enabling after a runtime disable is allowed.
  void set_training_mode(bool frozen_backbone, bool use_globalnet, real alpha);

  int64_t steps_taken() const { return adam_.steps_taken(); }
  nn::Adam& optimizer() { return adam_; }

  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

 private:
  ModelConfig cfg_;
  int64_t data_channels_;
  NoiseSchedule schedule_;
  std::unique_ptr<DeterministicPredictor> backbone_;
  std::unique_ptr<GTUNet> denoiser_;
  std::unique_ptr<GlobalNet> globalnet_;
  nn::Adam adam_;
};

}  // namespace diffcast
