#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffcast/tensor.hpp"

namespace diffcast {

enum class Sampler { DDPM, DDIM };
enum class SigmaKind { SqrtBeta, Posterior };
enum class BackboneKind { ConvGRU, SimVP };

std::string to_string(Sampler s);
std::string to_string(SigmaKind s);
std::string to_string(BackboneKind b);

struct DataRange {
  real lo = 0.0;
  real hi = 1.0;
};

// Radar frames normalized to [0,1]; data_range remembers the physical scale.
struct RadarSequence {
  Tensor frames;  // [L, H, W, C]
  DataRange data_range;

  int64_t length() const { return frames.size(0); }
  int64_t height() const { return frames.size(1); }
  int64_t width() const { return frames.size(2); }
  int64_t channels() const { return frames.size(3); }
};

struct EventSample {
  RadarSequence x;
  RadarSequence y;
  std::string id;
};

struct ModelConfig {
  int64_t L_in = 5;
  int64_t L_out = 20;
  int64_t K = 5;
  int64_t T = 1000;
  int64_t sample_steps = 250;
  real alpha = 0.5;
  int64_t hidden_size = 64;
  std::vector<int64_t> channel_mults = {1, 2, 4, 8};
  int64_t depth = 4;
  Sampler sampler = Sampler::DDIM;
  bool frozen_backbone = false;
  bool use_globalnet = true;
  uint64_t seed = 0;
  // Documented extensions beyond the base field set.
  real beta_start = 1e-4;
  real beta_end = 0.02;
  SigmaKind sigma_kind = SigmaKind::SqrtBeta;
  real lr = 1e-4;
  BackboneKind backbone = BackboneKind::ConvGRU;
  real ddim_eta = 0.0;
  bool per_segment_t = false;
};

// Empty result iff every ModelConfig invariant holds; each violation names
// the offending field and rule.
std::vector<std::string> validate_config(const ModelConfig& cfg);

ModelConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const ModelConfig& cfg);
uint64_t config_hash(const ModelConfig& cfg);
// Hash over the fields that fix parameter shapes and the diffusion process;
// runtime knobs (alpha, frozen_backbone, sampler, seed, ...) are excluded so
// checkpoints stay loadable across mode changes.
uint64_t config_arch_hash(const ModelConfig& cfg);

// mu + residual_hat == y_hat element-exactly; y_hat_clamped is y_hat clipped
// to [0,1] for metric evaluation.
struct Prediction {
  Tensor mu;             // [L_out, H, W, C]
  Tensor residual_hat;   // [L_out, H, W, C]
  Tensor y_hat;          // [L_out, H, W, C]
  Tensor y_hat_clamped;  // [L_out, H, W, C]
};

Prediction make_prediction(Tensor mu, Tensor residual_hat);

// Linear map of raw physical values into [0,1]; out-of-range inputs clip.
RadarSequence normalize(const Tensor& raw, DataRange range);
Tensor denormalize(const RadarSequence& seq);
real denormalize_value(real v01, DataRange range);

// Layout helpers between the stored [L,H,W,C] convention and the [L,C,H,W]
// convention the networks use.
Tensor to_nchw(const Tensor& lhwc);
Tensor from_nchw(const Tensor& nchw);

}  // namespace diffcast
