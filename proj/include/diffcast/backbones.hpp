#pragma once

#include <memory>

#include "diffcast/core.hpp"
#include "diffcast/nn.hpp"

namespace diffcast {

// Deterministic predictor P: [L_in,C,H,W] -> [L_out,C,H,W], differentiable.
class DeterministicPredictor : public nn::Module {
 public:
  virtual nn::Var predict(const nn::Var& x) const = 0;
  // Convenience inference entry point (no gradient graph kept).
  Tensor predict_frames(const Tensor& x_nchw) const;
  virtual int64_t downsample_factor() const = 0;
};

// Recurrent baseline: strided conv encoder, two stacked convolutional GRU
// layers at quarter resolution, mirrored transposed-conv decoder, zero-init
// output head, autoregressive teacher-free unroll over L_out steps.
std::unique_ptr<DeterministicPredictor> conv_gru_predictor(const ModelConfig& cfg, int64_t data_channels,
                                                           Rng& rng);

// Recurrent-free baseline: per-frame spatial encoder, a conv translator over
// time-stacked channels mapping L_in feature stacks to L_out, per-frame
// decoder, zero-init output head.
std::unique_ptr<DeterministicPredictor> simvp_lite_predictor(const ModelConfig& cfg, int64_t data_channels,
                                                             Rng& rng);

std::unique_ptr<DeterministicPredictor> make_backbone(const ModelConfig& cfg, int64_t data_channels, Rng& rng);

// Mean over all elements of (mu - y)^2.
real deterministic_loss(const Tensor& mu, const Tensor& y);

}  // namespace diffcast
