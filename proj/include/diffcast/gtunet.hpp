#pragma once

#include <memory>
#include <vector>

#include "diffcast/core.hpp"
#include "diffcast/nn.hpp"

namespace diffcast {

// Time-collapsed multi-scale motion features extracted from mu; one entry
// per UNet resolution level, level l shaped [1, C_l, H/2^l, W/2^l].
struct GlobalHidden {
  std::vector<nn::Var> levels;
};

// Motion-prior extractor over the predicted sequence: per level a downsample
// conv, a convolutional GRU scan across the time axis, and a residual block
// applied to the final recurrent state.
class GlobalNet : public nn::Module {
 public:
  GlobalNet(const ModelConfig& cfg, int64_t data_channels, Rng& rng);
  GlobalHidden encode(const nn::Var& mu) const;  // mu: [L_out, C, H, W]

 private:
  struct Level {
    nn::Conv2d* down;
    nn::ConvGRUCell* gru;
    nn::ResBlock* res;
    int64_t channels;
    int64_t stride;
  };
  std::vector<Level> levels_;
};

// Test instrumentation: selectively silences conditioning paths.
struct CondMask {
  bool use_s_prev = true;
  bool use_t_emb = true;
  bool use_j_emb = true;
};

// Denoiser for one residual segment. Conditioning: previous segment by
// channel concatenation, global hidden by per-level broadcast-concat,
// diffusion step t and segment index j by summed sinusoidal embeddings
// projected into every residual block.
class GTUNet : public nn::Module {
 public:
  GTUNet(const ModelConfig& cfg, int64_t data_channels, Rng& rng);

  // s_state, s_prev: [K, C, H, W]; h required iff built with use_globalnet.
  nn::Var denoise(const nn::Var& s_state, const nn::Var& s_prev, const GlobalHidden* h, int64_t t,
                  int64_t j, const CondMask& mask = {}) const;
  Tensor denoise_frames(const Tensor& s_state, const Tensor& s_prev, const GlobalHidden* h, int64_t t,
                        int64_t j) const;

  bool uses_globalnet() const { return use_globalnet_; }
  int64_t embed_dim() const { return emb_dim_; }

 private:
  struct EncLevel {
    nn::ResBlock* res;
    nn::TemporalAttentionUnit* attn;
    nn::Conv2d* down;  // null on the last level
  };
  struct DecLevel {
    nn::ResBlock* res;
    nn::TemporalAttentionUnit* attn;
    nn::ConvTranspose2d* up;  // null on level 0
  };

  nn::Var embed(int64_t t, int64_t j, const CondMask& mask) const;

  int64_t T_, depth_, emb_dim_, emb_base_dim_, data_channels_;
  bool use_globalnet_;
  std::vector<int64_t> level_channels_;
  nn::Conv2d* stem_;
  nn::Linear* emb_in_;
  nn::Linear* emb_out_;
  std::vector<EncLevel> enc_;
  nn::ResBlock* mid1_;
  nn::TemporalAttentionUnit* mid_attn_;
  nn::ResBlock* mid2_;
  std::vector<DecLevel> dec_;
  nn::GroupNorm* out_norm_;
  nn::Conv2d* out_conv_;
};

}  // namespace diffcast
