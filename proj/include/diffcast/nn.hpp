#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "diffcast/autograd.hpp"
#include "diffcast/rng.hpp"
#include "diffcast/tensor.hpp"

namespace diffcast::nn {

using ag::Var;

// Trainable parameter: a persistent leaf Var plus Adam state.
struct Param {
  std::string name;
  Var var;
  Tensor adam_m;
  Tensor adam_v;

  const Tensor& value() const { return var.value(); }
  Tensor& value_mut() { return var.value_mut(); }
};

// Parameter/submodule registry. Submodules are owned; named_parameters()
// joins path segments with '.', which is also the checkpoint key format.
class Module {
 public:
  virtual ~Module() = default;
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  std::vector<Param*> parameters() const;
  std::vector<std::pair<std::string, Param*>> named_parameters() const;
  int64_t parameter_count() const;
  void zero_grad();

 protected:
  Param* add_param(const std::string& name, Tensor init);
  template <typename M, typename... Args>
  M* add_child(const std::string& name, Args&&... args) {
    auto owned = std::make_unique<M>(std::forward<Args>(args)...);
    M* raw = owned.get();
    children_.emplace_back(name, std::move(owned));
    return raw;
  }

 private:
  void collect(const std::string& prefix, std::vector<std::pair<std::string, Param*>>& out) const;
  std::vector<std::unique_ptr<Param>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
};

// ---- initializers ----
Tensor kaiming_uniform(Shape shape, int64_t fan_in, Rng& rng);

// ---- layers ----

class Conv2d : public Module {
 public:
  Conv2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t pad, Rng& rng,
         bool zero_init = false);
  Var forward(const Var& x) const;
  int64_t out_channels() const { return out_ch_; }

 private:
  int64_t out_ch_, stride_, pad_;
  Param* weight_;
  Param* bias_;
};

class ConvTranspose2d : public Module {
 public:
  ConvTranspose2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t pad, Rng& rng);
  Var forward(const Var& x) const;

 private:
  int64_t stride_, pad_;
  Param* weight_;
  Param* bias_;
};

class Linear : public Module {
 public:
  Linear(int64_t in_dim, int64_t out_dim, Rng& rng, bool zero_init = false);
  Var forward(const Var& x) const;

 private:
  Param* weight_;
  Param* bias_;
};

class GroupNorm : public Module {
 public:
  GroupNorm(int64_t channels, int64_t groups);
  Var forward(const Var& x) const;

 private:
  int64_t groups_;
  Param* gamma_;
  Param* beta_;
};

// Picks the largest group count <= preferred that divides `channels`.
int64_t pick_groups(int64_t channels, int64_t preferred = 8);

// Convolutional GRU cell; gates computed from channel-concatenated [x, h].
class ConvGRUCell : public Module {
 public:
  ConvGRUCell(int64_t in_ch, int64_t hidden_ch, int64_t kernel, Rng& rng);
  // x: [1 or N, in_ch, H, W] paired with h: same leading dim, hidden_ch channels.
  Var step(const Var& x, const Var& h) const;
  Tensor initial_state(int64_t n, int64_t h, int64_t w) const;

 private:
  int64_t hidden_ch_;
  Conv2d* gates_;   // -> 2*hidden (update z, reset r)
  Conv2d* cand_;    // -> hidden (candidate)
};

// Residual conv block with optional step/segment embedding injection.
class ResBlock : public Module {
 public:
  ResBlock(int64_t in_ch, int64_t out_ch, int64_t emb_dim, Rng& rng);  // emb_dim == 0: no embedding port
  Var forward(const Var& x, const Var& emb) const;  // emb: [emb_dim] or undefined
  Var forward(const Var& x) const;

 private:
  GroupNorm* norm1_;
  Conv2d* conv1_;
  Linear* emb_proj_ = nullptr;
  GroupNorm* norm2_;
  Conv2d* conv2_;
  Conv2d* skip_ = nullptr;
};

// Pure temporal attention over the leading K axis of [K, c, h, w] features:
// every spatial site attends across its own K timesteps.
struct AttentionResult {
  Var out;      // [K, c, h, w]
  Var weights;  // [h*w, K, K]
};
AttentionResult temporal_attention(const Var& q, const Var& k, const Var& v);

class TemporalAttentionUnit : public Module {
 public:
  TemporalAttentionUnit(int64_t channels, Rng& rng);
  Var forward(const Var& x) const;
  // Same computation, exposing the attention weights for inspection.
  AttentionResult forward_with_weights(const Var& x) const;

 private:
  GroupNorm* norm_;
  Conv2d* q_;
  Conv2d* k_;
  Conv2d* v_;
  Conv2d* proj_;
};

// Fixed sinusoidal position code of an integer index.
Tensor sinusoidal_embedding(int64_t index, int64_t dim);

class Adam {
 public:
  explicit Adam(real lr = 1e-4, real beta1 = 0.9, real beta2 = 0.999, real eps = 1e-8);
  void step(const std::vector<Param*>& params);
  int64_t steps_taken() const { return t_; }
  void set_steps_taken(int64_t t) { t_ = t; }
  real lr() const { return lr_; }
  void set_lr(real lr) { lr_ = lr; }

 private:
  real lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

// L2 norm over the accumulated gradients of a parameter group.
real grad_norm(const std::vector<Param*>& params);

}  // namespace diffcast::nn
