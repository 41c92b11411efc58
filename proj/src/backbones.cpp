#include "diffcast/backbones.hpp"

#include <algorithm>
#include <stdexcept>
#include <vector>

namespace diffcast {

using namespace ag;
using nn::Conv2d;
using nn::ConvGRUCell;
using nn::ConvTranspose2d;
using nn::ResBlock;
using nn::Var;

Tensor DeterministicPredictor::predict_frames(const Tensor& x_nchw) const {
  Var x(x_nchw, false);
  return predict(x).value();
}

namespace {

void check_divisible(const Tensor& x, int64_t factor) {
  if (x.size(2) % factor != 0 || x.size(3) % factor != 0)
    throw std::invalid_argument("spatial size " + x.shape_str() + " not divisible by downsampling factor " +
                                std::to_string(factor));
}

class ConvGRUPredictor final : public DeterministicPredictor {
 public:
  ConvGRUPredictor(const ModelConfig& cfg, int64_t data_channels, Rng& rng)
      : L_in_(cfg.L_in), L_out_(cfg.L_out), hidden_(cfg.hidden_size) {
    const int64_t h2 = std::max<int64_t>(hidden_ / 2, 4);
    enc1_ = add_child<Conv2d>("enc1", data_channels, h2, 3, 2, 1, rng);
    enc2_ = add_child<Conv2d>("enc2", h2, hidden_, 3, 2, 1, rng);
    gru1_ = add_child<ConvGRUCell>("gru1", hidden_, hidden_, 3, rng);
    gru2_ = add_child<ConvGRUCell>("gru2", hidden_, hidden_, 3, rng);
    dec1_ = add_child<ConvTranspose2d>("dec1", hidden_, h2, 4, 2, 1, rng);
    dec2_ = add_child<ConvTranspose2d>("dec2", h2, h2, 4, 2, 1, rng);
    head_ = add_child<Conv2d>("head", h2, data_channels, 3, 1, 1, rng, /*zero_init=*/true);
  }

  int64_t downsample_factor() const override { return 4; }

  Var predict(const Var& x) const override {
    const Tensor& xv = x.value();
    if (xv.ndim() != 4) throw std::invalid_argument("predict expects [L_in,C,H,W]");
    if (xv.size(0) != L_in_) throw std::invalid_argument("predict: sequence length != configured L_in");
    check_divisible(xv, downsample_factor());
    const int64_t hq = xv.size(2) / 4, wq = xv.size(3) / 4;

    Var h1(gru1_->initial_state(1, hq, wq), false);
    Var h2(gru2_->initial_state(1, hq, wq), false);
    auto encode = [&](const Var& frame) { return silu(enc2_->forward(silu(enc1_->forward(frame)))); };

    for (int64_t i = 0; i < L_in_; ++i) {
      Var e = encode(narrow(x, 0, i, 1));
      h1 = gru1_->step(e, h1);
      h2 = gru2_->step(h1, h2);
    }
    // Teacher-free unroll: each step re-encodes the previously emitted frame,
    // starting from the last observed one.
    Var prev = narrow(x, 0, L_in_ - 1, 1);
    std::vector<Var> frames;
    frames.reserve(static_cast<size_t>(L_out_));
    for (int64_t i = 0; i < L_out_; ++i) {
      Var e = encode(prev);
      h1 = gru1_->step(e, h1);
      h2 = gru2_->step(h1, h2);
      Var out = head_->forward(silu(dec2_->forward(silu(dec1_->forward(h2)))));
      frames.push_back(out);
      prev = out;
    }
    return concat_axis(frames, 0);
  }

 private:
  int64_t L_in_, L_out_, hidden_;
  Conv2d* enc1_;
  Conv2d* enc2_;
  ConvGRUCell* gru1_;
  ConvGRUCell* gru2_;
  ConvTranspose2d* dec1_;
  ConvTranspose2d* dec2_;
  Conv2d* head_;
};

class SimVPLitePredictor final : public DeterministicPredictor {
 public:
  SimVPLitePredictor(const ModelConfig& cfg, int64_t data_channels, Rng& rng)
      : L_in_(cfg.L_in), L_out_(cfg.L_out), hidden_(cfg.hidden_size) {
    enc1_ = add_child<Conv2d>("enc1", data_channels, hidden_, 3, 1, 1, rng);
    enc2_ = add_child<Conv2d>("enc2", hidden_, hidden_, 3, 2, 1, rng);
    enc3_ = add_child<Conv2d>("enc3", hidden_, hidden_, 3, 1, 1, rng);
    enc4_ = add_child<Conv2d>("enc4", hidden_, hidden_, 3, 2, 1, rng);
    const int64_t t_hidden = 2 * hidden_;
    tr1_ = add_child<ResBlock>("tr1", L_in_ * hidden_, t_hidden, 0, rng);
    tr2_ = add_child<ResBlock>("tr2", t_hidden, t_hidden, 0, rng);
    tr3_ = add_child<ResBlock>("tr3", t_hidden, t_hidden, 0, rng);
    tr4_ = add_child<ResBlock>("tr4", t_hidden, L_out_ * hidden_, 0, rng);
    dec1_ = add_child<ConvTranspose2d>("dec1", hidden_, hidden_, 4, 2, 1, rng);
    dec2_ = add_child<Conv2d>("dec2", hidden_, hidden_, 3, 1, 1, rng);
    dec3_ = add_child<ConvTranspose2d>("dec3", hidden_, hidden_, 4, 2, 1, rng);
    dec4_ = add_child<Conv2d>("dec4", hidden_, hidden_, 3, 1, 1, rng);
    head_ = add_child<Conv2d>("head", hidden_, data_channels, 3, 1, 1, rng, /*zero_init=*/true);
  }

  int64_t downsample_factor() const override { return 4; }

  Var predict(const Var& x) const override {
    const Tensor& xv = x.value();
    if (xv.ndim() != 4) throw std::invalid_argument("predict expects [L_in,C,H,W]");
    if (xv.size(0) != L_in_) throw std::invalid_argument("predict: sequence length != configured L_in");
    check_divisible(xv, downsample_factor());
    const int64_t hq = xv.size(2) / 4, wq = xv.size(3) / 4;

    Var f = silu(enc1_->forward(x));
    f = silu(enc2_->forward(f));
    f = silu(enc3_->forward(f));
    f = silu(enc4_->forward(f));  // [L_in, hidden, H/4, W/4]

    // Stack time into channels for the translator.
    Var stacked = reshape(f, {1, L_in_ * hidden_, hq, wq});
    Var tr = tr4_->forward(tr3_->forward(tr2_->forward(tr1_->forward(stacked))));
    Var unstacked = reshape(tr, {L_out_, hidden_, hq, wq});

    Var d = silu(dec1_->forward(unstacked));
    d = silu(dec2_->forward(d));
    d = silu(dec3_->forward(d));
    d = silu(dec4_->forward(d));
    return head_->forward(d);
  }

 private:
  int64_t L_in_, L_out_, hidden_;
  Conv2d* enc1_;
  Conv2d* enc2_;
  Conv2d* enc3_;
  Conv2d* enc4_;
  ResBlock* tr1_;
  ResBlock* tr2_;
  ResBlock* tr3_;
  ResBlock* tr4_;
  ConvTranspose2d* dec1_;
  Conv2d* dec2_;
  ConvTranspose2d* dec3_;
  Conv2d* dec4_;
  Conv2d* head_;
};

}  // namespace

std::unique_ptr<DeterministicPredictor> conv_gru_predictor(const ModelConfig& cfg, int64_t data_channels,
                                                           Rng& rng) {
  return std::make_unique<ConvGRUPredictor>(cfg, data_channels, rng);
}

std::unique_ptr<DeterministicPredictor> simvp_lite_predictor(const ModelConfig& cfg, int64_t data_channels,
                                                             Rng& rng) {
  return std::make_unique<SimVPLitePredictor>(cfg, data_channels, rng);
}

std::unique_ptr<DeterministicPredictor> make_backbone(const ModelConfig& cfg, int64_t data_channels, Rng& rng) {
  switch (cfg.backbone) {
    case BackboneKind::ConvGRU:
      return conv_gru_predictor(cfg, data_channels, rng);
    case BackboneKind::SimVP:
      return simvp_lite_predictor(cfg, data_channels, rng);
  }
  throw std::logic_error("unreachable backbone kind");
}

real deterministic_loss(const Tensor& mu, const Tensor& y) {
  check_same_shape(mu, y, "deterministic_loss");
  real s = 0.0;
  const real* a = mu.data();
  const real* b = y.data();
  for (int64_t i = 0; i < mu.numel(); ++i) {
    const real d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<real>(mu.numel());
}

}  // namespace diffcast
