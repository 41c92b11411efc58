#include "diffcast/gtunet.hpp"

#include <stdexcept>
#include <string>

namespace diffcast {

using namespace ag;
using nn::Conv2d;
using nn::ConvGRUCell;
using nn::ConvTranspose2d;
using nn::GroupNorm;
using nn::Linear;
using nn::ResBlock;
using nn::TemporalAttentionUnit;
using nn::Var;

// ---------------- GlobalNet ----------------

GlobalNet::GlobalNet(const ModelConfig& cfg, int64_t data_channels, Rng& rng) {
  int64_t in_ch = data_channels;
  for (int64_t l = 0; l < cfg.depth; ++l) {
    const int64_t ch = cfg.hidden_size * cfg.channel_mults[static_cast<size_t>(l)];
    const int64_t stride = (l == 0) ? 1 : 2;
    const std::string p = "level" + std::to_string(l) + ".";
    Level lv;
    lv.down = add_child<Conv2d>(p + "down", in_ch, ch, 3, stride, 1, rng);
    lv.gru = add_child<ConvGRUCell>(p + "gru", ch, ch, 3, rng);
    lv.res = add_child<ResBlock>(p + "res", ch, ch, 0, rng);
    lv.channels = ch;
    lv.stride = stride;
    levels_.push_back(lv);
    in_ch = ch;
  }
}

GlobalHidden GlobalNet::encode(const Var& mu) const {
  const Tensor& mv = mu.value();
  if (mv.ndim() != 4) throw std::invalid_argument("GlobalNet::encode expects [L_out,C,H,W]");
  const int64_t factor = int64_t(1) << (levels_.size() - 1);
  if (mv.size(2) % factor != 0 || mv.size(3) % factor != 0)
    throw std::invalid_argument("GlobalNet::encode: spatial size not divisible by 2^(depth-1)");

  GlobalHidden h;
  Var seq = mu;
  for (const Level& lv : levels_) {
    Var feats = lv.down->forward(seq);  // [L, ch, h, w]
    const int64_t L = feats.value().size(0);
    const int64_t hh = feats.value().size(2), ww = feats.value().size(3);
    Var state(lv.gru->initial_state(1, hh, ww), false);
    std::vector<Var> states;
    states.reserve(static_cast<size_t>(L));
    for (int64_t i = 0; i < L; ++i) {
      state = lv.gru->step(narrow(feats, 0, i, 1), state);
      states.push_back(state);
    }
    h.levels.push_back(lv.res->forward(state));  // time-collapsed final state
    seq = concat_axis(states, 0);
  }
  return h;
}

// ---------------- GTUNet ----------------

GTUNet::GTUNet(const ModelConfig& cfg, int64_t data_channels, Rng& rng)
    : T_(cfg.T),
      depth_(cfg.depth),
      emb_dim_(4 * cfg.hidden_size),
      emb_base_dim_(cfg.hidden_size % 2 == 0 ? cfg.hidden_size : cfg.hidden_size + 1),
      data_channels_(data_channels),
      use_globalnet_(cfg.use_globalnet) {
  for (int64_t l = 0; l < depth_; ++l)
    level_channels_.push_back(cfg.hidden_size * cfg.channel_mults[static_cast<size_t>(l)]);

  stem_ = add_child<Conv2d>("stem", 2 * data_channels, level_channels_[0], 3, 1, 1, rng);
  emb_in_ = add_child<Linear>("emb_in", emb_base_dim_, emb_dim_, rng);
  emb_out_ = add_child<Linear>("emb_out", emb_dim_, emb_dim_, rng);

  for (int64_t l = 0; l < depth_; ++l) {
    const int64_t ch = level_channels_[static_cast<size_t>(l)];
    const int64_t in_ch = ch + (use_globalnet_ ? ch : 0);
    const std::string p = "enc" + std::to_string(l) + ".";
    EncLevel e;
    e.res = add_child<ResBlock>(p + "res", in_ch, ch, emb_dim_, rng);
    e.attn = add_child<TemporalAttentionUnit>(p + "attn", ch, rng);
    e.down = (l + 1 < depth_)
                 ? add_child<Conv2d>(p + "down", ch, level_channels_[static_cast<size_t>(l + 1)], 3, 2, 1, rng)
                 : nullptr;
    enc_.push_back(e);
  }

  const int64_t cm = level_channels_.back();
  mid1_ = add_child<ResBlock>("mid1", cm, cm, emb_dim_, rng);
  mid_attn_ = add_child<TemporalAttentionUnit>("mid_attn", cm, rng);
  mid2_ = add_child<ResBlock>("mid2", cm, cm, emb_dim_, rng);

  for (int64_t l = depth_ - 1; l >= 0; --l) {
    const int64_t ch = level_channels_[static_cast<size_t>(l)];
    const std::string p = "dec" + std::to_string(l) + ".";
    DecLevel d;
    d.res = add_child<ResBlock>(p + "res", 2 * ch, ch, emb_dim_, rng);
    d.attn = add_child<TemporalAttentionUnit>(p + "attn", ch, rng);
    d.up = (l > 0) ? add_child<ConvTranspose2d>(p + "up", ch, level_channels_[static_cast<size_t>(l - 1)], 4,
                                                2, 1, rng)
                   : nullptr;
    dec_.push_back(d);  // stored deepest-first
  }

  out_norm_ = add_child<GroupNorm>("out_norm", level_channels_[0], nn::pick_groups(level_channels_[0]));
  out_conv_ = add_child<Conv2d>("out_conv", level_channels_[0], data_channels, 3, 1, 1, rng,
                                /*zero_init=*/true);
}

Var GTUNet::embed(int64_t t, int64_t j, const CondMask& mask) const {
  Tensor base({emb_base_dim_});
  if (mask.use_t_emb) base.add_(nn::sinusoidal_embedding(t, emb_base_dim_));
  if (mask.use_j_emb) base.add_(nn::sinusoidal_embedding(j, emb_base_dim_));
  Var e = Var(base.reshaped({1, emb_base_dim_}), false);
  return reshape(emb_out_->forward(silu(emb_in_->forward(e))), {emb_dim_});
}

Var GTUNet::denoise(const Var& s_state, const Var& s_prev, const GlobalHidden* h, int64_t t, int64_t j,
                    const CondMask& mask) const {
  const Tensor& sv = s_state.value();
  if (sv.ndim() != 4) throw std::invalid_argument("denoise expects [K,C,H,W]");
  check_same_shape(sv, s_prev.value(), "denoise s_prev");
  if (sv.size(1) != data_channels_) throw std::invalid_argument("denoise: channel count mismatch");
  if (t < 1 || t > T_) throw std::out_of_range("denoise: t out of [1,T]");
  if (j < 1) throw std::out_of_range("denoise: segment index j must be >= 1");
  const int64_t factor = int64_t(1) << (depth_ - 1);
  if (sv.size(2) % factor != 0 || sv.size(3) % factor != 0)
    throw std::invalid_argument("denoise: spatial size not divisible by 2^(depth-1)");
  if (use_globalnet_ && h == nullptr)
    throw std::invalid_argument("denoise: global hidden required when use_globalnet is set");
  if (use_globalnet_ && static_cast<int64_t>(h->levels.size()) != depth_)
    throw std::invalid_argument("denoise: global hidden level count mismatch");

  const int64_t K = sv.size(0);
  Var emb = embed(t, j, mask);

  Var prev_used = mask.use_s_prev ? s_prev : Var(Tensor::zeros_like(s_prev.value()), false);
  Var f = stem_->forward(concat_axis({s_state, prev_used}, 1));

  std::vector<Var> skips;
  for (int64_t l = 0; l < depth_; ++l) {
    const EncLevel& e = enc_[static_cast<size_t>(l)];
    if (use_globalnet_) {
      const Var& hl = h->levels[static_cast<size_t>(l)];  // [1, ch, h, w]
      Var hb = broadcast_front(reshape(hl, {hl.value().size(1), hl.value().size(2), hl.value().size(3)}), K);
      f = concat_axis({f, hb}, 1);
    }
    f = e.res->forward(f, emb);
    f = e.attn->forward(f);
    skips.push_back(f);
    if (e.down) f = e.down->forward(f);
  }

  f = mid1_->forward(f, emb);
  f = mid_attn_->forward(f);
  f = mid2_->forward(f, emb);

  for (size_t i = 0; i < dec_.size(); ++i) {
    const DecLevel& d = dec_[i];
    const Var& skip = skips[skips.size() - 1 - i];
    f = d.res->forward(concat_axis({f, skip}, 1), emb);
    f = d.attn->forward(f);
    if (d.up) f = d.up->forward(f);
  }

  return out_conv_->forward(silu(out_norm_->forward(f)));
}

Tensor GTUNet::denoise_frames(const Tensor& s_state, const Tensor& s_prev, const GlobalHidden* h, int64_t t,
                              int64_t j) const {
  return denoise(Var(s_state, false), Var(s_prev, false), h, t, j).value();
}

}  // namespace diffcast
