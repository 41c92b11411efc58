#include "diffcast/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace diffcast::nn {

using namespace ag;

std::vector<Param*> Module::parameters() const {
  std::vector<Param*> out;
  for (auto& [name, p] : named_parameters()) out.push_back(p);
  return out;
}

std::vector<std::pair<std::string, Param*>> Module::named_parameters() const {
  std::vector<std::pair<std::string, Param*>> out;
  collect("", out);
  return out;
}

void Module::collect(const std::string& prefix, std::vector<std::pair<std::string, Param*>>& out) const {
  for (const auto& p : params_) out.emplace_back(prefix + p->name, p.get());
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", out);
}

int64_t Module::parameter_count() const {
  int64_t n = 0;
  for (Param* p : parameters()) n += p->value().numel();
  return n;
}

void Module::zero_grad() {
  for (Param* p : parameters()) p->var.zero_grad();
}

Param* Module::add_param(const std::string& name, Tensor init) {
  auto p = std::make_unique<Param>();
  p->name = name;
  p->var = Var(std::move(init), true);
  p->adam_m = Tensor::zeros_like(p->var.value());
  p->adam_v = Tensor::zeros_like(p->var.value());
  Param* raw = p.get();
  params_.push_back(std::move(p));
  return raw;
}

Tensor kaiming_uniform(Shape shape, int64_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const real bound = std::sqrt(6.0 / static_cast<real>(std::max<int64_t>(fan_in, 1)));
  real* d = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) d[i] = rng.uniform(-bound, bound);
  return t;
}

// ---------------- Conv2d ----------------

Conv2d::Conv2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t pad, Rng& rng, bool zero_init)
    : out_ch_(out_ch), stride_(stride), pad_(pad) {
  Tensor w = zero_init ? Tensor::zeros({out_ch, in_ch, kernel, kernel})
                       : kaiming_uniform({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, rng);
  weight_ = add_param("weight", std::move(w));
  bias_ = add_param("bias", Tensor::zeros({out_ch}));
}

Var Conv2d::forward(const Var& x) const { return conv2d(x, weight_->var, bias_->var, stride_, pad_); }

ConvTranspose2d::ConvTranspose2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t pad, Rng& rng)
    : stride_(stride), pad_(pad) {
  weight_ = add_param("weight", kaiming_uniform({in_ch, out_ch, kernel, kernel}, in_ch * kernel * kernel, rng));
  bias_ = add_param("bias", Tensor::zeros({out_ch}));
}

Var ConvTranspose2d::forward(const Var& x) const {
  return conv_transpose2d(x, weight_->var, bias_->var, stride_, pad_);
}

// ---------------- Linear ----------------

Linear::Linear(int64_t in_dim, int64_t out_dim, Rng& rng, bool zero_init) {
  Tensor w = zero_init ? Tensor::zeros({out_dim, in_dim}) : kaiming_uniform({out_dim, in_dim}, in_dim, rng);
  weight_ = add_param("weight", std::move(w));
  bias_ = add_param("bias", Tensor::zeros({out_dim}));
}

Var Linear::forward(const Var& x) const { return linear(x, weight_->var, bias_->var); }

// ---------------- GroupNorm ----------------

GroupNorm::GroupNorm(int64_t channels, int64_t groups) : groups_(groups) {
  if (channels % groups != 0) throw std::invalid_argument("GroupNorm: channels must divide by groups");
  gamma_ = add_param("gamma", Tensor::full({channels}, 1.0));
  beta_ = add_param("beta", Tensor::zeros({channels}));
}

Var GroupNorm::forward(const Var& x) const { return group_norm(x, gamma_->var, beta_->var, groups_); }

int64_t pick_groups(int64_t channels, int64_t preferred) {
  for (int64_t g = std::min(preferred, channels); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

// ---------------- ConvGRUCell ----------------

ConvGRUCell::ConvGRUCell(int64_t in_ch, int64_t hidden_ch, int64_t kernel, Rng& rng) : hidden_ch_(hidden_ch) {
  gates_ = add_child<Conv2d>("gates", in_ch + hidden_ch, 2 * hidden_ch, kernel, 1, kernel / 2, rng);
  cand_ = add_child<Conv2d>("cand", in_ch + hidden_ch, hidden_ch, kernel, 1, kernel / 2, rng);
}

Var ConvGRUCell::step(const Var& x, const Var& h) const {
  Var xh = concat_axis({x, h}, 1);
  Var zr = sigmoid(gates_->forward(xh));
  Var z = narrow(zr, 1, 0, hidden_ch_);
  Var r = narrow(zr, 1, hidden_ch_, hidden_ch_);
  Var cand_in = concat_axis({x, mul(r, h)}, 1);
  Var h_cand = tanh_(cand_->forward(cand_in));
  // h' = (1 - z) * h + z * h_cand
  Var one_minus_z = add_scalar(scale(z, -1.0), 1.0);
  return add(mul(one_minus_z, h), mul(z, h_cand));
}

Tensor ConvGRUCell::initial_state(int64_t n, int64_t h, int64_t w) const {
  return Tensor::zeros({n, hidden_ch_, h, w});
}

// ---------------- ResBlock ----------------

ResBlock::ResBlock(int64_t in_ch, int64_t out_ch, int64_t emb_dim, Rng& rng) {
  norm1_ = add_child<GroupNorm>("norm1", in_ch, pick_groups(in_ch));
  conv1_ = add_child<Conv2d>("conv1", in_ch, out_ch, 3, 1, 1, rng);
  if (emb_dim > 0) emb_proj_ = add_child<Linear>("emb_proj", emb_dim, out_ch, rng);
  norm2_ = add_child<GroupNorm>("norm2", out_ch, pick_groups(out_ch));
  conv2_ = add_child<Conv2d>("conv2", out_ch, out_ch, 3, 1, 1, rng);
  if (in_ch != out_ch) skip_ = add_child<Conv2d>("skip", in_ch, out_ch, 1, 1, 0, rng);
}

Var ResBlock::forward(const Var& x, const Var& emb) const {
  Var h = conv1_->forward(silu(norm1_->forward(x)));
  if (emb.defined()) {
    if (!emb_proj_) throw std::logic_error("ResBlock built without embedding port");
    Var e = emb_proj_->forward(reshape(emb, {1, emb.numel()}));
    h = add_channel_bias(h, reshape(e, {e.numel()}));
  }
  h = conv2_->forward(silu(norm2_->forward(h)));
  Var s = skip_ ? skip_->forward(x) : x;
  return add(h, s);
}

Var ResBlock::forward(const Var& x) const { return forward(x, Var()); }

// ---------------- temporal attention ----------------

AttentionResult temporal_attention(const Var& q, const Var& k, const Var& v) {
  const Shape& sh = q.shape();
  if (sh.size() != 4) throw std::invalid_argument("temporal_attention expects [K,c,h,w]");
  const int64_t K = sh[0], c = sh[1], h = sh[2], w = sh[3];
  if (K < 1) throw std::invalid_argument("temporal_attention: K must be >= 1");
  // [K, c, h, w] -> [h*w, K, c]
  auto to_sites = [&](const Var& t) {
    return reshape(permute(reshape(t, {K, c, h * w}), {2, 0, 1}), {h * w, K, c});
  };
  Var qs = to_sites(q), ks = to_sites(k), vs = to_sites(v);
  Var scores = scale(matmul_batched(qs, ks, false, true), 1.0 / std::sqrt(static_cast<real>(c)));
  Var weights = softmax_lastdim(scores);            // [h*w, K, K]
  Var mixed = matmul_batched(weights, vs);          // [h*w, K, c]
  Var out = reshape(permute(mixed, {1, 2, 0}), {K, c, h, w});
  return {out, weights};
}

TemporalAttentionUnit::TemporalAttentionUnit(int64_t channels, Rng& rng) {
  norm_ = add_child<GroupNorm>("norm", channels, pick_groups(channels));
  q_ = add_child<Conv2d>("q", channels, channels, 1, 1, 0, rng);
  k_ = add_child<Conv2d>("k", channels, channels, 1, 1, 0, rng);
  v_ = add_child<Conv2d>("v", channels, channels, 1, 1, 0, rng);
  proj_ = add_child<Conv2d>("proj", channels, channels, 1, 1, 0, rng);
}

AttentionResult TemporalAttentionUnit::forward_with_weights(const Var& x) const {
  Var n = norm_->forward(x);
  AttentionResult att = temporal_attention(q_->forward(n), k_->forward(n), v_->forward(n));
  return {add(x, proj_->forward(att.out)), att.weights};
}

Var TemporalAttentionUnit::forward(const Var& x) const { return forward_with_weights(x).out; }

// ---------------- embeddings ----------------

Tensor sinusoidal_embedding(int64_t index, int64_t dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: dim must be even and >= 2");
  Tensor e({dim});
  const int64_t half = dim / 2;
  for (int64_t i = 0; i < half; ++i) {
    const real freq = std::exp(-std::log(10000.0) * static_cast<real>(i) / static_cast<real>(half));
    e[i] = std::sin(static_cast<real>(index) * freq);
    e[half + i] = std::cos(static_cast<real>(index) * freq);
  }
  return e;
}

// ---------------- Adam ----------------

Adam::Adam(real lr, real beta1, real beta2, real eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(const std::vector<Param*>& params) {
  ++t_;
  const real bc1 = 1.0 - std::pow(beta1_, static_cast<real>(t_));
  const real bc2 = 1.0 - std::pow(beta2_, static_cast<real>(t_));
  for (Param* p : params) {
    Tensor& val = p->var.value_mut();
    const Tensor& g = p->var.grad();
    if (g.numel() != val.numel()) continue;  // never touched by backward
    real* m = p->adam_m.data();
    real* v = p->adam_v.data();
    real* w = val.data();
    const real* gd = g.data();
    for (int64_t i = 0; i < val.numel(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gd[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gd[i] * gd[i];
      const real mhat = m[i] / bc1;
      const real vhat = v[i] / bc2;
      w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

real grad_norm(const std::vector<Param*>& params) {
  real s = 0.0;
  for (Param* p : params) {
    const Tensor& g = p->var.grad();
    if (g.numel() != p->value().numel()) continue;
    const real* gd = g.data();
    for (int64_t i = 0; i < g.numel(); ++i) s += gd[i] * gd[i];
  }
  return std::sqrt(s);
}

}  // namespace diffcast::nn
