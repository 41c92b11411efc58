#include "diffcast/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace diffcast::ag {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

std::shared_ptr<Node> make_node(Tensor value, std::vector<std::shared_ptr<Node>> parents,
                                std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->requires_grad = false;
  for (const auto& p : n->parents)
    if (p && p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward_fn = std::move(backward_fn);
  return n;
}

void accumulate(Node& target, const Tensor& g) {
  if (!target.requires_grad) return;
  target.ensure_grad().add_(g);
}

}  // namespace

Tensor& Node::ensure_grad() {
  if (grad.numel() != value.numel()) grad = Tensor::zeros_like(value);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
  if (node_) node_->grad = Tensor::zeros_like(node_->value);
}

Var Var::from_node(std::shared_ptr<Node> n) {
  Var v;
  v.node_ = std::move(n);
  return v;
}

void backward(const Var& root) {
  if (!root.defined()) throw std::logic_error("backward on undefined Var");
  if (root.numel() != 1) throw std::logic_error("backward root must be scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order topological sort over the requires_grad subgraph.
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root.node().get(), 0});
  visited.insert(root.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      Node* p = f.n->parents[f.next_parent++].get();
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(f.n);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad().fill(1.0);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

Var constant(Tensor value) { return Var(std::move(value), false); }

// ---------------- elementwise ----------------

Var add(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.add_(b.value());
  auto n = make_node(std::move(out), {a.node(), b.node()}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
  return Var::from_node(n);
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const real* bd = b.value().data();
  real* od = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) od[i] -= bd[i];
  auto n = make_node(std::move(out), {a.node(), b.node()}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      Tensor neg = self.grad;
      neg.scale_(-1.0);
      accumulate(*self.parents[1], neg);
    }
  });
  return Var::from_node(n);
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const real* bd = b.value().data();
  real* od = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) od[i] *= bd[i];
  auto n = make_node(std::move(out), {a.node(), b.node()}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      Tensor ga = self.grad;
      real* d = ga.data();
      const real* bd2 = bv.data();
      for (int64_t i = 0; i < ga.numel(); ++i) d[i] *= bd2[i];
      accumulate(*self.parents[0], ga);
    }
    if (self.parents[1]->requires_grad) {
      Tensor gb = self.grad;
      real* d = gb.data();
      const real* ad = av.data();
      for (int64_t i = 0; i < gb.numel(); ++i) d[i] *= ad[i];
      accumulate(*self.parents[1], gb);
    }
  });
  return Var::from_node(n);
}

Var scale(const Var& a, real factor) {
  Tensor out = a.value();
  out.scale_(factor);
  auto n = make_node(std::move(out), {a.node()}, [factor](Node& self) {
    Tensor g = self.grad;
    g.scale_(factor);
    accumulate(*self.parents[0], g);
  });
  return Var::from_node(n);
}

Var add_scalar(const Var& a, real s) {
  Tensor out = a.value();
  real* d = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) d[i] += s;
  auto n = make_node(std::move(out), {a.node()},
                     [](Node& self) { accumulate(*self.parents[0], self.grad); });
  return Var::from_node(n);
}

Var sum_all(const Var& a) {
  Tensor out = Tensor::scalar(a.value().sum());
  auto n = make_node(std::move(out), {a.node()}, [](Node& self) {
    Tensor g = Tensor::full(self.parents[0]->value.shape(), self.grad[0]);
    accumulate(*self.parents[0], g);
  });
  return Var::from_node(n);
}

Var mean_all(const Var& a) {
  const real inv_n = 1.0 / static_cast<real>(a.numel());
  Tensor out = Tensor::scalar(a.value().sum() * inv_n);
  auto n = make_node(std::move(out), {a.node()}, [inv_n](Node& self) {
    Tensor g = Tensor::full(self.parents[0]->value.shape(), self.grad[0] * inv_n);
    accumulate(*self.parents[0], g);
  });
  return Var::from_node(n);
}

Var mse(const Var& a, const Var& b) {
  Var d = sub(a, b);
  return mean_all(mul(d, d));
}

// ---------------- activations ----------------

Var sigmoid(const Var& a) {
  Tensor out = a.value();
  real* d = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) d[i] = 1.0 / (1.0 + std::exp(-d[i]));
  Tensor saved = out;
  auto n = make_node(std::move(out), {a.node()}, [saved](Node& self) {
    Tensor g = self.grad;
    real* gd = g.data();
    const real* y = saved.data();
    for (int64_t i = 0; i < g.numel(); ++i) gd[i] *= y[i] * (1.0 - y[i]);
    accumulate(*self.parents[0], g);
  });
  return Var::from_node(n);
}

Var tanh_(const Var& a) {
  Tensor out = a.value();
  real* d = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) d[i] = std::tanh(d[i]);
  Tensor saved = out;
  auto n = make_node(std::move(out), {a.node()}, [saved](Node& self) {
    Tensor g = self.grad;
    real* gd = g.data();
    const real* y = saved.data();
    for (int64_t i = 0; i < g.numel(); ++i) gd[i] *= 1.0 - y[i] * y[i];
    accumulate(*self.parents[0], g);
  });
  return Var::from_node(n);
}

Var silu(const Var& a) {
  Tensor out = a.value();
  real* d = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) {
    const real s = 1.0 / (1.0 + std::exp(-d[i]));
    d[i] = d[i] * s;
  }
  auto n = make_node(std::move(out), {a.node()}, [](Node& self) {
    Tensor g = self.grad;
    real* gd = g.data();
    const real* x = self.parents[0]->value.data();
    for (int64_t i = 0; i < g.numel(); ++i) {
      const real s = 1.0 / (1.0 + std::exp(-x[i]));
      gd[i] *= s * (1.0 + x[i] * (1.0 - s));
    }
    accumulate(*self.parents[0], g);
  });
  return Var::from_node(n);
}

// ---------------- shape ops ----------------

Var reshape(const Var& a, Shape new_shape) {
  Tensor out = a.value().reshaped(std::move(new_shape));
  auto n = make_node(std::move(out), {a.node()}, [](Node& self) {
    accumulate(*self.parents[0], self.grad.reshaped(self.parents[0]->value.shape()));
  });
  return Var::from_node(n);
}

Var permute(const Var& a, std::vector<int64_t> perm) {
  Tensor out = a.value().permuted(perm);
  std::vector<int64_t> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int64_t>(i);
  auto n = make_node(std::move(out), {a.node()}, [inv](Node& self) {
    accumulate(*self.parents[0], self.grad.permuted(inv));
  });
  return Var::from_node(n);
}

Var concat_axis(const std::vector<Var>& parts, int64_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat of zero parts");
  const int64_t nd = parts[0].value().ndim();
  if (axis < 0) axis += nd;
  Shape out_shape = parts[0].shape();
  int64_t cat_dim = 0;
  for (const auto& p : parts) {
    if (p.value().ndim() != nd) throw std::invalid_argument("concat rank mismatch");
    for (int64_t i = 0; i < nd; ++i)
      if (i != axis && p.value().size(i) != out_shape[static_cast<size_t>(i)])
        throw std::invalid_argument("concat shape mismatch on non-concat axis");
    cat_dim += p.value().size(axis);
  }
  out_shape[static_cast<size_t>(axis)] = cat_dim;

  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < nd; ++i) inner *= out_shape[static_cast<size_t>(i)];

  Tensor out(out_shape);
  std::vector<int64_t> offsets;  // start (in axis units) of each part
  {
    int64_t off = 0;
    for (const auto& p : parts) {
      offsets.push_back(off);
      const int64_t d = p.value().size(axis);
      const real* src = p.value().data();
      for (int64_t o = 0; o < outer; ++o)
        std::copy_n(src + o * d * inner, d * inner, out.data() + (o * cat_dim + off) * inner);
      off += d;
    }
  }
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& p : parts) parents.push_back(p.node());
  auto n = make_node(std::move(out), std::move(parents), [axis, outer, inner, cat_dim, offsets](Node& self) {
    for (size_t pi = 0; pi < self.parents.size(); ++pi) {
      Node& p = *self.parents[pi];
      if (!p.requires_grad) continue;
      const int64_t d = p.value.size(axis);
      Tensor g = Tensor::zeros_like(p.value);
      for (int64_t o = 0; o < outer; ++o)
        std::copy_n(self.grad.data() + (o * cat_dim + offsets[pi]) * inner, d * inner, g.data() + o * d * inner);
      accumulate(p, g);
    }
  });
  return Var::from_node(n);
}

Var narrow(const Var& a, int64_t axis, int64_t start, int64_t len) {
  const int64_t nd = a.value().ndim();
  if (axis < 0) axis += nd;
  const int64_t d = a.value().size(axis);
  if (start < 0 || len < 0 || start + len > d) throw std::out_of_range("narrow range");
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= a.value().size(i);
  for (int64_t i = axis + 1; i < nd; ++i) inner *= a.value().size(i);
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor out(out_shape);
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(a.value().data() + (o * d + start) * inner, len * inner, out.data() + o * len * inner);
  auto n = make_node(std::move(out), {a.node()}, [axis, start, len, outer, inner, d](Node& self) {
    Node& p = *self.parents[0];
    Tensor g = Tensor::zeros_like(p.value);
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(self.grad.data() + o * len * inner, len * inner, g.data() + (o * d + start) * inner);
    accumulate(p, g);
  });
  return Var::from_node(n);
}

Var broadcast_front(const Var& a, int64_t n_rep) {
  if (n_rep < 1) throw std::invalid_argument("broadcast_front: n must be >= 1");
  Shape out_shape;
  out_shape.push_back(n_rep);
  for (int64_t d : a.shape()) out_shape.push_back(d);
  Tensor out(out_shape);
  const int64_t inner = a.numel();
  for (int64_t i = 0; i < n_rep; ++i) std::copy_n(a.value().data(), inner, out.data() + i * inner);
  auto n = make_node(std::move(out), {a.node()}, [n_rep, inner](Node& self) {
    Tensor g = Tensor::zeros_like(self.parents[0]->value);
    for (int64_t i = 0; i < n_rep; ++i)
      for (int64_t j = 0; j < inner; ++j) g[j] += self.grad[i * inner + j];
    accumulate(*self.parents[0], g);
  });
  return Var::from_node(n);
}

Var detach(const Var& a) { return Var(a.value(), false); }

// ---------------- linear algebra ----------------

Var matmul_batched(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.ndim() != 3 || bv.ndim() != 3) throw std::invalid_argument("matmul_batched expects rank-3 tensors");
  const int64_t B = av.size(0);
  if (bv.size(0) != B) throw std::invalid_argument("matmul_batched batch mismatch");
  const int64_t m = trans_a ? av.size(2) : av.size(1);
  const int64_t k = trans_a ? av.size(1) : av.size(2);
  const int64_t kb = trans_b ? bv.size(2) : bv.size(1);
  const int64_t n_cols = trans_b ? bv.size(1) : bv.size(2);
  if (k != kb) throw std::invalid_argument("matmul_batched inner dimension mismatch");

  Tensor out({B, m, n_cols});
  for (int64_t i = 0; i < B; ++i) {
    ConstMatMap A(av.data() + i * av.size(1) * av.size(2), av.size(1), av.size(2));
    ConstMatMap Bm(bv.data() + i * bv.size(1) * bv.size(2), bv.size(1), bv.size(2));
    MatMap O(out.data() + i * m * n_cols, m, n_cols);
    if (!trans_a && !trans_b) O.noalias() = A * Bm;
    else if (trans_a && !trans_b) O.noalias() = A.transpose() * Bm;
    else if (!trans_a && trans_b) O.noalias() = A * Bm.transpose();
    else O.noalias() = A.transpose() * Bm.transpose();
  }
  auto n = make_node(std::move(out), {a.node(), b.node()}, [B, m, n_cols, trans_a, trans_b](Node& self) {
    const Tensor& av2 = self.parents[0]->value;
    const Tensor& bv2 = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      Tensor ga = Tensor::zeros_like(av2);
      for (int64_t i = 0; i < B; ++i) {
        ConstMatMap G(self.grad.data() + i * m * n_cols, m, n_cols);
        ConstMatMap Bm(bv2.data() + i * bv2.size(1) * bv2.size(2), bv2.size(1), bv2.size(2));
        MatMap GA(ga.data() + i * av2.size(1) * av2.size(2), av2.size(1), av2.size(2));
        if (!trans_a && !trans_b) GA.noalias() = G * Bm.transpose();
        else if (!trans_a && trans_b) GA.noalias() = G * Bm;
        else if (trans_a && !trans_b) GA.noalias() = Bm * G.transpose();
        else GA.noalias() = Bm.transpose() * G.transpose();
      }
      accumulate(*self.parents[0], ga);
    }
    if (self.parents[1]->requires_grad) {
      Tensor gb = Tensor::zeros_like(bv2);
      for (int64_t i = 0; i < B; ++i) {
        ConstMatMap G(self.grad.data() + i * m * n_cols, m, n_cols);
        ConstMatMap A(av2.data() + i * av2.size(1) * av2.size(2), av2.size(1), av2.size(2));
        MatMap GB(gb.data() + i * bv2.size(1) * bv2.size(2), bv2.size(1), bv2.size(2));
        if (!trans_a && !trans_b) GB.noalias() = A.transpose() * G;
        else if (trans_a && !trans_b) GB.noalias() = A * G;
        else if (!trans_a && trans_b) GB.noalias() = G.transpose() * A;
        else GB.noalias() = G.transpose() * A.transpose();
      }
      accumulate(*self.parents[1], gb);
    }
  });
  return Var::from_node(n);
}

Var softmax_lastdim(const Var& a) {
  const Tensor& av = a.value();
  const int64_t n_last = av.size(-1);
  const int64_t rows = av.numel() / n_last;
  Tensor out = av;
  for (int64_t r = 0; r < rows; ++r) {
    real* row = out.data() + r * n_last;
    real mx = row[0];
    for (int64_t i = 1; i < n_last; ++i) mx = std::max(mx, row[i]);
    real z = 0.0;
    for (int64_t i = 0; i < n_last; ++i) {
      row[i] = std::exp(row[i] - mx);
      z += row[i];
    }
    const real inv = 1.0 / z;
    for (int64_t i = 0; i < n_last; ++i) row[i] *= inv;
  }
  Tensor saved = out;
  auto n = make_node(std::move(out), {a.node()}, [saved, rows, n_last](Node& self) {
    Tensor g = Tensor::zeros_like(saved);
    for (int64_t r = 0; r < rows; ++r) {
      const real* y = saved.data() + r * n_last;
      const real* dy = self.grad.data() + r * n_last;
      real dot = 0.0;
      for (int64_t i = 0; i < n_last; ++i) dot += y[i] * dy[i];
      real* gd = g.data() + r * n_last;
      for (int64_t i = 0; i < n_last; ++i) gd[i] = y[i] * (dy[i] - dot);
    }
    accumulate(*self.parents[0], g);
  });
  return Var::from_node(n);
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.ndim() != 2 || wv.ndim() != 2 || bv.ndim() != 1) throw std::invalid_argument("linear rank mismatch");
  const int64_t N = xv.size(0), d = xv.size(1), o = wv.size(0);
  if (wv.size(1) != d || bv.size(0) != o) throw std::invalid_argument("linear shape mismatch");
  Tensor out({N, o});
  {
    ConstMatMap X(xv.data(), N, d);
    ConstMatMap W(wv.data(), o, d);
    MatMap O(out.data(), N, o);
    O.noalias() = X * W.transpose();
    for (int64_t i = 0; i < N; ++i)
      for (int64_t j = 0; j < o; ++j) out[i * o + j] += bv[j];
  }
  auto n = make_node(std::move(out), {x.node(), w.node(), b.node()}, [N, d, o](Node& self) {
    ConstMatMap G(self.grad.data(), N, o);
    if (self.parents[0]->requires_grad) {
      Tensor gx({N, d});
      ConstMatMap W(self.parents[1]->value.data(), o, d);
      MatMap GX(gx.data(), N, d);
      GX.noalias() = G * W;
      accumulate(*self.parents[0], gx);
    }
    if (self.parents[1]->requires_grad) {
      Tensor gw({o, d});
      ConstMatMap X(self.parents[0]->value.data(), N, d);
      MatMap GW(gw.data(), o, d);
      GW.noalias() = G.transpose() * X;
      accumulate(*self.parents[1], gw);
    }
    if (self.parents[2]->requires_grad) {
      Tensor gb({o});
      for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < o; ++j) gb[j] += self.grad[i * o + j];
      accumulate(*self.parents[2], gb);
    }
  });
  return Var::from_node(n);
}

// ---------------- convolution kernels ----------------

namespace {

struct ConvDims {
  int64_t N, Cin, H, W, Cout, kh, kw, Ho, Wo;
};

// cols: [Cin*kh*kw, Ho*Wo] for one image
void im2col(const real* x, const ConvDims& d, int64_t stride, int64_t pad, real* cols) {
  const int64_t patch = d.Cin * d.kh * d.kw;
  const int64_t hw = d.Ho * d.Wo;
  for (int64_t p = 0; p < patch; ++p) {
    const int64_t ci = p / (d.kh * d.kw);
    const int64_t rem = p % (d.kh * d.kw);
    const int64_t ki = rem / d.kw;
    const int64_t kj = rem % d.kw;
    const real* xc = x + ci * d.H * d.W;
    real* crow = cols + p * hw;
    for (int64_t ho = 0; ho < d.Ho; ++ho) {
      const int64_t hi = ho * stride - pad + ki;
      if (hi < 0 || hi >= d.H) {
        std::fill_n(crow + ho * d.Wo, d.Wo, 0.0);
        continue;
      }
      const real* xrow = xc + hi * d.W;
      real* cdst = crow + ho * d.Wo;
      for (int64_t wo = 0; wo < d.Wo; ++wo) {
        const int64_t wi = wo * stride - pad + kj;
        cdst[wo] = (wi >= 0 && wi < d.W) ? xrow[wi] : 0.0;
      }
    }
  }
}

void col2im_add(const real* cols, const ConvDims& d, int64_t stride, int64_t pad, real* x) {
  const int64_t patch = d.Cin * d.kh * d.kw;
  const int64_t hw = d.Ho * d.Wo;
  for (int64_t p = 0; p < patch; ++p) {
    const int64_t ci = p / (d.kh * d.kw);
    const int64_t rem = p % (d.kh * d.kw);
    const int64_t ki = rem / d.kw;
    const int64_t kj = rem % d.kw;
    real* xc = x + ci * d.H * d.W;
    const real* crow = cols + p * hw;
    for (int64_t ho = 0; ho < d.Ho; ++ho) {
      const int64_t hi = ho * stride - pad + ki;
      if (hi < 0 || hi >= d.H) continue;
      real* xrow = xc + hi * d.W;
      const real* csrc = crow + ho * d.Wo;
      for (int64_t wo = 0; wo < d.Wo; ++wo) {
        const int64_t wi = wo * stride - pad + kj;
        if (wi >= 0 && wi < d.W) xrow[wi] += csrc[wo];
      }
    }
  }
}

// y[n] = W_mat x cols(x[n]) (+ bias)
Tensor conv_fwd(const Tensor& x, const Tensor& w, const Tensor* bias, int64_t stride, int64_t pad) {
  ConvDims d{x.size(0), x.size(1), x.size(2), x.size(3), w.size(0), w.size(2), w.size(3), 0, 0};
  if (w.size(1) != d.Cin) throw std::invalid_argument("conv2d channel mismatch");
  d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
  if (d.Ho < 1 || d.Wo < 1) throw std::invalid_argument("conv2d output would be empty");
  const int64_t patch = d.Cin * d.kh * d.kw;
  const int64_t hw = d.Ho * d.Wo;
  Tensor out({d.N, d.Cout, d.Ho, d.Wo});
  std::vector<real> cols(static_cast<size_t>(patch * hw));
  ConstMatMap W(w.data(), d.Cout, patch);
  for (int64_t n = 0; n < d.N; ++n) {
    im2col(x.data() + n * d.Cin * d.H * d.W, d, stride, pad, cols.data());
    ConstMatMap C(cols.data(), patch, hw);
    MatMap O(out.data() + n * d.Cout * hw, d.Cout, hw);
    O.noalias() = W * C;
    if (bias)
      for (int64_t co = 0; co < d.Cout; ++co) {
        const real bv = (*bias)[co];
        real* orow = out.data() + (n * d.Cout + co) * hw;
        for (int64_t i = 0; i < hw; ++i) orow[i] += bv;
      }
  }
  return out;
}

// dx = col2im(W^T dy)
Tensor conv_dx(const Tensor& dy, const Tensor& w, int64_t stride, int64_t pad, int64_t Hin, int64_t Win) {
  ConvDims d{dy.size(0), w.size(1), Hin, Win, w.size(0), w.size(2), w.size(3), dy.size(2), dy.size(3)};
  const int64_t patch = d.Cin * d.kh * d.kw;
  const int64_t hw = d.Ho * d.Wo;
  Tensor dx({d.N, d.Cin, d.H, d.W});
  std::vector<real> cols(static_cast<size_t>(patch * hw));
  ConstMatMap W(w.data(), d.Cout, patch);
  for (int64_t n = 0; n < d.N; ++n) {
    ConstMatMap G(dy.data() + n * d.Cout * hw, d.Cout, hw);
    MatMap C(cols.data(), patch, hw);
    C.noalias() = W.transpose() * G;
    col2im_add(cols.data(), d, stride, pad, dx.data() + n * d.Cin * d.H * d.W);
  }
  return dx;
}

// dw = sum_n dy_n cols_n^T ; db = sum dy
void conv_dw(const Tensor& x, const Tensor& dy, int64_t kh, int64_t kw, int64_t stride, int64_t pad, Tensor& dw,
             Tensor* db) {
  ConvDims d{x.size(0), x.size(1), x.size(2), x.size(3), dy.size(1), kh, kw, dy.size(2), dy.size(3)};
  const int64_t patch = d.Cin * d.kh * d.kw;
  const int64_t hw = d.Ho * d.Wo;
  std::vector<real> cols(static_cast<size_t>(patch * hw));
  MatMap DW(dw.data(), d.Cout, patch);
  for (int64_t n = 0; n < d.N; ++n) {
    im2col(x.data() + n * d.Cin * d.H * d.W, d, stride, pad, cols.data());
    ConstMatMap C(cols.data(), patch, hw);
    ConstMatMap G(dy.data() + n * d.Cout * hw, d.Cout, hw);
    DW.noalias() += G * C.transpose();
    if (db)
      for (int64_t co = 0; co < d.Cout; ++co) {
        real s = 0.0;
        const real* grow = dy.data() + (n * d.Cout + co) * hw;
        for (int64_t i = 0; i < hw; ++i) s += grow[i];
        (*db)[co] += s;
      }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int64_t stride, int64_t pad) {
  if (x.value().ndim() != 4 || w.value().ndim() != 4) throw std::invalid_argument("conv2d expects rank-4 x and w");
  Tensor out = conv_fwd(x.value(), w.value(), &b.value(), stride, pad);
  auto n = make_node(std::move(out), {x.node(), w.node(), b.node()}, [stride, pad](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    const Tensor& wv = self.parents[1]->value;
    if (self.parents[0]->requires_grad)
      accumulate(*self.parents[0], conv_dx(self.grad, wv, stride, pad, xv.size(2), xv.size(3)));
    if (self.parents[1]->requires_grad || self.parents[2]->requires_grad) {
      Tensor dw = Tensor::zeros_like(wv);
      Tensor db = Tensor::zeros_like(self.parents[2]->value);
      conv_dw(xv, self.grad, wv.size(2), wv.size(3), stride, pad, dw, &db);
      accumulate(*self.parents[1], dw);
      accumulate(*self.parents[2], db);
    }
  });
  return Var::from_node(n);
}

Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int64_t stride, int64_t pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();  // [Cin, Cout, kh, kw]
  if (xv.ndim() != 4 || wv.ndim() != 4) throw std::invalid_argument("conv_transpose2d expects rank-4 x and w");
  if (wv.size(0) != xv.size(1)) throw std::invalid_argument("conv_transpose2d channel mismatch");
  const int64_t Hout = (xv.size(2) - 1) * stride - 2 * pad + wv.size(2);
  const int64_t Wout = (xv.size(3) - 1) * stride - 2 * pad + wv.size(3);
  if (Hout < 1 || Wout < 1) throw std::invalid_argument("conv_transpose2d output would be empty");
  // Forward of a transposed conv is the data-gradient of the matching conv.
  Tensor out = conv_dx(xv, wv, stride, pad, Hout, Wout);
  const int64_t Cout = wv.size(1);
  const Tensor& bv = b.value();
  for (int64_t n2 = 0; n2 < out.size(0); ++n2)
    for (int64_t co = 0; co < Cout; ++co) {
      real* orow = out.data() + (n2 * Cout + co) * Hout * Wout;
      const real add = bv[co];
      for (int64_t i = 0; i < Hout * Wout; ++i) orow[i] += add;
    }
  auto n = make_node(std::move(out), {x.node(), w.node(), b.node()}, [stride, pad](Node& self) {
    const Tensor& xv2 = self.parents[0]->value;
    const Tensor& wv2 = self.parents[1]->value;
    if (self.parents[0]->requires_grad)
      accumulate(*self.parents[0], conv_fwd(self.grad, wv2, nullptr, stride, pad));
    if (self.parents[1]->requires_grad) {
      Tensor dw = Tensor::zeros_like(wv2);
      conv_dw(self.grad, xv2, wv2.size(2), wv2.size(3), stride, pad, dw, nullptr);
      accumulate(*self.parents[1], dw);
    }
    if (self.parents[2]->requires_grad) {
      Tensor db = Tensor::zeros_like(self.parents[2]->value);
      const int64_t Cout2 = wv2.size(1);
      const int64_t hw = self.grad.size(2) * self.grad.size(3);
      for (int64_t n2 = 0; n2 < self.grad.size(0); ++n2)
        for (int64_t co = 0; co < Cout2; ++co) {
          real s = 0.0;
          const real* grow = self.grad.data() + (n2 * Cout2 + co) * hw;
          for (int64_t i = 0; i < hw; ++i) s += grow[i];
          db[co] += s;
        }
      accumulate(*self.parents[2], db);
    }
  });
  return Var::from_node(n);
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int64_t groups, real eps) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 4) throw std::invalid_argument("group_norm expects rank-4 input");
  const int64_t N = xv.size(0), C = xv.size(1), HW = xv.size(2) * xv.size(3);
  if (C % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
  const int64_t Cg = C / groups;
  const int64_t gsize = Cg * HW;

  Tensor xhat = Tensor::zeros_like(xv);
  Tensor inv_std({N, groups});
  Tensor out = Tensor::zeros_like(xv);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (int64_t n2 = 0; n2 < N; ++n2)
    for (int64_t g = 0; g < groups; ++g) {
      const real* xs = xv.data() + (n2 * C + g * Cg) * HW;
      real m = 0.0;
      for (int64_t i = 0; i < gsize; ++i) m += xs[i];
      m /= static_cast<real>(gsize);
      real var = 0.0;
      for (int64_t i = 0; i < gsize; ++i) {
        const real dv = xs[i] - m;
        var += dv * dv;
      }
      var /= static_cast<real>(gsize);
      const real is = 1.0 / std::sqrt(var + eps);
      inv_std[n2 * groups + g] = is;
      real* xh = xhat.data() + (n2 * C + g * Cg) * HW;
      real* od = out.data() + (n2 * C + g * Cg) * HW;
      for (int64_t c = 0; c < Cg; ++c) {
        const real ga = gv[g * Cg + c];
        const real be = bv[g * Cg + c];
        for (int64_t i = 0; i < HW; ++i) {
          const real v = (xs[c * HW + i] - m) * is;
          xh[c * HW + i] = v;
          od[c * HW + i] = ga * v + be;
        }
      }
    }

  auto n = make_node(std::move(out), {x.node(), gamma.node(), beta.node()},
                     [xhat, inv_std, groups, N, C, HW, Cg, gsize](Node& self) {
    const Tensor& gv2 = self.parents[1]->value;
    if (self.parents[1]->requires_grad || self.parents[2]->requires_grad) {
      Tensor dgamma({C});
      Tensor dbeta({C});
      for (int64_t n2 = 0; n2 < N; ++n2)
        for (int64_t c = 0; c < C; ++c) {
          const real* dy = self.grad.data() + (n2 * C + c) * HW;
          const real* xh = xhat.data() + (n2 * C + c) * HW;
          real sg = 0.0, sb = 0.0;
          for (int64_t i = 0; i < HW; ++i) {
            sg += dy[i] * xh[i];
            sb += dy[i];
          }
          dgamma[c] += sg;
          dbeta[c] += sb;
        }
      accumulate(*self.parents[1], dgamma);
      accumulate(*self.parents[2], dbeta);
    }
    if (self.parents[0]->requires_grad) {
      Tensor dx = Tensor::zeros_like(self.parents[0]->value);
      for (int64_t n2 = 0; n2 < N; ++n2)
        for (int64_t g = 0; g < groups; ++g) {
          const real is = inv_std[n2 * groups + g];
          const real* dy = self.grad.data() + (n2 * C + g * Cg) * HW;
          const real* xh = xhat.data() + (n2 * C + g * Cg) * HW;
          real mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (int64_t c = 0; c < Cg; ++c) {
            const real ga = gv2[g * Cg + c];
            for (int64_t i = 0; i < HW; ++i) {
              const real dxh = dy[c * HW + i] * ga;
              mean_dxhat += dxh;
              mean_dxhat_xhat += dxh * xh[c * HW + i];
            }
          }
          mean_dxhat /= static_cast<real>(gsize);
          mean_dxhat_xhat /= static_cast<real>(gsize);
          real* dxd = dx.data() + (n2 * C + g * Cg) * HW;
          for (int64_t c = 0; c < Cg; ++c) {
            const real ga = gv2[g * Cg + c];
            for (int64_t i = 0; i < HW; ++i) {
              const real dxh = dy[c * HW + i] * ga;
              dxd[c * HW + i] = is * (dxh - mean_dxhat - xh[c * HW + i] * mean_dxhat_xhat);
            }
          }
        }
      accumulate(*self.parents[0], dx);
    }
  });
  return Var::from_node(n);
}

Var add_channel_bias(const Var& x, const Var& v) {
  const Tensor& xv = x.value();
  const Tensor& vv = v.value();
  if (xv.ndim() != 4 || vv.ndim() != 1 || vv.size(0) != xv.size(1))
    throw std::invalid_argument("add_channel_bias shape mismatch");
  const int64_t N = xv.size(0), C = xv.size(1), HW = xv.size(2) * xv.size(3);
  Tensor out = xv;
  for (int64_t n2 = 0; n2 < N; ++n2)
    for (int64_t c = 0; c < C; ++c) {
      real* od = out.data() + (n2 * C + c) * HW;
      const real add = vv[c];
      for (int64_t i = 0; i < HW; ++i) od[i] += add;
    }
  auto n = make_node(std::move(out), {x.node(), v.node()}, [N, C, HW](Node& self) {
    accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      Tensor gv({C});
      for (int64_t n2 = 0; n2 < N; ++n2)
        for (int64_t c = 0; c < C; ++c) {
          const real* gd = self.grad.data() + (n2 * C + c) * HW;
          real s = 0.0;
          for (int64_t i = 0; i < HW; ++i) s += gd[i];
          gv[c] += s;
        }
      accumulate(*self.parents[1], gv);
    }
  });
  return Var::from_node(n);
}

}  // namespace diffcast::ag
