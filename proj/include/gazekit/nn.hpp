#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "gazekit/common.hpp"

namespace gazekit::nn {

// All learnable arrays are Mat<S>; biases and per-dim scales are 1 x n.
// Layers keep (value, grad) pairs and register them by name. Forward passes
// are const and write activations into caller-owned cache structs, so one
// parameter set can serve concurrent inference calls; backward accumulates
// into the grad members (single writer during training).

template <class S>
struct ParamRef {
  std::string name;
  Mat<S>* value;
  Mat<S>* grad;
};

template <class S>
struct ParamRegistry {
  std::vector<ParamRef<S>> items;

  void add(const std::string& name, Mat<S>* v, Mat<S>* g) {
    items.push_back({name, v, g});
  }
  Index total_size() const {
    Index n = 0;
    for (const auto& p : items) n += p.value->size();
    return n;
  }
  void zero_grads() {
    for (auto& p : items) p.grad->setZero();
  }
  const ParamRef<S>* find(const std::string& name) const {
    for (const auto& p : items)
      if (p.name == name) return &p;
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

template <class S>
struct LinearCache {
  Mat<S> x;
};

template <class S>
struct Linear {
  Mat<S> W;  // in x out
  Mat<S> b;  // 1 x out
  Mat<S> gW, gb;

  void init(Index in, Index out, Rng& rng, double init_std = 0.02) {
    W.resize(in, out);
    rng.fill_trunc_normal(W, init_std);
    b = Mat<S>::Zero(1, out);
    gW = Mat<S>::Zero(in, out);
    gb = Mat<S>::Zero(1, out);
  }

  Index in_dim() const { return W.rows(); }
  Index out_dim() const { return W.cols(); }

  Mat<S> forward(const Mat<S>& x, LinearCache<S>* c) const {
    if (x.cols() != W.rows())
      throw ShapeError("linear: input dim " + std::to_string(x.cols()) +
                       " != weight dim " + std::to_string(W.rows()));
    if (c) c->x = x;
    Mat<S> y = x * W;
    y.rowwise() += b.row(0);
    return y;
  }

  Mat<S> backward(const Mat<S>& dy, const LinearCache<S>& c) {
    gW.noalias() += c.x.transpose() * dy;
    gb.row(0) += dy.colwise().sum();
    return dy * W.transpose();
  }

  void register_params(ParamRegistry<S>& r, const std::string& prefix) {
    r.add(prefix + ".weight", &W, &gW);
    r.add(prefix + ".bias", &b, &gb);
  }
};

// ---------------------------------------------------------------------------
// LayerNorm over the last (feature) axis, one row at a time
// ---------------------------------------------------------------------------

template <class S>
struct LayerNormCache {
  Mat<S> xhat;
  Vec<S> inv_std;
};

template <class S>
struct LayerNorm {
  Mat<S> gamma, beta;  // 1 x d
  S eps = S(1e-5);

  void init(Index d) {
    gamma = Mat<S>::Ones(1, d);
    beta = Mat<S>::Zero(1, d);
    g_gamma = Mat<S>::Zero(1, d);
    g_beta = Mat<S>::Zero(1, d);
  }

  Mat<S> forward(const Mat<S>& x, LayerNormCache<S>* c) const {
    const Index n = x.rows(), d = x.cols();
    Mat<S> xhat(n, d);
    Vec<S> inv_std(n);
    for (Index i = 0; i < n; ++i) {
      S mu = x.row(i).mean();
      S var = (x.row(i).array() - mu).square().mean();
      S is = S(1) / std::sqrt(var + eps);
      xhat.row(i) = (x.row(i).array() - mu) * is;
      inv_std(i) = is;
    }
    Mat<S> y = xhat.array().rowwise() * gamma.row(0).array();
    y.array().rowwise() += beta.row(0).array();
    if (c) {
      c->xhat = std::move(xhat);
      c->inv_std = std::move(inv_std);
    }
    return y;
  }

  Mat<S> backward(const Mat<S>& dy, const LayerNormCache<S>& c) {
    const Index n = dy.rows(), d = dy.cols();
    g_gamma.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    g_beta.row(0) += dy.colwise().sum();
    Mat<S> dxhat = dy.array().rowwise() * gamma.row(0).array();
    Mat<S> dx(n, d);
    for (Index i = 0; i < n; ++i) {
      S m1 = dxhat.row(i).mean();
      S m2 = (dxhat.row(i).array() * c.xhat.row(i).array()).mean();
      dx.row(i) =
          ((dxhat.row(i).array() - m1) - c.xhat.row(i).array() * m2) *
          c.inv_std(i);
    }
    return dx;
  }

  void register_params(ParamRegistry<S>& r, const std::string& prefix) {
    r.add(prefix + ".gamma", &gamma, &g_gamma);
    r.add(prefix + ".beta", &beta, &g_beta);
  }

  Mat<S> g_gamma, g_beta;
};

// ---------------------------------------------------------------------------
// GELU (exact erf form)
// ---------------------------------------------------------------------------

template <class S>
inline S gelu_scalar(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(M_SQRT1_2)));
}

template <class S>
inline S gelu_grad_scalar(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x * S(M_SQRT1_2)));
  const S pdf = std::exp(S(-0.5) * x * x) * S(0.3989422804014326779);
  return cdf + x * pdf;
}

template <class S>
struct GeluCache {
  Mat<S> x;
};

template <class S>
struct ReluCache {
  Mat<S> x;
};

template <class S>
struct Relu {
  Mat<S> forward(const Mat<S>& x, ReluCache<S>* c) const {
    if (c) c->x = x;
    return x.cwiseMax(S(0));
  }
  Mat<S> backward(const Mat<S>& dy, const ReluCache<S>& c) const {
    return (c.x.array() > S(0)).select(dy, Mat<S>::Zero(dy.rows(), dy.cols()));
  }
};

template <class S>
struct Gelu {
  Mat<S> forward(const Mat<S>& x, GeluCache<S>* c) const {
    if (c) c->x = x;
    return x.unaryExpr([](S v) { return gelu_scalar(v); });
  }
  Mat<S> backward(const Mat<S>& dy, const GeluCache<S>& c) const {
    return dy.cwiseProduct(
        c.x.unaryExpr([](S v) { return gelu_grad_scalar(v); }));
  }
};

// ---------------------------------------------------------------------------
// Row softmax
// ---------------------------------------------------------------------------

template <class S>
inline Mat<S> softmax_rows(const Mat<S>& x) {
  Mat<S> y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    S mx = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - mx).exp();
    y.row(i) /= y.row(i).sum();
  }
  return y;
}

template <class S>
inline Mat<S> softmax_rows_backward(const Mat<S>& probs, const Mat<S>& dprobs) {
  Mat<S> dx(probs.rows(), probs.cols());
  for (Index i = 0; i < probs.rows(); ++i) {
    S dot = probs.row(i).dot(dprobs.row(i));
    dx.row(i) = probs.row(i).array() * (dprobs.row(i).array() - dot);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Multi-head self-attention with an optional additive score mask
// (0 = allowed, large negative = blocked)
// ---------------------------------------------------------------------------

template <class S>
struct AttentionCache {
  LinearCache<S> qc, kc, vc, oc;
  Mat<S> Q, K, V;
  std::vector<Mat<S>> probs;  // one N x N matrix per head
};

template <class S>
struct MultiHeadSelfAttention {
  Linear<S> wq, wk, wv, wo;
  Index num_heads = 1;

  void init(Index d, Index heads, Rng& rng) {
    if (d % heads != 0)
      throw ConfigError("attention: dim " + std::to_string(d) +
                        " not divisible by heads " + std::to_string(heads));
    num_heads = heads;
    wq.init(d, d, rng);
    wk.init(d, d, rng);
    wv.init(d, d, rng);
    wo.init(d, d, rng);
  }

  Mat<S> forward(const Mat<S>& x, const Mat<S>* mask,
                 AttentionCache<S>* c) const {
    const Index n = x.rows(), d = x.cols();
    const Index dh = d / num_heads;
    const S scale = S(1) / std::sqrt(S(dh));
    AttentionCache<S> local;
    AttentionCache<S>& cc = c ? *c : local;
    cc.Q = wq.forward(x, c ? &cc.qc : nullptr);
    cc.K = wk.forward(x, c ? &cc.kc : nullptr);
    cc.V = wv.forward(x, c ? &cc.vc : nullptr);
    cc.probs.assign(num_heads, Mat<S>());
    Mat<S> ctx(n, d);
    for (Index h = 0; h < num_heads; ++h) {
      Mat<S> scores =
          scale * (cc.Q.middleCols(h * dh, dh) *
                   cc.K.middleCols(h * dh, dh).transpose());
      if (mask) scores += *mask;
      Mat<S> p = softmax_rows(scores);
      ctx.middleCols(h * dh, dh).noalias() = p * cc.V.middleCols(h * dh, dh);
      cc.probs[h] = std::move(p);
    }
    return wo.forward(ctx, c ? &cc.oc : nullptr);
  }

  Mat<S> backward(const Mat<S>& dy, const AttentionCache<S>& c) {
    const Index n = dy.rows(), d = dy.cols();
    const Index dh = d / num_heads;
    const S scale = S(1) / std::sqrt(S(dh));
    Mat<S> dctx = wo.backward(dy, c.oc);
    Mat<S> dQ(n, d), dK(n, d), dV(n, d);
    for (Index h = 0; h < num_heads; ++h) {
      auto Qh = c.Q.middleCols(h * dh, dh);
      auto Kh = c.K.middleCols(h * dh, dh);
      auto Vh = c.V.middleCols(h * dh, dh);
      auto dctx_h = dctx.middleCols(h * dh, dh);
      const Mat<S>& p = c.probs[h];
      Mat<S> dp = dctx_h * Vh.transpose();
      dV.middleCols(h * dh, dh).noalias() = p.transpose() * dctx_h;
      Mat<S> dscores = softmax_rows_backward(p, dp);
      dQ.middleCols(h * dh, dh).noalias() = scale * (dscores * Kh);
      dK.middleCols(h * dh, dh).noalias() =
          scale * (dscores.transpose() * Qh);
    }
    Mat<S> dx = wq.backward(dQ, c.qc);
    dx += wk.backward(dK, c.kc);
    dx += wv.backward(dV, c.vc);
    return dx;
  }

  void register_params(ParamRegistry<S>& r, const std::string& prefix) {
    wq.register_params(r, prefix + ".q");
    wk.register_params(r, prefix + ".k");
    wv.register_params(r, prefix + ".v");
    wo.register_params(r, prefix + ".out");
  }
};

// ---------------------------------------------------------------------------
// 2-layer MLP with GELU
// ---------------------------------------------------------------------------

template <class S>
struct MlpCache {
  LinearCache<S> c1, c2;
  GeluCache<S> cg;
};

template <class S>
struct Mlp {
  Linear<S> fc1, fc2;
  Gelu<S> act;

  void init(Index d, Index hidden, Rng& rng) {
    fc1.init(d, hidden, rng);
    fc2.init(hidden, d, rng);
  }

  Mat<S> forward(const Mat<S>& x, MlpCache<S>* c) const {
    Mat<S> h = fc1.forward(x, c ? &c->c1 : nullptr);
    h = act.forward(h, c ? &c->cg : nullptr);
    return fc2.forward(h, c ? &c->c2 : nullptr);
  }

  Mat<S> backward(const Mat<S>& dy, const MlpCache<S>& c) {
    Mat<S> dh = fc2.backward(dy, c.c2);
    dh = act.backward(dh, c.cg);
    return fc1.backward(dh, c.c1);
  }

  void register_params(ParamRegistry<S>& r, const std::string& prefix) {
    fc1.register_params(r, prefix + ".fc1");
    fc2.register_params(r, prefix + ".fc2");
  }
};

// ---------------------------------------------------------------------------
// Pre-norm transformer encoder layer with stochastic depth on both
// residual branches. The drop decision is sampled once per token list and
// branch; kept branches are scaled by 1/(1-p). Evaluation is the identity.
// ---------------------------------------------------------------------------

template <class S>
struct TransformerLayerCache {
  LayerNormCache<S> ln1c, ln2c;
  AttentionCache<S> attnc;
  MlpCache<S> mlpc;
  S keep1 = S(1), keep2 = S(1);
};

template <class S>
struct TransformerLayer {
  LayerNorm<S> ln1, ln2;
  MultiHeadSelfAttention<S> attn;
  Mlp<S> mlp;
  double drop_path_p = 0.0;

  void init(Index d, Index heads, Index mlp_dim, double drop_p, Rng& rng) {
    ln1.init(d);
    ln2.init(d);
    attn.init(d, heads, rng);
    mlp.init(d, mlp_dim, rng);
    drop_path_p = drop_p;
  }

  // rng non-null => training mode (stochastic depth active)
  Mat<S> forward(const Mat<S>& x, const Mat<S>* mask, Rng* rng,
                 TransformerLayerCache<S>* c) const {
    TransformerLayerCache<S> local;
    TransformerLayerCache<S>& cc = c ? *c : local;
    cc.keep1 = sample_keep(rng);
    cc.keep2 = sample_keep(rng);
    Mat<S> y = x;
    if (cc.keep1 != S(0)) {
      Mat<S> h = ln1.forward(x, c ? &cc.ln1c : nullptr);
      y += cc.keep1 * attn.forward(h, mask, c ? &cc.attnc : nullptr);
    }
    if (cc.keep2 != S(0)) {
      Mat<S> h = ln2.forward(y, c ? &cc.ln2c : nullptr);
      y += cc.keep2 * mlp.forward(h, c ? &cc.mlpc : nullptr);
    }
    return y;
  }

  Mat<S> backward(const Mat<S>& dy, const TransformerLayerCache<S>& c) {
    Mat<S> dx1 = dy;
    if (c.keep2 != S(0)) {
      Mat<S> dm = (c.keep2 * dy).eval();
      dx1 += ln2.backward(mlp.backward(dm, c.mlpc), c.ln2c);
    }
    Mat<S> dx = dx1;
    if (c.keep1 != S(0)) {
      Mat<S> da = (c.keep1 * dx1).eval();
      dx += ln1.backward(attn.backward(da, c.attnc), c.ln1c);
    }
    return dx;
  }

  void register_params(ParamRegistry<S>& r, const std::string& prefix) {
    ln1.register_params(r, prefix + ".ln1");
    attn.register_params(r, prefix + ".attn");
    ln2.register_params(r, prefix + ".ln2");
    mlp.register_params(r, prefix + ".mlp");
  }

 private:
  S sample_keep(Rng* rng) const {
    if (!rng || drop_path_p <= 0.0) return S(1);
    if (rng->uniform() < drop_path_p) return S(0);
    return S(1.0 / (1.0 - drop_path_p));
  }
};

template <class S>
inline Mat<S> sigmoid(const Mat<S>& x) {
  return x.unaryExpr([](S v) {
    return v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                     : std::exp(v) / (S(1) + std::exp(v));
  });
}

}  // namespace gazekit::nn
