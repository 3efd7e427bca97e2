#pragma once

#include <string>
#include <vector>

#include "gazekit/common.hpp"
#include "gazekit/nn.hpp"

namespace gazekit::nn {

// Grid feature maps use the same layout as token lists: one row per cell in
// row-major spatial order, one column per channel. Scalar maps (heatmaps,
// masks) use Mat<S> with rows = H, cols = W.

template <class S>
inline Mat<S> grid_to_map(const Mat<S>& cells, Index H, Index W) {
  if (cells.rows() != H * W || cells.cols() != 1)
    throw ShapeError("grid_to_map: expected " + std::to_string(H * W) +
                     "x1 cells");
  Mat<S> m(H, W);
  for (Index i = 0; i < H; ++i)
    for (Index j = 0; j < W; ++j) m(i, j) = cells(i * W + j, 0);
  return m;
}

template <class S>
inline Mat<S> map_to_grid(const Mat<S>& m) {
  Mat<S> cells(m.rows() * m.cols(), 1);
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) cells(i * m.cols() + j, 0) = m(i, j);
  return cells;
}

// ---------------------------------------------------------------------------
// 1x1 convolution == per-cell linear map
// ---------------------------------------------------------------------------

template <class S>
struct Conv1x1 {
  Linear<S> lin;

  void init(Index cin, Index cout, Rng& rng) { lin.init(cin, cout, rng); }

  Mat<S> forward(const Mat<S>& cells, LinearCache<S>* c) const {
    return lin.forward(cells, c);
  }
  Mat<S> backward(const Mat<S>& dy, const LinearCache<S>& c) {
    return lin.backward(dy, c);
  }
  void register_params(ParamRegistry<S>& r, const std::string& prefix) {
    lin.register_params(r, prefix);
  }
};

// ---------------------------------------------------------------------------
// Transposed conv, kernel 2, stride 2: H x W -> 2H x 2W
// ---------------------------------------------------------------------------

template <class S>
struct ConvT2x2Cache {
  Mat<S> x;
  Index H = 0, W = 0;
};

template <class S>
struct ConvT2x2 {
  // one weight matrix (cin x cout) per output offset (dy, dx)
  Mat<S> Wk[4];
  Mat<S> b;  // 1 x cout
  Mat<S> gWk[4], gb;

  void init(Index cin, Index cout, Rng& rng) {
    for (int k = 0; k < 4; ++k) {
      Wk[k].resize(cin, cout);
      rng.fill_trunc_normal(Wk[k], 0.02);
      gWk[k] = Mat<S>::Zero(cin, cout);
    }
    b = Mat<S>::Zero(1, cout);
    gb = Mat<S>::Zero(1, cout);
  }

  Mat<S> forward(const Mat<S>& cells, Index H, Index W,
                 ConvT2x2Cache<S>* c) const {
    if (cells.rows() != H * W)
      throw ShapeError("convt2x2: cell count mismatch");
    if (c) {
      c->x = cells;
      c->H = H;
      c->W = W;
    }
    const Index cout = Wk[0].cols();
    Mat<S> out(4 * H * W, cout);
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        Mat<S> sub = cells * Wk[dy * 2 + dx];
        sub.rowwise() += b.row(0);
        for (Index i = 0; i < H; ++i)
          for (Index j = 0; j < W; ++j)
            out.row((2 * i + dy) * 2 * W + (2 * j + dx)) =
                sub.row(i * W + j);
      }
    return out;
  }

  Mat<S> backward(const Mat<S>& dout, const ConvT2x2Cache<S>& c) {
    const Index H = c.H, W = c.W;
    Mat<S> dx = Mat<S>::Zero(H * W, Wk[0].rows());
    for (int dy = 0; dy < 2; ++dy)
      for (int dx_ = 0; dx_ < 2; ++dx_) {
        Mat<S> dsub(H * W, Wk[0].cols());
        for (Index i = 0; i < H; ++i)
          for (Index j = 0; j < W; ++j)
            dsub.row(i * W + j) =
                dout.row((2 * i + dy) * 2 * W + (2 * j + dx_));
        gWk[dy * 2 + dx_].noalias() += c.x.transpose() * dsub;
        gb.row(0) += dsub.colwise().sum();
        dx.noalias() += dsub * Wk[dy * 2 + dx_].transpose();
      }
    return dx;
  }

  void register_params(ParamRegistry<S>& r, const std::string& prefix) {
    static const char* tag[4] = {"00", "01", "10", "11"};
    for (int k = 0; k < 4; ++k)
      r.add(prefix + ".w" + tag[k], &Wk[k], &gWk[k]);
    r.add(prefix + ".bias", &b, &gb);
  }
};

// ---------------------------------------------------------------------------
// Strided conv, kernel 2, stride 2: H x W -> H/2 x W/2
// ---------------------------------------------------------------------------

template <class S>
struct Conv2x2s2Cache {
  Mat<S> x;
  Index H = 0, W = 0;
};

template <class S>
struct Conv2x2s2 {
  Mat<S> Wk[4];
  Mat<S> b;
  Mat<S> gWk[4], gb;

  void init(Index cin, Index cout, Rng& rng) {
    for (int k = 0; k < 4; ++k) {
      Wk[k].resize(cin, cout);
      rng.fill_trunc_normal(Wk[k], 0.02);
      gWk[k] = Mat<S>::Zero(cin, cout);
    }
    b = Mat<S>::Zero(1, cout);
    gb = Mat<S>::Zero(1, cout);
  }

  Mat<S> forward(const Mat<S>& cells, Index H, Index W,
                 Conv2x2s2Cache<S>* c) const {
    if (H % 2 || W % 2) throw ShapeError("conv2x2s2: odd input grid");
    if (cells.rows() != H * W)
      throw ShapeError("conv2x2s2: cell count mismatch");
    if (c) {
      c->x = cells;
      c->H = H;
      c->W = W;
    }
    const Index Ho = H / 2, Wo = W / 2;
    Mat<S> out = Mat<S>::Zero(Ho * Wo, Wk[0].cols());
    Mat<S> gathered(Ho * Wo, Wk[0].rows());
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        for (Index i = 0; i < Ho; ++i)
          for (Index j = 0; j < Wo; ++j)
            gathered.row(i * Wo + j) =
                cells.row((2 * i + dy) * W + (2 * j + dx));
        out.noalias() += gathered * Wk[dy * 2 + dx];
      }
    out.rowwise() += b.row(0);
    return out;
  }

  Mat<S> backward(const Mat<S>& dout, const Conv2x2s2Cache<S>& c) {
    const Index H = c.H, W = c.W, Ho = H / 2, Wo = W / 2;
    Mat<S> dx = Mat<S>::Zero(H * W, Wk[0].rows());
    Mat<S> gathered(Ho * Wo, Wk[0].rows());
    gb.row(0) += dout.colwise().sum();
    for (int dy = 0; dy < 2; ++dy)
      for (int dx_ = 0; dx_ < 2; ++dx_) {
        for (Index i = 0; i < Ho; ++i)
          for (Index j = 0; j < Wo; ++j)
            gathered.row(i * Wo + j) =
                c.x.row((2 * i + dy) * W + (2 * j + dx_));
        gWk[dy * 2 + dx_].noalias() += gathered.transpose() * dout;
        Mat<S> dg = dout * Wk[dy * 2 + dx_].transpose();
        for (Index i = 0; i < Ho; ++i)
          for (Index j = 0; j < Wo; ++j)
            dx.row((2 * i + dy) * W + (2 * j + dx_)) += dg.row(i * Wo + j);
      }
    return dx;
  }

  void register_params(ParamRegistry<S>& r, const std::string& prefix) {
    static const char* tag[4] = {"00", "01", "10", "11"};
    for (int k = 0; k < 4; ++k)
      r.add(prefix + ".w" + tag[k], &Wk[k], &gWk[k]);
    r.add(prefix + ".bias", &b, &gb);
  }
};

// ---------------------------------------------------------------------------
// BatchNorm over rows (batch * cells) per channel column. Used only by the
// convolutional baseline decoder.
// ---------------------------------------------------------------------------

template <class S>
struct BatchNormCache {
  Mat<S> xhat;
  Vec<S> inv_std;
};

template <class S>
struct BatchNorm {
  Mat<S> gamma, beta;
  Mat<S> g_gamma, g_beta;
  Vec<S> running_mean, running_var;
  S eps = S(1e-5);
  S momentum = S(0.1);

  void init(Index channels) {
    gamma = Mat<S>::Ones(1, channels);
    beta = Mat<S>::Zero(1, channels);
    g_gamma = Mat<S>::Zero(1, channels);
    g_beta = Mat<S>::Zero(1, channels);
    running_mean = Vec<S>::Zero(channels);
    running_var = Vec<S>::Ones(channels);
  }

  Mat<S> forward(const Mat<S>& x, bool training, BatchNormCache<S>* c) {
    const Index n = x.rows(), d = x.cols();
    Vec<S> mean(d), var(d);
    if (training) {
      for (Index j = 0; j < d; ++j) {
        mean(j) = x.col(j).mean();
        var(j) = (x.col(j).array() - mean(j)).square().mean();
      }
      running_mean = (S(1) - momentum) * running_mean + momentum * mean;
      running_var = (S(1) - momentum) * running_var + momentum * var;
    } else {
      mean = running_mean;
      var = running_var;
    }
    Mat<S> xhat(n, d);
    Vec<S> inv_std(d);
    for (Index j = 0; j < d; ++j) {
      inv_std(j) = S(1) / std::sqrt(var(j) + eps);
      xhat.col(j) = (x.col(j).array() - mean(j)) * inv_std(j);
    }
    Mat<S> y = xhat.array().rowwise() * gamma.row(0).array();
    y.array().rowwise() += beta.row(0).array();
    if (c) {
      c->xhat = std::move(xhat);
      c->inv_std = std::move(inv_std);
    }
    return y;
  }

  Mat<S> backward(const Mat<S>& dy, const BatchNormCache<S>& c) {
    const Index n = dy.rows(), d = dy.cols();
    g_gamma.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    g_beta.row(0) += dy.colwise().sum();
    Mat<S> dx(n, d);
    for (Index j = 0; j < d; ++j) {
      S g = gamma(0, j);
      S m1 = dy.col(j).mean();
      S m2 = (dy.col(j).array() * c.xhat.col(j).array()).mean();
      dx.col(j) =
          g * c.inv_std(j) *
          ((dy.col(j).array() - m1) - c.xhat.col(j).array() * m2);
    }
    return dx;
  }

  void register_params(ParamRegistry<S>& r, const std::string& prefix) {
    r.add(prefix + ".gamma", &gamma, &g_gamma);
    r.add(prefix + ".beta", &beta, &g_beta);
  }
};

// ---------------------------------------------------------------------------
// Bilinear resize of a scalar map (align_corners = false)
// ---------------------------------------------------------------------------

template <class S>
struct BilinearPlan {
  Index in_size = 0, out_size = 0;
  std::vector<Index> i0, i1;
  std::vector<S> w0, w1;

  BilinearPlan() = default;
  BilinearPlan(Index in, Index out) : in_size(in), out_size(out) {
    i0.resize(out);
    i1.resize(out);
    w0.resize(out);
    w1.resize(out);
    const double scale = static_cast<double>(in) / out;
    for (Index o = 0; o < out; ++o) {
      double src = (o + 0.5) * scale - 0.5;
      if (src < 0) src = 0;
      if (src > in - 1) src = static_cast<double>(in - 1);
      Index lo = static_cast<Index>(std::floor(src));
      Index hi = std::min(lo + 1, in - 1);
      S frac = static_cast<S>(src - lo);
      i0[o] = lo;
      i1[o] = hi;
      w0[o] = S(1) - frac;
      w1[o] = frac;
    }
  }
};

template <class S>
inline Mat<S> bilinear_resize(const Mat<S>& m, Index Ho, Index Wo) {
  BilinearPlan<S> pr(m.rows(), Ho), pc(m.cols(), Wo);
  Mat<S> tmp(Ho, m.cols());
  for (Index i = 0; i < Ho; ++i)
    tmp.row(i) = pr.w0[i] * m.row(pr.i0[i]) + pr.w1[i] * m.row(pr.i1[i]);
  Mat<S> out(Ho, Wo);
  for (Index j = 0; j < Wo; ++j)
    out.col(j) = pc.w0[j] * tmp.col(pc.i0[j]) + pc.w1[j] * tmp.col(pc.i1[j]);
  return out;
}

template <class S>
inline Mat<S> bilinear_resize_backward(const Mat<S>& dout, Index Hi,
                                       Index Wi) {
  BilinearPlan<S> pr(Hi, dout.rows()), pc(Wi, dout.cols());
  Mat<S> tmp = Mat<S>::Zero(dout.rows(), Wi);
  for (Index j = 0; j < dout.cols(); ++j) {
    tmp.col(pc.i0[j]) += pc.w0[j] * dout.col(j);
    tmp.col(pc.i1[j]) += pc.w1[j] * dout.col(j);
  }
  Mat<S> din = Mat<S>::Zero(Hi, Wi);
  for (Index i = 0; i < dout.rows(); ++i) {
    din.row(pr.i0[i]) += pr.w0[i] * tmp.row(i);
    din.row(pr.i1[i]) += pr.w1[i] * tmp.row(i);
  }
  return din;
}

}  // namespace gazekit::nn
