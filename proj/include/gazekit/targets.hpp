#pragma once

#include <cmath>
#include <optional>

#include "gazekit/common.hpp"
#include "gazekit/prompting.hpp"

namespace gazekit {

// Normalized gaze target location. Absent for out-of-frame annotations.
struct GazePoint {
  double x = 0, y = 0;

  void validate() const {
    if (!(x >= 0 && x <= 1 && y >= 0 && y <= 1))
      throw ValidationError("gaze point (" + std::to_string(x) + "," +
                            std::to_string(y) + ") outside [0,1]^2");
  }
};

// Supervision heatmap: a 2D Gaussian centered on the gaze pixel, peak
// normalized to 1. Out-of-frame targets (absent point) supervise an all-zero
// map so positive mass is penalized everywhere.
template <class S>
Mat<S> build_target_heatmap(const std::optional<GazePoint>& point, Index H_out,
                            Index W_out, double sigma) {
  if (sigma <= 0) throw ConfigError("target heatmap: sigma must be > 0");
  if (H_out < 1 || W_out < 1)
    throw ConfigError("target heatmap: empty output grid");
  if (!point) return Mat<S>::Zero(H_out, W_out);
  point->validate();
  const Index r0 = cell_of(point->y, H_out);
  const Index c0 = cell_of(point->x, W_out);
  Mat<S> t(H_out, W_out);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (Index i = 0; i < H_out; ++i)
    for (Index j = 0; j < W_out; ++j) {
      double d2 = static_cast<double>((i - r0) * (i - r0)) +
                  static_cast<double>((j - c0) * (j - c0));
      t(i, j) = static_cast<S>(std::exp(-d2 * inv));
    }
  return t;
}

constexpr double kBceEps = 1e-6;

template <class S>
S bce_scalar(S p, S t) {
  S q = std::clamp(p, S(kBceEps), S(1.0 - kBceEps));
  return -(t * std::log(q) + (S(1) - t) * std::log(S(1) - q));
}

// d/dp of bce_scalar; zero in the clamped region.
template <class S>
S bce_grad_scalar(S p, S t) {
  if (p < S(kBceEps) || p > S(1.0 - kBceEps)) return S(0);
  return (p - t) / (p * (S(1) - p));
}

// Pixel-wise binary cross-entropy, averaged over pixels.
template <class S>
S loss_heatmap(const Mat<S>& pred, const Mat<S>& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ShapeError("loss_heatmap: prediction " + std::to_string(pred.rows()) +
                     "x" + std::to_string(pred.cols()) + " vs target " +
                     std::to_string(target.rows()) + "x" +
                     std::to_string(target.cols()));
  S sum = S(0);
  for (Index i = 0; i < pred.rows(); ++i)
    for (Index j = 0; j < pred.cols(); ++j)
      sum += bce_scalar(pred(i, j), target(i, j));
  return sum / S(pred.size());
}

template <class S>
Mat<S> loss_heatmap_backward(const Mat<S>& pred, const Mat<S>& target) {
  Mat<S> d(pred.rows(), pred.cols());
  const S inv_n = S(1) / S(pred.size());
  for (Index i = 0; i < pred.rows(); ++i)
    for (Index j = 0; j < pred.cols(); ++j)
      d(i, j) = bce_grad_scalar(pred(i, j), target(i, j)) * inv_n;
  return d;
}

struct LossWeights {
  double lambda = 1.0;
};

// L = L_hm + lambda * L_in/out; the in/out term is optional but its
// prediction and label must be present together.
template <class S>
S loss_multitask(const Mat<S>& pred_hm, const Mat<S>& target_hm,
                 const std::optional<S>& pred_inout,
                 const std::optional<int>& label_inout, const LossWeights& w) {
  if (w.lambda < 0) throw ConfigError("loss weight lambda must be >= 0");
  if (pred_inout.has_value() != label_inout.has_value())
    throw ValidationError(
        "in/out prediction and label must be present together");
  S loss = loss_heatmap(pred_hm, target_hm);
  if (pred_inout)
    loss += S(w.lambda) * bce_scalar(*pred_inout, S(*label_inout));
  return loss;
}

}  // namespace gazekit
