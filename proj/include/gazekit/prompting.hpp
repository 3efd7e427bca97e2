#pragma once

#include <algorithm>
#include <string>

#include "gazekit/common.hpp"

namespace gazekit {

// Head bounding box in normalized image coordinates.
struct HeadBBox {
  double xmin = 0, ymin = 0, xmax = 0, ymax = 0;

  void validate() const {
    if (!(xmin >= 0 && xmin <= xmax && xmax <= 1 && ymin >= 0 &&
          ymin <= ymax && ymax <= 1))
      throw ValidationError("invalid bbox [" + std::to_string(xmin) + "," +
                            std::to_string(ymin) + "," + std::to_string(xmax) +
                            "," + std::to_string(ymax) + "]");
  }
  double cx() const { return 0.5 * (xmin + xmax); }
  double cy() const { return 0.5 * (ymin + ymax); }
  double area() const { return (xmax - xmin) * (ymax - ymin); }
};

inline Index cell_of(double coord, Index n) {
  Index c = static_cast<Index>(std::floor(coord * n));
  return std::clamp<Index>(c, 0, n - 1);
}

// Downsampled binary head mask at token resolution. A cell is set iff its
// pixel extent overlaps the box with positive area; a degenerate (zero-area)
// box falls back to the single cell containing its center, so the mask is
// never empty.
template <class S>
Mat<S> build_head_mask(const HeadBBox& b, Index H, Index W) {
  b.validate();
  if (H < 1 || W < 1) throw ConfigError("head mask: empty grid");
  Mat<S> m = Mat<S>::Zero(H, W);
  if (b.area() <= 0.0) {
    m(cell_of(b.cy(), H), cell_of(b.cx(), W)) = S(1);
    return m;
  }
  for (Index i = 0; i < H; ++i) {
    double y0 = static_cast<double>(i) / H, y1 = static_cast<double>(i + 1) / H;
    double oh = std::min(b.ymax, y1) - std::max(b.ymin, y0);
    if (oh <= 0) continue;
    for (Index j = 0; j < W; ++j) {
      double x0 = static_cast<double>(j) / W,
             x1 = static_cast<double>(j + 1) / W;
      double ow = std::min(b.xmax, x1) - std::max(b.xmin, x0);
      if (ow > 0) m(i, j) = S(1);
    }
  }
  return m;
}

// S = x_F + M * p_head, applied on the token matrix (one row per cell).
template <class S>
Mat<S> apply_head_prompt(const Mat<S>& scene_tokens, const Mat<S>& mask,
                         const Mat<S>& p_head) {
  const Index H = mask.rows(), W = mask.cols();
  if (scene_tokens.rows() != H * W)
    throw ShapeError("apply_head_prompt: token count " +
                     std::to_string(scene_tokens.rows()) + " != mask cells " +
                     std::to_string(H * W));
  if (p_head.rows() != 1 || p_head.cols() != scene_tokens.cols())
    throw ShapeError("apply_head_prompt: p_head dim mismatch");
  Mat<S> out = scene_tokens;
  for (Index i = 0; i < H; ++i)
    for (Index j = 0; j < W; ++j)
      if (mask(i, j) != S(0)) out.row(i * W + j) += p_head.row(0);
  return out;
}

// Position-token prompt: the positional embedding sampled at the cell
// containing the bbox center, plus a learned embedding.
template <class S>
Mat<S> build_position_token(const HeadBBox& b, const Mat<S>& pos_embed,
                            Index H, Index W, const Mat<S>& e_head) {
  b.validate();
  if (pos_embed.rows() != H * W)
    throw ShapeError("build_position_token: pos embed grid mismatch");
  if (e_head.rows() != 1 || e_head.cols() != pos_embed.cols())
    throw ShapeError("build_position_token: e_head dim mismatch");
  Index row = cell_of(b.cy(), H) * W + cell_of(b.cx(), W);
  Mat<S> t = pos_embed.row(row) + e_head.row(0);
  return t;
}

}  // namespace gazekit
