#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <vector>

#include "gazekit/common.hpp"
#include "gazekit/prompting.hpp"
#include "gazekit/targets.hpp"

namespace gazekit {

enum class EvalProtocol { gazefollow, tolerance };

struct EvalResult {
  double auc = 0;
  double avg_l2 = 0;
  double min_l2 = 0;
  std::optional<double> ap_inout;
  int n_samples = 0;
};

struct SampleMetrics {
  std::string id;
  double auc = 0;
  double avg_l2 = 0;
  double min_l2 = 0;
};

// ROC AUC with the rank-average tie convention; equal to the trapezoidal
// area under the threshold-sweep ROC curve.
template <class S>
double roc_auc(const std::vector<S>& scores, const std::vector<char>& is_pos) {
  const size_t n = scores.size();
  size_t n_pos = 0;
  for (char c : is_pos) n_pos += (c != 0);
  const size_t n_neg = n - n_pos;
  if (n_pos == 0) throw ValidationError("roc_auc: no positives");
  if (n_neg == 0) throw ValidationError("roc_auc: no negatives");
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (size_t k = i; k < j; ++k)
      if (is_pos[order[k]]) rank_sum_pos += avg_rank;
    i = j;
  }
  return (rank_sum_pos -
          0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1)) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// GazeFollow-style AUC: every heatmap pixel is a confidence score; the
// positive set is the pixels that contain an annotated gaze point,
// rasterized on the prediction grid.
template <class S>
double auc_gazefollow(const Mat<S>& pred, const std::vector<GazePoint>& pts) {
  if (pts.empty()) throw ValidationError("auc_gazefollow: no gaze annotations");
  const Index H = pred.rows(), W = pred.cols();
  std::vector<S> scores;
  scores.reserve(H * W);
  std::vector<char> pos(H * W, 0);
  for (const auto& p : pts) {
    p.validate();
    pos[cell_of(p.y, H) * W + cell_of(p.x, W)] = 1;
  }
  for (Index i = 0; i < H; ++i)
    for (Index j = 0; j < W; ++j) scores.push_back(pred(i, j));
  return roc_auc(scores, pos);
}

// Tolerance-region AUC: positives are all pixels within `tolerance_px` of the
// single ground-truth gaze pixel (Euclidean distance in prediction pixels).
template <class S>
double auc_tolerance(const Mat<S>& pred, const GazePoint& gaze,
                     double tolerance_px) {
  if (tolerance_px <= 0)
    throw ValidationError("auc_tolerance: tolerance must be > 0");
  gaze.validate();
  const Index H = pred.rows(), W = pred.cols();
  const Index r0 = cell_of(gaze.y, H), c0 = cell_of(gaze.x, W);
  std::vector<S> scores;
  scores.reserve(H * W);
  std::vector<char> pos;
  pos.reserve(H * W);
  const double tol2 = tolerance_px * tolerance_px;
  for (Index i = 0; i < H; ++i)
    for (Index j = 0; j < W; ++j) {
      scores.push_back(pred(i, j));
      double d2 = static_cast<double>((i - r0) * (i - r0)) +
                  static_cast<double>((j - c0) * (j - c0));
      pos.push_back(d2 <= tol2 ? 1 : 0);
    }
  return roc_auc(scores, pos);
}

// Argmax cell of a heatmap; ties broken toward the smallest row-major index.
template <class S>
std::pair<Index, Index> heatmap_argmax(const Mat<S>& pred) {
  Index bi = 0, bj = 0;
  S best = pred(0, 0);
  for (Index i = 0; i < pred.rows(); ++i)
    for (Index j = 0; j < pred.cols(); ++j)
      if (pred(i, j) > best) {
        best = pred(i, j);
        bi = i;
        bj = j;
      }
  return {bi, bj};
}

// L2 metrics in normalized coordinates. The predicted point is the center of
// the argmax pixel; avg is the distance to the mean annotation, min the
// distance to the closest one.
template <class S>
std::pair<double, double> l2_metrics(const Mat<S>& pred,
                                     const std::vector<GazePoint>& pts) {
  if (pts.empty()) throw ValidationError("l2_metrics: no gaze annotations");
  auto [r, c] = heatmap_argmax(pred);
  const double px = (static_cast<double>(c) + 0.5) / pred.cols();
  const double py = (static_cast<double>(r) + 0.5) / pred.rows();
  double mx = 0, my = 0, min_d = std::numeric_limits<double>::infinity();
  for (const auto& p : pts) {
    mx += p.x;
    my += p.y;
    min_d = std::min(min_d, std::hypot(px - p.x, py - p.y));
  }
  mx /= pts.size();
  my /= pts.size();
  return {std::hypot(px - mx, py - my), min_d};
}

// Average precision with the all-points interpolation
// AP = sum_k (R_k - R_{k-1}) P_k over descending score thresholds.
template <class S>
double ap_inout(const std::vector<S>& scores, const std::vector<int>& labels) {
  if (scores.empty() || scores.size() != labels.size())
    throw ValidationError("ap_inout: empty or mismatched inputs");
  size_t total_pos = 0;
  for (int l : labels) total_pos += (l != 0);
  if (total_pos == 0) throw ValidationError("ap_inout: no positive labels");
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  double ap = 0, prev_recall = 0;
  size_t tp = 0, fp = 0, i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    for (size_t k = i; k < j; ++k)
      labels[order[k]] ? ++tp : ++fp;
    const double precision = static_cast<double>(tp) / (tp + fp);
    const double recall = static_cast<double>(tp) / total_pos;
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

// Per-sample heatmap metrics under the selected protocol.
template <class S>
SampleMetrics evaluate_sample(const std::string& id, const Mat<S>& pred,
                              const std::vector<GazePoint>& pts,
                              EvalProtocol protocol, double tolerance_px) {
  SampleMetrics m;
  m.id = id;
  if (protocol == EvalProtocol::gazefollow) {
    m.auc = auc_gazefollow(pred, pts);
  } else {
    GazePoint g;
    if (pts.size() == 1) {
      g = pts[0];
    } else {
      // multi-annotation sample under the tolerance protocol: use the mean
      for (const auto& p : pts) {
        g.x += p.x / pts.size();
        g.y += p.y / pts.size();
      }
    }
    m.auc = auc_tolerance(pred, g, tolerance_px);
  }
  auto [avg, mn] = l2_metrics(pred, pts);
  m.avg_l2 = avg;
  m.min_l2 = mn;
  return m;
}

inline EvalResult aggregate_metrics(const std::vector<SampleMetrics>& rows,
                                    const std::vector<float>& inout_scores,
                                    const std::vector<int>& inout_labels) {
  EvalResult r;
  r.n_samples = static_cast<int>(rows.size());
  if (rows.empty()) throw ValidationError("evaluate: empty test set");
  for (const auto& s : rows) {
    r.auc += s.auc;
    r.avg_l2 += s.avg_l2;
    r.min_l2 += s.min_l2;
  }
  r.auc /= rows.size();
  r.avg_l2 /= rows.size();
  r.min_l2 /= rows.size();
  if (!inout_scores.empty())
    r.ap_inout = ap_inout(inout_scores, inout_labels);
  return r;
}

}  // namespace gazekit
