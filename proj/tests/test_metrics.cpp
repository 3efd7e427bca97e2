#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "gazekit/metrics.hpp"
#include "test_util.hpp"

using namespace gazekit;
using S = double;

namespace {

// Independent oracle: sweep every distinct threshold, build the ROC polygon,
// integrate with the trapezoid rule.
double roc_auc_oracle(const std::vector<S>& scores,
                      const std::vector<char>& pos) {
  std::set<S> uniq(scores.begin(), scores.end());
  std::vector<S> thresholds(uniq.begin(), uniq.end());
  size_t P = 0, N = 0;
  for (char c : pos) c ? ++P : ++N;
  std::vector<std::pair<double, double>> pts;  // (fpr, tpr)
  pts.push_back({0.0, 0.0});                   // threshold above max
  for (auto it = thresholds.rbegin(); it != thresholds.rend(); ++it) {
    size_t tp = 0, fp = 0;
    for (size_t i = 0; i < scores.size(); ++i)
      if (scores[i] >= *it) pos[i] ? ++tp : ++fp;
    pts.push_back({double(fp) / N, double(tp) / P});
  }
  double auc = 0;
  for (size_t i = 1; i < pts.size(); ++i)
    auc += (pts[i].first - pts[i - 1].first) *
           (pts[i].second + pts[i - 1].second) * 0.5;
  return auc;
}

// Independent oracle for AP: iterate distinct thresholds in descending
// order, accumulate (R_k - R_{k-1}) * P_k by direct counting.
double ap_oracle(const std::vector<S>& scores, const std::vector<int>& labels) {
  std::set<S> uniq(scores.begin(), scores.end());
  std::vector<S> thr(uniq.rbegin(), uniq.rend());
  size_t total_pos = 0;
  for (int l : labels) total_pos += (l != 0);
  double ap = 0, prev_r = 0;
  for (S t : thr) {
    size_t tp = 0, fp = 0;
    for (size_t i = 0; i < scores.size(); ++i)
      if (scores[i] >= t) labels[i] ? ++tp : ++fp;
    double p = double(tp) / (tp + fp);
    double r = double(tp) / total_pos;
    ap += (r - prev_r) * p;
    prev_r = r;
  }
  return ap;
}

Mat<S> random_heatmap(Index H, Index W, Rng& rng, bool quantized) {
  Mat<S> m(H, W);
  for (Index i = 0; i < H; ++i)
    for (Index j = 0; j < W; ++j)
      m(i, j) = quantized ? S(rng.below(5)) / 4.0 : rng.uniform();
  return m;
}

}  // namespace

TEST_CASE("gazefollow AUC examples") {
  SECTION("perfect ranking scores 1") {
    Mat<S> pred = Mat<S>::Zero(8, 8);
    std::vector<GazePoint> pts = {{0.3, 0.2}, {0.8, 0.9}};
    for (const auto& p : pts) pred(cell_of(p.y, 8), cell_of(p.x, 8)) = 1.0;
    REQUIRE(auc_gazefollow(pred, pts) == 1.0);
  }
  SECTION("uniform prediction scores exactly 0.5") {
    Mat<S> pred = Mat<S>::Constant(8, 8, 0.37);
    REQUIRE(auc_gazefollow(pred, {GazePoint{0.5, 0.5}}) == 0.5);
  }
  SECTION("empty annotation list is an error") {
    Mat<S> pred = Mat<S>::Constant(8, 8, 0.5);
    REQUIRE_THROWS_AS(auc_gazefollow(pred, {}), ValidationError);
  }
}

TEST_CASE("gazefollow AUC equals the threshold-sweep oracle") {
  Rng rng(3);
  for (int it = 0; it < 300; ++it) {
    const Index H = 4, W = 4;
    Mat<S> pred = random_heatmap(H, W, rng, it % 2 == 0);  // force ties half the time
    std::vector<GazePoint> pts = {{rng.uniform(), rng.uniform()},
                                  {rng.uniform(), rng.uniform()}};
    std::vector<S> scores;
    std::vector<char> pos(H * W, 0);
    for (const auto& p : pts) pos[cell_of(p.y, H) * W + cell_of(p.x, W)] = 1;
    for (Index i = 0; i < H; ++i)
      for (Index j = 0; j < W; ++j) scores.push_back(pred(i, j));
    double lib = auc_gazefollow(pred, pts);
    double oracle = roc_auc_oracle(scores, pos);
    REQUIRE_THAT(lib, Catch::Matchers::WithinAbs(oracle, 1e-9));
  }
}

TEST_CASE("AUC is invariant under strictly monotone transforms") {
  Rng rng(5);
  for (int it = 0; it < 50; ++it) {
    Mat<S> pred = random_heatmap(6, 6, rng, false);
    std::vector<GazePoint> pts = {{rng.uniform(), rng.uniform()}};
    double a = auc_gazefollow(pred, pts);
    Mat<S> warped = pred.unaryExpr([](S v) { return std::exp(3.0 * v) - 0.5; });
    REQUIRE_THAT(auc_gazefollow(warped, pts),
                 Catch::Matchers::WithinAbs(a, 1e-12));
  }
}

TEST_CASE("tolerance AUC") {
  SECTION("prediction peaked inside the region scores 1") {
    Mat<S> pred = Mat<S>::Zero(16, 16);
    GazePoint g{0.5, 0.5};
    pred(cell_of(g.y, 16), cell_of(g.x, 16)) = 1.0;
    REQUIRE(auc_tolerance(pred, g, 2.0) == 1.0);
  }
  SECTION("uniform prediction scores 0.5") {
    Mat<S> pred = Mat<S>::Constant(16, 16, 0.2);
    REQUIRE(auc_tolerance(pred, GazePoint{0.3, 0.3}, 3.0) == 0.5);
  }
  SECTION("matches the threshold-sweep oracle") {
    Rng rng(7);
    for (int it = 0; it < 200; ++it) {
      const Index H = 6, W = 6;
      Mat<S> pred = random_heatmap(H, W, rng, it % 2 == 0);
      GazePoint g{rng.uniform(), rng.uniform()};
      const double tol = 1.0 + 2.0 * rng.uniform();
      std::vector<S> scores;
      std::vector<char> pos;
      Index r0 = cell_of(g.y, H), c0 = cell_of(g.x, W);
      for (Index i = 0; i < H; ++i)
        for (Index j = 0; j < W; ++j) {
          scores.push_back(pred(i, j));
          double d2 = double((i - r0) * (i - r0) + (j - c0) * (j - c0));
          pos.push_back(d2 <= tol * tol ? 1 : 0);
        }
      REQUIRE_THAT(auc_tolerance(pred, g, tol),
                   Catch::Matchers::WithinAbs(roc_auc_oracle(scores, pos), 1e-9));
    }
  }
  SECTION("invalid tolerance") {
    Mat<S> pred = Mat<S>::Constant(4, 4, 0.5);
    REQUIRE_THROWS_AS(auc_tolerance(pred, GazePoint{0.5, 0.5}, 0.0),
                      ValidationError);
  }
}

TEST_CASE("l2 metrics") {
  SECTION("argmax on the mean annotation point gives avg 0") {
    // grid 10: pixel centers at (k+0.5)/10; annotations at two centers
    Mat<S> pred = Mat<S>::Zero(10, 10);
    pred(5, 5) = 1.0;  // center (0.55, 0.55)
    std::vector<GazePoint> pts = {{0.55, 0.55}};
    auto [avg, mn] = l2_metrics(pred, pts);
    REQUIRE(avg == 0.0);
    REQUIRE(mn == 0.0);
  }
  SECTION("two annotations: min to the closest, avg to the mean") {
    Mat<S> pred = Mat<S>::Zero(10, 10);
    pred(2, 2) = 1.0;  // argmax center (0.25, 0.25)
    std::vector<GazePoint> pts = {{0.25, 0.25}, {0.75, 0.75}};
    auto [avg, mn] = l2_metrics(pred, pts);
    REQUIRE(mn == 0.0);
    REQUIRE_THAT(avg, Catch::Matchers::WithinAbs(std::hypot(0.25, 0.25), 1e-12));
  }
  SECTION("single annotation: avg equals min") {
    Rng rng(9);
    for (int it = 0; it < 40; ++it) {
      Mat<S> pred = random_heatmap(8, 8, rng, false);
      std::vector<GazePoint> pts = {{rng.uniform(), rng.uniform()}};
      auto [avg, mn] = l2_metrics(pred, pts);
      REQUIRE(avg == mn);
    }
  }
  SECTION("min <= avg always") {
    Rng rng(11);
    for (int it = 0; it < 100; ++it) {
      Mat<S> pred = random_heatmap(8, 8, rng, false);
      std::vector<GazePoint> pts;
      for (int k = 0; k < 1 + int(rng.below(8)); ++k)
        pts.push_back({rng.uniform(), rng.uniform()});
      auto [avg, mn] = l2_metrics(pred, pts);
      REQUIRE(mn <= avg + 1e-15);
    }
  }
  SECTION("argmax ties break to the smallest row-major index") {
    Mat<S> pred = Mat<S>::Constant(8, 8, 0.4);
    auto [r, c] = heatmap_argmax(pred);
    REQUIRE(r == 0);
    REQUIRE(c == 0);
  }
}

TEST_CASE("average precision") {
  SECTION("perfect separation scores 1") {
    REQUIRE(ap_inout<S>({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == 1.0);
  }
  SECTION("all-positive labels score 1 for any ranking") {
    REQUIRE(ap_inout<S>({0.2, 0.9, 0.5}, {1, 1, 1}) == 1.0);
  }
  SECTION("no positives is an error") {
    REQUIRE_THROWS_AS(ap_inout<S>({0.2, 0.9}, {0, 0}), ValidationError);
  }
  SECTION("matches the threshold-enumeration oracle") {
    Rng rng(13);
    for (int it = 0; it < 300; ++it) {
      const int n = 6;
      std::vector<S> scores;
      std::vector<int> labels;
      bool any_pos = false;
      for (int k = 0; k < n; ++k) {
        scores.push_back(it % 2 ? rng.uniform() : S(rng.below(4)) / 3.0);
        labels.push_back(rng.uniform() < 0.5 ? 1 : 0);
        any_pos |= labels.back() == 1;
      }
      if (!any_pos) labels[0] = 1;
      REQUIRE_THAT(ap_inout(scores, labels),
                   Catch::Matchers::WithinAbs(ap_oracle(scores, labels), 1e-9));
    }
  }
}

TEST_CASE("aggregation equals an independent per-sample mean") {
  Rng rng(17);
  std::vector<SampleMetrics> rows;
  double sa = 0, sv = 0, sm = 0;
  for (int i = 0; i < 20; ++i) {
    Mat<S> pred = random_heatmap(8, 8, rng, false);
    std::vector<GazePoint> pts = {{rng.uniform(), rng.uniform()}};
    auto m = evaluate_sample("s" + std::to_string(i), pred, pts,
                             EvalProtocol::gazefollow, 3.0);
    rows.push_back(m);
    sa += auc_gazefollow(pred, pts);
    auto [avg, mn] = l2_metrics(pred, pts);
    sv += avg;
    sm += mn;
  }
  auto agg = aggregate_metrics(rows, {}, {});
  REQUIRE_THAT(agg.auc, Catch::Matchers::WithinAbs(sa / 20, 1e-12));
  REQUIRE_THAT(agg.avg_l2, Catch::Matchers::WithinAbs(sv / 20, 1e-12));
  REQUIRE_THAT(agg.min_l2, Catch::Matchers::WithinAbs(sm / 20, 1e-12));
  REQUIRE(agg.n_samples == 20);
  REQUIRE_FALSE(agg.ap_inout.has_value());
}

TEST_CASE("a model that echoes the target scores AUC 1") {
  // the target heatmap itself ranks the annotated pixel first
  GazePoint g{0.42, 0.67};
  Mat<S> echo = build_target_heatmap<S>(g, 16, 16, 2.0);
  REQUIRE(auc_gazefollow(echo, {g}) == 1.0);
}
