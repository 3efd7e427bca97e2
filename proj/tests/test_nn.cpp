#include <catch2/catch_amalgamated.hpp>

#include "gazekit/conv.hpp"
#include "gazekit/nn.hpp"
#include "test_util.hpp"

using namespace gazekit;
using namespace gazekit::nn;
using S = double;

namespace {

Mat<S> random_mat(Index r, Index c, std::uint64_t seed) {
  Rng rng(seed);
  Mat<S> m(r, c);
  rng.fill_normal(m, 1.0);
  return m;
}

// sum-of-squares loss drives every layer gradcheck below
template <class Layer, class Cache>
double layer_gradcheck(Layer& layer, ParamRegistry<S>& reg, const Mat<S>& x,
                       const std::function<Mat<S>(const Layer&, Cache*)>& fwd) {
  auto loss = [&]() {
    Mat<S> y = fwd(layer, nullptr);
    return 0.5 * y.array().square().sum();
  };
  reg.zero_grads();
  Cache c;
  Mat<S> y = fwd(layer, &c);
  layer.backward(y, c);
  return testutil::gradcheck<S>(reg, loss).max_rel;
}

}  // namespace

TEST_CASE("linear matches loop oracle and gradcheck") {
  Rng rng(3);
  Linear<S> lin;
  lin.init(5, 7, rng);
  Mat<S> x = random_mat(4, 5, 11);
  Mat<S> y = lin.forward(x, nullptr);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 7; ++j) {
      S acc = lin.b(0, j);
      for (Index k = 0; k < 5; ++k) acc += x(i, k) * lin.W(k, j);
      REQUIRE_THAT(y(i, j), Catch::Matchers::WithinAbs(acc, 1e-12));
    }
  ParamRegistry<S> reg;
  lin.register_params(reg, "lin");
  double rel = layer_gradcheck<Linear<S>, LinearCache<S>>(
      lin, reg, x, [&](const Linear<S>& l, LinearCache<S>* c) {
        return l.forward(x, c);
      });
  REQUIRE(rel < 1e-6);
  REQUIRE_THROWS_AS(lin.forward(random_mat(2, 4, 1), nullptr), ShapeError);
}

TEST_CASE("layernorm normalizes rows and gradcheck") {
  LayerNorm<S> ln;
  ln.init(8);
  Rng r(5);
  r.fill_normal(ln.gamma, 0.3);
  ln.gamma.array() += 1.0;
  r.fill_normal(ln.beta, 0.2);
  Mat<S> x = random_mat(6, 8, 21);
  LayerNormCache<S> c;
  Mat<S> y = ln.forward(x, &c);
  for (Index i = 0; i < x.rows(); ++i) {
    REQUIRE_THAT(c.xhat.row(i).mean(), Catch::Matchers::WithinAbs(0.0, 1e-12));
    REQUIRE_THAT(c.xhat.row(i).array().square().mean(),
                 Catch::Matchers::WithinAbs(1.0, 1e-4));
  }
  ParamRegistry<S> reg;
  ln.register_params(reg, "ln");
  double rel = layer_gradcheck<LayerNorm<S>, LayerNormCache<S>>(
      ln, reg, x, [&](const LayerNorm<S>& l, LayerNormCache<S>* cc) {
        return l.forward(x, cc);
      });
  REQUIRE(rel < 1e-6);
}

TEST_CASE("gelu value and derivative") {
  REQUIRE_THAT(gelu_scalar(0.0), Catch::Matchers::WithinAbs(0.0, 1e-15));
  // symmetric tails: gelu(x) + gelu(-x) == x
  for (double x : {0.3, 1.2, 2.5})
    REQUIRE_THAT(gelu_scalar(x) + gelu_scalar(-x),
                 Catch::Matchers::WithinAbs(x, 1e-12));
  for (double x : {-1.5, -0.2, 0.0, 0.7, 2.0}) {
    const double h = 1e-6;
    double fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2 * h);
    REQUIRE_THAT(gelu_grad_scalar(x), Catch::Matchers::WithinAbs(fd, 1e-8));
  }
}

TEST_CASE("softmax rows and backward") {
  Mat<S> x = random_mat(5, 9, 31);
  Mat<S> p = softmax_rows(x);
  for (Index i = 0; i < 5; ++i) {
    REQUIRE_THAT(p.row(i).sum(), Catch::Matchers::WithinAbs(1.0, 1e-12));
    REQUIRE(p.row(i).minCoeff() > 0.0);
  }
  // shift invariance
  Mat<S> shifted = x;
  shifted.array() += 3.7;
  REQUIRE(testutil::max_abs_diff<S>(p, softmax_rows(shifted)) < 1e-12);
}

TEST_CASE("attention gradcheck, full and masked") {
  Mat<S> x = random_mat(6, 8, 41);
  for (bool masked : {false, true}) {
    MultiHeadSelfAttention<S> attn;
    Rng rng(7);
    attn.init(8, 2, rng);
    Mat<S> mask = Mat<S>::Zero(6, 6);
    if (masked) mask.col(5).setConstant(-1e9);
    const Mat<S>* mp = masked ? &mask : nullptr;
    ParamRegistry<S> reg;
    attn.register_params(reg, "attn");
    auto loss = [&]() {
      Mat<S> y = attn.forward(x, mp, nullptr);
      return 0.5 * y.array().square().sum();
    };
    reg.zero_grads();
    AttentionCache<S> c;
    Mat<S> y = attn.forward(x, mp, &c);
    attn.backward(y, c);
    REQUIRE(testutil::gradcheck<S>(reg, loss).max_rel < 1e-5);
    if (masked) {
      // a fully blocked key column gets zero attention from every query
      for (const auto& p : c.probs)
        REQUIRE(p.col(5).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  MultiHeadSelfAttention<S> bad;
  Rng rng(1);
  REQUIRE_THROWS_AS(bad.init(10, 3, rng), ConfigError);
}

TEST_CASE("transformer layer gradcheck and droppath semantics") {
  Mat<S> x = random_mat(6, 8, 51);
  TransformerLayer<S> layer;
  Rng rng(9);
  layer.init(8, 2, 16, 0.0, rng);
  ParamRegistry<S> reg;
  layer.register_params(reg, "layer");
  auto loss = [&]() {
    Mat<S> y = layer.forward(x, nullptr, nullptr, nullptr);
    return 0.5 * y.array().square().sum();
  };
  reg.zero_grads();
  TransformerLayerCache<S> c;
  Mat<S> y = layer.forward(x, nullptr, nullptr, &c);
  layer.backward(y, c);
  REQUIRE(testutil::gradcheck<S>(reg, loss).max_rel < 1e-4);

  SECTION("p=0 training pass equals deterministic pass exactly") {
    Rng dp(123);
    Mat<S> t = layer.forward(x, nullptr, &dp, nullptr);
    REQUIRE(testutil::max_abs_diff<S>(t, y) == 0.0);
  }
  SECTION("p>0 drops scale surviving branches by 1/(1-p)") {
    TransformerLayer<S> l2;
    Rng r2(9);
    l2.init(8, 2, 16, 0.5, r2);
    // evaluation (rng == nullptr) is always the identity schedule
    Mat<S> e1 = l2.forward(x, nullptr, nullptr, nullptr);
    Mat<S> e2 = l2.forward(x, nullptr, nullptr, nullptr);
    REQUIRE(testutil::max_abs_diff<S>(e1, e2) == 0.0);
    // with both branches dropped the layer is the identity
    bool saw_identity = false;
    for (std::uint64_t seed = 0; seed < 64 && !saw_identity; ++seed) {
      Rng dp(seed);
      TransformerLayerCache<S> cc;
      Mat<S> t = l2.forward(x, nullptr, &dp, &cc);
      if (cc.keep1 == 0.0 && cc.keep2 == 0.0)
        saw_identity = testutil::max_abs_diff<S>(t, x) == 0.0;
    }
    REQUIRE(saw_identity);
  }
}

TEST_CASE("convt2x2 upsamples 2x with loop-oracle values and gradcheck") {
  Rng rng(13);
  ConvT2x2<S> up;
  up.init(3, 2, rng);
  Mat<S> in = random_mat(6, 3, 61);  // 2x3 grid, 3 channels
  ConvT2x2Cache<S> c;
  Mat<S> out = up.forward(in, 2, 3, &c);
  REQUIRE(out.rows() == 24);  // 4x6 grid
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 3; ++j)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          for (Index o = 0; o < 2; ++o) {
            S acc = up.b(0, o);
            for (Index ci = 0; ci < 3; ++ci)
              acc += in(i * 3 + j, ci) * up.Wk[dy * 2 + dx](ci, o);
            REQUIRE_THAT(out((2 * i + dy) * 6 + (2 * j + dx), o),
                         Catch::Matchers::WithinAbs(acc, 1e-12));
          }
  ParamRegistry<S> reg;
  up.register_params(reg, "up");
  auto loss = [&]() {
    Mat<S> y = up.forward(in, 2, 3, nullptr);
    return 0.5 * y.array().square().sum();
  };
  reg.zero_grads();
  up.backward(out, c);
  REQUIRE(testutil::gradcheck<S>(reg, loss).max_rel < 1e-6);
}

TEST_CASE("conv2x2s2 downsamples 2x and inverts shapes") {
  Rng rng(17);
  Conv2x2s2<S> down;
  down.init(4, 3, rng);
  Mat<S> in = random_mat(16, 4, 71);  // 4x4 grid
  Conv2x2s2Cache<S> c;
  Mat<S> out = down.forward(in, 4, 4, &c);
  REQUIRE(out.rows() == 4);
  Mat<S> din = down.backward(out, c);
  REQUIRE(din.rows() == 16);
  REQUIRE_THROWS_AS(down.forward(random_mat(9, 4, 2), 3, 3, nullptr),
                    ShapeError);
}

TEST_CASE("batchnorm normalizes per channel in training") {
  BatchNorm<S> bn;
  bn.init(3);
  Mat<S> x = random_mat(40, 3, 81);
  x.col(1).array() += 5.0;
  BatchNormCache<S> c;
  Mat<S> y = bn.forward(x, true, &c);
  for (Index j = 0; j < 3; ++j) {
    REQUIRE_THAT(y.col(j).mean(), Catch::Matchers::WithinAbs(0.0, 1e-10));
    REQUIRE_THAT((y.col(j).array() - y.col(j).mean()).square().mean(),
                 Catch::Matchers::WithinAbs(1.0, 1e-3));
  }
  // eval uses running stats: a second eval call is deterministic
  Mat<S> e1 = bn.forward(x, false, nullptr);
  Mat<S> e2 = bn.forward(x, false, nullptr);
  REQUIRE(testutil::max_abs_diff<S>(e1, e2) == 0.0);
}

TEST_CASE("bilinear resize matches direct interpolation and adjoint") {
  Mat<S> m = random_mat(4, 6, 91);
  Mat<S> up = nn::bilinear_resize(m, 8, 12);
  REQUIRE(up.rows() == 8);
  REQUIRE(up.cols() == 12);
  // interpolated values stay inside the input range
  REQUIRE(up.maxCoeff() <= m.maxCoeff() + 1e-12);
  REQUIRE(up.minCoeff() >= m.minCoeff() - 1e-12);
  // adjoint identity: <up(x), y> == <x, up^T(y)>
  Mat<S> y = random_mat(8, 12, 92);
  Mat<S> yt = nn::bilinear_resize_backward(y, 4, 6);
  const double lhs = (up.array() * y.array()).sum();
  const double rhs = (m.array() * yt.array()).sum();
  REQUIRE_THAT(lhs, Catch::Matchers::WithinRel(rhs, 1e-12));
}
