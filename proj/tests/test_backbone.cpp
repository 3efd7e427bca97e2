#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "gazekit/backbone.hpp"
#include "gazekit/nn.hpp"
#include "test_util.hpp"

using namespace gazekit;
using S = double;

namespace {

Image<S> random_image(Index h, Index w, std::uint64_t seed) {
  Rng rng(seed);
  Image<S> img = Image<S>::zeros(h, w);
  for (auto& c : img.ch) rng.fill_uniform(c, 0.0, 1.0);
  return img;
}

}  // namespace

TEST_CASE("token grid is the image divided by the patch size") {
  BackboneSpec spec;
  spec.d_F = 16;
  auto bb = make_backbone<S>(spec);
  auto f448 = bb->extract(random_image(448, 448, 1));
  REQUIRE(f448.H == 32);
  REQUIRE(f448.W == 32);
  auto f224 = bb->extract(random_image(224, 224, 2));
  REQUIRE(f224.H == 16);
  REQUIRE(f224.W == 16);
  REQUIRE(f224.tokens.cols() == 16);
  REQUIRE(bb->call_count() == 2);
  REQUIRE_THROWS_AS(bb->extract(random_image(450, 450, 3)), ShapeError);
}

TEST_CASE("toy backbone is deterministic and local") {
  BackboneSpec spec;
  spec.d_F = 24;
  auto bb = make_backbone<S>(spec);
  Image<S> zeros = Image<S>::zeros(112, 112);
  auto a = bb->extract(zeros);
  auto b = bb->extract(zeros);
  REQUIRE(testutil::max_abs_diff<S>(a.tokens, b.tokens) == 0.0);

  // flipping pixels inside one patch changes exactly that token
  Image<S> poked = zeros;
  poked.ch[1].block(14 * 3, 14 * 5, 14, 14).setConstant(0.9);
  auto c = bb->extract(poked);
  for (Index t = 0; t < c.tokens.rows(); ++t) {
    const bool changed =
        (c.tokens.row(t) - a.tokens.row(t)).cwiseAbs().maxCoeff() > 0;
    REQUIRE(changed == (t == 3 * 8 + 5));
  }

  // same seed, fresh instance: identical weights
  auto bb2 = make_backbone<S>(spec);
  auto d = bb2->extract(zeros);
  REQUIRE(testutil::max_abs_diff<S>(a.tokens, d.tokens) == 0.0);
  REQUIRE(bb->params_checksum() == bb2->params_checksum());
}

TEST_CASE("projection is linear and matches the per-token oracle") {
  Rng rng(5);
  nn::Linear<S> proj;
  proj.init(24, 8, rng);

  Mat<S> raw(16, 24);
  Rng rr(6);
  rr.fill_normal(raw, 1.0);
  Mat<S> out = proj.forward(raw, nullptr);
  REQUIRE(out.cols() == 8);

  // loop-over-tokens oracle
  for (Index t = 0; t < 16; ++t)
    for (Index j = 0; j < 8; ++j) {
      S acc = proj.b(0, j);
      for (Index k = 0; k < 24; ++k) acc += raw(t, k) * proj.W(k, j);
      REQUIRE_THAT(out(t, j), Catch::Matchers::WithinAbs(acc, 1e-12));
    }

  SECTION("zero input with zero bias gives zero output") {
    Mat<S> z = proj.forward(Mat<S>(Mat<S>::Zero(4, 24)), nullptr);
    REQUIRE(z.cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("superposition: f(a+b) = f(a) + f(b) - bias") {
    Mat<S> a(4, 24), b(4, 24);
    Rng r2(7);
    r2.fill_normal(a, 1.0);
    r2.fill_normal(b, 1.0);
    Mat<S> lhs = proj.forward(Mat<S>(a + b), nullptr);
    Mat<S> rhs = proj.forward(a, nullptr) + proj.forward(b, nullptr);
    rhs.rowwise() -= proj.b.row(0);
    REQUIRE(testutil::max_abs_diff<S>(lhs, rhs) < 1e-10);
  }
}

TEST_CASE("vit backbone round-trips through a weights archive") {
  const std::string dir = std::filesystem::temp_directory_path().string();
  const std::string path = dir + "/gazekit_test_vit.bin";
  save_random_vit_weights(path, 14, 32, 2, 4, 64, 8, 99);

  BackboneSpec spec;
  spec.kind = BackboneKind::vit;
  spec.name = "tiny-vit";
  spec.d_F = 32;
  spec.weights_path = path;
  auto bb = make_backbone<S>(spec);
  Image<S> img = random_image(112, 112, 10);
  auto f1 = bb->extract(img);
  auto f2 = bb->extract(img);
  REQUIRE(f1.H == 8);
  REQUIRE(f1.tokens.cols() == 32);
  REQUIRE(testutil::max_abs_diff<S>(f1.tokens, f2.tokens) == 0.0);
  // wrong grid is rejected (position embedding is grid-bound)
  REQUIRE_THROWS_AS(bb->extract(random_image(224, 224, 11)), ShapeError);
  std::filesystem::remove(path);
}

TEST_CASE("missing weights file raises an io error naming the path") {
  BackboneSpec spec;
  spec.kind = BackboneKind::vit;
  spec.name = "dinov2-vitb14";
  spec.d_F = 768;
  spec.weights_path = "/nonexistent/dinov2.bin";
  try {
    auto bb = make_backbone<S>(spec);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    REQUIRE(std::string(e.what()).find("/nonexistent/dinov2.bin") !=
            std::string::npos);
  }
}

TEST_CASE("spec validation") {
  BackboneSpec bad;
  bad.patch_size = 0;
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
  bad = BackboneSpec{};
  bad.frozen = false;
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
}
