#include <catch2/catch_amalgamated.hpp>

#include "gazekit/decoder.hpp"
#include "test_util.hpp"

using namespace gazekit;
using S = double;

namespace {

RawFeatureMap<S> random_raw(Index H, Index W, Index d_F, std::uint64_t seed) {
  RawFeatureMap<S> raw;
  raw.H = H;
  raw.W = W;
  raw.tokens.resize(H * W, d_F);
  Rng rng(seed);
  rng.fill_normal(raw.tokens, 1.0);
  return raw;
}

DecoderConfig tiny_config() {
  DecoderConfig c;
  c.d_model = 16;
  c.num_layers = 3;
  c.num_heads = 4;
  c.mlp_dim = 32;
  c.out_h = 8;
  c.out_w = 8;
  c.drop_path_p = 0.0;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  DecoderConfig c = tiny_config();
  c.num_heads = 3;
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.prompt_layer = 4;
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.head = HeatmapHead::dot_product;  // needs position_token
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.attention = AttentionMode::cross_attention;
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.prompt_variant = PromptVariant::position_token;
  c.use_task_token = true;
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  // conv2 binds output size to 2x the grid
  REQUIRE_THROWS_AS(GazeDecoder<S>(tiny_config(), 8, 5, 5, 0), ConfigError);
}

TEST_CASE("default geometry: 32x32 tokens, 64x64 heatmap, [0,1] range") {
  DecoderConfig c;  // paper defaults
  c.drop_path_p = 0.0;
  GazeDecoder<S> dec(c, 64, 32, 32, 7);
  auto raw = random_raw(32, 32, 64, 3);
  auto out = dec.infer(raw, PersonPrompt{{0.2, 0.2, 0.5, 0.5}});
  REQUIRE(out.heatmap.rows() == 64);
  REQUIRE(out.heatmap.cols() == 64);
  REQUIRE(out.heatmap.minCoeff() > 0.0);
  REQUIRE(out.heatmap.maxCoeff() < 1.0);
  REQUIRE(out.inout.has_value());
  REQUIRE(*out.inout >= 0.0);
  REQUIRE(*out.inout <= 1.0);
}

TEST_CASE("train-mode forward with drop_path 0 equals inference exactly") {
  GazeDecoder<S> dec(tiny_config(), 8, 4, 4, 11);
  auto raw = random_raw(4, 4, 8, 5);
  PersonPrompt p{{0.1, 0.1, 0.6, 0.9}};
  DecoderTape<S> tape;
  Rng dp(99);
  auto a = dec.run_train(raw, p, &dp, tape);
  auto b = dec.infer(raw, p);
  REQUIRE(testutil::max_abs_diff<S>(a.heatmap, b.heatmap) == 0.0);
  REQUIRE(*a.inout == *b.inout);
}

TEST_CASE("prompt variant none ignores the bbox bitwise") {
  DecoderConfig c = tiny_config();
  c.prompt_variant = PromptVariant::none;
  GazeDecoder<S> dec(c, 8, 4, 4, 13);
  auto raw = random_raw(4, 4, 8, 7);
  auto a = dec.infer(raw, PersonPrompt{{0.0, 0.0, 0.2, 0.2}});
  auto b = dec.infer(raw, PersonPrompt{{0.7, 0.6, 0.9, 0.95}});
  REQUIRE(testutil::max_abs_diff<S>(a.heatmap, b.heatmap) == 0.0);
  REQUIRE(*a.inout == *b.inout);
}

TEST_CASE("activations before the prompt layer are person-independent") {
  DecoderConfig c = tiny_config();
  c.prompt_layer = 3;
  GazeDecoder<S> dec(c, 8, 4, 4, 17);
  auto raw = random_raw(4, 4, 8, 9);

  DecoderTape<S> t1, t2;
  dec.run_train(raw, PersonPrompt{{0.0, 0.0, 0.3, 0.3}}, nullptr, t1);
  dec.run_train(raw, PersonPrompt{{0.6, 0.5, 1.0, 1.0}}, nullptr, t2);
  // inputs to layers 1 and 2 (indices 0,1) match exactly; the input to
  // layer 3 differs because the prompt lands there
  REQUIRE(testutil::max_abs_diff<S>(t1.layer_inputs[0], t2.layer_inputs[0]) == 0.0);
  REQUIRE(testutil::max_abs_diff<S>(t1.layer_inputs[1], t2.layer_inputs[1]) == 0.0);
  REQUIRE(testutil::max_abs_diff<S>(t1.pre_prompt, t2.pre_prompt) == 0.0);
  REQUIRE(testutil::max_abs_diff<S>(t1.layer_inputs[2], t2.layer_inputs[2]) > 0.0);

  SECTION("prompt at layer 1 makes even the first layer person-dependent") {
    DecoderConfig c1 = tiny_config();
    GazeDecoder<S> d1(c1, 8, 4, 4, 17);
    DecoderTape<S> a, b;
    d1.run_train(raw, PersonPrompt{{0.0, 0.0, 0.3, 0.3}}, nullptr, a);
    d1.run_train(raw, PersonPrompt{{0.6, 0.5, 1.0, 1.0}}, nullptr, b);
    REQUIRE(testutil::max_abs_diff<S>(a.layer_inputs[0], b.layer_inputs[0]) > 0.0);
  }

  SECTION("prefix/person inference equals the one-shot path") {
    PersonPrompt p{{0.1, 0.2, 0.5, 0.7}};
    auto direct = dec.infer(raw, p);
    auto prefix = dec.make_prefix(raw);
    REQUIRE(prefix.layers_done == 2);
    auto via = dec.run_person(prefix, p);
    REQUIRE(testutil::max_abs_diff<S>(direct.heatmap, via.heatmap) == 0.0);
  }
}

TEST_CASE("token list layout") {
  // 32x32 grid with a task token: 1025 entries; position-token variant
  // without the task token: 1025 as well
  DecoderConfig c;
  c.drop_path_p = 0.0;
  GazeDecoder<S> dec(c, 16, 32, 32, 19);
  auto raw = random_raw(32, 32, 16, 11);
  DecoderTape<S> tape;
  dec.run_train(raw, PersonPrompt{{0.4, 0.4, 0.6, 0.6}}, nullptr, tape);
  REQUIRE(tape.layer_inputs[0].rows() == 1025);

  DecoderConfig ct;
  ct.prompt_variant = PromptVariant::position_token;
  ct.use_task_token = false;
  ct.head = HeatmapHead::dot_product;
  ct.drop_path_p = 0.0;
  GazeDecoder<S> dt(ct, 16, 32, 32, 19);
  DecoderTape<S> tape2;
  dt.run_train(raw, PersonPrompt{{0.4, 0.4, 0.6, 0.6}}, nullptr, tape2);
  REQUIRE(tape2.layer_inputs[0].rows() == 1025);
}

TEST_CASE("dot-product head") {
  DecoderConfig c = tiny_config();
  c.prompt_variant = PromptVariant::position_token;
  c.use_task_token = false;
  c.head = HeatmapHead::dot_product;
  c.out_h = 8;
  c.out_w = 8;
  GazeDecoder<S> dec(c, 8, 4, 4, 23);
  auto raw = random_raw(4, 4, 8, 13);
  auto out = dec.infer(raw, PersonPrompt{{0.2, 0.2, 0.4, 0.4}});
  REQUIRE(out.heatmap.rows() == 8);
  REQUIRE(out.heatmap.minCoeff() > 0.0);
  REQUIRE(out.heatmap.maxCoeff() < 1.0);
  REQUIRE_FALSE(out.inout.has_value());
}

TEST_CASE("dot-product scores match a double-loop oracle") {
  // scores = <scene'_ij, t_pos'>, then sigmoid and bilinear upsampling;
  // verified here on the raw ingredients
  Rng rng(29);
  Mat<S> scene(12, 6), tpos(1, 6);
  rng.fill_normal(scene, 1.0);
  rng.fill_normal(tpos, 1.0);
  Mat<S> scores = scene * tpos.transpose();
  for (Index r = 0; r < 12; ++r) {
    S acc = 0;
    for (Index k = 0; k < 6; ++k) acc += scene(r, k) * tpos(0, k);
    REQUIRE_THAT(scores(r, 0), Catch::Matchers::WithinAbs(acc, 1e-12));
  }
  // zero t_pos gives a uniform 0.5 map before upsampling
  Mat<S> z = nn::sigmoid(Mat<S>(scene * Mat<S>(Mat<S>::Zero(1, 6)).transpose()));
  REQUIRE(testutil::max_abs_diff<S>(z, Mat<S>(Mat<S>::Constant(12, 1, 0.5))) == 0.0);
  // positive scaling of t_pos preserves the argmax score cell
  Mat<S> s1 = scene * tpos.transpose();
  Mat<S> s3 = scene * (3.0 * tpos).transpose();
  Index a1, a3;
  s1.col(0).maxCoeff(&a1);
  s3.col(0).maxCoeff(&a3);
  REQUIRE(a1 == a3);
}

TEST_CASE("mlp head regresses the full map") {
  DecoderConfig c = tiny_config();
  c.prompt_variant = PromptVariant::position_token;
  c.use_task_token = false;
  c.head = HeatmapHead::mlp;
  c.out_h = 8;
  c.out_w = 8;
  GazeDecoder<S> dec(c, 8, 4, 4, 31);
  auto raw = random_raw(4, 4, 8, 17);
  auto a = dec.infer(raw, PersonPrompt{{0.2, 0.2, 0.4, 0.4}});
  auto b = dec.infer(raw, PersonPrompt{{0.2, 0.2, 0.4, 0.4}});
  REQUIRE(a.heatmap.rows() == 8);
  REQUIRE(a.heatmap.cols() == 8);
  REQUIRE(testutil::max_abs_diff<S>(a.heatmap, b.heatmap) == 0.0);

  // zero final-layer weights: every output is sigmoid(0) = 0.5
  auto& reg = dec.params();
  const auto* w = reg.find("heatmap_head.fc2.weight");
  const auto* bs = reg.find("heatmap_head.fc2.bias");
  REQUIRE(w != nullptr);
  w->value->setZero();
  bs->value->setZero();
  auto z = dec.infer(raw, PersonPrompt{{0.2, 0.2, 0.4, 0.4}});
  REQUIRE(testutil::max_abs_diff<S>(
              z.heatmap, Mat<S>(Mat<S>::Constant(8, 8, 0.5))) == 0.0);
}

TEST_CASE("conv2 head: zero weights give a uniform 0.5 map") {
  GazeDecoder<S> dec(tiny_config(), 8, 4, 4, 37);
  auto raw = random_raw(4, 4, 8, 19);
  auto& reg = dec.params();
  for (const char* name :
       {"heatmap_head.up.w00", "heatmap_head.up.w01", "heatmap_head.up.w10",
        "heatmap_head.up.w11", "heatmap_head.up.bias", "heatmap_head.out.weight",
        "heatmap_head.out.bias"})
    reg.find(name)->value->setZero();
  auto out = dec.infer(raw, PersonPrompt{{0.2, 0.2, 0.4, 0.4}});
  REQUIRE(testutil::max_abs_diff<S>(
              out.heatmap, Mat<S>(Mat<S>::Constant(8, 8, 0.5))) == 0.0);
}

TEST_CASE("in/out head: zero weights give 0.5") {
  GazeDecoder<S> dec(tiny_config(), 8, 4, 4, 41);
  auto raw = random_raw(4, 4, 8, 23);
  auto& reg = dec.params();
  for (const char* name : {"inout_head.fc1.weight", "inout_head.fc1.bias",
                           "inout_head.fc2.weight", "inout_head.fc2.bias"})
    reg.find(name)->value->setZero();
  auto out = dec.infer(raw, PersonPrompt{{0.2, 0.2, 0.4, 0.4}});
  REQUIRE(*out.inout == 0.5);
}

TEST_CASE("cross attention keeps the scene stream person-independent") {
  DecoderConfig c = tiny_config();
  c.prompt_variant = PromptVariant::position_token;
  c.use_task_token = false;
  c.head = HeatmapHead::dot_product;
  c.attention = AttentionMode::cross_attention;
  GazeDecoder<S> dec(c, 8, 4, 4, 43);
  auto raw = random_raw(4, 4, 8, 29);
  DecoderTape<S> t1, t2;
  dec.run_train(raw, PersonPrompt{{0.0, 0.0, 0.2, 0.2}}, nullptr, t1);
  dec.run_train(raw, PersonPrompt{{0.7, 0.7, 0.9, 0.9}}, nullptr, t2);
  // scene rows (all but the trailing t_pos) stay equal through every layer
  for (size_t k = 0; k < t1.layer_inputs.size(); ++k) {
    Mat<S> a = t1.layer_inputs[k].topRows(16);
    Mat<S> b = t2.layer_inputs[k].topRows(16);
    REQUIRE(testutil::max_abs_diff<S>(a, b) == 0.0);
  }
  // while the prompts themselves differ
  REQUIRE((t1.layer_inputs[0].row(16) - t2.layer_inputs[0].row(16))
              .cwiseAbs()
              .maxCoeff() > 0.0);
}

TEST_CASE("parameter counts") {
  // hand-computed oracle for the default architecture
  auto linear = [](Index in, Index out) { return in * out + out; };
  auto layer_params = [&](Index d, Index mlp) {
    return 4 * linear(d, d) + linear(d, mlp) + linear(mlp, d) + 4 * d;
  };
  DecoderConfig def;  // d_model 256, 3 layers, heads 8, mlp 1024, conv2
  Index expected = linear(768, 256)                  // projection
                   + 256                             // p_head
                   + 256                             // task token
                   + 3 * layer_params(256, 1024)     // transformer stack
                   + 2 * 256                         // final norm
                   + (4 * 256 * 256 + 256)           // ConvT 2x2
                   + linear(256, 1)                  // 1x1 conv
                   + linear(256, 256) + linear(256, 1);  // in/out head
  REQUIRE(count_parameters(def, 768) == expected);

  SECTION("paper reference ranges") {
    const Index def_count = count_parameters(def, 768);
    REQUIRE(def_count >= 2500000);
    REQUIRE(def_count <= 3100000);

    DecoderConfig d128 = def;
    d128.d_model = 128;
    REQUIRE(count_parameters(d128, 768) >= 1000000);
    REQUIRE(count_parameters(d128, 768) <= 1400000);

    DecoderConfig l1 = def;
    l1.num_layers = 1;
    REQUIRE(count_parameters(l1, 768) >= 1000000);
    REQUIRE(count_parameters(l1, 768) <= 1400000);
  }

  SECTION("counts equal the registry of a live decoder") {
    DecoderConfig c = tiny_config();
    GazeDecoder<S> dec(c, 12, 4, 4, 3);
    REQUIRE(dec.params().total_size() == count_parameters(c, 12));
  }
}
