#pragma once

#include <array>
#include <atomic>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "gazekit/checkpoint.hpp"
#include "gazekit/common.hpp"
#include "gazekit/nn.hpp"

namespace gazekit {

// RGB image, channel planes of H x W values in [0,1].
template <class S>
struct Image {
  std::array<Mat<S>, 3> ch;

  Index height() const { return ch[0].rows(); }
  Index width() const { return ch[0].cols(); }

  static Image zeros(Index h, Index w) {
    Image im;
    for (auto& c : im.ch) c = Mat<S>::Zero(h, w);
    return im;
  }
};

template <class S>
struct RawFeatureMap {
  Mat<S> tokens;  // (H*W) x d_F, row-major cells
  Index H = 0, W = 0;
};

template <class S>
struct SceneFeatureMap {
  Mat<S> tokens;  // (H*W) x d_model
  Index H = 0, W = 0;
};

enum class BackboneKind { toy, vit };

// Everything needed to (re)create a scene encoder. Backbones are always
// frozen; normalization constants live here because they are a property of
// the pretrained weights, not of the data pipeline.
struct BackboneSpec {
  BackboneKind kind = BackboneKind::toy;
  std::string name = "toy";
  Index patch_size = 14;
  Index d_F = 64;
  std::uint64_t seed = 17;           // toy: seed of the fixed random map
  std::string weights_path;          // vit: archive produced by save_vit_weights
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> stdev{0.5, 0.5, 0.5};
  bool frozen = true;

  void validate() const {
    if (patch_size <= 0) throw ConfigError("backbone: patch_size must be > 0");
    if (d_F <= 0) throw ConfigError("backbone: d_F must be > 0");
    if (!frozen) throw ConfigError("backbone: frozen must stay true");
  }
};

template <class S>
class Backbone {
 public:
  explicit Backbone(BackboneSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
  }
  virtual ~Backbone() = default;

  const BackboneSpec& spec() const { return spec_; }

  RawFeatureMap<S> extract(const Image<S>& img) const {
    if (img.height() % spec_.patch_size || img.width() % spec_.patch_size)
      throw ShapeError("image " + std::to_string(img.height()) + "x" +
                       std::to_string(img.width()) +
                       " not divisible by patch size " +
                       std::to_string(spec_.patch_size));
    ++calls_;
    return extract_impl(img);
  }

  long call_count() const { return calls_.load(); }
  void reset_call_count() { calls_ = 0; }

  // checksum over all weight arrays; used to assert frozen-ness
  virtual double params_checksum() const = 0;

 protected:
  virtual RawFeatureMap<S> extract_impl(const Image<S>& img) const = 0;

  Mat<S> patch_tokens(const Image<S>& img) const {
    const Index p = spec_.patch_size;
    const Index H = img.height() / p, W = img.width() / p;
    Mat<S> t(H * W, 3 * p * p);
    for (Index pi = 0; pi < H; ++pi)
      for (Index pj = 0; pj < W; ++pj) {
        Index row = pi * W + pj, k = 0;
        for (int c = 0; c < 3; ++c) {
          const S mu = static_cast<S>(spec_.mean[c]);
          const S sd = static_cast<S>(spec_.stdev[c]);
          for (Index y = 0; y < p; ++y)
            for (Index x = 0; x < p; ++x)
              t(row, k++) = (img.ch[c](pi * p + y, pj * p + x) - mu) / sd;
        }
      }
    return t;
  }

  BackboneSpec spec_;
  mutable std::atomic<long> calls_{0};
};

// Stand-in encoder: a fixed, seeded random linear map of each patch's
// normalized pixels. Deterministic, strictly local, information preserving
// enough for the synthetic tasks.
template <class S>
class ToyBackbone final : public Backbone<S> {
 public:
  explicit ToyBackbone(const BackboneSpec& spec) : Backbone<S>(spec) {
    Rng rng(derive_seed(spec.seed, 0x70795f6d6170ull));  // "toy_map"
    const Index in = 3 * spec.patch_size * spec.patch_size;
    W_.resize(in, spec.d_F);
    rng.fill_normal(W_, 1.0 / std::sqrt(static_cast<double>(in)));
  }

  double params_checksum() const override {
    return static_cast<double>(W_.template cast<double>().array().abs().sum());
  }

  const Mat<S>& weight() const { return W_; }

 protected:
  RawFeatureMap<S> extract_impl(const Image<S>& img) const override {
    RawFeatureMap<S> out;
    out.H = img.height() / this->spec_.patch_size;
    out.W = img.width() / this->spec_.patch_size;
    out.tokens = this->patch_tokens(img) * W_;
    return out;
  }

 private:
  Mat<S> W_;
};

// Frozen ViT encoder loaded from a weights archive (patch embedding,
// learned position embedding, pre-norm blocks, final norm; features are the
// final-layer patch tokens). Inference only.
template <class S>
class VitBackbone final : public Backbone<S> {
 public:
  explicit VitBackbone(const BackboneSpec& spec) : Backbone<S>(spec) {
    if (!std::filesystem::exists(spec.weights_path))
      throw IoError("backbone '" + spec.name + "': weights file not found: " +
                    spec.weights_path);
    Archive a = Archive::load(spec.weights_path);
    depth_ = a.meta.at("depth").get<int>();
    heads_ = a.meta.at("heads").get<int>();
    width_ = a.meta.at("width").get<Index>();
    mlp_dim_ = a.meta.at("mlp_dim").get<Index>();
    grid_ = a.meta.at("grid").get<Index>();
    if (width_ != spec.d_F)
      throw ConfigError("backbone '" + spec.name + "': spec d_F " +
                        std::to_string(spec.d_F) + " != archive width " +
                        std::to_string(width_));
    Rng dummy(0);
    patch_embed_.init(3 * spec.patch_size * spec.patch_size, width_, dummy);
    patch_embed_.W = a.get<S>("patch_embed.weight");
    patch_embed_.b = a.get<S>("patch_embed.bias");
    pos_embed_ = a.get<S>("pos_embed");
    blocks_.resize(depth_);
    for (int l = 0; l < depth_; ++l) {
      auto& blk = blocks_[l];
      blk.init(width_, heads_, mlp_dim_, 0.0, dummy);
      std::string p = "blocks." + std::to_string(l);
      blk.ln1.gamma = a.get<S>(p + ".ln1.gamma");
      blk.ln1.beta = a.get<S>(p + ".ln1.beta");
      blk.ln2.gamma = a.get<S>(p + ".ln2.gamma");
      blk.ln2.beta = a.get<S>(p + ".ln2.beta");
      blk.attn.wq.W = a.get<S>(p + ".attn.q.weight");
      blk.attn.wq.b = a.get<S>(p + ".attn.q.bias");
      blk.attn.wk.W = a.get<S>(p + ".attn.k.weight");
      blk.attn.wk.b = a.get<S>(p + ".attn.k.bias");
      blk.attn.wv.W = a.get<S>(p + ".attn.v.weight");
      blk.attn.wv.b = a.get<S>(p + ".attn.v.bias");
      blk.attn.wo.W = a.get<S>(p + ".attn.out.weight");
      blk.attn.wo.b = a.get<S>(p + ".attn.out.bias");
      blk.mlp.fc1.W = a.get<S>(p + ".mlp.fc1.weight");
      blk.mlp.fc1.b = a.get<S>(p + ".mlp.fc1.bias");
      blk.mlp.fc2.W = a.get<S>(p + ".mlp.fc2.weight");
      blk.mlp.fc2.b = a.get<S>(p + ".mlp.fc2.bias");
    }
    norm_.init(width_);
    norm_.gamma = a.get<S>("norm.gamma");
    norm_.beta = a.get<S>("norm.beta");
  }

  double params_checksum() const override {
    double s = W_sum(patch_embed_.W) + W_sum(patch_embed_.b) + W_sum(pos_embed_);
    for (const auto& b : blocks_) {
      s += W_sum(b.ln1.gamma) + W_sum(b.ln1.beta) + W_sum(b.ln2.gamma) +
           W_sum(b.ln2.beta);
      s += W_sum(b.attn.wq.W) + W_sum(b.attn.wk.W) + W_sum(b.attn.wv.W) +
           W_sum(b.attn.wo.W);
      s += W_sum(b.attn.wq.b) + W_sum(b.attn.wk.b) + W_sum(b.attn.wv.b) +
           W_sum(b.attn.wo.b);
      s += W_sum(b.mlp.fc1.W) + W_sum(b.mlp.fc1.b) + W_sum(b.mlp.fc2.W) +
           W_sum(b.mlp.fc2.b);
    }
    return s + W_sum(norm_.gamma) + W_sum(norm_.beta);
  }

 protected:
  RawFeatureMap<S> extract_impl(const Image<S>& img) const override {
    RawFeatureMap<S> out;
    out.H = img.height() / this->spec_.patch_size;
    out.W = img.width() / this->spec_.patch_size;
    if (out.H != grid_ || out.W != grid_)
      throw ShapeError("vit backbone expects a " + std::to_string(grid_) +
                       "x" + std::to_string(grid_) + " token grid, got " +
                       std::to_string(out.H) + "x" + std::to_string(out.W));
    Mat<S> x = patch_embed_.forward(this->patch_tokens(img), nullptr);
    x += pos_embed_;
    for (const auto& blk : blocks_)
      x = blk.forward(x, nullptr, nullptr, nullptr);
    out.tokens = norm_.forward(x, nullptr);
    return out;
  }

 private:
  static double W_sum(const Mat<S>& m) {
    return static_cast<double>(m.template cast<double>().array().abs().sum());
  }

  nn::Linear<S> patch_embed_;
  Mat<S> pos_embed_;
  std::vector<nn::TransformerLayer<S>> blocks_;
  nn::LayerNorm<S> norm_;
  int depth_ = 0, heads_ = 0;
  Index width_ = 0, mlp_dim_ = 0, grid_ = 0;
};

template <class S>
std::unique_ptr<Backbone<S>> make_backbone(const BackboneSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case BackboneKind::toy:
      return std::make_unique<ToyBackbone<S>>(spec);
    case BackboneKind::vit:
      return std::make_unique<VitBackbone<S>>(spec);
  }
  throw ConfigError("unknown backbone kind");
}

template <class S>
RawFeatureMap<S> extract_features(const Image<S>& img,
                                  const Backbone<S>& backbone) {
  return backbone.extract(img);
}

// Writes a randomly initialized ViT weights archive; used for tests and the
// multi-person benchmark, where a realistic encoder cost matters but the
// weights do not.
inline void save_random_vit_weights(const std::string& path, Index patch,
                                    Index width, int depth, int heads,
                                    Index mlp_dim, Index grid,
                                    std::uint64_t seed) {
  using S = float;
  Rng rng(derive_seed(seed, 0x766974ull));  // "vit"
  Archive a;
  a.meta = {{"depth", depth}, {"heads", heads},   {"width", width},
            {"mlp_dim", mlp_dim}, {"grid", grid}, {"patch", patch}};
  auto rand_mat = [&](Index r, Index c, double sd) {
    Mat<S> m(r, c);
    rng.fill_trunc_normal(m, sd);
    return m;
  };
  a.add("patch_embed.weight", rand_mat(3 * patch * patch, width, 0.02));
  a.add("patch_embed.bias", Mat<S>(Mat<S>::Zero(1, width)));
  a.add("pos_embed", rand_mat(grid * grid, width, 0.02));
  for (int l = 0; l < depth; ++l) {
    std::string p = "blocks." + std::to_string(l);
    a.add(p + ".ln1.gamma", Mat<S>(Mat<S>::Ones(1, width)));
    a.add(p + ".ln1.beta", Mat<S>(Mat<S>::Zero(1, width)));
    a.add(p + ".ln2.gamma", Mat<S>(Mat<S>::Ones(1, width)));
    a.add(p + ".ln2.beta", Mat<S>(Mat<S>::Zero(1, width)));
    for (const char* t : {"q", "k", "v", "out"}) {
      a.add(p + ".attn." + std::string(t) + ".weight",
            rand_mat(width, width, 0.02));
      a.add(p + ".attn." + std::string(t) + ".bias",
            Mat<S>(Mat<S>::Zero(1, width)));
    }
    a.add(p + ".mlp.fc1.weight", rand_mat(width, mlp_dim, 0.02));
    a.add(p + ".mlp.fc1.bias", Mat<S>(Mat<S>::Zero(1, mlp_dim)));
    a.add(p + ".mlp.fc2.weight", rand_mat(mlp_dim, width, 0.02));
    a.add(p + ".mlp.fc2.bias", Mat<S>(Mat<S>::Zero(1, width)));
  }
  a.add("norm.gamma", Mat<S>(Mat<S>::Ones(1, width)));
  a.add("norm.beta", Mat<S>(Mat<S>::Zero(1, width)));
  a.save(path);
}

}  // namespace gazekit
