#pragma once

#include <memory>
#include <string>
#include <vector>

#include "gazekit/backbone.hpp"
#include "gazekit/common.hpp"
#include "gazekit/conv.hpp"
#include "gazekit/data.hpp"
#include "gazekit/nn.hpp"
#include "gazekit/targets.hpp"
#include "gazekit/trainer.hpp"

namespace gazekit {

// Design-space harness over three axes: where the head position enters
// (before or after the frozen encoder), how features are decoded (6-conv
// stack vs one transformer layer + 2 shallow convs), and whether a separate
// head-crop branch is used at all.

enum class HeadIntegration { early, late };
enum class BaselineDecoderKind { conv6, transformer1 };
enum class BranchSetup { head_plus_scene, scene_only };

struct BaselineConfig {
  HeadIntegration integration = HeadIntegration::late;
  BaselineDecoderKind decoder = BaselineDecoderKind::transformer1;
  BranchSetup branches = BranchSetup::scene_only;

  std::string label() const {
    std::string s;
    s += integration == HeadIntegration::early ? "early" : "late";
    s += decoder == BaselineDecoderKind::conv6 ? "/conv6" : "/transformer1";
    s += branches == BranchSetup::head_plus_scene ? "/head+scene" : "/scene";
    return s;
  }
};

inline std::vector<BaselineConfig> tab2_rows() {
  using HI = HeadIntegration;
  using DK = BaselineDecoderKind;
  using BR = BranchSetup;
  return {{HI::early, DK::conv6, BR::head_plus_scene},
          {HI::early, DK::transformer1, BR::head_plus_scene},
          {HI::late, DK::conv6, BR::head_plus_scene},
          {HI::late, DK::transformer1, BR::head_plus_scene},
          {HI::late, DK::conv6, BR::scene_only},
          {HI::late, DK::transformer1, BR::scene_only}};
}

// 6-conv decoder (channel ladder 768-384-192-96-1-1, BN+ReLU after the first
// five convs, sigmoid output). Spatial flow on an HxW grid: k1, k1, k2s2
// down, k2s2 up, k2s2 up, k1 => output 2H x 2W.
template <class S>
struct Conv6Decoder {
  nn::Conv1x1<S> c1, c2, c6;
  nn::Conv2x2s2<S> c3;
  nn::ConvT2x2<S> c4, c5;
  nn::BatchNorm<S> bn[5];
  nn::Relu<S> relu;

  struct Cache {
    nn::LinearCache<S> c1c, c2c, c6c;
    std::vector<nn::Conv2x2s2Cache<S>> c3c;
    std::vector<nn::ConvT2x2Cache<S>> c4c, c5c;
    nn::BatchNormCache<S> bnc[5];
    nn::ReluCache<S> rc[5];
    Mat<S> prob;
    Index B = 0, H = 0, W = 0;
  };

  void init(Index d_in, Rng& rng) {
    c1.init(d_in, 768, rng);
    c2.init(768, 384, rng);
    c3.init(384, 192, rng);
    c4.init(192, 96, rng);
    c5.init(96, 1, rng);
    c6.init(1, 1, rng);
    Index chans[5] = {768, 384, 192, 96, 1};
    for (int i = 0; i < 5; ++i) bn[i].init(chans[i]);
  }

  // x: stacked batch cells (B*H*W) x d_in
  Mat<S> forward(const Mat<S>& x, Index B, Index H, Index W, bool training,
                 Cache* c) {
    Cache local;
    Cache& cc = c ? *c : local;
    cc.B = B;
    cc.H = H;
    cc.W = W;
    Mat<S> h = c1.forward(x, c ? &cc.c1c : nullptr);
    h = bn[0].forward(h, training, c ? &cc.bnc[0] : nullptr);
    h = relu.forward(h, c ? &cc.rc[0] : nullptr);
    h = c2.forward(h, c ? &cc.c2c : nullptr);
    h = bn[1].forward(h, training, c ? &cc.bnc[1] : nullptr);
    h = relu.forward(h, c ? &cc.rc[1] : nullptr);
    h = per_sample_down(h, B, H, W, c ? &cc.c3c : nullptr);
    h = bn[2].forward(h, training, c ? &cc.bnc[2] : nullptr);
    h = relu.forward(h, c ? &cc.rc[2] : nullptr);
    h = per_sample_up(c4, h, B, H / 2, W / 2, c ? &cc.c4c : nullptr);
    h = bn[3].forward(h, training, c ? &cc.bnc[3] : nullptr);
    h = relu.forward(h, c ? &cc.rc[3] : nullptr);
    h = per_sample_up(c5, h, B, H, W, c ? &cc.c5c : nullptr);
    h = bn[4].forward(h, training, c ? &cc.bnc[4] : nullptr);
    h = relu.forward(h, c ? &cc.rc[4] : nullptr);
    h = c6.forward(h, c ? &cc.c6c : nullptr);
    Mat<S> prob = nn::sigmoid(h);
    if (c) cc.prob = prob;
    return prob;  // (B * 4HW) x 1
  }

  // returns dL/d(input cells)
  Mat<S> backward(const Mat<S>& dprob, Cache& cc) {
    Mat<S> d = (dprob.array() * cc.prob.array() * (S(1) - cc.prob.array())).matrix();
    d = c6.backward(d, cc.c6c);
    d = relu.backward(d, cc.rc[4]);
    d = bn[4].backward(d, cc.bnc[4]);
    d = per_sample_up_bwd(c5, d, cc.B, cc.c5c);
    d = relu.backward(d, cc.rc[3]);
    d = bn[3].backward(d, cc.bnc[3]);
    d = per_sample_up_bwd(c4, d, cc.B, cc.c4c);
    d = relu.backward(d, cc.rc[2]);
    d = bn[2].backward(d, cc.bnc[2]);
    d = per_sample_down_bwd(d, cc.B, cc.c3c);
    d = relu.backward(d, cc.rc[1]);
    d = bn[1].backward(d, cc.bnc[1]);
    d = c2.backward(d, cc.c2c);
    d = relu.backward(d, cc.rc[0]);
    d = bn[0].backward(d, cc.bnc[0]);
    return c1.backward(d, cc.c1c);
  }

  void register_params(nn::ParamRegistry<S>& r, const std::string& p) {
    c1.register_params(r, p + ".c1");
    bn[0].register_params(r, p + ".bn1");
    c2.register_params(r, p + ".c2");
    bn[1].register_params(r, p + ".bn2");
    c3.register_params(r, p + ".c3");
    bn[2].register_params(r, p + ".bn3");
    c4.register_params(r, p + ".c4");
    bn[3].register_params(r, p + ".bn4");
    c5.register_params(r, p + ".c5");
    bn[4].register_params(r, p + ".bn5");
    c6.register_params(r, p + ".c6");
  }

 private:
  Mat<S> per_sample_down(const Mat<S>& h, Index B, Index H, Index W,
                         std::vector<nn::Conv2x2s2Cache<S>>* caches) {
    const Index cells = H * W;
    Mat<S> out(B * cells / 4, c3.Wk[0].cols());
    if (caches) caches->assign(B, {});
    for (Index b = 0; b < B; ++b)
      out.middleRows(b * cells / 4, cells / 4) =
          c3.forward(h.middleRows(b * cells, cells), H, W,
                     caches ? &(*caches)[b] : nullptr);
    return out;
  }
  Mat<S> per_sample_down_bwd(const Mat<S>& d, Index B,
                             std::vector<nn::Conv2x2s2Cache<S>>& caches) {
    const Index cells_out = d.rows() / B;
    Mat<S> dx(B * cells_out * 4, c3.Wk[0].rows());
    for (Index b = 0; b < B; ++b)
      dx.middleRows(b * cells_out * 4, cells_out * 4) =
          c3.backward(d.middleRows(b * cells_out, cells_out), caches[b]);
    return dx;
  }
  Mat<S> per_sample_up(nn::ConvT2x2<S>& conv, const Mat<S>& h, Index B,
                       Index H, Index W,
                       std::vector<nn::ConvT2x2Cache<S>>* caches) {
    const Index cells = H * W;
    Mat<S> out(B * cells * 4, conv.Wk[0].cols());
    if (caches) caches->assign(B, {});
    for (Index b = 0; b < B; ++b)
      out.middleRows(b * cells * 4, cells * 4) =
          conv.forward(h.middleRows(b * cells, cells), H, W,
                       caches ? &(*caches)[b] : nullptr);
    return out;
  }
  Mat<S> per_sample_up_bwd(nn::ConvT2x2<S>& conv, const Mat<S>& d, Index B,
                           std::vector<nn::ConvT2x2Cache<S>>& caches) {
    const Index cells_out = d.rows() / B;
    Mat<S> dx(B * cells_out / 4, conv.Wk[0].rows());
    for (Index b = 0; b < B; ++b)
      dx.middleRows(b * cells_out / 4, cells_out / 4) =
          conv.backward(d.middleRows(b * cells_out, cells_out), caches[b]);
    return dx;
  }
};

// One transformer layer into a 2-layer conv head (parameter-matched to the
// conv stack at the reference channel widths).
template <class S>
struct Transformer1Decoder {
  nn::Linear<S> proj;
  nn::TransformerLayer<S> layer;
  nn::ConvT2x2<S> up;
  nn::Conv1x1<S> out_conv;

  struct Cache {
    nn::LinearCache<S> pc, oc;
    std::vector<nn::TransformerLayerCache<S>> lc;
    std::vector<nn::ConvT2x2Cache<S>> uc;
    Mat<S> prob;
    Index B = 0, H = 0, W = 0;
  };

  void init(Index d_in, Rng& rng) {
    proj.init(d_in, 256, rng);
    layer.init(256, 8, 1024, 0.0, rng);
    up.init(256, 256, rng);
    out_conv.init(256, 1, rng);
  }

  Mat<S> forward(const Mat<S>& x, Index B, Index H, Index W, bool /*training*/,
                 Cache* c) {
    Cache local;
    Cache& cc = c ? *c : local;
    cc.B = B;
    cc.H = H;
    cc.W = W;
    if (c) {
      cc.lc.assign(B, {});
      cc.uc.assign(B, {});
    }
    const Index cells = H * W;
    Mat<S> h = proj.forward(x, c ? &cc.pc : nullptr);
    Mat<S> out(B * cells * 4, 256);
    for (Index b = 0; b < B; ++b) {
      Mat<S> t = layer.forward(h.middleRows(b * cells, cells), nullptr,
                               nullptr, c ? &cc.lc[b] : nullptr);
      if (c)
        h.middleRows(b * cells, cells) = t;  // reuse as layer-output cache
      out.middleRows(b * cells * 4, cells * 4) =
          up.forward(t, H, W, c ? &cc.uc[b] : nullptr);
    }
    out = out_conv.forward(out, c ? &cc.oc : nullptr);
    Mat<S> prob = nn::sigmoid(out);
    if (c) cc.prob = prob;
    return prob;
  }

  // returns dL/d(input cells)
  Mat<S> backward(const Mat<S>& dprob, Cache& cc) {
    Mat<S> d =
        (dprob.array() * cc.prob.array() * (S(1) - cc.prob.array())).matrix();
    d = out_conv.backward(d, cc.oc);
    const Index cells = cc.H * cc.W;
    Mat<S> dh(cc.B * cells, 256);
    for (Index b = 0; b < cc.B; ++b) {
      Mat<S> dt = up.backward(d.middleRows(b * cells * 4, cells * 4), cc.uc[b]);
      dh.middleRows(b * cells, cells) = layer.backward(dt, cc.lc[b]);
    }
    return proj.backward(dh, cc.pc);
  }

  void register_params(nn::ParamRegistry<S>& r, const std::string& p) {
    proj.register_params(r, p + ".proj");
    layer.register_params(r, p + ".layer");
    up.register_params(r, p + ".up");
    out_conv.register_params(r, p + ".out");
  }
};

template <class S>
class BaselineModel {
 public:
  BaselineModel(const BaselineConfig& cfg, const BackboneSpec& bspec,
                Index input_size, std::uint64_t seed)
      : cfg_(cfg), input_size_(input_size), backbone_(make_backbone<S>(bspec)) {
    if (input_size % bspec.patch_size)
      throw ConfigError("baseline: input size not divisible by patch size");
    if (cfg.integration == HeadIntegration::early &&
        bspec.kind != BackboneKind::toy)
      throw ConfigError(
          "baseline: early integration retrains the input projection and is "
          "only wired for the toy backbone");
    grid_ = input_size / bspec.patch_size;
    head_input_ = input_size / 2;
    if (head_input_ % bspec.patch_size)
      throw ConfigError("baseline: head-branch input size " +
                        std::to_string(head_input_) +
                        " not divisible by patch size");
    Rng rng(derive_seed(seed, 0x62617365ull));  // "base"
    const bool head_branch = cfg.branches == BranchSetup::head_plus_scene;
    d_in_ = bspec.d_F * (head_branch ? 2 : 1);
    if (cfg.integration == HeadIntegration::late) d_in_ += 1;  // mask channel
    if (cfg.integration == HeadIntegration::early) {
      const Index p = bspec.patch_size;
      early_proj_.init(4 * p * p, bspec.d_F, rng);
      early_proj_.register_params(reg_, "backbone.patch_proj");
    }
    if (cfg.decoder == BaselineDecoderKind::conv6) {
      conv6_ = std::make_unique<Conv6Decoder<S>>();
      conv6_->init(d_in_, rng);
      conv6_->register_params(reg_, "decoder.conv6");
    } else {
      tran1_ = std::make_unique<Transformer1Decoder<S>>();
      tran1_->init(d_in_, rng);
      tran1_->register_params(reg_, "decoder.transformer1");
    }
  }

  const BaselineConfig& config() const { return cfg_; }
  Index decoder_in_channels() const { return d_in_; }
  Index grid() const { return grid_; }
  nn::ParamRegistry<S>& params() { return reg_; }
  Backbone<S>& backbone() { return *backbone_; }

  // Builds the decoder input for one sample: scene features (frozen encoder
  // or retrained 4-channel projection), optional upsampled head-crop
  // features, optional mask channel.
  Mat<S> build_features(const SampleRecord<S>& s, nn::LinearCache<S>* early_c) {
    const auto& bspec = backbone_->spec();
    Mat<S> feats;
    if (cfg_.integration == HeadIntegration::early) {
      feats = early_proj_.forward(patch_tokens_4ch(s), early_c);
    } else {
      feats = backbone_->extract(s.image).tokens;
    }
    if (cfg_.branches == BranchSetup::head_plus_scene) {
      Image<S> crop = crop_head(s.image, s.ann.bbox, head_input_);
      RawFeatureMap<S> hf = backbone_->extract(crop);
      Mat<S> up(grid_ * grid_, bspec.d_F);
      for (Index ch = 0; ch < bspec.d_F; ++ch) {
        Mat<S> plane(hf.H, hf.W);
        for (Index i = 0; i < hf.H; ++i)
          for (Index j = 0; j < hf.W; ++j) plane(i, j) = hf.tokens(i * hf.W + j, ch);
        Mat<S> rp = nn::bilinear_resize(plane, grid_, grid_);
        for (Index i = 0; i < grid_; ++i)
          for (Index j = 0; j < grid_; ++j) up(i * grid_ + j, ch) = rp(i, j);
      }
      Mat<S> cat(feats.rows(), feats.cols() + up.cols());
      cat << feats, up;
      feats = std::move(cat);
    }
    if (cfg_.integration == HeadIntegration::late) {
      Mat<S> mask = nn::map_to_grid(build_head_mask<S>(s.ann.bbox, grid_, grid_));
      Mat<S> cat(feats.rows(), feats.cols() + 1);
      cat << feats, mask;
      feats = std::move(cat);
    }
    return feats;
  }

  std::vector<Mat<S>> forward_batch(const std::vector<SampleRecord<S>>& batch,
                                    bool training) {
    const Index B = static_cast<Index>(batch.size());
    const Index cells = grid_ * grid_;
    Mat<S> x(B * cells, d_in_);
    early_c_.assign(B, {});
    for (Index b = 0; b < B; ++b)
      x.middleRows(b * cells, cells) =
          build_features(batch[b], training ? &early_c_[b] : nullptr);
    Mat<S> prob =
        conv6_ ? conv6_->forward(x, B, grid_, grid_, training, training ? &c6c_ : nullptr)
               : tran1_->forward(x, B, grid_, grid_, training, training ? &t1c_ : nullptr);
    std::vector<Mat<S>> maps;
    const Index oc = 4 * cells;
    for (Index b = 0; b < B; ++b)
      maps.push_back(nn::grid_to_map(Mat<S>(prob.middleRows(b * oc, oc)),
                                     2 * grid_, 2 * grid_));
    return maps;
  }

  // One BCE training step over the batch; returns the mean loss.
  double train_step(const std::vector<SampleRecord<S>>& batch, Adam<S>& opt,
                    double lr_factor) {
    const Index B = static_cast<Index>(batch.size());
    reg_.zero_grads();
    auto maps = forward_batch(batch, true);
    double loss = 0;
    Mat<S> dprob(B * 4 * grid_ * grid_, 1);
    for (Index b = 0; b < B; ++b) {
      loss += static_cast<double>(loss_heatmap(maps[b], batch[b].target));
      Mat<S> d = loss_heatmap_backward(maps[b], batch[b].target) / S(B);
      dprob.middleRows(b * 4 * grid_ * grid_, 4 * grid_ * grid_) =
          nn::map_to_grid(d);
    }
    Mat<S> dx = conv6_ ? conv6_->backward(dprob, c6c_)
                       : tran1_->backward(dprob, t1c_);
    if (cfg_.integration == HeadIntegration::early) {
      const Index cells = grid_ * grid_;
      const Index d_F = backbone_->spec().d_F;
      for (Index b = 0; b < B; ++b)
        early_proj_.backward(
            Mat<S>(dx.block(b * cells, 0, cells, d_F)), early_c_[b]);
    }
    opt.step(reg_, lr_factor);
    return loss / B;
  }

 private:
  Mat<S> patch_tokens_4ch(const SampleRecord<S>& s) const {
    const auto& bspec = backbone_->spec();
    const Index p = bspec.patch_size;
    const Index gh = s.image.height() / p, gw = s.image.width() / p;
    // pixel-resolution mask plane from the bbox
    Mat<S> maskpx = Mat<S>::Zero(s.image.height(), s.image.width());
    {
      const auto& b = s.ann.bbox;
      Index y0 = cell_of(b.ymin, s.image.height());
      Index y1 = cell_of(b.ymax, s.image.height());
      Index x0 = cell_of(b.xmin, s.image.width());
      Index x1 = cell_of(b.xmax, s.image.width());
      maskpx.block(y0, x0, y1 - y0 + 1, x1 - x0 + 1).setOnes();
    }
    Mat<S> t(gh * gw, 4 * p * p);
    for (Index pi = 0; pi < gh; ++pi)
      for (Index pj = 0; pj < gw; ++pj) {
        Index row = pi * gw + pj, k = 0;
        for (int c = 0; c < 3; ++c) {
          const S mu = static_cast<S>(bspec.mean[c]);
          const S sd = static_cast<S>(bspec.stdev[c]);
          for (Index y = 0; y < p; ++y)
            for (Index x = 0; x < p; ++x)
              t(row, k++) = (s.image.ch[c](pi * p + y, pj * p + x) - mu) / sd;
        }
        for (Index y = 0; y < p; ++y)
          for (Index x = 0; x < p; ++x)
            t(row, k++) = maskpx(pi * p + y, pj * p + x);
      }
    return t;
  }

  static Image<S> crop_head(const Image<S>& img, const HeadBBox& b, Index out) {
    const Index H = img.height(), W = img.width();
    Index x0 = cell_of(b.xmin, W), y0 = cell_of(b.ymin, H);
    Index x1 = std::max(cell_of(b.xmax, W), x0 + 1);
    Index y1 = std::max(cell_of(b.ymax, H), y0 + 1);
    Image<S> crop = Image<S>::zeros(out, out);
    for (int c = 0; c < 3; ++c) {
      Mat<S> sub = img.ch[c].block(y0, x0, y1 - y0, x1 - x0);
      crop.ch[c] = nn::bilinear_resize(sub, out, out);
    }
    return crop;
  }

  BaselineConfig cfg_;
  Index input_size_, grid_ = 0, head_input_ = 0, d_in_ = 0;
  std::unique_ptr<Backbone<S>> backbone_;
  nn::Linear<S> early_proj_;
  std::unique_ptr<Conv6Decoder<S>> conv6_;
  std::unique_ptr<Transformer1Decoder<S>> tran1_;
  typename Conv6Decoder<S>::Cache c6c_;
  typename Transformer1Decoder<S>::Cache t1c_;
  std::vector<nn::LinearCache<S>> early_c_;
  nn::ParamRegistry<S> reg_;
};

template <class S>
BaselineModel<S> build_baseline(const BaselineConfig& cfg,
                                const BackboneSpec& bspec, Index input_size,
                                std::uint64_t seed) {
  return BaselineModel<S>(cfg, bspec, input_size, seed);
}

}  // namespace gazekit
