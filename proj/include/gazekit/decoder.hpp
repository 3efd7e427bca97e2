#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gazekit/backbone.hpp"
#include "gazekit/common.hpp"
#include "gazekit/conv.hpp"
#include "gazekit/nn.hpp"
#include "gazekit/posembed.hpp"
#include "gazekit/prompting.hpp"

namespace gazekit {

enum class PromptVariant { added_embedding, position_token, none };
enum class HeatmapHead { conv2, dot_product, mlp };
enum class AttentionMode { self_attention, cross_attention };

inline const char* to_string(PromptVariant v) {
  switch (v) {
    case PromptVariant::added_embedding: return "added_embedding";
    case PromptVariant::position_token: return "position_token";
    case PromptVariant::none: return "none";
  }
  return "?";
}
inline const char* to_string(HeatmapHead h) {
  switch (h) {
    case HeatmapHead::conv2: return "conv2";
    case HeatmapHead::dot_product: return "dot_product";
    case HeatmapHead::mlp: return "mlp";
  }
  return "?";
}
inline const char* to_string(AttentionMode a) {
  return a == AttentionMode::self_attention ? "self" : "cross";
}

struct DecoderConfig {
  Index d_model = 256;
  int num_layers = 3;
  Index num_heads = 8;
  Index mlp_dim = 1024;
  PromptVariant prompt_variant = PromptVariant::added_embedding;
  int prompt_layer = 1;  // 1-based; prompt is added right before this layer
  bool use_task_token = true;
  HeatmapHead head = HeatmapHead::conv2;
  AttentionMode attention = AttentionMode::self_attention;
  double drop_path_p = 0.1;
  Index out_h = 64, out_w = 64;

  void validate() const {
    if (d_model <= 0 || d_model % num_heads != 0)
      throw ConfigError("d_model must be positive and divisible by num_heads");
    if (d_model % 4 != 0)
      throw ConfigError("d_model must be divisible by 4 for the 2d sinusoidal embedding");
    if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
    if (mlp_dim < 1) throw ConfigError("mlp_dim must be >= 1");
    if (prompt_layer < 1 || prompt_layer > num_layers)
      throw ConfigError("prompt_layer must be in [1, num_layers]");
    if (drop_path_p < 0 || drop_path_p >= 1)
      throw ConfigError("drop_path_p must be in [0,1)");
    if (out_h < 1 || out_w < 1) throw ConfigError("output size must be positive");
    const bool token = prompt_variant == PromptVariant::position_token;
    if ((head == HeatmapHead::dot_product || head == HeatmapHead::mlp) && !token)
      throw ConfigError(std::string(to_string(head)) +
                        " head requires the position_token prompt variant");
    if (attention == AttentionMode::cross_attention && !token)
      throw ConfigError("cross attention requires the position_token prompt variant");
    if (token && use_task_token)
      throw ConfigError("position_token configurations run without the task token");
    if (token && prompt_layer != 1)
      throw ConfigError("position_token prompting only supports prompt_layer=1");
  }
};

struct PersonPrompt {
  HeadBBox bbox;
};

template <class S>
struct DecoderOutput {
  Mat<S> heatmap;  // out_h x out_w, values in [0,1]
  std::optional<S> inout;
};

template <class S>
struct DecoderTape {
  nn::LinearCache<S> proj_c;
  Mat<S> mask_flat;   // (H*W) x 1; added_embedding only
  Mat<S> pre_prompt;  // token state immediately before prompt injection
  std::vector<Mat<S>> layer_inputs;
  std::vector<nn::TransformerLayerCache<S>> layer_c;
  nn::LayerNormCache<S> final_c;
  // conv2 head
  nn::ConvT2x2Cache<S> up_c;
  nn::LinearCache<S> outconv_c;
  Mat<S> heat_prob_cells;
  // dot head
  Mat<S> dot_scene, dot_tpos, dot_prob_small;
  // mlp head
  nn::LinearCache<S> mlp1_c, mlp2_c;
  nn::GeluCache<S> mlpg_c;
  Mat<S> mlp_prob;
  // in/out head
  nn::LinearCache<S> io1_c, io2_c;
  nn::GeluCache<S> iog_c;
  S io_prob = S(0);
};

// Person-independent state shared between persons at inference: the token
// list after every layer strictly before the prompt layer.
template <class S>
struct DecoderPrefix {
  Mat<S> tokens;
  int layers_done = 0;
};

// The gaze decoder: linear projection of backbone features, head prompting,
// sinusoidal position embedding, optional in/out task token, a small stack of
// pre-norm transformer layers, and the heatmap / in-out prediction heads.
// Bound to a fixed token grid at construction.
template <class S>
class GazeDecoder {
 public:
  GazeDecoder(const DecoderConfig& cfg, Index d_F, Index grid_h, Index grid_w,
              std::uint64_t seed)
      : cfg_(cfg), d_F_(d_F), H_(grid_h), W_(grid_w) {
    cfg.validate();
    if (d_F < 1 || grid_h < 1 || grid_w < 1)
      throw ConfigError("decoder: bad feature-map geometry");
    if (cfg.head == HeatmapHead::conv2 &&
        (cfg.out_h != 2 * grid_h || cfg.out_w != 2 * grid_w))
      throw ConfigError("conv2 head upsamples 2x: output must be " +
                        std::to_string(2 * grid_h) + "x" +
                        std::to_string(2 * grid_w));
    Rng rng(derive_seed(seed, 0x6465636f646572ull));  // "decoder"
    proj_.init(d_F, cfg.d_model, rng);
    if (cfg.prompt_variant == PromptVariant::added_embedding) {
      p_head_.resize(1, cfg.d_model);
      rng.fill_trunc_normal(p_head_, 0.02);
      g_p_head_ = Mat<S>::Zero(1, cfg.d_model);
    }
    if (cfg.prompt_variant == PromptVariant::position_token) {
      e_head_.resize(1, cfg.d_model);
      rng.fill_trunc_normal(e_head_, 0.02);
      g_e_head_ = Mat<S>::Zero(1, cfg.d_model);
    }
    if (cfg.use_task_token) {
      task_token_.resize(1, cfg.d_model);
      rng.fill_trunc_normal(task_token_, 0.02);
      g_task_token_ = Mat<S>::Zero(1, cfg.d_model);
    }
    layers_.resize(cfg.num_layers);
    for (auto& l : layers_)
      l.init(cfg.d_model, cfg.num_heads, cfg.mlp_dim, cfg.drop_path_p, rng);
    final_norm_.init(cfg.d_model);
    switch (cfg.head) {
      case HeatmapHead::conv2:
        up_.init(cfg.d_model, cfg.d_model, rng);
        out_conv_.init(cfg.d_model, 1, rng);
        break;
      case HeatmapHead::dot_product:
        break;
      case HeatmapHead::mlp:
        mlp_fc1_.init(2 * cfg.d_model, cfg.d_model, rng);
        mlp_fc2_.init(cfg.d_model, cfg.out_h * cfg.out_w, rng);
        break;
    }
    if (cfg.use_task_token) {
      io_fc1_.init(cfg.d_model, cfg.d_model, rng);
      io_fc2_.init(cfg.d_model, 1, rng);
    }
    P_ = sinusoidal_embedding<S>(cfg.d_model, H_, W_);
    if (use_cross_mask()) {
      const Index n = H_ * W_ + 1;
      cross_mask_ = Mat<S>::Zero(n, n);
      cross_mask_.col(n - 1).setConstant(S(-1e9));
    }
    register_all();
  }

  const DecoderConfig& config() const { return cfg_; }
  Index d_F() const { return d_F_; }
  Index grid_h() const { return H_; }
  Index grid_w() const { return W_; }
  const Mat<S>& pos_embed() const { return P_; }
  nn::ParamRegistry<S>& params() { return reg_; }
  const nn::ParamRegistry<S>& params() const { return reg_; }

  // --- training path -------------------------------------------------------

  DecoderOutput<S> run_train(const RawFeatureMap<S>& raw,
                             const PersonPrompt& prompt, Rng* droppath_rng,
                             DecoderTape<S>& tape) const {
    Mat<S> tokens = assemble(raw, prompt, &tape.proj_c);
    if (cfg_.prompt_variant == PromptVariant::added_embedding)
      tape.mask_flat = nn::map_to_grid(
          build_head_mask<S>(prompt.bbox, H_, W_));
    tape.layer_inputs.clear();
    tape.layer_c.assign(layers_.size(), {});
    const Mat<S>* mask = use_cross_mask() ? &cross_mask_ : nullptr;
    for (int k = 0; k < cfg_.num_layers; ++k) {
      if (is_prompt_layer(k) &&
          cfg_.prompt_variant == PromptVariant::added_embedding) {
        tape.pre_prompt = tokens;
        inject_added_prompt(tokens, tape.mask_flat);
      }
      tape.layer_inputs.push_back(tokens);
      tokens = layers_[k].forward(tokens, mask, droppath_rng, &tape.layer_c[k]);
    }
    tokens = final_norm_.forward(tokens, &tape.final_c);
    return heads(tokens, &tape);
  }

  // Accumulates parameter gradients for one sample. d_heat is dL/d(heatmap),
  // d_inout is dL/d(inout score) (0 when the task token is off).
  void backward(const Mat<S>& d_heat, S d_inout, const DecoderTape<S>& tape) {
    Mat<S> d_tokens = heads_backward(d_heat, d_inout, tape);
    d_tokens = final_norm_.backward(d_tokens, tape.final_c);
    for (int k = cfg_.num_layers - 1; k >= 0; --k) {
      d_tokens = layers_[k].backward(d_tokens, tape.layer_c[k]);
      if (is_prompt_layer(k) &&
          cfg_.prompt_variant == PromptVariant::added_embedding) {
        for (Index r = 0; r < tape.mask_flat.rows(); ++r)
          if (tape.mask_flat(r, 0) != S(0))
            g_p_head_.row(0) += d_tokens.row(n_prefix() + r);
      }
    }
    if (cfg_.use_task_token) g_task_token_.row(0) += d_tokens.row(0);
    if (cfg_.prompt_variant == PromptVariant::position_token)
      g_e_head_.row(0) += d_tokens.row(d_tokens.rows() - 1);
    Mat<S> d_scene = d_tokens.middleRows(n_prefix(), H_ * W_);
    proj_.backward(d_scene, tape.proj_c);
  }

  // --- inference path ------------------------------------------------------

  DecoderPrefix<S> make_prefix(const RawFeatureMap<S>& raw,
                               std::vector<Mat<S>>* trace = nullptr) const {
    DecoderPrefix<S> pre;
    // The prefix carries no person information, so it must not depend on any
    // prompt; assemble() only reads the bbox for the position-token variant,
    // which forces prompt_layer == 1 (empty prefix of layers).
    pre.tokens = assemble_sceneonly(raw);
    const Mat<S>* mask = use_cross_mask() ? &cross_mask_ : nullptr;
    for (int k = 0; k + 1 < cfg_.prompt_layer; ++k) {
      if (trace) trace->push_back(pre.tokens);
      pre.tokens = layers_[k].forward(pre.tokens, mask, nullptr, nullptr);
      pre.layers_done = k + 1;
    }
    return pre;
  }

  DecoderOutput<S> run_person(const DecoderPrefix<S>& pre,
                              const PersonPrompt& prompt,
                              std::vector<Mat<S>>* trace = nullptr) const {
    Mat<S> tokens = pre.tokens;
    switch (cfg_.prompt_variant) {
      case PromptVariant::added_embedding: {
        Mat<S> mask = nn::map_to_grid(build_head_mask<S>(prompt.bbox, H_, W_));
        inject_added_prompt(tokens, mask);
        break;
      }
      case PromptVariant::position_token: {
        Mat<S> tpos = build_position_token(prompt.bbox, P_, H_, W_, e_head_);
        tokens.conservativeResize(tokens.rows() + 1, Eigen::NoChange);
        tokens.row(tokens.rows() - 1) = tpos.row(0);
        break;
      }
      case PromptVariant::none:
        break;
    }
    const Mat<S>* mask = use_cross_mask() ? &cross_mask_ : nullptr;
    for (int k = pre.layers_done; k < cfg_.num_layers; ++k) {
      if (trace) trace->push_back(tokens);
      tokens = layers_[k].forward(tokens, mask, nullptr, nullptr);
    }
    tokens = final_norm_.forward(tokens, nullptr);
    return heads(tokens, nullptr);
  }

  DecoderOutput<S> infer(const RawFeatureMap<S>& raw,
                         const PersonPrompt& prompt) const {
    return run_person(make_prefix(raw), prompt);
  }

 private:
  bool use_cross_mask() const {
    return cfg_.attention == AttentionMode::cross_attention;
  }
  bool is_prompt_layer(int k) const { return k == cfg_.prompt_layer - 1; }
  Index n_prefix() const { return cfg_.use_task_token ? 1 : 0; }
  Index n_suffix() const {
    return cfg_.prompt_variant == PromptVariant::position_token ? 1 : 0;
  }

  Mat<S> assemble_sceneonly(const RawFeatureMap<S>& raw,
                            nn::LinearCache<S>* proj_c = nullptr) const {
    if (raw.H != H_ || raw.W != W_)
      throw ShapeError("decoder built for a " + std::to_string(H_) + "x" +
                       std::to_string(W_) + " grid, got " +
                       std::to_string(raw.H) + "x" + std::to_string(raw.W));
    Mat<S> scene = proj_.forward(raw.tokens, proj_c);
    scene += P_;
    if (!cfg_.use_task_token) return scene;
    Mat<S> tokens(1 + scene.rows(), cfg_.d_model);
    tokens.row(0) = task_token_.row(0);
    tokens.bottomRows(scene.rows()) = scene;
    return tokens;
  }

  Mat<S> assemble(const RawFeatureMap<S>& raw, const PersonPrompt& prompt,
                  nn::LinearCache<S>* proj_c) const {
    Mat<S> tokens = assemble_sceneonly(raw, proj_c);
    if (cfg_.prompt_variant == PromptVariant::position_token) {
      Mat<S> tpos = build_position_token(prompt.bbox, P_, H_, W_, e_head_);
      tokens.conservativeResize(tokens.rows() + 1, Eigen::NoChange);
      tokens.row(tokens.rows() - 1) = tpos.row(0);
    }
    return tokens;
  }

  void inject_added_prompt(Mat<S>& tokens, const Mat<S>& mask_flat) const {
    const Index off = n_prefix();
    for (Index r = 0; r < mask_flat.rows(); ++r)
      if (mask_flat(r, 0) != S(0)) tokens.row(off + r) += p_head_.row(0);
  }

  DecoderOutput<S> heads(const Mat<S>& tokens, DecoderTape<S>* tape) const {
    DecoderOutput<S> out;
    Mat<S> scene = tokens.middleRows(n_prefix(), H_ * W_);
    switch (cfg_.head) {
      case HeatmapHead::conv2: {
        Mat<S> cells = up_.forward(scene, H_, W_, tape ? &tape->up_c : nullptr);
        cells = out_conv_.forward(cells, tape ? &tape->outconv_c : nullptr);
        Mat<S> prob = nn::sigmoid(cells);
        if (tape) tape->heat_prob_cells = prob;
        out.heatmap = nn::grid_to_map(prob, 2 * H_, 2 * W_);
        break;
      }
      case HeatmapHead::dot_product: {
        Mat<S> tpos = tokens.row(tokens.rows() - 1);
        Mat<S> scores = scene * tpos.transpose();  // (H*W) x 1
        Mat<S> prob_small = nn::grid_to_map(Mat<S>(nn::sigmoid(scores)), H_, W_);
        if (tape) {
          tape->dot_scene = scene;
          tape->dot_tpos = tpos;
          tape->dot_prob_small = prob_small;
        }
        out.heatmap = nn::bilinear_resize(prob_small, cfg_.out_h, cfg_.out_w);
        break;
      }
      case HeatmapHead::mlp: {
        Mat<S> tpos = tokens.row(tokens.rows() - 1);
        Mat<S> inp(1, 2 * cfg_.d_model);
        inp.leftCols(cfg_.d_model) = tpos;
        inp.rightCols(cfg_.d_model) = scene.colwise().mean();
        Mat<S> h = mlp_fc1_.forward(inp, tape ? &tape->mlp1_c : nullptr);
        h = mlp_act_.forward(h, tape ? &tape->mlpg_c : nullptr);
        h = mlp_fc2_.forward(h, tape ? &tape->mlp2_c : nullptr);
        Mat<S> prob = nn::sigmoid(h);
        if (tape) tape->mlp_prob = prob;
        out.heatmap.resize(cfg_.out_h, cfg_.out_w);
        for (Index i = 0; i < cfg_.out_h; ++i)
          for (Index j = 0; j < cfg_.out_w; ++j)
            out.heatmap(i, j) = prob(0, i * cfg_.out_w + j);
        break;
      }
    }
    if (cfg_.use_task_token) {
      Mat<S> t = tokens.row(0);
      Mat<S> h = io_fc1_.forward(t, tape ? &tape->io1_c : nullptr);
      h = io_act_.forward(h, tape ? &tape->iog_c : nullptr);
      h = io_fc2_.forward(h, tape ? &tape->io2_c : nullptr);
      S prob = nn::sigmoid(Mat<S>(h))(0, 0);
      if (tape) tape->io_prob = prob;
      out.inout = prob;
    }
    return out;
  }

  // returns dL/d(tokens after final norm)
  Mat<S> heads_backward(const Mat<S>& d_heat, S d_inout,
                        const DecoderTape<S>& tape) {
    const Index n_scene = H_ * W_;
    const Index n_tok = n_prefix() + n_scene + n_suffix();
    Mat<S> d_tokens = Mat<S>::Zero(n_tok, cfg_.d_model);
    auto d_scene = d_tokens.middleRows(n_prefix(), n_scene);
    switch (cfg_.head) {
      case HeatmapHead::conv2: {
        Mat<S> d_prob = nn::map_to_grid(d_heat);
        Mat<S> d_logit =
            d_prob.array() * tape.heat_prob_cells.array() *
            (S(1) - tape.heat_prob_cells.array());
        Mat<S> d_cells = out_conv_.backward(d_logit, tape.outconv_c);
        d_scene += up_.backward(d_cells, tape.up_c);
        break;
      }
      case HeatmapHead::dot_product: {
        Mat<S> d_small = nn::bilinear_resize_backward(d_heat, H_, W_);
        Mat<S> d_logit_map =
            d_small.array() * tape.dot_prob_small.array() *
            (S(1) - tape.dot_prob_small.array());
        Mat<S> d_scores = nn::map_to_grid(d_logit_map);  // (H*W) x 1
        d_scene += d_scores * tape.dot_tpos;
        d_tokens.row(n_tok - 1) +=
            (tape.dot_scene.transpose() * d_scores).transpose();
        break;
      }
      case HeatmapHead::mlp: {
        Mat<S> d_prob(1, cfg_.out_h * cfg_.out_w);
        for (Index i = 0; i < cfg_.out_h; ++i)
          for (Index j = 0; j < cfg_.out_w; ++j)
            d_prob(0, i * cfg_.out_w + j) = d_heat(i, j);
        Mat<S> d_logit = d_prob.array() * tape.mlp_prob.array() *
                         (S(1) - tape.mlp_prob.array());
        Mat<S> dh = mlp_fc2_.backward(d_logit, tape.mlp2_c);
        dh = mlp_act_.backward(dh, tape.mlpg_c);
        Mat<S> d_inp = mlp_fc1_.backward(dh, tape.mlp1_c);
        d_tokens.row(n_tok - 1) += d_inp.leftCols(cfg_.d_model);
        Mat<S> d_pooled = d_inp.rightCols(cfg_.d_model) / S(n_scene);
        d_scene.rowwise() += d_pooled.row(0);
        break;
      }
    }
    if (cfg_.use_task_token && d_inout != S(0)) {
      S d_logit = d_inout * tape.io_prob * (S(1) - tape.io_prob);
      Mat<S> dl(1, 1);
      dl(0, 0) = d_logit;
      Mat<S> dh = io_fc2_.backward(dl, tape.io2_c);
      dh = io_act_.backward(dh, tape.iog_c);
      d_tokens.row(0) += io_fc1_.backward(dh, tape.io1_c).row(0);
    }
    return d_tokens;
  }

  void register_all() {
    proj_.register_params(reg_, "proj");
    if (cfg_.prompt_variant == PromptVariant::added_embedding)
      reg_.add("prompt.p_head", &p_head_, &g_p_head_);
    if (cfg_.prompt_variant == PromptVariant::position_token)
      reg_.add("prompt.e_head", &e_head_, &g_e_head_);
    if (cfg_.use_task_token)
      reg_.add("task_token", &task_token_, &g_task_token_);
    for (int k = 0; k < cfg_.num_layers; ++k)
      layers_[k].register_params(reg_, "layers." + std::to_string(k));
    final_norm_.register_params(reg_, "final_norm");
    switch (cfg_.head) {
      case HeatmapHead::conv2:
        up_.register_params(reg_, "heatmap_head.up");
        out_conv_.register_params(reg_, "heatmap_head.out");
        break;
      case HeatmapHead::dot_product:
        break;
      case HeatmapHead::mlp:
        mlp_fc1_.register_params(reg_, "heatmap_head.fc1");
        mlp_fc2_.register_params(reg_, "heatmap_head.fc2");
        break;
    }
    if (cfg_.use_task_token) {
      io_fc1_.register_params(reg_, "inout_head.fc1");
      io_fc2_.register_params(reg_, "inout_head.fc2");
    }
  }

  DecoderConfig cfg_;
  Index d_F_, H_, W_;
  nn::Linear<S> proj_;
  Mat<S> p_head_, g_p_head_;
  Mat<S> e_head_, g_e_head_;
  Mat<S> task_token_, g_task_token_;
  std::vector<nn::TransformerLayer<S>> layers_;
  nn::LayerNorm<S> final_norm_;
  nn::ConvT2x2<S> up_;
  nn::Conv1x1<S> out_conv_;
  nn::Linear<S> mlp_fc1_, mlp_fc2_;
  nn::Gelu<S> mlp_act_;
  nn::Linear<S> io_fc1_, io_fc2_;
  nn::Gelu<S> io_act_;
  Mat<S> P_;
  Mat<S> cross_mask_;
  nn::ParamRegistry<S> reg_;
};

// Exact number of learnable scalars for a configuration (projection, prompt
// embeddings, task token, transformer stack, prediction heads). The backbone
// is excluded: it is frozen by contract.
inline Index count_parameters(const DecoderConfig& cfg, Index d_F) {
  cfg.validate();
  Index gh, gw;
  if (cfg.head == HeatmapHead::conv2) {
    if (cfg.out_h % 2 || cfg.out_w % 2)
      throw ConfigError("conv2 head needs an even output size");
    gh = cfg.out_h / 2;
    gw = cfg.out_w / 2;
  } else {
    gh = gw = 16;
  }
  GazeDecoder<float> d(cfg, d_F, gh, gw, 0);
  return d.params().total_size();
}

}  // namespace gazekit
