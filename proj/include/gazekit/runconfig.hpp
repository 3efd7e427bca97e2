#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "gazekit/backbone.hpp"
#include "gazekit/checkpoint.hpp"
#include "gazekit/data.hpp"
#include "gazekit/decoder.hpp"
#include "gazekit/model.hpp"
#include "gazekit/trainer.hpp"

namespace gazekit {

using nlohmann::json;

// Strict key checking: a config with an unknown key is rejected, not ignored.
inline void check_keys(const json& j, const std::set<std::string>& allowed,
                       const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError(section + ": unknown key '" + it.key() + "'");
}

// --- backbone --------------------------------------------------------------

inline json to_json(const BackboneSpec& s) {
  return {{"kind", s.kind == BackboneKind::toy ? "toy" : "vit"},
          {"name", s.name},
          {"patch_size", s.patch_size},
          {"d_f", s.d_F},
          {"seed", s.seed},
          {"weights_path", s.weights_path},
          {"mean", s.mean},
          {"std", s.stdev},
          {"frozen", s.frozen}};
}

inline BackboneSpec backbone_from_json(const json& j) {
  check_keys(j, {"kind", "name", "patch_size", "d_f", "seed", "weights_path",
                 "mean", "std", "frozen"},
             "backbone");
  BackboneSpec s;
  std::string kind = j.value("kind", "toy");
  if (kind == "toy")
    s.kind = BackboneKind::toy;
  else if (kind == "vit")
    s.kind = BackboneKind::vit;
  else
    throw ConfigError("backbone.kind must be 'toy' or 'vit'");
  s.name = j.value("name", kind);
  s.patch_size = j.value("patch_size", Index{14});
  s.d_F = j.value("d_f", Index{64});
  s.seed = j.value("seed", std::uint64_t{17});
  s.weights_path = j.value("weights_path", std::string());
  if (j.contains("mean")) s.mean = j["mean"].get<std::array<double, 3>>();
  if (j.contains("std")) s.stdev = j["std"].get<std::array<double, 3>>();
  s.frozen = j.value("frozen", true);
  s.validate();
  if (s.kind == BackboneKind::vit && s.weights_path.empty())
    throw ConfigError("backbone: vit kind requires weights_path");
  return s;
}

// --- decoder ----------------------------------------------------------------

inline json to_json(const DecoderConfig& c) {
  return {{"d_model", c.d_model},
          {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},
          {"mlp_dim", c.mlp_dim},
          {"prompt_variant", to_string(c.prompt_variant)},
          {"prompt_layer", c.prompt_layer},
          {"use_task_token", c.use_task_token},
          {"head", to_string(c.head)},
          {"attention", to_string(c.attention)},
          {"drop_path_p", c.drop_path_p},
          {"out_h", c.out_h},
          {"out_w", c.out_w}};
}

inline DecoderConfig decoder_from_json(const json& j) {
  check_keys(j,
             {"d_model", "num_layers", "num_heads", "mlp_dim", "prompt_variant",
              "prompt_layer", "use_task_token", "head", "attention",
              "drop_path_p", "out_h", "out_w"},
             "decoder");
  DecoderConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.mlp_dim = j.value("mlp_dim", c.mlp_dim);
  std::string pv = j.value("prompt_variant", "added_embedding");
  if (pv == "added_embedding")
    c.prompt_variant = PromptVariant::added_embedding;
  else if (pv == "position_token")
    c.prompt_variant = PromptVariant::position_token;
  else if (pv == "none")
    c.prompt_variant = PromptVariant::none;
  else
    throw ConfigError("decoder.prompt_variant: unknown value '" + pv + "'");
  c.prompt_layer = j.value("prompt_layer", c.prompt_layer);
  c.use_task_token = j.value("use_task_token", c.use_task_token);
  std::string hd = j.value("head", "conv2");
  if (hd == "conv2")
    c.head = HeatmapHead::conv2;
  else if (hd == "dot_product")
    c.head = HeatmapHead::dot_product;
  else if (hd == "mlp")
    c.head = HeatmapHead::mlp;
  else
    throw ConfigError("decoder.head: unknown value '" + hd + "'");
  std::string at = j.value("attention", "self");
  if (at == "self")
    c.attention = AttentionMode::self_attention;
  else if (at == "cross")
    c.attention = AttentionMode::cross_attention;
  else
    throw ConfigError("decoder.attention: unknown value '" + at + "'");
  c.drop_path_p = j.value("drop_path_p", c.drop_path_p);
  c.out_h = j.value("out_h", c.out_h);
  c.out_w = j.value("out_w", c.out_w);
  c.validate();
  return c;
}

// --- training ----------------------------------------------------------------

inline json to_json(const TrainConfig& c) {
  json groups = json::array();
  for (const auto& g : c.param_groups)
    groups.push_back({{"pattern", g.pattern}, {"lr", g.lr}});
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr_init", c.lr_init},
          {"schedule", c.schedule},
          {"param_groups", groups},
          {"seed", c.seed},
          {"lambda", c.lambda},
          {"use_inout_loss", c.use_inout_loss},
          {"augment", c.augment},
          {"hflip", c.aug.hflip},
          {"crop", c.aug.crop},
          {"crop_min_scale", c.aug.crop_min_scale},
          {"crop_max_scale", c.aug.crop_max_scale},
          {"bbox_jitter", c.aug.bbox_jitter},
          {"max_steps", c.max_steps},
          {"checkpoint_every", c.checkpoint_every},
          {"log_every", c.log_every}};
}

inline TrainConfig train_from_json(const json& j) {
  check_keys(j,
             {"epochs", "batch_size", "lr_init", "schedule", "param_groups",
              "seed", "lambda", "use_inout_loss", "augment", "hflip", "crop",
              "crop_min_scale", "crop_max_scale", "bbox_jitter", "max_steps",
              "checkpoint_every", "log_every", "profile"},
             "train");
  TrainConfig c;
  if (j.contains("profile")) {
    std::string p = j["profile"].get<std::string>();
    if (p == "gazefollow")
      c = gazefollow_train_profile();
    else if (p == "vat")
      c = vat_finetune_profile();
    else if (p == "childplay")
      c = childplay_finetune_profile();
    else
      throw ConfigError("train.profile: unknown value '" + p + "'");
  }
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_init = j.value("lr_init", c.lr_init);
  c.schedule = j.value("schedule", c.schedule);
  if (j.contains("param_groups")) {
    c.param_groups.clear();
    for (const auto& g : j["param_groups"]) {
      check_keys(g, {"pattern", "lr"}, "train.param_groups");
      c.param_groups.push_back(
          {g.at("pattern").get<std::string>(), g.at("lr").get<double>()});
    }
  }
  c.seed = j.value("seed", c.seed);
  c.lambda = j.value("lambda", c.lambda);
  c.use_inout_loss = j.value("use_inout_loss", c.use_inout_loss);
  c.augment = j.value("augment", c.augment);
  c.aug.hflip = j.value("hflip", c.aug.hflip);
  c.aug.crop = j.value("crop", c.aug.crop);
  c.aug.crop_min_scale = j.value("crop_min_scale", c.aug.crop_min_scale);
  c.aug.crop_max_scale = j.value("crop_max_scale", c.aug.crop_max_scale);
  c.aug.bbox_jitter = j.value("bbox_jitter", c.aug.bbox_jitter);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.log_every = j.value("log_every", c.log_every);
  c.validate();
  return c;
}

// --- data / eval / run -------------------------------------------------------

struct DataConfig {
  std::string annotations;  // path to the annotation json
  AnnotationFormat format = AnnotationFormat::native;
  Index input_size = 448;
  double sigma = 3.0;
  // synthetic generation (used when annotations is empty)
  bool synthetic = false;
  int synthetic_n = 64;
  SyntheticRule rule;
};

inline json to_json(const DataConfig& d) {
  return {{"annotations", d.annotations},
          {"format", d.format == AnnotationFormat::native ? "native"
                                                          : "gazefollow_json"},
          {"input_size", d.input_size},
          {"sigma", d.sigma},
          {"synthetic", d.synthetic},
          {"synthetic_n", d.synthetic_n},
          {"persons_per_image", d.rule.persons_per_image},
          {"marker_px", d.rule.marker_px},
          {"out_of_frame_fraction", d.rule.out_of_frame_fraction}};
}

inline DataConfig data_from_json(const json& j) {
  check_keys(j,
             {"annotations", "format", "input_size", "sigma", "synthetic",
              "synthetic_n", "persons_per_image", "marker_px",
              "out_of_frame_fraction"},
             "data");
  DataConfig d;
  d.annotations = j.value("annotations", std::string());
  std::string f = j.value("format", "native");
  if (f == "native")
    d.format = AnnotationFormat::native;
  else if (f == "gazefollow_json")
    d.format = AnnotationFormat::gazefollow_json;
  else
    throw ConfigError("data.format: unknown value '" + f + "'");
  d.input_size = j.value("input_size", d.input_size);
  d.sigma = j.value("sigma", d.sigma);
  d.synthetic = j.value("synthetic", d.synthetic);
  d.synthetic_n = j.value("synthetic_n", d.synthetic_n);
  d.rule.persons_per_image = j.value("persons_per_image", 1);
  d.rule.marker_px = j.value("marker_px", Index{28});
  d.rule.out_of_frame_fraction = j.value("out_of_frame_fraction", 0.0);
  d.rule.image_size = d.input_size;
  if (d.annotations.empty() && !d.synthetic)
    throw ConfigError("data: either annotations or synthetic must be set");
  return d;
}

struct RunConfig {
  BackboneSpec backbone;
  DecoderConfig decoder;
  TrainConfig train;
  DataConfig data;
  std::string protocol = "gazefollow";
  double tolerance_px = 6.0;
  std::string out_dir = "runs/out";
  std::uint64_t seed = 0;

  TargetSpec target_spec() const {
    TargetSpec t;
    t.out_h = decoder.out_h;
    t.out_w = decoder.out_w;
    t.sigma = data.sigma;
    t.grid_h = data.input_size / backbone.patch_size;
    t.grid_w = data.input_size / backbone.patch_size;
    return t;
  }

  EvalProtocol eval_protocol() const {
    if (protocol == "gazefollow") return EvalProtocol::gazefollow;
    if (protocol == "tolerance") return EvalProtocol::tolerance;
    throw ConfigError("protocol must be 'gazefollow' or 'tolerance'");
  }
};

inline json to_json(const RunConfig& r) {
  return {{"backbone", to_json(r.backbone)}, {"decoder", to_json(r.decoder)},
          {"train", to_json(r.train)},       {"data", to_json(r.data)},
          {"protocol", r.protocol},          {"tolerance_px", r.tolerance_px},
          {"out_dir", r.out_dir},            {"seed", r.seed}};
}

inline RunConfig runconfig_from_json(const json& j) {
  check_keys(j,
             {"backbone", "decoder", "train", "data", "protocol",
              "tolerance_px", "out_dir", "seed"},
             "run config");
  RunConfig r;
  if (j.contains("backbone")) r.backbone = backbone_from_json(j["backbone"]);
  if (j.contains("decoder")) r.decoder = decoder_from_json(j["decoder"]);
  if (j.contains("train")) r.train = train_from_json(j["train"]);
  if (!j.contains("data")) throw ConfigError("run config: missing 'data'");
  r.data = data_from_json(j["data"]);
  r.protocol = j.value("protocol", r.protocol);
  r.tolerance_px = j.value("tolerance_px", r.tolerance_px);
  r.out_dir = j.value("out_dir", r.out_dir);
  r.seed = j.value("seed", r.seed);
  (void)r.eval_protocol();
  if (r.data.input_size % r.backbone.patch_size)
    throw ConfigError("data.input_size must be divisible by backbone.patch_size");
  if (r.decoder.head == HeatmapHead::conv2 &&
      (r.decoder.out_h != 2 * r.data.input_size / r.backbone.patch_size ||
       r.decoder.out_w != 2 * r.data.input_size / r.backbone.patch_size))
    throw ConfigError(
        "decoder.out_h/out_w must be twice the token grid for the conv2 head "
        "(grid = input_size / patch_size)");
  return r;
}

inline RunConfig load_runconfig(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config: " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const std::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return runconfig_from_json(j);
}

// --- model checkpoints --------------------------------------------------------

template <class S>
void save_checkpoint(const std::string& path, const GazeModel<S>& model,
                     const RunConfig& run, const TrainState<S>* state) {
  Archive a;
  a.meta = {{"format", "gazekit-checkpoint"},
            {"version", 1},
            {"run", to_json(run)},
            {"input_size", model.input_size()},
            {"step", state ? state->step : 0},
            {"total_steps", state ? state->total_steps : 0},
            {"rng", {{"base_seed", run.train.seed},
                     {"step", state ? state->step : 0}}}};
  model.save_params(a);
  if (state) {
    const auto& reg = model.decoder().params();
    for (size_t i = 0; i < reg.items.size(); ++i) {
      a.add("opt.m." + reg.items[i].name, state->opt.m[i]);
      a.add("opt.v." + reg.items[i].name, state->opt.v[i]);
    }
    a.meta["opt"] = {{"t", state->opt.t}};
  }
  a.save(path);
}

template <class S>
struct LoadedCheckpoint {
  RunConfig run;
  std::unique_ptr<GazeModel<S>> model;
  TrainState<S> state;
  bool has_optimizer = false;
};

template <class S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  Archive a = Archive::load(path);
  if (a.meta.value("format", std::string()) != "gazekit-checkpoint")
    throw ParseError("not a gazekit checkpoint: " + path);
  LoadedCheckpoint<S> out;
  out.run = runconfig_from_json(a.meta.at("run"));
  out.model = std::make_unique<GazeModel<S>>(
      out.run.backbone, out.run.decoder,
      a.meta.at("input_size").get<Index>(), out.run.seed);
  out.model->load_params(a);
  out.state.step = a.meta.value("step", 0L);
  out.state.total_steps = a.meta.value("total_steps", 0L);
  if (a.meta.contains("opt")) {
    out.has_optimizer = true;
    auto& reg = out.model->decoder().params();
    out.state.opt.init(reg, out.run.train.param_groups, out.run.train.lr_init);
    out.state.opt.t = a.meta["opt"].at("t").get<long>();
    for (size_t i = 0; i < reg.items.size(); ++i) {
      out.state.opt.m[i] = a.get<S>("opt.m." + reg.items[i].name);
      out.state.opt.v[i] = a.get<S>("opt.v." + reg.items[i].name);
    }
  }
  return out;
}

}  // namespace gazekit
