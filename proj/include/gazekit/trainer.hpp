#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gazekit/data.hpp"
#include "gazekit/model.hpp"
#include "gazekit/targets.hpp"

namespace gazekit {

inline double cosine_lr(long step, long total_steps, double lr_init) {
  if (total_steps <= 0) throw ConfigError("cosine_lr: total_steps must be > 0");
  if (step < 0 || step > total_steps)
    throw ConfigError("cosine_lr: step " + std::to_string(step) +
                      " outside [0," + std::to_string(total_steps) + "]");
  return lr_init * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) /
                                         static_cast<double>(total_steps)));
}

struct ParamGroup {
  std::string pattern;  // substring match; "*" is the catch-all
  double lr = 1e-3;
};

struct TrainConfig {
  int epochs = 15;
  int batch_size = 60;
  double lr_init = 1e-3;
  std::string schedule = "cosine";
  std::vector<ParamGroup> param_groups;  // empty: everything at lr_init
  std::uint64_t seed = 0;
  double lambda = 1.0;
  bool use_inout_loss = false;
  bool augment = true;
  AugmentationConfig aug;
  long max_steps = 0;  // >0 caps epochs * steps_per_epoch
  int checkpoint_every = 0;
  int log_every = 1;

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (lr_init <= 0) throw ConfigError("lr_init must be > 0");
    if (schedule != "cosine") throw ConfigError("unknown schedule: " + schedule);
    if (lambda < 0) throw ConfigError("lambda must be >= 0");
    for (const auto& g : param_groups)
      if (g.lr <= 0) throw ConfigError("param group lr must be > 0");
  }
};

// Adam with per-parameter-group base learning rates; the cosine factor is
// applied uniformly on top.
template <class S>
struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<Mat<S>> m, v;
  std::vector<double> base_lr;
  long t = 0;

  void init(const nn::ParamRegistry<S>& reg,
            const std::vector<ParamGroup>& groups, double default_lr) {
    m.clear();
    v.clear();
    base_lr.clear();
    for (const auto& p : reg.items) {
      m.push_back(Mat<S>::Zero(p.value->rows(), p.value->cols()));
      v.push_back(Mat<S>::Zero(p.value->rows(), p.value->cols()));
      base_lr.push_back(resolve_lr(p.name, groups, default_lr));
    }
    t = 0;
  }

  static double resolve_lr(const std::string& name,
                           const std::vector<ParamGroup>& groups,
                           double default_lr) {
    if (groups.empty()) return default_lr;
    const ParamGroup* star = nullptr;
    const ParamGroup* hit = nullptr;
    int hits = 0;
    for (const auto& g : groups) {
      if (g.pattern == "*") {
        star = &g;
        continue;
      }
      if (name.find(g.pattern) != std::string::npos) {
        hit = &g;
        ++hits;
      }
    }
    if (hits > 1)
      throw ConfigError("parameter '" + name +
                        "' matched by more than one param group");
    if (hits == 1) return hit->lr;
    if (star) return star->lr;
    throw ConfigError("parameter '" + name + "' matched by no param group");
  }

  void step(nn::ParamRegistry<S>& reg, double lr_factor) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (size_t i = 0; i < reg.items.size(); ++i) {
      auto& p = *reg.items[i].value;
      auto& g = *reg.items[i].grad;
      m[i] = S(beta1) * m[i] + S(1.0 - beta1) * g;
      v[i] = (S(beta2) * v[i].array() + S(1.0 - beta2) * g.array().square())
                 .matrix();
      const S lr = static_cast<S>(base_lr[i] * lr_factor);
      p.array() -= lr * (m[i].array() / S(bc1)) /
                   ((v[i].array() / S(bc2)).sqrt() + S(eps));
    }
  }
};

template <class S>
struct TrainState {
  Adam<S> opt;
  long step = 0;
  long total_steps = 0;
};

struct StepLog {
  long step = 0;
  double lr = 0;
  double loss = 0;
  double loss_hm = 0;
  double loss_inout = 0;
};

template <class S>
struct TrainResult {
  std::vector<StepLog> log;
  long steps_run = 0;
};

// Checkpoint hook: called after the optimizer step with the current state.
template <class S>
using CheckpointHook =
    std::function<void(const GazeModel<S>&, const TrainState<S>&)>;

// Core optimization loop (Eq. 3 objective, Adam, cosine schedule). Only
// decoder parameters are registered with the optimizer; the backbone is
// asserted bit-frozen after every epoch. Fully deterministic given
// (seed, config, data): sample order, augmentations and drop-path streams
// are all derived from the base seed, so a resumed run continues exactly.
template <class S>
TrainResult<S> train(GazeModel<S>& model,
                     const std::vector<SampleRecord<S>>& data,
                     const TrainConfig& cfg, const TargetSpec& tspec,
                     TrainState<S>* state = nullptr,
                     const CheckpointHook<S>& hook = {}) {
  cfg.validate();
  if (data.empty()) throw ValidationError("train: empty dataset");
  const long n = static_cast<long>(data.size());
  const long spe = (n + cfg.batch_size - 1) / cfg.batch_size;
  long total = static_cast<long>(cfg.epochs) * spe;
  if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);

  TrainState<S> local;
  TrainState<S>& st = state ? *state : local;
  if (st.opt.m.empty()) {
    st.opt.init(model.decoder().params(), cfg.param_groups, cfg.lr_init);
    st.total_steps = total;
  }
  const double frozen_ref = model.backbone().params_checksum();

  TrainResult<S> res;
  auto& reg = model.decoder().params();
  std::vector<long> order(n);
  long order_epoch = -1;
  for (long step = st.step; step < total; ++step) {
    const long epoch = step / spe, pos = step % spe;
    if (epoch != order_epoch) {
      for (long i = 0; i < n; ++i) order[i] = i;
      Rng shuf(derive_seed(cfg.seed, 0x6f72646572ull, epoch));  // "order"
      for (long i = n - 1; i > 0; --i)
        std::swap(order[i], order[shuf.below(i + 1)]);
      order_epoch = epoch;
    }
    const long lo = pos * cfg.batch_size;
    const long hi = std::min<long>(n, lo + cfg.batch_size);
    const long bsz = hi - lo;
    reg.zero_grads();
    double loss_sum = 0, loss_hm_sum = 0, loss_io_sum = 0;
    for (long slot = 0; slot < bsz; ++slot) {
      const long idx = order[lo + slot];
      SampleRecord<S> s = data[idx];
      if (cfg.augment) {
        Rng aug_rng(derive_seed(cfg.seed, 0x617567ull, epoch, idx));  // "aug"
        s = augment_sample(s, cfg.aug, aug_rng, tspec);
      }
      RawFeatureMap<S> raw = model.backbone().extract(s.image);
      Rng dp_rng(derive_seed(cfg.seed, 0x6470ull, step, slot));  // "dp"
      Rng* dp = model.decoder().config().drop_path_p > 0 ? &dp_rng : nullptr;
      DecoderTape<S> tape;
      DecoderOutput<S> out =
          model.decoder().run_train(raw, PersonPrompt{s.ann.bbox}, dp, tape);
      const S loss_hm = loss_heatmap(out.heatmap, s.target);
      S loss_io = S(0);
      S d_io = S(0);
      if (cfg.use_inout_loss && out.inout) {
        const S label = s.ann.in_frame ? S(1) : S(0);
        loss_io = bce_scalar(*out.inout, label);
        d_io = S(cfg.lambda) * bce_grad_scalar(*out.inout, label) / S(bsz);
      }
      const double sample_loss =
          static_cast<double>(loss_hm) + cfg.lambda * static_cast<double>(loss_io);
      if (!std::isfinite(sample_loss))
        throw NumericError("non-finite loss at step " + std::to_string(step) +
                           " sample " + std::to_string(idx) +
                           " (hm=" + std::to_string(loss_hm) +
                           ", inout=" + std::to_string(loss_io) + ")");
      loss_sum += sample_loss;
      loss_hm_sum += loss_hm;
      loss_io_sum += loss_io;
      Mat<S> d_heat = loss_heatmap_backward(out.heatmap, s.target) / S(bsz);
      model.decoder().backward(d_heat, d_io, tape);
    }
    const double factor = cosine_lr(step, st.total_steps, 1.0);
    st.opt.step(reg, factor);
    st.step = step + 1;
    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == total))
      res.log.push_back({step, cfg.lr_init * factor, loss_sum / bsz,
                         loss_hm_sum / bsz, loss_io_sum / bsz});
    ++res.steps_run;
    if (pos + 1 == spe || step + 1 == total) {
      if (model.backbone().params_checksum() != frozen_ref)
        throw NumericError("frozen backbone modified during training");
    }
    if (hook && cfg.checkpoint_every > 0 &&
        ((step + 1) % cfg.checkpoint_every == 0 || step + 1 == total))
      hook(model, st);
  }
  return res;
}

// Finetuning = the same loop with per-group learning rates and the multitask
// loss enabled; callers pass a config built by one of the profiles below.
template <class S>
TrainResult<S> finetune(GazeModel<S>& model,
                        const std::vector<SampleRecord<S>>& data,
                        const TrainConfig& cfg, const TargetSpec& tspec,
                        TrainState<S>* state = nullptr,
                        const CheckpointHook<S>& hook = {}) {
  if (cfg.param_groups.empty())
    throw ConfigError("finetune: param_groups must be provided");
  return train(model, data, cfg, tspec, state, hook);
}

inline TrainConfig gazefollow_train_profile() {
  TrainConfig c;
  c.epochs = 15;
  c.batch_size = 60;
  c.lr_init = 1e-3;
  c.lambda = 0.0;
  c.use_inout_loss = false;
  return c;
}

inline TrainConfig vat_finetune_profile() {
  TrainConfig c;
  c.epochs = 8;
  c.batch_size = 60;
  c.lr_init = 1e-5;
  c.param_groups = {{"inout_head", 1e-2}, {"*", 1e-5}};
  c.lambda = 1.0;
  c.use_inout_loss = true;
  return c;
}

inline TrainConfig childplay_finetune_profile() {
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 60;
  c.lr_init = 1e-4;
  c.param_groups = {{"inout_head", 2e-4}, {"*", 1e-4}};
  c.lambda = 0.1;
  c.use_inout_loss = true;
  return c;
}

}  // namespace gazekit
