// gazekit command line: import / train / finetune / evaluate / predict /
// ablate / bench. Exit codes: 0 ok, 1 runtime failure, 2 usage or config
// error; failures emit one machine-readable JSON object on stderr.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gazekit/baselines.hpp"
#include "gazekit/imageio.hpp"
#include "gazekit/model.hpp"
#include "gazekit/runconfig.hpp"
#include "gazekit/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace gazekit;

using Scalar = float;

namespace {

double now_ms() {
  using namespace std::chrono;
  return duration<double, std::milli>(steady_clock::now().time_since_epoch())
      .count();
}

std::vector<SampleRecord<Scalar>> build_dataset(const RunConfig& run,
                                                std::optional<Split> split) {
  const TargetSpec ts = run.target_spec();
  if (run.data.synthetic) {
    SyntheticRule rule = run.data.rule;
    rule.image_size = run.data.input_size;
    Split sp = split.value_or(Split::train);
    return make_synthetic_dataset<Scalar>(run.data.synthetic_n, rule,
                                          run.seed, ts, sp);
  }
  return load_dataset<Scalar>(run.data.annotations, run.data.format, ts, split);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << text;
}

void write_train_log(const std::string& path, const TrainResult<Scalar>& res) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  for (const auto& s : res.log) {
    json j = {{"step", s.step},
              {"lr", s.lr},
              {"loss", s.loss},
              {"loss_hm", s.loss_hm},
              {"loss_inout", s.loss_inout}};
    f << j.dump() << "\n";
  }
}

RunConfig apply_overrides(RunConfig run, const std::string& out,
                          std::optional<std::uint64_t> seed,
                          const std::string& protocol) {
  if (!out.empty()) run.out_dir = out;
  if (seed) {
    run.seed = *seed;
    run.train.seed = *seed;
  }
  if (!protocol.empty()) run.protocol = protocol;
  (void)run.eval_protocol();
  return run;
}

int cmd_train(const std::string& config_path, const std::string& out,
              std::optional<std::uint64_t> seed, bool is_finetune,
              const std::string& init_checkpoint) {
  RunConfig run = apply_overrides(load_runconfig(config_path), out, seed, "");
  fs::create_directories(run.out_dir);
  auto data = build_dataset(run, Split::train);
  std::unique_ptr<GazeModel<Scalar>> model;
  if (is_finetune) {
    if (init_checkpoint.empty())
      throw UsageError("finetune requires --checkpoint");
    auto loaded = load_checkpoint<Scalar>(init_checkpoint);
    model = std::move(loaded.model);
    if (run.train.param_groups.empty())
      throw ConfigError("finetune: train.param_groups must be set");
  } else {
    model = std::make_unique<GazeModel<Scalar>>(run.backbone, run.decoder,
                                                run.data.input_size, run.seed);
  }
  const TargetSpec ts = run.target_spec();
  const std::string ck_path = run.out_dir + "/checkpoint.bin";
  TrainState<Scalar> state;
  CheckpointHook<Scalar> hook = [&](const GazeModel<Scalar>& m,
                                    const TrainState<Scalar>& st) {
    save_checkpoint(ck_path, m, run, &st);
  };
  auto res = is_finetune ? finetune(*model, data, run.train, ts, &state, hook)
                         : train(*model, data, run.train, ts, &state, hook);
  save_checkpoint(ck_path, *model, run, &state);
  write_train_log(run.out_dir + "/train_log.jsonl", res);
  write_text(run.out_dir + "/config.json", to_json(run).dump(1) + "\n");
  std::cout << "trained " << res.steps_run << " steps; checkpoint: " << ck_path
            << "\n";
  return 0;
}

json eval_report_json(const EvalResult& r) {
  json j = {{"auc", r.auc},
            {"avg_l2", r.avg_l2},
            {"min_l2", r.min_l2},
            {"n_samples", r.n_samples}};
  if (r.ap_inout) j["ap_inout"] = *r.ap_inout;
  return j;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& config_path,
                 const std::string& out, const std::string& protocol) {
  auto loaded = load_checkpoint<Scalar>(checkpoint);
  RunConfig run = loaded.run;
  if (!config_path.empty()) run.data = load_runconfig(config_path).data;
  run = apply_overrides(run, out, {}, protocol);
  fs::create_directories(run.out_dir);
  auto data = build_dataset(run, Split::test);
  auto rep = evaluate_model(*loaded.model, data, run.eval_protocol(),
                            run.tolerance_px);
  write_text(run.out_dir + "/report.json",
             eval_report_json(rep.result).dump(1) + "\n");
  std::ostringstream csv;
  csv << "id,auc,avg_l2,min_l2\n";
  for (const auto& s : rep.per_sample)
    csv << s.id << "," << s.auc << "," << s.avg_l2 << "," << s.min_l2 << "\n";
  write_text(run.out_dir + "/per_sample.csv", csv.str());
  std::cout << eval_report_json(rep.result).dump(1) << "\n";
  return 0;
}

std::vector<HeadBBox> parse_bboxes(const std::string& arg) {
  json j;
  if (!arg.empty() && (arg[0] == '[' || arg[0] == '{')) {
    try {
      j = json::parse(arg);
    } catch (const std::exception& e) {
      throw UsageError("--bboxes inline JSON: " + std::string(e.what()));
    }
  } else {
    std::ifstream f(arg);
    if (!f) throw UsageError("--bboxes: cannot open file " + arg);
    try {
      j = json::parse(f);
    } catch (const std::exception& e) {
      throw ParseError("--bboxes file " + arg + ": " + e.what());
    }
  }
  if (j.is_object() && j.contains("bboxes")) j = j["bboxes"];
  if (!j.is_array()) throw UsageError("--bboxes: expected an array");
  std::vector<HeadBBox> out;
  for (const auto& b : j) {
    if (!b.is_array() || b.size() != 4)
      throw UsageError("--bboxes: each bbox is [xmin,ymin,xmax,ymax]");
    HeadBBox bb{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                b[3].get<double>()};
    bb.validate();
    out.push_back(bb);
  }
  return out;
}

int cmd_predict(const std::string& checkpoint, const std::string& image_path,
                const std::string& bboxes_arg, const std::string& out) {
  auto loaded = load_checkpoint<Scalar>(checkpoint);
  Image<Scalar> img = read_ppm<Scalar>(image_path);
  if (img.height() != loaded.model->input_size() ||
      img.width() != loaded.model->input_size())
    throw UsageError("image must be " +
                     std::to_string(loaded.model->input_size()) + "x" +
                     std::to_string(loaded.model->input_size()) +
                     " for this checkpoint, got " +
                     std::to_string(img.width()) + "x" +
                     std::to_string(img.height()));
  std::vector<HeadBBox> bboxes =
      bboxes_arg.empty() ? std::vector<HeadBBox>{} : parse_bboxes(bboxes_arg);
  fs::create_directories(out);
  loaded.model->backbone().reset_call_count();
  const double t0 = now_ms();
  auto outputs = loaded.model->predict(img, bboxes);
  const double elapsed = now_ms() - t0;
  json persons = json::array();
  for (size_t i = 0; i < outputs.size(); ++i) {
    const auto& hm = outputs[i].heatmap;
    std::ostringstream csv;
    for (Index r = 0; r < hm.rows(); ++r) {
      for (Index c = 0; c < hm.cols(); ++c)
        csv << (c ? "," : "") << hm(r, c);
      csv << "\n";
    }
    write_text(out + "/heatmap_" + std::to_string(i) + ".csv", csv.str());
    write_ppm(out + "/overlay_" + std::to_string(i) + ".ppm",
              render_overlay(img, hm));
    auto [r, c] = heatmap_argmax(hm);
    json p = {{"argmax",
               {(c + 0.5) / hm.cols(), (r + 0.5) / hm.rows()}}};
    if (outputs[i].inout) p["inout"] = *outputs[i].inout;
    persons.push_back(p);
  }
  json rep = {{"backbone_calls", loaded.model->backbone().call_count()},
              {"n_persons", outputs.size()},
              {"elapsed_ms", elapsed},
              {"persons", persons}};
  write_text(out + "/predict_report.json", rep.dump(1) + "\n");
  std::cout << rep.dump(1) << "\n";
  return 0;
}

int cmd_import(const std::string& annotations, const std::string& format,
               const std::string& out) {
  AnnotationFormat fmt;
  if (format == "gazefollow_json")
    fmt = AnnotationFormat::gazefollow_json;
  else if (format == "native")
    fmt = AnnotationFormat::native;
  else
    throw UsageError("--format must be gazefollow_json or native");
  auto anns = load_annotations(annotations, fmt);
  fs::create_directories(out);
  save_annotations(out + "/annotations.json", anns);
  std::cout << "imported " << anns.size() << " records -> " << out
            << "/annotations.json\n";
  return 0;
}

// --- ablate -----------------------------------------------------------------

struct AblateRow {
  std::string name;
  Index params = 0;
  Index params_vitb = 0;  // same decoder on a d_F=768 encoder, for reference
  double auc = 0, avg_l2 = 0, min_l2 = 0;
};

json ablate_to_json(const std::vector<AblateRow>& rows) {
  json out = json::array();
  for (const auto& r : rows)
    out.push_back({{"name", r.name},
                   {"params", r.params},
                   {"params_vitb", r.params_vitb},
                   {"auc", r.auc},
                   {"avg_l2", r.avg_l2},
                   {"min_l2", r.min_l2}});
  return out;
}

std::string ablate_to_markdown(const std::string& suite,
                               const std::vector<AblateRow>& rows) {
  std::ostringstream md;
  md << "# ablation: " << suite << "\n\n";
  md << "| config | params | params (d_F=768) | AUC | Avg L2 | Min L2 |\n";
  md << "|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "| %s | %ld | %ld | %.3f | %.3f | %.3f |\n",
                  r.name.c_str(), static_cast<long>(r.params),
                  static_cast<long>(r.params_vitb), r.auc, r.avg_l2, r.min_l2);
    md << buf;
  }
  return md.str();
}

AblateRow run_variant(const std::string& name, const RunConfig& base,
                      const DecoderConfig& dcfg,
                      const std::vector<SampleRecord<Scalar>>& data,
                      long steps) {
  RunConfig run = base;
  run.decoder = dcfg;
  AblateRow row;
  row.name = name;
  row.params = count_parameters(dcfg, base.backbone.d_F);
  row.params_vitb = count_parameters(dcfg, 768);
  GazeModel<Scalar> model(run.backbone, dcfg, run.data.input_size, run.seed);
  TrainConfig tc = run.train;
  tc.max_steps = steps;
  tc.epochs = std::max<int>(tc.epochs, static_cast<int>(steps));  // step cap rules
  auto res = train(model, data, tc, run.target_spec());
  (void)res;
  auto rep = evaluate_model(model, data, run.eval_protocol(), run.tolerance_px);
  row.auc = rep.result.auc;
  row.avg_l2 = rep.result.avg_l2;
  row.min_l2 = rep.result.min_l2;
  return row;
}

int cmd_ablate(const std::string& suite, const std::string& config_path,
               const std::string& out, long steps) {
  RunConfig run = apply_overrides(load_runconfig(config_path), out, {}, "");
  fs::create_directories(run.out_dir);
  auto data = build_dataset(run, Split::train);
  std::vector<AblateRow> rows;
  const DecoderConfig base = run.decoder;
  if (suite == "prompt_onoff") {
    DecoderConfig off = base;
    off.prompt_variant = PromptVariant::none;
    rows.push_back(run_variant("with_prompting", run, base, data, steps));
    rows.push_back(run_variant("no_prompting", run, off, data, steps));
  } else if (suite == "prompt_layer") {
    for (int l = 1; l <= base.num_layers; ++l) {
      DecoderConfig c = base;
      c.prompt_layer = l;
      rows.push_back(
          run_variant("layer_" + std::to_string(l), run, c, data, steps));
    }
  } else if (suite == "dims_layers") {
    for (Index d : {128, 256, 384, 512, 768}) {
      DecoderConfig c = base;
      c.d_model = d;
      rows.push_back(
          run_variant("d_model_" + std::to_string(d), run, c, data, steps));
    }
    for (int l = 1; l <= 5; ++l) {
      DecoderConfig c = base;
      c.num_layers = l;
      c.prompt_layer = 1;
      rows.push_back(
          run_variant("layers_" + std::to_string(l), run, c, data, steps));
    }
  } else if (suite == "prompt_variants") {
    struct V {
      const char* name;
      AttentionMode attn;
      HeatmapHead head;
    };
    const V variants[] = {
        {"token_cross_mlp", AttentionMode::cross_attention, HeatmapHead::mlp},
        {"token_cross_dot", AttentionMode::cross_attention, HeatmapHead::dot_product},
        {"token_self_mlp", AttentionMode::self_attention, HeatmapHead::mlp},
        {"token_self_dot", AttentionMode::self_attention, HeatmapHead::dot_product},
        {"token_self_conv", AttentionMode::self_attention, HeatmapHead::conv2},
    };
    for (const auto& v : variants) {
      DecoderConfig c = base;
      c.prompt_variant = PromptVariant::position_token;
      c.use_task_token = false;
      c.prompt_layer = 1;
      c.attention = v.attn;
      c.head = v.head;
      rows.push_back(run_variant(v.name, run, c, data, steps));
    }
    rows.push_back(run_variant("embedding_self_conv", run, base, data, steps));
  } else if (suite == "tab2_grid") {
    for (const auto& cfg : tab2_rows()) {
      BaselineModel<Scalar> bm(cfg, run.backbone, run.data.input_size,
                               run.seed);
      Adam<Scalar> opt;
      opt.init(bm.params(), {}, run.train.lr_init);
      const long n = static_cast<long>(data.size());
      const int B = std::min<long>(run.train.batch_size, n);
      for (long s = 0; s < steps; ++s) {
        std::vector<SampleRecord<Scalar>> batch;
        for (int k = 0; k < B; ++k)
          batch.push_back(data[(s * B + k) % n]);
        bm.train_step(batch, opt, cosine_lr(s, std::max<long>(steps, 1), 1.0));
      }
      AblateRow row;
      row.name = cfg.label();
      row.params = bm.params().total_size();
      BaselineModel<Scalar> ref(cfg, [&] {
        BackboneSpec b = run.backbone;
        b.d_F = 768;
        return b;
      }(), run.data.input_size, run.seed);
      row.params_vitb = ref.params().total_size();
      // forward metrics on the training set
      std::vector<SampleMetrics> sm;
      for (auto& s : data) {
        auto maps = bm.forward_batch({s}, false);
        sm.push_back(evaluate_sample("x", maps[0], s.ann.gaze_points,
                                     run.eval_protocol(), run.tolerance_px));
      }
      auto agg = aggregate_metrics(sm, {}, {});
      row.auc = agg.auc;
      row.avg_l2 = agg.avg_l2;
      row.min_l2 = agg.min_l2;
      rows.push_back(row);
    }
  } else {
    throw UsageError("unknown suite: " + suite);
  }
  write_text(run.out_dir + "/ablate_" + suite + ".json",
             ablate_to_json(rows).dump(1) + "\n");
  const std::string md = ablate_to_markdown(suite, rows);
  write_text(run.out_dir + "/ablate_" + suite + ".md", md);
  std::cout << md;
  return 0;
}

int cmd_bench(const std::string& out, int max_persons, std::uint64_t seed) {
  fs::create_directories(out);
  // encoder heavy enough that it dominates a small decoder, as in the real
  // system; weights are random because only the cost profile matters here
  const Index input = 224, patch = 14, width = 384, grid = input / patch;
  const std::string wpath = out + "/bench_vit.bin";
  if (!fs::exists(wpath))
    save_random_vit_weights(wpath, patch, width, 12, 6, 4 * width, grid, seed);
  BackboneSpec bspec;
  bspec.kind = BackboneKind::vit;
  bspec.name = "bench-vit";
  bspec.patch_size = patch;
  bspec.d_F = width;
  bspec.weights_path = wpath;
  DecoderConfig dcfg;
  dcfg.d_model = 64;
  dcfg.num_heads = 4;
  dcfg.mlp_dim = 256;
  dcfg.out_h = 2 * grid;
  dcfg.out_w = 2 * grid;
  GazeModel<Scalar> model(bspec, dcfg, input, seed);
  Rng rng(seed);
  Image<Scalar> img = Image<Scalar>::zeros(input, input);
  for (auto& c : img.ch) rng.fill_uniform(c, 0.0, 1.0);
  std::vector<HeadBBox> all;
  for (int i = 0; i < max_persons; ++i) {
    double x = 0.05 + 0.8 * rng.uniform(), y = 0.05 + 0.8 * rng.uniform();
    all.push_back({x, y, x + 0.1, y + 0.1});
  }
  json table = json::array();
  double t1 = 0, tN = 0;
  long calls_n = 0;
  std::printf("%8s %12s %6s\n", "persons", "ms", "calls");
  for (int n = 1; n <= max_persons; ++n) {
    std::vector<HeadBBox> boxes(all.begin(), all.begin() + n);
    model.backbone().reset_call_count();
    double t0 = now_ms();
    auto res = model.predict(img, boxes);
    double dt = now_ms() - t0;
    (void)res;
    if (n == 1) t1 = dt;
    if (n == max_persons) {
      tN = dt;
      calls_n = model.backbone().call_count();
    }
    table.push_back({{"persons", n},
                     {"ms", dt},
                     {"backbone_calls", model.backbone().call_count()}});
    std::printf("%8d %12.2f %6ld\n", n, dt, model.backbone().call_count());
  }
  json rep = {{"rows", table},
              {"time_1", t1},
              {"time_n", tN},
              {"ratio", tN / t1},
              {"max_persons", max_persons},
              {"backbone_calls_at_max", calls_n}};
  write_text(out + "/bench.json", rep.dump(1) + "\n");
  std::printf("time(%d)/time(1) = %.3f\n", max_persons, tN / t1);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gaze target estimation toolkit"};
  app.require_subcommand(1);

  std::string config, checkpoint, out, protocol, image, bboxes, format, suite,
      annotations;
  std::optional<std::uint64_t> seed;
  long steps = 40;
  int persons = 10;
  std::uint64_t bench_seed = 7;

  auto add_common = [&](CLI::App* c) {
    c->add_option("--out", out, "output directory");
    c->add_option("--seed", seed, "seed override");
  };

  auto* c_import = app.add_subcommand("import", "convert annotations to the native schema");
  c_import->add_option("--annotations", annotations)->required();
  c_import->add_option("--format", format, "gazefollow_json|native")->required();
  c_import->add_option("--out", out)->required();

  auto* c_train = app.add_subcommand("train", "train a model from a run config");
  c_train->add_option("--config", config)->required();
  add_common(c_train);

  auto* c_finetune = app.add_subcommand("finetune", "finetune from a checkpoint");
  c_finetune->add_option("--config", config)->required();
  c_finetune->add_option("--checkpoint", checkpoint)->required();
  add_common(c_finetune);

  auto* c_eval = app.add_subcommand("evaluate", "evaluate a checkpoint");
  c_eval->add_option("--checkpoint", checkpoint)->required();
  c_eval->add_option("--config", config, "override the dataset section");
  c_eval->add_option("--protocol", protocol, "gazefollow|tolerance");
  add_common(c_eval);

  auto* c_pred = app.add_subcommand("predict", "predict heatmaps for one image");
  c_pred->add_option("--checkpoint", checkpoint)->required();
  c_pred->add_option("--image", image)->required();
  c_pred->add_option("--bboxes", bboxes, "inline JSON or a JSON file path");
  c_pred->add_option("--out", out)->required();

  auto* c_abl = app.add_subcommand("ablate", "run a comparison suite");
  c_abl->add_option("--suite", suite,
                    "prompt_onoff|prompt_layer|dims_layers|tab2_grid|prompt_variants")
      ->required();
  c_abl->add_option("--config", config)->required();
  c_abl->add_option("--steps", steps, "training steps per row");
  add_common(c_abl);

  auto* c_bench = app.add_subcommand("bench", "multi-person scaling benchmark");
  c_bench->add_option("--out", out)->required();
  c_bench->add_option("--persons", persons, "max persons");
  c_bench->add_option("--seed", bench_seed, "seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << json{{"error", "usage"}, {"message", e.what()}}.dump() << "\n";
    return 2;
  }

  try {
    if (app.got_subcommand(c_import)) return cmd_import(annotations, format, out);
    if (app.got_subcommand(c_train)) return cmd_train(config, out, seed, false, "");
    if (app.got_subcommand(c_finetune))
      return cmd_train(config, out, seed, true, checkpoint);
    if (app.got_subcommand(c_eval))
      return cmd_evaluate(checkpoint, config, out, protocol);
    if (app.got_subcommand(c_pred)) return cmd_predict(checkpoint, image, bboxes, out);
    if (app.got_subcommand(c_abl)) return cmd_ablate(suite, config, out, steps);
    if (app.got_subcommand(c_bench)) return cmd_bench(out, persons, bench_seed);
    throw UsageError("no subcommand");
  } catch (const Error& e) {
    std::cerr << json{{"error", e.kind()}, {"message", e.what()}}.dump() << "\n";
    const std::string k = e.kind();
    const bool usage = k == "usage" || k == "config" || k == "validation" ||
                       k == "parse" || k == "io";
    return usage ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump()
              << "\n";
    return 1;
  }
}
