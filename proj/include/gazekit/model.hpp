#pragma once

#include <memory>
#include <string>
#include <vector>

#include "gazekit/backbone.hpp"
#include "gazekit/checkpoint.hpp"
#include "gazekit/data.hpp"
#include "gazekit/decoder.hpp"
#include "gazekit/metrics.hpp"

namespace gazekit {

// Frozen scene encoder + learned gaze decoder, bound to one input geometry.
template <class S>
class GazeModel {
 public:
  GazeModel(const BackboneSpec& bspec, const DecoderConfig& dcfg,
            Index input_size, std::uint64_t seed)
      : input_size_(input_size),
        backbone_(make_backbone<S>(bspec)),
        decoder_(dcfg, bspec.d_F, input_size / bspec.patch_size,
                 input_size / bspec.patch_size, seed) {
    if (input_size % bspec.patch_size != 0)
      throw ConfigError("input size " + std::to_string(input_size) +
                        " not divisible by backbone patch size " +
                        std::to_string(bspec.patch_size));
  }

  Index input_size() const { return input_size_; }
  Backbone<S>& backbone() { return *backbone_; }
  const Backbone<S>& backbone() const { return *backbone_; }
  GazeDecoder<S>& decoder() { return decoder_; }
  const GazeDecoder<S>& decoder() const { return decoder_; }

  // One backbone pass regardless of the number of queried persons; layers
  // before the prompt layer are also shared across persons.
  std::vector<DecoderOutput<S>> predict(const Image<S>& img,
                                        const std::vector<HeadBBox>& bboxes) const {
    const auto& cfg = decoder_.config();
    if (bboxes.empty() && cfg.prompt_variant != PromptVariant::none)
      throw UsageError("predict: at least one bbox is required when prompting is enabled");
    RawFeatureMap<S> raw = backbone_->extract(img);
    DecoderPrefix<S> prefix = decoder_.make_prefix(raw);
    std::vector<DecoderOutput<S>> out;
    if (bboxes.empty()) {
      out.push_back(decoder_.run_person(prefix, PersonPrompt{}));
      return out;
    }
    out.reserve(bboxes.size());
    for (const auto& b : bboxes)
      out.push_back(decoder_.run_person(prefix, PersonPrompt{b}));
    return out;
  }

  // --- checkpointing -------------------------------------------------------

  void save_params(Archive& a) const {
    for (const auto& p : decoder_.params().items) a.add("param." + p.name, *p.value);
  }

  void load_params(const Archive& a) {
    for (auto& p : decoder_.params().items) *p.value = a.get<S>("param." + p.name);
  }

  Index input_size_;
  std::unique_ptr<Backbone<S>> backbone_;
  GazeDecoder<S> decoder_;
};

// Evaluates a model over the test records of a dataset.
template <class S>
struct EvalReport {
  EvalResult result;
  std::vector<SampleMetrics> per_sample;
  std::vector<float> inout_scores;
  std::vector<int> inout_labels;
};

template <class S>
EvalReport<S> evaluate_model(const GazeModel<S>& model,
                             const std::vector<SampleRecord<S>>& samples,
                             EvalProtocol protocol, double tolerance_px) {
  EvalReport<S> rep;
  if (samples.empty()) throw ValidationError("evaluate: empty dataset");
  // group consecutive samples that share an image so the backbone runs once
  size_t i = 0;
  int row = 0;
  while (i < samples.size()) {
    size_t j = i;
    while (j < samples.size() && samples[j].ann.image_id == samples[i].ann.image_id)
      ++j;
    RawFeatureMap<S> raw = model.backbone().extract(samples[i].image);
    DecoderPrefix<S> prefix = model.decoder().make_prefix(raw);
    for (size_t k = i; k < j; ++k, ++row) {
      const auto& s = samples[k];
      DecoderOutput<S> out =
          model.decoder().run_person(prefix, PersonPrompt{s.ann.bbox});
      if (out.inout) {
        rep.inout_scores.push_back(static_cast<float>(*out.inout));
        rep.inout_labels.push_back(s.ann.in_frame ? 1 : 0);
      }
      if (!s.ann.in_frame) continue;  // heatmap metrics need a gaze target
      rep.per_sample.push_back(
          evaluate_sample(s.ann.image_id + "#" + std::to_string(row),
                          out.heatmap, s.ann.gaze_points, protocol,
                          tolerance_px));
    }
    i = j;
  }
  bool any_pos = false;
  for (int l : rep.inout_labels) any_pos |= (l != 0);
  rep.result = aggregate_metrics(rep.per_sample,
                                 any_pos ? rep.inout_scores : std::vector<float>{},
                                 rep.inout_labels);
  return rep;
}

}  // namespace gazekit
