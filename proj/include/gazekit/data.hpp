#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gazekit/backbone.hpp"
#include "gazekit/common.hpp"
#include "gazekit/conv.hpp"
#include "gazekit/imageio.hpp"
#include "gazekit/prompting.hpp"
#include "gazekit/targets.hpp"

namespace gazekit {

enum class Split { train, test };

// One person's ground truth for one image. All coordinates normalized.
struct GazeAnnotation {
  std::string image_id;
  std::string image_path;  // relative to the annotation file
  HeadBBox bbox;
  std::vector<GazePoint> gaze_points;
  bool in_frame = true;
  Split split = Split::train;

  void validate(const std::string& ctx) const {
    try {
      bbox.validate();
      for (const auto& p : gaze_points) p.validate();
    } catch (const Error& e) {
      throw ValidationError(ctx + ": " + e.what());
    }
    if (!in_frame && !gaze_points.empty())
      throw ValidationError(ctx + ": out-of-frame record carries gaze points");
    if (in_frame && gaze_points.empty())
      throw ValidationError(ctx + ": in-frame record without gaze points");
  }
};

enum class AnnotationFormat { native, gazefollow_json };

inline std::vector<GazeAnnotation> parse_annotations(const nlohmann::json& root,
                                                     AnnotationFormat fmt) {
  if (!root.contains("records") || !root["records"].is_array())
    throw ParseError("annotation file: missing 'records' array");
  std::vector<GazeAnnotation> out;
  int idx = -1;
  for (const auto& r : root["records"]) {
    ++idx;
    const std::string ctx = "record " + std::to_string(idx) + " (image_id=" +
                            r.value("image_id", std::string("?")) + ")";
    try {
      GazeAnnotation a;
      a.image_id = r.at("image_id").get<std::string>();
      a.image_path = r.value("image_path", std::string());
      a.in_frame = r.value("in_frame", true);
      std::string sp = r.value("split", std::string("train"));
      if (sp != "train" && sp != "test")
        throw ParseError("split must be 'train' or 'test'");
      a.split = sp == "train" ? Split::train : Split::test;
      double sx = 1.0, sy = 1.0;
      if (fmt == AnnotationFormat::gazefollow_json) {
        sx = 1.0 / r.at("width").get<double>();
        sy = 1.0 / r.at("height").get<double>();
      }
      const char* bbox_key = fmt == AnnotationFormat::native ? "bbox" : "bbox_px";
      auto bb = r.at(bbox_key);
      a.bbox = {bb.at(0).get<double>() * sx, bb.at(1).get<double>() * sy,
                bb.at(2).get<double>() * sx, bb.at(3).get<double>() * sy};
      const char* gaze_key =
          fmt == AnnotationFormat::native ? "gaze_points" : "gaze_px";
      if (r.contains(gaze_key))
        for (const auto& g : r.at(gaze_key))
          a.gaze_points.push_back(
              {g.at(0).get<double>() * sx, g.at(1).get<double>() * sy});
      a.validate(ctx);
      out.push_back(std::move(a));
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(ctx + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<GazeAnnotation> load_annotations(const std::string& path,
                                                    AnnotationFormat fmt) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open annotation file: " + path);
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(f);
  } catch (const std::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return parse_annotations(root, fmt);
}

inline nlohmann::json annotations_to_json(
    const std::vector<GazeAnnotation>& anns) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& a : anns) {
    nlohmann::json g = nlohmann::json::array();
    for (const auto& p : a.gaze_points) g.push_back({p.x, p.y});
    recs.push_back({{"image_id", a.image_id},
                    {"image_path", a.image_path},
                    {"split", a.split == Split::train ? "train" : "test"},
                    {"bbox", {a.bbox.xmin, a.bbox.ymin, a.bbox.xmax, a.bbox.ymax}},
                    {"gaze_points", g},
                    {"in_frame", a.in_frame}});
  }
  return {{"schema", "gazekit-annotations-v1"}, {"records", recs}};
}

inline void save_annotations(const std::string& path,
                             const std::vector<GazeAnnotation>& anns) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write annotation file: " + path);
  f << annotations_to_json(anns).dump(1) << "\n";
}

// Geometry shared by target and mask construction.
struct TargetSpec {
  Index out_h = 64, out_w = 64;
  double sigma = 3.0;
  Index grid_h = 32, grid_w = 32;
};

template <class S>
struct SampleRecord {
  Image<S> image;
  GazeAnnotation ann;
  Mat<S> target;  // out_h x out_w
  Mat<S> mask;    // grid_h x grid_w
};

// Training targets are built from the record's first gaze point; test-split
// records keep their full annotation list for metrics only.
template <class S>
void rebuild_derived(SampleRecord<S>& s, const TargetSpec& t) {
  std::optional<GazePoint> p;
  if (s.ann.in_frame && !s.ann.gaze_points.empty()) p = s.ann.gaze_points[0];
  s.target = build_target_heatmap<S>(p, t.out_h, t.out_w, t.sigma);
  s.mask = build_head_mask<S>(s.ann.bbox, t.grid_h, t.grid_w);
}

template <class S>
SampleRecord<S> make_sample(Image<S> image, GazeAnnotation ann,
                            const TargetSpec& t) {
  SampleRecord<S> s;
  s.image = std::move(image);
  s.ann = std::move(ann);
  rebuild_derived(s, t);
  return s;
}

// ---------------------------------------------------------------------------
// Augmentations. Each returns a fully consistent record (target and mask
// rebuilt). Train split only.
// ---------------------------------------------------------------------------

template <class S>
SampleRecord<S> apply_hflip(const SampleRecord<S>& in, const TargetSpec& t) {
  SampleRecord<S> out = in;
  for (int c = 0; c < 3; ++c)
    out.image.ch[c] = in.image.ch[c].rowwise().reverse();
  out.ann.bbox.xmin = 1.0 - in.ann.bbox.xmax;
  out.ann.bbox.xmax = 1.0 - in.ann.bbox.xmin;
  for (auto& p : out.ann.gaze_points) p.x = 1.0 - p.x;
  rebuild_derived(out, t);
  return out;
}

// Random crop that must keep the bbox center and every gaze point inside the
// window; coordinates are renormalized to the realized pixel window and the
// image is resized back to its original size. Falls back to the identity when
// no valid window exists within the attempt budget.
template <class S>
SampleRecord<S> apply_crop(const SampleRecord<S>& in, double min_scale,
                           double max_scale, Rng& rng, const TargetSpec& t) {
  if (!(min_scale > 0 && min_scale <= max_scale && max_scale <= 1.0))
    throw ConfigError("crop scale range must satisfy 0 < min <= max <= 1");
  const Index H = in.image.height(), W = in.image.width();
  double lox = in.ann.bbox.cx(), hix = lox, loy = in.ann.bbox.cy(), hiy = loy;
  for (const auto& p : in.ann.gaze_points) {
    lox = std::min(lox, p.x);
    hix = std::max(hix, p.x);
    loy = std::min(loy, p.y);
    hiy = std::max(hiy, p.y);
  }
  for (int attempt = 0; attempt < 8; ++attempt) {
    const double s = rng.uniform(min_scale, max_scale);
    if (s >= 1.0) return in;  // full-frame window: identity
    if (s < hix - lox || s < hiy - loy) continue;
    const double x0 = rng.uniform(std::max(0.0, hix - s), std::min(1.0 - s, lox));
    const double y0 = rng.uniform(std::max(0.0, hiy - s), std::min(1.0 - s, loy));
    // realized pixel window
    Index px0 = std::clamp<Index>(static_cast<Index>(std::lround(x0 * W)), 0, W - 2);
    Index py0 = std::clamp<Index>(static_cast<Index>(std::lround(y0 * H)), 0, H - 2);
    Index pw = std::clamp<Index>(static_cast<Index>(std::lround(s * W)), 1, W - px0);
    Index ph = std::clamp<Index>(static_cast<Index>(std::lround(s * H)), 1, H - py0);
    auto remap_x = [&](double x) {
      return std::clamp((x * W - px0) / pw, 0.0, 1.0);
    };
    auto remap_y = [&](double y) {
      return std::clamp((y * H - py0) / ph, 0.0, 1.0);
    };
    SampleRecord<S> out = in;
    for (int c = 0; c < 3; ++c) {
      Mat<S> sub = in.image.ch[c].block(py0, px0, ph, pw);
      out.image.ch[c] = nn::bilinear_resize(sub, H, W);
    }
    out.ann.bbox = {remap_x(in.ann.bbox.xmin), remap_y(in.ann.bbox.ymin),
                    remap_x(in.ann.bbox.xmax), remap_y(in.ann.bbox.ymax)};
    for (auto& p : out.ann.gaze_points) {
      p.x = remap_x(p.x);
      p.y = remap_y(p.y);
    }
    rebuild_derived(out, t);
    return out;
  }
  return in;
}

// Perturbs each bbox edge by up to amplitude * box extent, re-clamps and
// restores the ordering invariant. Gaze points are untouched.
template <class S>
SampleRecord<S> apply_bbox_jitter(const SampleRecord<S>& in, double amplitude,
                                  Rng& rng, const TargetSpec& t) {
  if (amplitude < 0 || amplitude > 0.5)
    throw ConfigError("bbox jitter amplitude must be in [0, 0.5]");
  SampleRecord<S> out = in;
  const double bw = in.ann.bbox.xmax - in.ann.bbox.xmin;
  const double bh = in.ann.bbox.ymax - in.ann.bbox.ymin;
  auto& b = out.ann.bbox;
  b.xmin = std::clamp(b.xmin + rng.uniform(-amplitude, amplitude) * bw, 0.0, 1.0);
  b.xmax = std::clamp(b.xmax + rng.uniform(-amplitude, amplitude) * bw, 0.0, 1.0);
  b.ymin = std::clamp(b.ymin + rng.uniform(-amplitude, amplitude) * bh, 0.0, 1.0);
  b.ymax = std::clamp(b.ymax + rng.uniform(-amplitude, amplitude) * bh, 0.0, 1.0);
  if (b.xmin > b.xmax) std::swap(b.xmin, b.xmax);
  if (b.ymin > b.ymax) std::swap(b.ymin, b.ymax);
  rebuild_derived(out, t);
  return out;
}

struct AugmentationConfig {
  bool hflip = true;
  bool crop = true;
  double crop_min_scale = 0.5;
  double crop_max_scale = 1.0;
  double bbox_jitter = 0.1;
};

template <class S>
SampleRecord<S> augment_sample(const SampleRecord<S>& in,
                               const AugmentationConfig& cfg, Rng& rng,
                               const TargetSpec& t) {
  SampleRecord<S> s = in;
  if (cfg.crop) s = apply_crop(s, cfg.crop_min_scale, cfg.crop_max_scale, rng, t);
  if (cfg.hflip && rng.uniform() < 0.5) s = apply_hflip(s, t);
  if (cfg.bbox_jitter > 0) s = apply_bbox_jitter(s, cfg.bbox_jitter, rng, t);
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic data. Each person is a solid "head" square plus a same-colored
// "target" marker with a white core; the gaze point is the target core
// center. With two persons per image, color pairing is what associates a
// head with its target, so solving the task requires conditioning on the
// prompted person.
// ---------------------------------------------------------------------------

struct SyntheticRule {
  int persons_per_image = 1;
  Index image_size = 112;
  Index marker_px = 28;
  double out_of_frame_fraction = 0.0;
  double min_target_sep = 0.45;  // two-person: min normalized gaze separation
};

namespace detail {

inline const std::vector<std::array<double, 3>>& synth_palette() {
  static const std::vector<std::array<double, 3>> p = {
      {0.9, 0.15, 0.15}, {0.15, 0.9, 0.15}, {0.2, 0.3, 0.95},
      {0.9, 0.85, 0.1},  {0.85, 0.15, 0.9}, {0.1, 0.85, 0.9}};
  return p;
}

template <class S>
void fill_rect(Image<S>& img, Index y, Index x, Index h, Index w,
               const std::array<double, 3>& color) {
  for (int c = 0; c < 3; ++c)
    img.ch[c].block(y, x, h, w).setConstant(static_cast<S>(color[c]));
}

}  // namespace detail

template <class S>
std::vector<SampleRecord<S>> make_synthetic_dataset(int n,
                                                    const SyntheticRule& rule,
                                                    std::uint64_t seed,
                                                    const TargetSpec& tspec,
                                                    Split split = Split::train) {
  if (n < 1) throw ConfigError("synthetic dataset: n must be >= 1");
  if (rule.persons_per_image < 1 || rule.persons_per_image > 4)
    throw ConfigError("synthetic dataset: 1..4 persons per image");
  const Index sz = rule.image_size, m = rule.marker_px;
  if (sz < 4 * m) throw ConfigError("synthetic dataset: image too small for markers");
  std::vector<SampleRecord<S>> out;
  out.reserve(n);
  int img_idx = 0;
  while (static_cast<int>(out.size()) < n) {
    Rng rng(derive_seed(seed, 0x73796e7468ull, img_idx));  // "synth"
    Image<S> img = Image<S>::zeros(sz, sz);
    for (int c = 0; c < 3; ++c)
      rng.fill_uniform(img.ch[c], 0.30, 0.42);
    // place all markers without overlap
    const int persons = rule.persons_per_image;
    std::vector<std::pair<Index, Index>> spots;  // top-left corners
    std::vector<GazePoint> gazes(persons);
    auto overlaps = [&](Index y, Index x) {
      for (auto [sy, sx] : spots)
        if (std::abs(sy - y) < m + 2 && std::abs(sx - x) < m + 2) return true;
      return false;
    };
    auto place = [&]() {
      for (;;) {
        Index y = static_cast<Index>(rng.below(sz - m));
        Index x = static_cast<Index>(rng.below(sz - m));
        if (!overlaps(y, x)) return std::pair<Index, Index>{y, x};
      }
    };
    // pick distinct colors for the persons
    std::vector<int> colors;
    while (static_cast<int>(colors.size()) < persons) {
      int c = static_cast<int>(rng.below(detail::synth_palette().size()));
      bool dup = false;
      for (int cc : colors) dup |= (cc == c);
      if (!dup) colors.push_back(c);
    }
    std::vector<GazeAnnotation> anns(persons);
    bool targets_ok = true;
    for (int p = 0; p < persons; ++p) {
      const auto& col = detail::synth_palette()[colors[p]];
      auto [hy, hx] = place();
      spots.emplace_back(hy, hx);
      detail::fill_rect(img, hy, hx, m, m, col);
      GazeAnnotation& a = anns[p];
      a.image_id = "synth_" + std::to_string(img_idx);
      a.split = split;
      a.bbox = {static_cast<double>(hx) / sz, static_cast<double>(hy) / sz,
                static_cast<double>(hx + m) / sz, static_cast<double>(hy + m) / sz};
      a.in_frame = rng.uniform() >= rule.out_of_frame_fraction;
      if (!a.in_frame) continue;
      auto [ty, tx] = place();
      spots.emplace_back(ty, tx);
      detail::fill_rect(img, ty, tx, m, m, col);
      detail::fill_rect(img, ty + m / 4, tx + m / 4, m / 2, m / 2,
                        {1.0, 1.0, 1.0});
      // gaze point = center of the white core
      gazes[p] = {(tx + m / 2 + 0.5) / static_cast<double>(sz),
                  (ty + m / 2 + 0.5) / static_cast<double>(sz)};
      a.gaze_points = {gazes[p]};
    }
    if (persons == 2 && anns[0].in_frame && anns[1].in_frame) {
      double d = std::hypot(gazes[0].x - gazes[1].x, gazes[0].y - gazes[1].y);
      targets_ok = d >= rule.min_target_sep;
    }
    ++img_idx;
    if (!targets_ok) continue;  // resample the whole image
    for (int p = 0; p < persons && static_cast<int>(out.size()) < n; ++p) {
      anns[p].validate("synthetic person " + std::to_string(p));
      out.push_back(make_sample<S>(img, anns[p], tspec));
    }
  }
  return out;
}

// Writes images (ppm) plus a native annotation file into dir.
template <class S>
void save_dataset(const std::string& dir,
                  const std::vector<SampleRecord<S>>& samples) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  std::vector<GazeAnnotation> anns;
  std::string last_id;
  for (const auto& s : samples) {
    GazeAnnotation a = s.ann;
    a.image_path = "images/" + a.image_id + ".ppm";
    if (a.image_id != last_id) {
      write_ppm(dir + "/" + a.image_path, s.image);
      last_id = a.image_id;
    }
    anns.push_back(std::move(a));
  }
  save_annotations(dir + "/annotations.json", anns);
}

template <class S>
std::vector<SampleRecord<S>> load_dataset(const std::string& annotation_path,
                                          AnnotationFormat fmt,
                                          const TargetSpec& tspec,
                                          std::optional<Split> only = {}) {
  namespace fs = std::filesystem;
  auto anns = load_annotations(annotation_path, fmt);
  const fs::path base = fs::path(annotation_path).parent_path();
  std::vector<SampleRecord<S>> out;
  std::string cached_id;
  Image<S> cached;
  for (auto& a : anns) {
    if (only && a.split != *only) continue;
    if (a.image_path.empty())
      throw ValidationError("record " + a.image_id + ": missing image_path");
    if (a.image_id != cached_id) {
      cached = read_ppm<S>((base / a.image_path).string());
      cached_id = a.image_id;
    }
    out.push_back(make_sample<S>(cached, a, tspec));
  }
  return out;
}

}  // namespace gazekit
