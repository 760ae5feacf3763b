#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mars/checkpoint.hpp"
#include "mars/config.hpp"
#include "mars/data.hpp"
#include "mars/detector.hpp"
#include "mars/training.hpp"

namespace mars {

inline real iou(real ax0, real ay0, real ax1, real ay1, real bx0, real by0, real bx1, real by1) {
  return box_iou(ax0, ay0, ax1, ay1, bx0, by0, bx1, by1);
}

inline real iou(const GroundTruthBox& a, const GroundTruthBox& b) {
  return box_iou(a.x_min, a.y_min, a.x_max, a.y_max, b.x_min, b.y_min, b.x_max, b.y_max);
}

/// One detection tagged with the image it came from, for cross-image ranking.
struct ScoredBox {
  int image = 0;
  real confidence = 1;
  real x_min = 0, y_min = 0, x_max = 0, y_max = 0;
};

inline bool scored_box_order(const ScoredBox& a, const ScoredBox& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.image != b.image) return a.image < b.image;
  if (a.x_min != b.x_min) return a.x_min < b.x_min;
  if (a.y_min != b.y_min) return a.y_min < b.y_min;
  if (a.x_max != b.x_max) return a.x_max < b.x_max;
  return a.y_max < b.y_max;
}

namespace detail {

struct MatchResult {
  std::vector<ScoredBox> sorted;  // canonical rank order
  std::vector<char> is_tp;        // aligned with `sorted`
  int total_gt = 0;
};

/// Greedy confidence-descending matching: each detection claims the highest-IoU
/// still-unmatched ground truth in its image, if that IoU clears the threshold.
/// A second hit on an already-claimed box counts as a false positive.
inline MatchResult match_detections(std::vector<ScoredBox> dets,
                                    const std::vector<std::vector<std::array<real, 4>>>& gt,
                                    real iou_threshold) {
  MatchResult r;
  std::sort(dets.begin(), dets.end(), scored_box_order);
  std::vector<std::vector<char>> claimed(gt.size());
  for (size_t i = 0; i < gt.size(); ++i) {
    claimed[i].assign(gt[i].size(), 0);
    r.total_gt += static_cast<int>(gt[i].size());
  }
  r.is_tp.assign(dets.size(), 0);
  for (size_t d = 0; d < dets.size(); ++d) {
    const ScoredBox& s = dets[d];
    if (s.image < 0 || s.image >= static_cast<int>(gt.size()))
      throw DataError("match_detections: detection references image " + std::to_string(s.image) +
                      " outside the dataset");
    real best = 0;
    int best_g = -1;
    const auto& boxes = gt[s.image];
    for (size_t g = 0; g < boxes.size(); ++g) {
      if (claimed[s.image][g]) continue;
      const real v = box_iou(s.x_min, s.y_min, s.x_max, s.y_max, boxes[g][0], boxes[g][1],
                             boxes[g][2], boxes[g][3]);
      if (v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0 && best >= iou_threshold) {
      claimed[s.image][best_g] = 1;
      r.is_tp[d] = 1;
    }
  }
  r.sorted = std::move(dets);
  return r;
}

}  // namespace detail

/// Average precision for one class over a whole dataset. `gt_per_image[i]`
/// holds that image's boxes as [x_min, y_min, x_max, y_max]. Default is
/// all-point interpolation; `eleven_point` switches to the legacy 11-point
/// average. No ground truth or no detections yields 0.
inline real compute_ap(const std::vector<ScoredBox>& detections,
                       const std::vector<std::vector<std::array<real, 4>>>& gt_per_image,
                       real iou_threshold = 0.5, bool eleven_point = false) {
  const auto m = detail::match_detections(detections, gt_per_image, iou_threshold);
  if (m.total_gt == 0 || m.sorted.empty()) return 0;

  const size_t n = m.sorted.size();
  std::vector<real> precision(n), recall(n);
  int tp = 0;
  for (size_t i = 0; i < n; ++i) {
    tp += m.is_tp[i];
    precision[i] = static_cast<real>(tp) / static_cast<real>(i + 1);
    recall[i] = static_cast<real>(tp) / static_cast<real>(m.total_gt);
  }

  // Monotone precision envelope from the right.
  std::vector<real> envelope(n);
  real run = 0;
  for (size_t i = n; i-- > 0;) {
    run = std::max(run, precision[i]);
    envelope[i] = run;
  }

  if (eleven_point) {
    real total = 0;
    for (int k = 0; k <= 10; ++k) {
      const real level = static_cast<real>(k) / 10;
      real best = 0;
      for (size_t i = 0; i < n; ++i)
        if (recall[i] >= level) {
          best = envelope[i];
          break;
        }
      total += best;
    }
    return total / 11;
  }

  real ap = 0;
  real prev_recall = 0;
  for (size_t i = 0; i < n; ++i) {
    if (!m.is_tp[i]) continue;
    ap += (recall[i] - prev_recall) * envelope[i];
    prev_recall = recall[i];
  }
  return ap;
}

/// Mean over the fixed five-class list; zero-AP classes count.
inline real compute_map(const std::array<real, 5>& per_class_ap) {
  real sum = 0;
  for (real ap : per_class_ap) sum += ap;
  return sum / 5;
}

inline real compute_map(const std::map<std::string, real>& per_class_ap) {
  std::array<real, 5> aps{};
  for (const auto& [name, ap] : per_class_ap)
    if (class_id_of(name) < 0)
      throw DataError("compute_map: unknown class " + name);
  for (size_t c = 0; c < kClassNames.size(); ++c) {
    auto it = per_class_ap.find(kClassNames[c]);
    aps[c] = it == per_class_ap.end() ? 0 : it->second;
  }
  return compute_map(aps);
}

struct ClassCounts {
  int num_gt = 0;
  int num_det = 0;
  int tp = 0;
  int fp = 0;
};

struct EvalResult {
  std::array<real, 5> per_class_ap{};
  real map = 0;
  std::array<ClassCounts, 5> counts{};
};

/// One line of the raw detection dump: where it fired and how it was judged.
struct AuditRecord {
  std::string image;
  int class_id = 0;
  real confidence = 0;
  std::array<real, 4> box{};
  bool matched = false;
};

inline std::string audit_to_jsonl(const std::vector<AuditRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["image"] = r.image;
    j["class"] = kClassNames.at(static_cast<size_t>(r.class_id));
    j["confidence"] = r.confidence;
    j["box"] = r.box;
    j["matched"] = r.matched;
    out += j.dump();
    out += '\n';
  }
  return out;
}

/// Scores already-decoded detections against ground truth. This is the core
/// engine behind `evaluate`; feeding the ground truth back in as detections
/// with confidence 1 is the standard self-check and scores mAP 1.0.
inline EvalResult evaluate_detections(const std::vector<std::vector<Detection>>& dets_per_image,
                                      const std::vector<std::vector<GroundTruthBox>>& gt_per_image,
                                      const EvalThresholds& th = {},
                                      std::vector<AuditRecord>* audit = nullptr,
                                      const std::vector<std::string>* image_names = nullptr) {
  if (dets_per_image.size() != gt_per_image.size())
    throw ShapeError("evaluate_detections: got " + std::to_string(dets_per_image.size()) +
                     " detection lists for " + std::to_string(gt_per_image.size()) + " images");
  if (image_names && image_names->size() != gt_per_image.size())
    throw ShapeError("evaluate_detections: image name list size mismatch");
  const int num_images = static_cast<int>(gt_per_image.size());

  EvalResult result;
  for (int c = 0; c < static_cast<int>(kClassNames.size()); ++c) {
    std::vector<ScoredBox> dets;
    std::vector<std::vector<std::array<real, 4>>> gt(static_cast<size_t>(num_images));
    for (int i = 0; i < num_images; ++i) {
      for (const Detection& d : dets_per_image[static_cast<size_t>(i)])
        if (d.class_id == c) dets.push_back({i, d.confidence, d.x_min, d.y_min, d.x_max, d.y_max});
      for (const GroundTruthBox& g : gt_per_image[static_cast<size_t>(i)])
        if (g.class_id == c) gt[static_cast<size_t>(i)].push_back({g.x_min, g.y_min, g.x_max, g.y_max});
    }
    const auto m = detail::match_detections(dets, gt, th.match_iou);
    auto& counts = result.counts[static_cast<size_t>(c)];
    counts.num_gt = m.total_gt;
    counts.num_det = static_cast<int>(m.sorted.size());
    for (char f : m.is_tp) counts.tp += f;
    counts.fp = counts.num_det - counts.tp;
    result.per_class_ap[static_cast<size_t>(c)] = compute_ap(dets, gt, th.match_iou, th.eleven_point);
    if (audit)
      for (size_t d = 0; d < m.sorted.size(); ++d) {
        const ScoredBox& s = m.sorted[d];
        const std::string name = image_names ? (*image_names)[static_cast<size_t>(s.image)]
                                             : std::to_string(s.image);
        audit->push_back({name, c, s.confidence, {s.x_min, s.y_min, s.x_max, s.y_max},
                          m.is_tp[d] != 0});
      }
  }
  result.map = compute_map(result.per_class_ap);
  return result;
}

/// Runs the detector over a dataset in inference mode and scores it.
inline EvalResult evaluate(Model& model, const std::vector<TrainExample>& examples,
                           const EvalThresholds& th = {},
                           std::vector<AuditRecord>* audit = nullptr) {
  if (examples.empty()) throw DataError("evaluate: empty dataset");
  const int S = model.cfg.input_size;
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GroundTruthBox>> gt;
  std::vector<std::string> names;
  dets.reserve(examples.size());
  for (const TrainExample& ex : examples) {
    require_shape(ex.image, {3, S, S}, "evaluate: image");
    Tape tape;
    Tensor batch({1, 3, S, S});
    std::copy(ex.image.data.begin(), ex.image.data.end(), batch.data.begin());
    auto fr = model_forward(model, tape, tape.leaf(std::move(batch)), /*training=*/false);
    std::array<Tensor, 3> raw{fr.raw[0].value(), fr.raw[1].value(), fr.raw[2].value()};
    auto decoded = decode_predictions(raw, model.cfg, th.conf);
    dets.push_back(non_max_suppression(std::move(decoded[0]), th.nms_iou));
    gt.push_back(ex.boxes);
    names.push_back(ex.name);
  }
  return evaluate_detections(dets, gt, th, audit, &names);
}

inline EvalResult evaluate(Model& model, const DatasetManifest& manifest,
                           const EvalThresholds& th = {},
                           std::vector<AuditRecord>* audit = nullptr) {
  if (manifest.images.empty()) throw DataError("evaluate: empty manifest");
  std::vector<TrainExample> examples;
  examples.reserve(manifest.images.size());
  for (const AnnotatedImage& rec : manifest.images)
    examples.push_back(to_train_example(rec, model.cfg.input_size));
  return evaluate(model, examples, th, audit);
}

/// Fraction of examples whose domain label the domain head ranks first,
/// averaging the per-scale probability vectors.
inline real domain_accuracy(Model& model, const std::vector<TrainExample>& examples) {
  if (!model.cfg.use_domain)
    throw ConfigError("domain_accuracy: model was built without the domain head");
  if (examples.empty()) throw DataError("domain_accuracy: empty dataset");
  const int S = model.cfg.input_size;
  const int D = model.cfg.num_domains;
  int correct = 0;
  for (const TrainExample& ex : examples) {
    require_shape(ex.image, {3, S, S}, "domain_accuracy: image");
    Tape tape;
    Tensor batch({1, 3, S, S});
    std::copy(ex.image.data.begin(), ex.image.data.end(), batch.data.begin());
    auto fr = model_forward(model, tape, tape.leaf(std::move(batch)), /*training=*/false);
    std::vector<real> mean(static_cast<size_t>(D), 0);
    for (int s = 0; s < 3; ++s) {
      const Tensor& p = fr.domain_probs[s].value();
      for (int d = 0; d < D; ++d) mean[static_cast<size_t>(d)] += p.data[static_cast<size_t>(d)] / 3;
    }
    const int arg = static_cast<int>(std::max_element(mean.begin(), mean.end()) - mean.begin());
    if (arg == ex.domain_id) ++correct;
  }
  return static_cast<real>(correct) / static_cast<real>(examples.size());
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

struct AblationVariant {
  std::string label;
  ModelConfig cfg;
};

struct AblationSpec {
  std::vector<AblationVariant> variants;  // empty selects the default ladder
  ModelConfig base;                       // template the default ladder toggles
  TrainConfig train;
  EvalThresholds thresholds;
  bool augmented = false;             // train on the 7-domain expansion
  bool with_domain = false;           // include the domain-head ladder
  bool augmented_validation = false;  // score on augmented instead of original
  std::vector<real> augment_strengths = std::vector<real>(6, 0.7);
};

/// The standard component ladder. Without the domain axis it toggles the
/// residual block, channel attention, their fused form, and multi-scale
/// attention (8 rows); with it, every row past the shared baseline adds the
/// domain head (9 rows).
inline std::vector<AblationVariant> default_variants(bool with_domain, ModelConfig base) {
  base.use_residual = false;
  base.use_channel_attention = false;
  base.use_residual_attention = false;
  base.use_multi_scale_attention = false;
  base.use_domain = false;

  struct Row {
    const char* label;
    bool res, ca, fused, msa;
  };
  std::vector<AblationVariant> out;
  if (!with_domain) {
    const Row rows[] = {
        {"Baseline (YOLOv3)", false, false, false, false},
        {"+Residual", true, false, false, false},
        {"+Channel Attention", false, true, false, false},
        {"+Residual Attention", false, false, true, false},
        {"+Multi-Scale Attention", false, false, false, true},
        {"+Residual+Multi-Scale Attention", true, false, false, true},
        {"+Channel Attention+Multi-Scale Attention", false, true, false, true},
        {"+Residual+Channel Attention+Multi-Scale Attention", true, true, false, true},
    };
    for (const Row& r : rows) {
      ModelConfig cfg = base;
      cfg.use_residual = r.res;
      cfg.use_channel_attention = r.ca;
      cfg.use_residual_attention = r.fused;
      cfg.use_multi_scale_attention = r.msa;
      out.push_back({r.label, cfg});
    }
    return out;
  }
  const Row rows[] = {
      {"Baseline (YOLOv3)", false, false, false, false},
      {"+Domain", false, false, false, false},
      {"+Domain +Residual", true, false, false, false},
      {"+Domain +Channel Attention", false, true, false, false},
      {"+Domain +Residual Attention", false, false, true, false},
      {"+Domain +Multi-Scale Attention", false, false, false, true},
      {"+Domain +Residual+Multi-Scale Attention", true, false, false, true},
      {"+Domain +Channel Attention+Multi-Scale Attention", false, true, false, true},
      {"+Domain +Residual+Channel Attention+Multi-Scale Attention", true, true, false, true},
  };
  bool first = true;
  for (const Row& r : rows) {
    ModelConfig cfg = base;
    cfg.use_residual = r.res;
    cfg.use_channel_attention = r.ca;
    cfg.use_residual_attention = r.fused;
    cfg.use_multi_scale_attention = r.msa;
    cfg.use_domain = !first;  // the shared baseline has no domain head
    out.push_back({r.label, cfg});
    first = false;
  }
  return out;
}

struct AblationRow {
  std::string label;
  bool failed = false;
  std::string error;  // populated when failed
  EvalResult result;
};

struct AblationTable {
  std::string title;
  std::vector<AblationRow> rows;
};

inline const std::array<std::string, 7>& ablation_header() {
  static const std::array<std::string, 7> h = {"Model",   "Echinus",   "Starfish", "Holoth.",
                                               "Scallop", "Waterweed", "mAP"};
  return h;
}

namespace detail {

inline std::string label_slug(const std::string& label) {
  std::string s;
  for (char c : label) {
    if (std::isalnum(static_cast<unsigned char>(c)))
      s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    else if (!s.empty() && s.back() != '_')
      s.push_back('_');
  }
  while (!s.empty() && s.back() == '_') s.pop_back();
  return s.empty() ? "variant" : s;
}

inline nlohmann::json eval_result_to_json(const EvalResult& r) {
  nlohmann::json j;
  j["per_class_ap"] = r.per_class_ap;
  j["map"] = r.map;
  auto& counts = j["counts"] = nlohmann::json::array();
  for (size_t c = 0; c < r.counts.size(); ++c) {
    nlohmann::json row;
    row["class"] = kClassNames[c];
    row["num_gt"] = r.counts[c].num_gt;
    row["num_det"] = r.counts[c].num_det;
    row["tp"] = r.counts[c].tp;
    row["fp"] = r.counts[c].fp;
    counts.push_back(std::move(row));
  }
  return j;
}

}  // namespace detail

/// Trains and scores every variant under the same seed and data. A variant
/// that throws is recorded as failed and the run continues. When `out_dir` is
/// given, each variant leaves a checkpoint and its raw scores behind.
inline AblationTable run_ablation(const AblationSpec& spec,
                                  const std::vector<TrainExample>& train_set,
                                  const std::vector<TrainExample>& eval_set,
                                  const std::string& out_dir = "") {
  auto variants = spec.variants.empty() ? default_variants(spec.with_domain, spec.base)
                                        : spec.variants;
  if (variants.empty()) throw ConfigError("run_ablation: no variants");
  {
    std::map<std::string, int> seen;
    for (const auto& v : variants)
      if (++seen[v.label] == 2)
        throw ConfigError("run_ablation: duplicate variant label \"" + v.label + "\"");
  }
  if (train_set.empty()) throw DataError("run_ablation: empty training set");
  if (eval_set.empty()) throw DataError("run_ablation: empty evaluation set");
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  AblationTable table;
  table.title = std::string(spec.augmented ? "augmented" : "original") + " data, domain ladder " +
                (spec.with_domain ? "on" : "off");
  for (const auto& variant : variants) {
    AblationRow row;
    row.label = variant.label;
    try {
      Model model = build_model(variant.cfg, spec.train.seed);
      fit(model, train_set, spec.train);
      row.result = evaluate(model, eval_set, spec.thresholds);
      if (!out_dir.empty()) {
        const std::string slug = detail::label_slug(variant.label);
        save_checkpoint(model, out_dir + "/" + slug + ".ckpt", spec.train.epochs);
        std::ofstream raw(out_dir + "/" + slug + "_eval.json");
        if (!raw) throw IoError("run_ablation: cannot write eval json for " + variant.label);
        raw << detail::eval_result_to_json(row.result).dump(2) << "\n";
      }
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

namespace detail {

inline std::string format_ap(real ap) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", ap * 100);
  return buf;
}

/// Column maxima over the displayed (2-decimal) values, failed rows excluded.
inline std::array<std::string, 6> column_maxima(const AblationTable& table) {
  std::array<std::string, 6> best;
  std::array<real, 6> best_val;
  best_val.fill(-1);
  for (const auto& row : table.rows) {
    if (row.failed) continue;
    for (int c = 0; c < 6; ++c) {
      const real v = c < 5 ? row.result.per_class_ap[static_cast<size_t>(c)] : row.result.map;
      const std::string shown = format_ap(v);
      const real rounded = std::stod(shown);
      if (rounded > best_val[static_cast<size_t>(c)]) {
        best_val[static_cast<size_t>(c)] = rounded;
        best[static_cast<size_t>(c)] = shown;
      }
    }
  }
  return best;
}

}  // namespace detail

/// GitHub-flavored table; the best displayed value in every numeric column is
/// bold, ties included.
inline std::string render_table_markdown(const AblationTable& table) {
  const auto& header = ablation_header();
  const auto best = detail::column_maxima(table);
  std::string out;
  out += "| " + header[0];
  for (size_t c = 1; c < header.size(); ++c) out += " | " + header[c];
  out += " |\n|";
  for (size_t c = 0; c < header.size(); ++c) out += " --- |";
  out += "\n";
  for (const auto& row : table.rows) {
    out += "| " + row.label;
    for (int c = 0; c < 6; ++c) {
      if (row.failed) {
        out += " | failed";
        continue;
      }
      const real v = c < 5 ? row.result.per_class_ap[static_cast<size_t>(c)] : row.result.map;
      const std::string shown = detail::format_ap(v);
      out += " | ";
      if (shown == best[static_cast<size_t>(c)])
        out += "**" + shown + "**";
      else
        out += shown;
    }
    out += " |\n";
  }
  return out;
}

inline std::string render_table_csv(const AblationTable& table) {
  const auto& header = ablation_header();
  std::string out;
  out += header[0];
  for (size_t c = 1; c < header.size(); ++c) out += "," + header[c];
  out += "\n";
  for (const auto& row : table.rows) {
    std::string label = row.label;
    if (label.find(',') != std::string::npos) label = "\"" + label + "\"";
    out += label;
    for (int c = 0; c < 6; ++c) {
      if (row.failed) {
        out += ",failed";
        continue;
      }
      const real v = c < 5 ? row.result.per_class_ap[static_cast<size_t>(c)] : row.result.map;
      out += "," + detail::format_ap(v);
    }
    out += "\n";
  }
  return out;
}

}  // namespace mars
