#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mars/checkpoint.hpp"
#include "mars/config.hpp"
#include "mars/data.hpp"
#include "mars/detector.hpp"
#include "mars/evaluation.hpp"
#include "mars/training.hpp"

namespace mars {

/// Guards an output directory against concurrent writers for the lifetime of
/// one command. Creation is atomic (O_EXCL); a leftover file from a crashed
/// run must be removed by hand, which the error spells out.
class OutputLock {
 public:
  explicit OutputLock(const std::string& dir) {
    std::filesystem::create_directories(dir);
    path_ = dir + "/.mars.lock";
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw IoError("output directory " + dir +
                    " is locked by another command (remove " + path_ + " if stale)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    (void)!::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~OutputLock() {
    if (!path_.empty()) ::unlink(path_.c_str());
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::string path_;
};

namespace detail {

inline std::vector<TrainExample> examples_from_manifest(const DatasetManifest& manifest,
                                                        int input_size) {
  std::vector<TrainExample> out;
  out.reserve(manifest.images.size());
  for (const AnnotatedImage& rec : manifest.images)
    out.push_back(to_train_example(rec, input_size));
  return out;
}

inline void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << body;
  if (!out) throw IoError("failed writing " + path);
}

inline std::string format_real(real v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline nlohmann::ordered_json epoch_record_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["box"] = r.box;
  j["obj"] = r.obj;
  j["cls"] = r.cls;
  j["domain"] = r.domain;
  j["total"] = r.total;
  if (r.map)
    j["map"] = *r.map;
  else
    j["map"] = nullptr;
  j["seconds"] = r.seconds;
  return j;
}

// ---------------------------------------------------------------------------
// Box and label drawing for the annotated detect output.

inline const std::array<std::array<std::uint8_t, 3>, 5>& class_palette() {
  static const std::array<std::array<std::uint8_t, 3>, 5> p = {{
      {230, 60, 60},    // echinus
      {240, 200, 40},   // starfish
      {80, 200, 120},   // holothurian
      {70, 130, 240},   // scallop
      {180, 90, 220},   // waterweeds
  }};
  return p;
}

struct Glyph {
  char c;
  std::uint8_t rows[7];  // 5 bits per row, MSB left
};

inline const Glyph* find_glyph(char c) {
  static const Glyph table[] = {
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
      {'D', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
      {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
      {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
      {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
      {'N', {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
      {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
      {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11}},
      {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}},
      {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
      {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x06, 0x08, 0x10, 0x1F}},
      {'3', {0x0E, 0x11, 0x01, 0x06, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
      {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
      {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
      {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
      {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
      {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}},
  };
  const char upper = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (const Glyph& g : table)
    if (g.c == upper) return &g;
  return nullptr;
}

inline void put_pixel(Image& img, int x, int y, const std::array<std::uint8_t, 3>& rgb) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  for (int c = 0; c < 3; ++c) img.at(x, y, c) = rgb[static_cast<size_t>(c)];
}

inline void draw_box(Image& img, int x0, int y0, int x1, int y1,
                     const std::array<std::uint8_t, 3>& rgb, int thickness = 2) {
  for (int t = 0; t < thickness; ++t) {
    for (int x = x0; x <= x1; ++x) {
      put_pixel(img, x, y0 + t, rgb);
      put_pixel(img, x, y1 - t, rgb);
    }
    for (int y = y0; y <= y1; ++y) {
      put_pixel(img, x0 + t, y, rgb);
      put_pixel(img, x1 - t, y, rgb);
    }
  }
}

inline void draw_text(Image& img, int x, int y, const std::string& text,
                      const std::array<std::uint8_t, 3>& rgb) {
  int cx = x;
  for (char c : text) {
    if (const Glyph* g = find_glyph(c)) {
      for (int row = 0; row < 7; ++row)
        for (int col = 0; col < 5; ++col)
          if (g->rows[row] & (1 << (4 - col))) put_pixel(img, cx + col, y + row, rgb);
    }
    cx += 6;
  }
}

inline Detection detection_to_original(Detection d, const LetterboxTransform& tf, int width,
                                       int height) {
  d.x_min = std::clamp(tf.inv_x(d.x_min), real(0), static_cast<real>(width));
  d.x_max = std::clamp(tf.inv_x(d.x_max), real(0), static_cast<real>(width));
  d.y_min = std::clamp(tf.inv_y(d.y_min), real(0), static_cast<real>(height));
  d.y_max = std::clamp(tf.inv_y(d.y_max), real(0), static_cast<real>(height));
  return d;
}

inline void annotate(Image& img, const std::vector<Detection>& dets) {
  for (const Detection& d : dets) {
    const auto& rgb = class_palette()[static_cast<size_t>(d.class_id)];
    const int x0 = static_cast<int>(std::lround(d.x_min));
    const int y0 = static_cast<int>(std::lround(d.y_min));
    const int x1 = static_cast<int>(std::lround(d.x_max));
    const int y1 = static_cast<int>(std::lround(d.y_max));
    draw_box(img, x0, y0, x1, y1, rgb);
    char conf[16];
    std::snprintf(conf, sizeof(conf), "%.2f", d.confidence);
    const std::string label = kClassNames[static_cast<size_t>(d.class_id)] + " " + conf;
    const int ty = y0 >= 10 ? y0 - 9 : y0 + 3;
    draw_text(img, x0 + 2, ty, label, rgb);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out_dir;
  int images = 8;
  int size = 64;
  std::uint64_t seed = 0;
  bool augment = false;
  std::vector<real> strengths = std::vector<real>(6, 0.7);
};

inline void cmd_synth(const SynthArgs& a) {
  if (a.images < 1) throw ConfigError("synth: --images must be >= 1");
  OutputLock lock(a.out_dir);

  DatasetManifest manifest = generate_synthetic_dataset(a.images, a.size, a.seed);
  for (AnnotatedImage& rec : manifest.images) {
    rec.image_path = rec.name + ".ppm";  // kept relative so manifests are portable
    write_ppm(*rec.pixels, a.out_dir + "/" + rec.image_path);
  }
  save_manifest(manifest, a.out_dir + "/manifest.json");

  if (a.augment) {
    DatasetManifest augmented = build_augmented_dataset(manifest, a.strengths, a.seed);
    for (AnnotatedImage& rec : augmented.images) {
      if (!rec.image_path.empty()) continue;  // domain-0 originals are already on disk
      rec.image_path = rec.name + ".ppm";
      write_ppm(*rec.pixels, a.out_dir + "/" + rec.image_path);
    }
    save_manifest(augmented, a.out_dir + "/manifest_augmented.json");
    std::cout << "synth: wrote " << manifest.images.size() << " images and "
              << augmented.images.size() << " augmented records to " << a.out_dir << "\n";
  } else {
    std::cout << "synth: wrote " << manifest.images.size() << " images to " << a.out_dir
              << "\n";
  }
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config_path;
  std::string output_override;
};

inline void cmd_train(const TrainArgs& a) {
  RunConfig rc = resolve_run_config(load_run_config(a.config_path));
  if (!a.output_override.empty()) rc.output_dir = a.output_override;
  validate_run_config(rc);
  OutputLock lock(rc.output_dir);
  save_run_config(rc, rc.output_dir + "/config.resolved.json");

  const DatasetManifest train_manifest = load_manifest(rc.train_manifest);
  std::vector<TrainExample> train_set;
  if (rc.data_mode == "augmented")
    train_set = detail::examples_from_manifest(
        build_augmented_dataset(train_manifest, rc.augment_strengths, rc.seed),
        rc.model.input_size);
  else
    train_set = detail::examples_from_manifest(train_manifest, rc.model.input_size);

  std::vector<TrainExample> val_set;
  if (!rc.val_manifest.empty()) {
    const DatasetManifest val_manifest = load_manifest(rc.val_manifest);
    val_set = rc.augmented_validation
                  ? detail::examples_from_manifest(
                        build_augmented_dataset(val_manifest, rc.augment_strengths, rc.seed),
                        rc.model.input_size)
                  : detail::examples_from_manifest(val_manifest, rc.model.input_size);
  }

  Model model = build_model(rc.model, rc.seed);
  std::ofstream history(rc.output_dir + "/history.jsonl");
  if (!history) throw IoError("cmd_train: cannot open history.jsonl for writing");

  FitOptions opts;
  opts.on_epoch = [&](const EpochRecord& r) {
    history << detail::epoch_record_json(r).dump() << "\n";
    history.flush();
  };
  if (!val_set.empty()) {
    opts.eval_interval = 1;
    opts.evaluate = [&](Model& m) { return evaluate(m, val_set, rc.eval).map; };
  }
  opts.save = [&](Model& m, int epoch) {
    save_checkpoint(m, rc.output_dir + "/final.ckpt", epoch);
  };

  fit(model, train_set, rc.train, opts);
  std::cout << "train: finished " << rc.train.epochs << " epochs; checkpoint at "
            << rc.output_dir << "/final.ckpt\n";
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint_path;  // unused in oracle mode
  std::string data_path;
  std::string out_dir;
  EvalThresholds thresholds;
  bool oracle = false;
};

inline void cmd_eval(const EvalArgs& a) {
  const DatasetManifest manifest = load_manifest(a.data_path);
  if (manifest.images.empty()) throw DataError("eval: empty manifest " + a.data_path);
  OutputLock lock(a.out_dir);

  EvalResult result;
  std::vector<AuditRecord> audit;
  std::string label;
  if (a.oracle) {
    // Replay the ground truth as confidence-1 detections: a scorer self-check.
    std::vector<std::vector<Detection>> dets(manifest.images.size());
    std::vector<std::vector<GroundTruthBox>> gt(manifest.images.size());
    std::vector<std::string> names;
    for (size_t i = 0; i < manifest.images.size(); ++i) {
      const AnnotatedImage& rec = manifest.images[i];
      names.push_back(rec.name);
      for (const AnnotatedObject& o : rec.objects) {
        const int cls = class_id_of(o.class_name);
        if (cls < 0) throw DataError("eval: unknown class " + o.class_name);
        gt[i].push_back({o.x_min, o.y_min, o.x_max, o.y_max, cls});
        dets[i].push_back({o.x_min, o.y_min, o.x_max, o.y_max, cls, 1.0});
      }
    }
    result = evaluate_detections(dets, gt, a.thresholds, &audit, &names);
    label = "oracle";
  } else {
    LoadedCheckpoint loaded = load_checkpoint(a.checkpoint_path);
    if (loaded.model.cfg.num_classes != static_cast<int>(kClassNames.size()))
      throw DataError("eval: checkpoint predicts " +
                      std::to_string(loaded.model.cfg.num_classes) +
                      " classes but the dataset uses the fixed " +
                      std::to_string(kClassNames.size()) + "-class list");
    result = evaluate(loaded.model, manifest, a.thresholds, &audit);
    label = std::filesystem::path(a.checkpoint_path).stem().string();
  }

  AblationTable table;
  table.title = "evaluation";
  AblationRow row;
  row.label = label;
  row.result = result;
  table.rows.push_back(row);

  detail::write_text_file(a.out_dir + "/eval.md", render_table_markdown(table));
  detail::write_text_file(a.out_dir + "/eval.csv", render_table_csv(table));
  detail::write_text_file(a.out_dir + "/detections.jsonl", audit_to_jsonl(audit));
  detail::write_text_file(a.out_dir + "/eval.json",
                          detail::eval_result_to_json(result).dump(2) + "\n");
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", result.map * 100);
  std::cout << "eval: mAP " << buf << " over " << manifest.images.size() << " images; reports in "
            << a.out_dir << "\n";
}

// ---------------------------------------------------------------------------
// detect

struct DetectArgs {
  std::string checkpoint_path;
  std::string image_path;
  std::string out_dir;
  real conf = 0.25;
  real nms_iou = 0.45;
};

inline void cmd_detect(const DetectArgs& a) {
  Image original = read_ppm(a.image_path);
  LoadedCheckpoint loaded = load_checkpoint(a.checkpoint_path);
  OutputLock lock(a.out_dir);

  const int S = loaded.model.cfg.input_size;
  const auto [canvas, tf] = letterbox(original, S);
  const Tensor chw = to_tensor(canvas);
  Tensor batch({1, 3, S, S});
  std::copy(chw.data.begin(), chw.data.end(), batch.data.begin());

  Tape tape;
  auto fr = model_forward(loaded.model, tape, tape.leaf(std::move(batch)), /*training=*/false);
  const std::array<Tensor, 3> raw{fr.raw[0].value(), fr.raw[1].value(), fr.raw[2].value()};
  auto decoded = decode_predictions(raw, loaded.model.cfg, a.conf);
  std::vector<Detection> dets = non_max_suppression(std::move(decoded[0]), a.nms_iou);
  for (Detection& d : dets)
    d = detail::detection_to_original(d, tf, original.width, original.height);

  std::string jsonl;
  for (const Detection& d : dets) {
    nlohmann::ordered_json j;
    j["class"] = kClassNames[static_cast<size_t>(d.class_id)];
    j["confidence"] = d.confidence;
    j["x_min"] = d.x_min;
    j["y_min"] = d.y_min;
    j["x_max"] = d.x_max;
    j["y_max"] = d.y_max;
    jsonl += j.dump();
    jsonl += '\n';
  }
  detail::write_text_file(a.out_dir + "/detections.jsonl", jsonl);

  Image annotated = original;
  detail::annotate(annotated, dets);
  write_ppm(annotated, a.out_dir + "/annotated.ppm");
  std::cout << "detect: " << dets.size() << " detections; outputs in " << a.out_dir << "\n";
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
  std::string spec_path;
  std::string output_override;
};

inline void cmd_ablate(const AblateArgs& a) {
  RunConfig rc = resolve_run_config(load_run_config(a.spec_path));
  if (!a.output_override.empty()) rc.output_dir = a.output_override;
  validate_run_config(rc);

  bool matrix = false;
  bool with_domain = false;
  std::vector<AblationVariant> custom;
  {
    std::ifstream in(a.spec_path);
    nlohmann::json doc;
    in >> doc;
    if (doc.contains("ablation")) {
      const auto& ab = doc.at("ablation");
      matrix = ab.value("matrix", false);
      with_domain = ab.value("with_domain", false);
      if (ab.contains("variants")) {
        const nlohmann::json base_json = model_config_to_json(rc.model);
        for (const auto& v : ab.at("variants")) {
          nlohmann::json merged = base_json;
          if (v.contains("model")) merged.update(v.at("model"));
          custom.push_back({v.at("label").get<std::string>(), model_config_from_json(merged)});
        }
      }
    }
  }

  OutputLock lock(rc.output_dir);
  save_run_config(rc, rc.output_dir + "/config.resolved.json");

  const DatasetManifest train_manifest = load_manifest(rc.train_manifest);
  const DatasetManifest val_manifest =
      rc.val_manifest.empty() ? train_manifest : load_manifest(rc.val_manifest);
  const int S = rc.model.input_size;

  const auto original_train = detail::examples_from_manifest(train_manifest, S);
  const auto original_val = detail::examples_from_manifest(val_manifest, S);
  std::optional<std::vector<TrainExample>> augmented_train, augmented_val;
  const auto augment = [&](const DatasetManifest& m) {
    return detail::examples_from_manifest(
        build_augmented_dataset(m, rc.augment_strengths, rc.seed), S);
  };

  struct Cell {
    bool augmented, domain;
  };
  std::vector<Cell> cells;
  if (matrix)  // four-table layout: data axis x domain ladder axis
    cells = {{false, false}, {true, false}, {false, true}, {true, true}};
  else
    cells = {{rc.data_mode == "augmented", with_domain}};

  for (size_t k = 0; k < cells.size(); ++k) {
    const Cell cell = cells[k];
    AblationSpec spec;
    spec.base = rc.model;
    spec.train = rc.train;
    spec.thresholds = rc.eval;
    spec.augmented = cell.augmented;
    spec.with_domain = cell.domain;
    spec.augment_strengths = rc.augment_strengths;
    if (!matrix) {
      spec.variants = custom;
      spec.augmented_validation = rc.augmented_validation;
    } else {
      // The augmented tables score on augmented validation data, so both axes
      // of the matrix change together the way the reference tables do.
      spec.augmented_validation = cell.augmented;
    }

    if (cell.augmented) {
      if (!augmented_train) augmented_train = augment(train_manifest);
      if (!augmented_val) augmented_val = augment(val_manifest);
    }
    const auto& train_set = cell.augmented ? *augmented_train : original_train;
    const auto& eval_set = spec.augmented_validation ? *augmented_val : original_val;

    const std::string stem = "table" + std::to_string(k + 1);
    const AblationTable table =
        run_ablation(spec, train_set, eval_set, rc.output_dir + "/" + stem);
    detail::write_text_file(rc.output_dir + "/" + stem + ".md", render_table_markdown(table));
    detail::write_text_file(rc.output_dir + "/" + stem + ".csv", render_table_csv(table));
    std::cout << "ablate: " << stem << " (" << table.title << ") has " << table.rows.size()
              << " rows\n";
  }
}

// ---------------------------------------------------------------------------
// Argument parsing and exit-code discipline: 0 success, 1 validation error,
// 2 runtime failure.

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"MARS underwater object detector"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic labelled dataset");
  synth_cmd->add_option("--out", synth.out_dir, "Output directory")->required();
  synth_cmd->add_option("--images", synth.images, "Number of images");
  synth_cmd->add_option("--size", synth.size, "Square image size in pixels");
  synth_cmd->add_option("--seed", synth.seed, "Generator seed");
  synth_cmd->add_flag("--augment", synth.augment, "Also write the 7-domain expansion");
  synth_cmd->add_option("--strengths", synth.strengths,
                        "Six augmentation strengths in [0,1]")
      ->expected(6);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a run config");
  train_cmd->add_option("--config", train.config_path, "Run config JSON")->required();
  train_cmd->add_option("--out", train.output_override, "Override the config output_dir");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint_path, "Checkpoint file");
  eval_cmd->add_option("--data", eval_args.data_path, "Dataset manifest JSON")->required();
  eval_cmd->add_option("--out", eval_args.out_dir, "Output directory")->required();
  eval_cmd->add_option("--conf", eval_args.thresholds.conf, "Confidence floor");
  eval_cmd->add_option("--nms", eval_args.thresholds.nms_iou, "NMS IoU threshold");
  eval_cmd->add_option("--match-iou", eval_args.thresholds.match_iou, "AP matching IoU");
  eval_cmd->add_flag("--eleven-point", eval_args.thresholds.eleven_point,
                     "Use 11-point interpolated AP");
  eval_cmd->add_flag("--oracle", eval_args.oracle,
                     "Replay ground truth as detections instead of running a model");

  DetectArgs detect;
  auto* detect_cmd = app.add_subcommand("detect", "Run detection on one image");
  detect_cmd->add_option("--checkpoint", detect.checkpoint_path, "Checkpoint file")->required();
  detect_cmd->add_option("--image", detect.image_path, "Input PPM image")->required();
  detect_cmd->add_option("--out", detect.out_dir, "Output directory")->required();
  detect_cmd->add_option("--conf", detect.conf, "Confidence threshold");
  detect_cmd->add_option("--nms", detect.nms_iou, "NMS IoU threshold");

  AblateArgs ablate;
  auto* ablate_cmd = app.add_subcommand("ablate", "Run an ablation study from a spec");
  ablate_cmd->add_option("--spec", ablate.spec_path, "Ablation spec JSON")->required();
  ablate_cmd->add_option("--out", ablate.output_override, "Override the spec output_dir");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // bad usage is a validation error
  }

  try {
    if (synth_cmd->parsed()) {
      cmd_synth(synth);
    } else if (train_cmd->parsed()) {
      cmd_train(train);
    } else if (eval_cmd->parsed()) {
      if (!eval_args.oracle && eval_args.checkpoint_path.empty())
        throw ConfigError("eval: --checkpoint is required unless --oracle is given");
      cmd_eval(eval_args);
    } else if (detect_cmd->parsed()) {
      cmd_detect(detect);
    } else if (ablate_cmd->parsed()) {
      cmd_ablate(ablate);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

inline int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const auto& s : args) argv.push_back(s.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace mars
