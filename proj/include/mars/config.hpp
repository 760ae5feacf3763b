#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mars/data.hpp"
#include "mars/detector.hpp"
#include "mars/training.hpp"

namespace mars {

inline nlohmann::json model_config_to_json(const ModelConfig& m) {
  nlohmann::json j;
  j["backbone"] = m.backbone;
  j["input_size"] = m.input_size;
  j["num_classes"] = m.num_classes;
  j["num_domains"] = m.num_domains;
  j["use_residual"] = m.use_residual;
  j["use_channel_attention"] = m.use_channel_attention;
  j["use_residual_attention"] = m.use_residual_attention;
  j["use_multi_scale_attention"] = m.use_multi_scale_attention;
  j["use_domain"] = m.use_domain;
  j["attention_reduction"] = m.attention_reduction;
  j["domain_feat_channels"] = m.domain_feat_channels;
  auto& anchors = j["anchors"] = nlohmann::json::array();
  for (const auto& a : m.anchors) anchors.push_back({a[0], a[1]});
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.backbone = j.value("backbone", m.backbone);
  m.input_size = j.value("input_size", m.input_size);
  m.num_classes = j.value("num_classes", m.num_classes);
  m.num_domains = j.value("num_domains", m.num_domains);
  m.use_residual = j.value("use_residual", m.use_residual);
  m.use_channel_attention = j.value("use_channel_attention", m.use_channel_attention);
  m.use_residual_attention = j.value("use_residual_attention", m.use_residual_attention);
  m.use_multi_scale_attention = j.value("use_multi_scale_attention", m.use_multi_scale_attention);
  m.use_domain = j.value("use_domain", m.use_domain);
  m.attention_reduction = j.value("attention_reduction", m.attention_reduction);
  m.domain_feat_channels = j.value("domain_feat_channels", m.domain_feat_channels);
  if (j.contains("anchors")) {
    const auto& anchors = j.at("anchors");
    if (anchors.size() != m.anchors.size())
      throw ConfigError("model config: expected " + std::to_string(m.anchors.size()) +
                        " anchors, got " + std::to_string(anchors.size()));
    for (size_t i = 0; i < m.anchors.size(); ++i) {
      m.anchors[i][0] = anchors.at(i).at(0).get<real>();
      m.anchors[i][1] = anchors.at(i).at(1).get<real>();
    }
  }
  return m;
}

inline nlohmann::json train_config_to_json(const TrainConfig& t) {
  nlohmann::json j;
  j["learning_rate"] = t.learning_rate;
  j["batch_size"] = t.batch_size;
  j["epochs"] = t.epochs;
  j["lambda_domain"] = t.lambda_domain;
  j["ignore_iou_threshold"] = t.ignore_iou_threshold;
  j["use_gradient_reversal"] = t.use_gradient_reversal;
  j["clip_grad_norm"] = t.clip_grad_norm;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig t;
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.epochs = j.value("epochs", t.epochs);
  t.lambda_domain = j.value("lambda_domain", t.lambda_domain);
  t.ignore_iou_threshold = j.value("ignore_iou_threshold", t.ignore_iou_threshold);
  t.use_gradient_reversal = j.value("use_gradient_reversal", t.use_gradient_reversal);
  t.clip_grad_norm = j.value("clip_grad_norm", t.clip_grad_norm);
  return t;
}

struct EvalThresholds {
  real conf = 0.05;      // low floor so the PR curve is populated
  real nms_iou = 0.45;
  real match_iou = 0.5;
  bool eleven_point = false;  // default AP is all-point interpolation
};

inline nlohmann::json eval_thresholds_to_json(const EvalThresholds& e) {
  nlohmann::json j;
  j["conf_threshold"] = e.conf;
  j["nms_iou"] = e.nms_iou;
  j["match_iou"] = e.match_iou;
  j["eleven_point"] = e.eleven_point;
  return j;
}

inline EvalThresholds eval_thresholds_from_json(const nlohmann::json& j) {
  EvalThresholds e;
  e.conf = j.value("conf_threshold", e.conf);
  e.nms_iou = j.value("nms_iou", e.nms_iou);
  e.match_iou = j.value("match_iou", e.match_iou);
  e.eleven_point = j.value("eleven_point", e.eleven_point);
  return e;
}

/// One declarative document driving a whole run: model, trainer, datasets,
/// evaluation thresholds, and output placement.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  EvalThresholds eval;
  std::string train_manifest;
  std::string val_manifest;           // optional
  std::string data_mode = "original";  // or "augmented"
  std::vector<real> augment_strengths = std::vector<real>(6, 0.7);
  bool augmented_validation = false;
  std::string output_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig rc;
  if (j.contains("model")) rc.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) rc.train = train_config_from_json(j.at("train"));
  if (j.contains("eval")) rc.eval = eval_thresholds_from_json(j.at("eval"));
  if (j.contains("data")) {
    const auto& d = j.at("data");
    rc.train_manifest = d.value("train_manifest", "");
    rc.val_manifest = d.value("val_manifest", "");
    rc.data_mode = d.value("mode", rc.data_mode);
    if (d.contains("augment_strengths"))
      rc.augment_strengths = d.at("augment_strengths").get<std::vector<real>>();
    rc.augmented_validation = d.value("augmented_validation", rc.augmented_validation);
  }
  rc.output_dir = j.value("output_dir", "");
  if (j.contains("seed")) {
    rc.seed = j.at("seed").get<std::uint64_t>();
    rc.seed_set = true;
  }
  return rc;
}

/// Serializes with every default materialized; nlohmann::json orders keys
/// alphabetically, so resolved documents are canonical byte-for-byte.
inline nlohmann::json run_config_to_json(const RunConfig& rc) {
  nlohmann::json j;
  j["model"] = model_config_to_json(rc.model);
  j["train"] = train_config_to_json(rc.train);
  j["eval"] = eval_thresholds_to_json(rc.eval);
  j["data"]["train_manifest"] = rc.train_manifest;
  j["data"]["val_manifest"] = rc.val_manifest;
  j["data"]["mode"] = rc.data_mode;
  j["data"]["augment_strengths"] = rc.augment_strengths;
  j["data"]["augmented_validation"] = rc.augmented_validation;
  j["output_dir"] = rc.output_dir;
  j["seed"] = rc.seed;
  return j;
}

/// Fills environment overrides. The MARS_SEED variable wins over the document.
inline RunConfig resolve_run_config(RunConfig rc) {
  if (const char* env = std::getenv("MARS_SEED")) {
    rc.seed = std::strtoull(env, nullptr, 10);
    rc.seed_set = true;
  }
  rc.train.seed = rc.seed;
  return rc;
}

/// Collects every violation instead of stopping at the first.
inline std::vector<std::string> run_config_violations(const RunConfig& rc,
                                                      bool check_paths = true) {
  std::vector<std::string> v;
  if (!rc.seed_set) v.push_back("seed: mandatory field is missing");
  try {
    rc.model.validate();
  } catch (const ConfigError& e) {
    v.emplace_back(e.what());
  }
  try {
    rc.train.validate();
  } catch (const ConfigError& e) {
    v.emplace_back(e.what());
  }
  if (rc.data_mode != "original" && rc.data_mode != "augmented")
    v.push_back("data.mode: must be \"original\" or \"augmented\", got \"" + rc.data_mode +
                "\"");
  if (rc.augment_strengths.size() != 6)
    v.push_back("data.augment_strengths: expected 6 values");
  for (real s : rc.augment_strengths)
    if (!(s >= 0) || !(s <= 1)) {
      v.push_back("data.augment_strengths: values must lie in [0,1]");
      break;
    }
  if (!(rc.eval.conf >= 0) || !(rc.eval.conf <= 1))
    v.push_back("eval.conf_threshold: must lie in [0,1]");
  if (!(rc.eval.nms_iou > 0) || !(rc.eval.nms_iou < 1))
    v.push_back("eval.nms_iou: must lie in (0,1)");
  if (!(rc.eval.match_iou > 0) || !(rc.eval.match_iou < 1))
    v.push_back("eval.match_iou: must lie in (0,1)");
  if (rc.output_dir.empty()) v.push_back("output_dir: mandatory field is missing");
  if (check_paths) {
    if (rc.train_manifest.empty())
      v.push_back("data.train_manifest: mandatory field is missing");
    else if (!std::filesystem::exists(rc.train_manifest))
      v.push_back("data.train_manifest: no such file: " + rc.train_manifest);
    if (!rc.val_manifest.empty() && !std::filesystem::exists(rc.val_manifest))
      v.push_back("data.val_manifest: no such file: " + rc.val_manifest);
  }
  return v;
}

inline void validate_run_config(const RunConfig& rc, bool check_paths = true) {
  const auto v = run_config_violations(rc, check_paths);
  if (v.empty()) return;
  std::string msg = "invalid run config:";
  for (const auto& line : v) msg += "\n  - " + line;
  throw ConfigError(msg);
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_run_config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("load_run_config: " + path + ": " + e.what());
  }
  try {
    return run_config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("load_run_config: " + path + ": " + e.what());
  }
}

inline void save_run_config(const RunConfig& rc, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_run_config: cannot open " + path + " for writing");
  out << run_config_to_json(rc).dump(2) << "\n";
  if (!out) throw IoError("save_run_config: failed writing " + path);
}

}  // namespace mars
