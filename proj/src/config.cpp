#include "ikdmil/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "ikdmil/common.hpp"

namespace ikdmil {

namespace {

using nlohmann::json;

std::string join_path(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

[[noreturn]] void type_error(const std::string& path, const char* expected, const json& v) {
  throw ConfigError("config key '" + path + "': expected " + expected + ", got " +
                    std::string(v.type_name()));
}

void reject_unknown_keys(const json& obj, const std::string& prefix,
                         std::initializer_list<const char*> known) {
  const std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("unknown config key '" + join_path(prefix, key) + "'");
    }
  }
}

void get_double(const json& obj, const std::string& prefix, const char* key, double& target) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_number()) type_error(join_path(prefix, key), "number", v);
  target = v.get<double>();
}

void get_int(const json& obj, const std::string& prefix, const char* key, int& target) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_number_integer()) type_error(join_path(prefix, key), "integer", v);
  target = v.get<int>();
}

void get_u64(const json& obj, const std::string& prefix, const char* key, uint64_t& target) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<int64_t>() < 0)) {
    type_error(join_path(prefix, key), "non-negative integer", v);
  }
  target = v.get<uint64_t>();
}

void get_bool(const json& obj, const std::string& prefix, const char* key, bool& target) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_boolean()) type_error(join_path(prefix, key), "boolean", v);
  target = v.get<bool>();
}

void get_string(const json& obj, const std::string& prefix, const char* key,
                std::string& target) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_string()) type_error(join_path(prefix, key), "string", v);
  target = v.get<std::string>();
}

void get_color(const json& obj, const std::string& prefix, const char* key,
               std::array<double, 3>& target) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_array() || v.size() != 3) {
    type_error(join_path(prefix, key), "array of 3 numbers", v);
  }
  for (size_t i = 0; i < 3; ++i) {
    if (!v[i].is_number()) type_error(join_path(prefix, key), "array of 3 numbers", v);
    target[i] = v[i].get<double>();
  }
}

const json& expect_object(const json& parent, const std::string& path) {
  if (!parent.is_object()) type_error(path, "object", parent);
  return parent;
}

void parse_backbone(const json& obj, const std::string& prefix, BackboneSpec& spec) {
  reject_unknown_keys(obj, prefix, {"name", "input_size", "block_channel_plan"});
  get_string(obj, prefix, "name", spec.name);
  get_int(obj, prefix, "input_size", spec.input_size);
  if (obj.contains("block_channel_plan")) {
    const json& plan = obj.at("block_channel_plan");
    const std::string path = join_path(prefix, "block_channel_plan");
    if (!plan.is_array()) type_error(path, "array of integer arrays", plan);
    spec.block_channel_plan.clear();
    for (const json& block : plan) {
      if (!block.is_array()) type_error(path, "array of integer arrays", plan);
      std::vector<int> widths;
      for (const json& w : block) {
        if (!w.is_number_integer()) type_error(path, "array of integer arrays", plan);
        widths.push_back(w.get<int>());
      }
      spec.block_channel_plan.push_back(std::move(widths));
    }
  }
}

void parse_train(const json& obj, const std::string& prefix, TrainConfig& train) {
  reject_unknown_keys(obj, prefix,
                      {"learning_rate", "weight_decay", "batch_size", "mil_epochs",
                       "fusion_fit_epochs", "switch_period_epochs", "total_distill_epochs",
                       "seed", "distill_structure", "role_switch", "switch_on_validation",
                       "val_fraction"});
  get_double(obj, prefix, "learning_rate", train.learning_rate);
  get_double(obj, prefix, "weight_decay", train.weight_decay);
  get_int(obj, prefix, "batch_size", train.batch_size);
  get_int(obj, prefix, "mil_epochs", train.mil_epochs);
  get_int(obj, prefix, "fusion_fit_epochs", train.fusion_fit_epochs);
  get_int(obj, prefix, "switch_period_epochs", train.switch_period_epochs);
  get_int(obj, prefix, "total_distill_epochs", train.total_distill_epochs);
  get_u64(obj, prefix, "seed", train.seed);
  if (obj.contains("distill_structure")) {
    std::string s;
    get_string(obj, prefix, "distill_structure", s);
    train.distill_structure = parse_structure(s);
  }
  get_bool(obj, prefix, "role_switch", train.role_switch);
  get_bool(obj, prefix, "switch_on_validation", train.switch_on_validation);
  get_double(obj, prefix, "val_fraction", train.val_fraction);
}

void parse_loss(const json& obj, const std::string& prefix, LossConfig& loss) {
  reject_unknown_keys(obj, prefix, {"dice_epsilon", "log_epsilon", "a"});
  get_double(obj, prefix, "dice_epsilon", loss.dice_epsilon);
  get_double(obj, prefix, "log_epsilon", loss.log_epsilon);
  get_double(obj, prefix, "a", loss.a);
}

void parse_metrics(const json& obj, const std::string& prefix, MetricsConfig& metrics) {
  reject_unknown_keys(obj, prefix, {"threshold", "both_empty_score", "empty_pred_penalty"});
  get_double(obj, prefix, "threshold", metrics.threshold);
  get_double(obj, prefix, "both_empty_score", metrics.both_empty_score);
  if (obj.contains("empty_pred_penalty")) {
    const json& v = obj.at("empty_pred_penalty");
    if (v.is_null()) {
      metrics.empty_pred_penalty.reset();
    } else if (v.is_number()) {
      metrics.empty_pred_penalty = v.get<double>();
    } else {
      type_error(join_path(prefix, "empty_pred_penalty"), "number or null", v);
    }
  }
}

void parse_texture(const json& obj, const std::string& prefix, TextureParams& tex) {
  reject_unknown_keys(obj, prefix,
                      {"background_base", "foreground_base", "contrast", "background_noise",
                       "foreground_noise", "lighting_amplitude", "speckle_density",
                       "speckle_strength", "speckle_radius"});
  get_color(obj, prefix, "background_base", tex.background_base);
  get_color(obj, prefix, "foreground_base", tex.foreground_base);
  get_double(obj, prefix, "contrast", tex.contrast);
  get_double(obj, prefix, "background_noise", tex.background_noise);
  get_double(obj, prefix, "foreground_noise", tex.foreground_noise);
  get_double(obj, prefix, "lighting_amplitude", tex.lighting_amplitude);
  get_double(obj, prefix, "speckle_density", tex.speckle_density);
  get_double(obj, prefix, "speckle_strength", tex.speckle_strength);
  get_int(obj, prefix, "speckle_radius", tex.speckle_radius);
}

void parse_blobs(const json& obj, const std::string& prefix, BlobParams& blobs) {
  reject_unknown_keys(obj, prefix, {"count_min", "count_max", "radius_min", "radius_max"});
  get_int(obj, prefix, "count_min", blobs.count_min);
  get_int(obj, prefix, "count_max", blobs.count_max);
  get_double(obj, prefix, "radius_min", blobs.radius_min);
  get_double(obj, prefix, "radius_max", blobs.radius_max);
}

void parse_synth(const json& obj, const std::string& prefix, SynthSpec& synth) {
  reject_unknown_keys(obj, prefix,
                      {"count_pos", "count_neg", "image_size", "seed", "texture", "blobs"});
  get_int(obj, prefix, "count_pos", synth.count_pos);
  get_int(obj, prefix, "count_neg", synth.count_neg);
  get_int(obj, prefix, "image_size", synth.image_size);
  get_u64(obj, prefix, "seed", synth.seed);
  if (obj.contains("texture")) {
    const std::string p = join_path(prefix, "texture");
    parse_texture(expect_object(obj.at("texture"), p), p, synth.texture);
  }
  if (obj.contains("blobs")) {
    const std::string p = join_path(prefix, "blobs");
    parse_blobs(expect_object(obj.at("blobs"), p), p, synth.blobs);
  }
}

void parse_filter(const json& obj, const std::string& prefix, FilterSpec& filter) {
  reject_unknown_keys(obj, prefix,
                      {"background_drop_threshold", "white_intensity_cutoff", "target_size"});
  get_double(obj, prefix, "background_drop_threshold", filter.background_drop_threshold);
  get_double(obj, prefix, "white_intensity_cutoff", filter.white_intensity_cutoff);
  get_int(obj, prefix, "target_size", filter.target_size);
}

}  // namespace

void RunConfig::validate() const {
  if (run_name.empty()) throw ConfigError("run_name must not be empty");
  if (repeats < 1) throw ConfigError("repeats must be at least 1");
  BackboneSpec resolved = backbone;
  resolved.resolve();
  resolved.validate();
  train.validate();
  synth.validate();
  filter.validate();
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::string trimmed = text;
  const size_t first = trimmed.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) {
    cfg.validate();  // empty file: every default applies
    return cfg;
  }
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config root must be a JSON object");
  reject_unknown_keys(root, "",
                      {"run_name", "output_dir", "repeats", "backbone", "train", "loss",
                       "metrics", "synth", "filter"});
  get_string(root, "", "run_name", cfg.run_name);
  get_string(root, "", "output_dir", cfg.output_dir);
  get_int(root, "", "repeats", cfg.repeats);
  if (root.contains("backbone")) {
    parse_backbone(expect_object(root.at("backbone"), "backbone"), "backbone", cfg.backbone);
  }
  if (root.contains("train")) {
    parse_train(expect_object(root.at("train"), "train"), "train", cfg.train);
  }
  if (root.contains("loss")) {
    parse_loss(expect_object(root.at("loss"), "loss"), "loss", cfg.train.loss);
  }
  if (root.contains("metrics")) {
    parse_metrics(expect_object(root.at("metrics"), "metrics"), "metrics", cfg.train.metrics);
  }
  if (root.contains("synth")) {
    parse_synth(expect_object(root.at("synth"), "synth"), "synth", cfg.synth);
  }
  if (root.contains("filter")) {
    parse_filter(expect_object(root.at("filter"), "filter"), "filter", cfg.filter);
  }
  cfg.validate();
  return cfg;
}

RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_config_text(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string serialize_config(const RunConfig& cfg) {
  json root;
  root["run_name"] = cfg.run_name;
  root["output_dir"] = cfg.output_dir;
  root["repeats"] = cfg.repeats;
  json backbone;
  backbone["name"] = cfg.backbone.name;
  backbone["input_size"] = cfg.backbone.input_size;
  if (!cfg.backbone.block_channel_plan.empty()) {
    backbone["block_channel_plan"] = cfg.backbone.block_channel_plan;
  }
  root["backbone"] = backbone;
  json train;
  train["learning_rate"] = cfg.train.learning_rate;
  train["weight_decay"] = cfg.train.weight_decay;
  train["batch_size"] = cfg.train.batch_size;
  train["mil_epochs"] = cfg.train.mil_epochs;
  train["fusion_fit_epochs"] = cfg.train.fusion_fit_epochs;
  train["switch_period_epochs"] = cfg.train.switch_period_epochs;
  train["total_distill_epochs"] = cfg.train.total_distill_epochs;
  train["seed"] = cfg.train.seed;
  train["distill_structure"] = structure_name(cfg.train.distill_structure);
  train["role_switch"] = cfg.train.role_switch;
  train["switch_on_validation"] = cfg.train.switch_on_validation;
  train["val_fraction"] = cfg.train.val_fraction;
  root["train"] = train;
  json loss;
  loss["dice_epsilon"] = cfg.train.loss.dice_epsilon;
  loss["log_epsilon"] = cfg.train.loss.log_epsilon;
  loss["a"] = cfg.train.loss.a;
  root["loss"] = loss;
  json metrics;
  metrics["threshold"] = cfg.train.metrics.threshold;
  metrics["both_empty_score"] = cfg.train.metrics.both_empty_score;
  if (cfg.train.metrics.empty_pred_penalty.has_value()) {
    metrics["empty_pred_penalty"] = *cfg.train.metrics.empty_pred_penalty;
  } else {
    metrics["empty_pred_penalty"] = nullptr;
  }
  root["metrics"] = metrics;
  json synth;
  synth["count_pos"] = cfg.synth.count_pos;
  synth["count_neg"] = cfg.synth.count_neg;
  synth["image_size"] = cfg.synth.image_size;
  synth["seed"] = cfg.synth.seed;
  json texture;
  texture["background_base"] = cfg.synth.texture.background_base;
  texture["foreground_base"] = cfg.synth.texture.foreground_base;
  texture["contrast"] = cfg.synth.texture.contrast;
  texture["background_noise"] = cfg.synth.texture.background_noise;
  texture["foreground_noise"] = cfg.synth.texture.foreground_noise;
  texture["lighting_amplitude"] = cfg.synth.texture.lighting_amplitude;
  texture["speckle_density"] = cfg.synth.texture.speckle_density;
  texture["speckle_strength"] = cfg.synth.texture.speckle_strength;
  texture["speckle_radius"] = cfg.synth.texture.speckle_radius;
  synth["texture"] = texture;
  json blobs;
  blobs["count_min"] = cfg.synth.blobs.count_min;
  blobs["count_max"] = cfg.synth.blobs.count_max;
  blobs["radius_min"] = cfg.synth.blobs.radius_min;
  blobs["radius_max"] = cfg.synth.blobs.radius_max;
  synth["blobs"] = blobs;
  root["synth"] = synth;
  json filter;
  filter["background_drop_threshold"] = cfg.filter.background_drop_threshold;
  filter["white_intensity_cutoff"] = cfg.filter.white_intensity_cutoff;
  filter["target_size"] = cfg.filter.target_size;
  root["filter"] = filter;
  return root.dump(2);
}

}  // namespace ikdmil
