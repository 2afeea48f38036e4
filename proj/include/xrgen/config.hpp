#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xrgen/bbox.hpp"
#include "xrgen/caption.hpp"
#include "xrgen/error.hpp"
#include "xrgen/trainer.hpp"

namespace xrgen {

enum class AggregationMode { max, single };

/// Every knob of a run. Defaults are the reference hyperparameters; desk-scale
/// runs override sizes and the learning rate through a config file.
struct RunConfig {
  std::size_t hidden = 256;
  std::size_t feature_size = 1024;
  std::size_t min_freq = 5;
  std::size_t unroll = 33;
  std::size_t batch_size = 20;
  double learning_rate = 1e-5;
  std::size_t max_epochs = 50;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  FeatureMode feature_mode = FeatureMode::cnn;
  std::string features_path;
  AggregationMode aggregation = AggregationMode::max;
  bool bbox = false;
  DecodeMode decode = DecodeMode::greedy;
  double temperature = 1.0;
  std::size_t max_len = 32;
  std::size_t image_size = 224;
  bool augment = true;
  bool freeze_cnn = false;
  std::vector<std::size_t> cnn_channels{8, 16, 32};
  LossNorm loss_norm = LossNorm::mean_over_steps;
  std::size_t bbox_epochs = 100;
  double bbox_learning_rate = 1e-3;
  std::size_t bbox_max_pairs = 231;
  double target_val_loss = 0.0;

  ModelConfig model_config(std::size_t vocab_size) const {
    ModelConfig m;
    m.hidden = hidden;
    m.feature_size = feature_size;
    m.vocab_size = vocab_size;
    m.feature_mode = feature_mode;
    m.cnn.channels = cnn_channels;
    m.cnn.out_features = feature_size;
    return m;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.batch_size = batch_size;
    t.learning_rate = learning_rate;
    t.max_epochs = max_epochs;
    t.patience = patience;
    t.loss_norm = loss_norm;
    t.freeze_cnn = freeze_cnn;
    t.target_val_loss = target_val_loss;
    return t;
  }

  BBoxConfig bbox_config() const {
    BBoxConfig b;
    b.cnn.channels = cnn_channels;
    b.input_size = image_size;
    b.epochs = bbox_epochs;
    b.batch_size = batch_size;
    b.learning_rate = bbox_learning_rate;
    return b;
  }

  void validate() const {
    if (hidden == 0 || feature_size == 0) throw UsageError("config: hidden and feature_size must be positive");
    if (unroll < 4) throw UsageError("config: unroll must be >= 4");
    if (batch_size == 0) throw UsageError("config: batch_size must be positive");
    if (!(learning_rate >= 0.0)) throw UsageError("config: learning_rate must be >= 0");
    if (image_size < kMinImageSide) throw UsageError("config: image_size must be >= 32");
    if (decode == DecodeMode::sample && !(temperature > 0.0)) throw UsageError("config: temperature must be > 0");
    if (feature_mode == FeatureMode::imported && features_path.empty()) {
      throw UsageError("config: feature_mode 'imported' needs features_path");
    }
    if (feature_mode == FeatureMode::imported && bbox) {
      throw UsageError("config: bbox cropping needs feature_mode 'cnn'");
    }
    if (cnn_channels.empty()) throw UsageError("config: cnn_channels must not be empty");
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  return nlohmann::json{
      {"hidden", c.hidden},
      {"feature_size", c.feature_size},
      {"min_freq", c.min_freq},
      {"unroll", c.unroll},
      {"batch_size", c.batch_size},
      {"learning_rate", c.learning_rate},
      {"max_epochs", c.max_epochs},
      {"patience", c.patience},
      {"seed", c.seed},
      {"feature_mode", c.feature_mode == FeatureMode::cnn ? "cnn" : "imported"},
      {"features_path", c.features_path},
      {"aggregation", c.aggregation == AggregationMode::max ? "max" : "single"},
      {"bbox", c.bbox ? "on" : "off"},
      {"decode", c.decode == DecodeMode::greedy ? "greedy" : "sample"},
      {"temperature", c.temperature},
      {"max_len", c.max_len},
      {"image_size", c.image_size},
      {"augment", c.augment},
      {"freeze_cnn", c.freeze_cnn},
      {"cnn_channels", c.cnn_channels},
      {"loss", c.loss_norm == LossNorm::sum ? "sum" : "mean"},
      {"bbox_epochs", c.bbox_epochs},
      {"bbox_learning_rate", c.bbox_learning_rate},
      {"bbox_max_pairs", c.bbox_max_pairs},
      {"target_val_loss", c.target_val_loss},
  };
}

/// Overlays the keys present in `j` onto `base`. Unknown keys are rejected.
inline RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  if (!j.is_object()) throw UsageError("config: expected a JSON object");
  auto choice = [](const nlohmann::json& v, const char* key, const char* a, const char* b) {
    const std::string s = v.get<std::string>();
    if (s != a && s != b) throw UsageError(std::string("config: '") + key + "' must be '" + a + "' or '" + b + "'");
    return s == a;
  };
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "hidden") base.hidden = v.get<std::size_t>();
      else if (key == "feature_size") base.feature_size = v.get<std::size_t>();
      else if (key == "min_freq") base.min_freq = v.get<std::size_t>();
      else if (key == "unroll") base.unroll = v.get<std::size_t>();
      else if (key == "batch_size") base.batch_size = v.get<std::size_t>();
      else if (key == "learning_rate") base.learning_rate = v.get<double>();
      else if (key == "max_epochs") base.max_epochs = v.get<std::size_t>();
      else if (key == "patience") base.patience = v.get<std::size_t>();
      else if (key == "seed") base.seed = v.get<std::uint64_t>();
      else if (key == "feature_mode") base.feature_mode = choice(v, "feature_mode", "cnn", "imported") ? FeatureMode::cnn : FeatureMode::imported;
      else if (key == "features_path") base.features_path = v.get<std::string>();
      else if (key == "aggregation") base.aggregation = choice(v, "aggregation", "max", "single") ? AggregationMode::max : AggregationMode::single;
      else if (key == "bbox") base.bbox = choice(v, "bbox", "on", "off");
      else if (key == "decode") base.decode = choice(v, "decode", "greedy", "sample") ? DecodeMode::greedy : DecodeMode::sample;
      else if (key == "temperature") base.temperature = v.get<double>();
      else if (key == "max_len") base.max_len = v.get<std::size_t>();
      else if (key == "image_size") base.image_size = v.get<std::size_t>();
      else if (key == "augment") base.augment = v.get<bool>();
      else if (key == "freeze_cnn") base.freeze_cnn = v.get<bool>();
      else if (key == "cnn_channels") base.cnn_channels = v.get<std::vector<std::size_t>>();
      else if (key == "loss") base.loss_norm = choice(v, "loss", "sum", "mean") ? LossNorm::sum : LossNorm::mean_over_steps;
      else if (key == "bbox_epochs") base.bbox_epochs = v.get<std::size_t>();
      else if (key == "bbox_learning_rate") base.bbox_learning_rate = v.get<double>();
      else if (key == "bbox_max_pairs") base.bbox_max_pairs = v.get<std::size_t>();
      else if (key == "target_val_loss") base.target_val_loss = v.get<double>();
      else throw UsageError("config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config '" + path + "': " + e.what());
  }
  return config_from_json(j, base);
}

/// XRGEN_SEED, when set, replaces the configured seed.
inline void apply_seed_override(RunConfig& c) {
  if (const char* s = std::getenv("XRGEN_SEED"); s && *s) {
    try {
      c.seed = std::stoull(s);
    } catch (const std::exception&) {
      throw UsageError(std::string("XRGEN_SEED is not an integer: ") + s);
    }
  }
}

}  // namespace xrgen
