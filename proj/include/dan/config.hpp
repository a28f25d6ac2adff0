#pragma once

#include <nlohmann/json.hpp>
#include <string>

#include "dan/image.hpp"
#include "dan/model.hpp"
#include "dan/optimizer.hpp"

namespace dan {

using json = nlohmann::json;

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  int epochs = 8;
  int batch_size = 32;  // the reference large-scale value is 1024
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::string optimizer_family = "adam";  // adam | sgd
  double momentum = 0.9;
  int checkpoint_every = 0;  // 0 = only at the end
  std::string augment = "none";
  LossConfig loss;
  ModelConfig model;

  OptimConfig optim() const {
    OptimConfig o;
    o.family = optimizer_family == "adam" ? OptimizerFamily::ADAM : OptimizerFamily::SGD;
    o.learning_rate = learning_rate;
    o.weight_decay = weight_decay;
    o.beta1 = beta1;
    o.beta2 = beta2;
    o.epsilon = epsilon;
    o.momentum = momentum;
    return o;
  }

  void validate() const {
    if (learning_rate <= 0) throw ConfigError("train: learning_rate must be > 0");
    if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2 (batchnorm)");
    if (optimizer_family != "adam" && optimizer_family != "sgd")
      throw ConfigError("train: unknown optimizer family '" + optimizer_family + "'");
    model.validate();
  }
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || it.key() == k;
    if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline json to_json(const LossConfig& c) {
  return json{{"focal_gamma", c.focal_gamma},
              {"focal_alpha", c.focal_alpha},
              {"lambda_affinity", c.lambda_affinity},
              {"lambda_partition", c.lambda_partition},
              {"affinity_center_lr", c.affinity_center_lr}};
}

inline LossConfig loss_config_from_json(const json& j) {
  detail::check_keys(j, {"focal_gamma", "focal_alpha", "lambda_affinity", "lambda_partition",
                         "affinity_center_lr"},
                     "loss");
  LossConfig c;
  detail::get_if(j, "focal_gamma", c.focal_gamma);
  detail::get_if(j, "focal_alpha", c.focal_alpha);
  detail::get_if(j, "lambda_affinity", c.lambda_affinity);
  detail::get_if(j, "lambda_partition", c.lambda_partition);
  detail::get_if(j, "affinity_center_lr", c.affinity_center_lr);
  return c;
}

inline json to_json(const ModelConfig& c) {
  return json{{"input_size", c.input_size},
              {"channels", c.channels},
              {"num_heads", c.num_heads},
              {"num_classes", c.num_classes},
              {"backbone_widths", c.backbone_widths},
              {"blocks_per_stage", c.blocks_per_stage},
              {"attention_reduction", c.attention_reduction},
              {"task", task_name(c.task)},
              {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const json& j) {
  detail::check_keys(j,
                     {"input_size", "channels", "num_heads", "num_classes", "backbone_widths",
                      "blocks_per_stage", "attention_reduction", "task", "seed"},
                     "model");
  ModelConfig c;
  detail::get_if(j, "input_size", c.input_size);
  detail::get_if(j, "channels", c.channels);
  detail::get_if(j, "num_heads", c.num_heads);
  detail::get_if(j, "num_classes", c.num_classes);
  detail::get_if(j, "backbone_widths", c.backbone_widths);
  detail::get_if(j, "blocks_per_stage", c.blocks_per_stage);
  detail::get_if(j, "attention_reduction", c.attention_reduction);
  detail::get_if(j, "seed", c.seed);
  if (j.contains("task")) {
    std::string t = j.at("task").get<std::string>();
    if (t == "expr")
      c.task = Task::EXPR;
    else if (t == "va")
      c.task = Task::VA;
    else
      throw ConfigError("model: unknown task '" + t + "'");
  }
  return c;
}

inline json to_json(const TrainConfig& c) {
  return json{{"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"epsilon", c.epsilon},
              {"optimizer_family", c.optimizer_family},
              {"momentum", c.momentum},
              {"checkpoint_every", c.checkpoint_every},
              {"augment", c.augment},
              {"loss", to_json(c.loss)},
              {"model", to_json(c.model)}};
}

inline TrainConfig train_config_from_json(const json& j) {
  detail::check_keys(j,
                     {"learning_rate", "weight_decay", "epochs", "batch_size", "seed", "beta1",
                      "beta2", "epsilon", "optimizer_family", "momentum", "checkpoint_every",
                      "augment", "loss", "model"},
                     "train");
  TrainConfig c;
  detail::get_if(j, "learning_rate", c.learning_rate);
  detail::get_if(j, "weight_decay", c.weight_decay);
  detail::get_if(j, "epochs", c.epochs);
  detail::get_if(j, "batch_size", c.batch_size);
  detail::get_if(j, "seed", c.seed);
  detail::get_if(j, "beta1", c.beta1);
  detail::get_if(j, "beta2", c.beta2);
  detail::get_if(j, "epsilon", c.epsilon);
  detail::get_if(j, "optimizer_family", c.optimizer_family);
  detail::get_if(j, "momentum", c.momentum);
  detail::get_if(j, "checkpoint_every", c.checkpoint_every);
  detail::get_if(j, "augment", c.augment);
  if (j.contains("loss")) c.loss = loss_config_from_json(j.at("loss"));
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  c.validate();
  return c;
}

inline AugmentPolicy::Kind augment_kind_from_name(const std::string& name) {
  if (name == "color_jitter") return AugmentPolicy::COLOR_JITTER;
  if (name == "random_crop") return AugmentPolicy::RANDOM_CROP;
  if (name == "hflip") return AugmentPolicy::HFLIP;
  if (name == "jitter_then_crop") return AugmentPolicy::JITTER_THEN_CROP;
  if (name == "crop_then_flip") return AugmentPolicy::CROP_THEN_FLIP;
  throw ConfigError("unknown augment policy '" + name + "'");
}

}  // namespace dan
