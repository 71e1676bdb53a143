#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "pcd/distill.hpp"

namespace pcd {

struct StageConfig {
  int64_t blocks = 1;
  int64_t channels = 16;
  int64_t stride = 2;
  auto operator<=>(const StageConfig&) const = default;
};

struct BackboneConfig {
  int64_t stem_channels = 16;
  std::vector<StageConfig> stages;
  auto operator<=>(const BackboneConfig&) const = default;
};

struct MhsaConfig {
  bool enabled = true;
  int64_t heads = 4;
  int64_t head_dim = 16;
  auto operator<=>(const MhsaConfig&) const = default;
};

struct ModelConfig {
  BackboneConfig student_backbone;
  BackboneConfig teacher_backbone;
  int64_t student_head_hidden = 256;
  int64_t teacher_head_hidden = 256;
  int64_t embed_dim = 64;
  MhsaConfig mhsa;
  auto operator<=>(const ModelConfig&) const = default;
};

struct DataConfig {
  int64_t n_images = 2048;
  int64_t image_size = 32;
  auto operator<=>(const DataConfig&) const = default;
};

struct ViewConfig {
  float crop_min = 0.6f;
  float crop_max = 1.0f;
  float flip_prob = 0.5f;
  float brightness = 0.2f;
  auto operator<=>(const ViewConfig&) const = default;
};

struct AugmentConfig {
  ViewConfig view_a{0.6f, 1.0f, 0.5f, 0.2f};
  ViewConfig view_b{0.8f, 1.0f, 0.5f, 0.1f};
  auto operator<=>(const AugmentConfig&) const = default;
};

struct LossSection {
  float tau = 0.2f;
  std::string level = "pixel";
  bool symmetric = true;
  int64_t queue_capacity = 4096;
  bool enqueue_both_views = true;
  auto operator<=>(const LossSection&) const = default;
};

struct OptimSection {
  float base_lr = 1.0f;
  int64_t batch_size = 64;
  int64_t epochs = 5;
  double warmup_epochs = 0.5;
  float momentum = 0.9f;
  float weight_decay = 1e-5f;
  int64_t max_steps = 0;  // 0 = run the full epoch budget
  auto operator<=>(const OptimSection&) const = default;
};

struct ExportSection {
  float norm_rescale_anchor = 0.25f;
  auto operator<=>(const ExportSection&) const = default;
};

struct TrainConfig {
  uint64_t seed = 1;
  DataConfig data;
  ModelConfig model;
  LossSection loss;
  OptimSection optim;
  ExportSection exports;
  AugmentConfig augment;
  auto operator<=>(const TrainConfig&) const = default;

  // linear scaling rule
  float peak_lr() const {
    return base_peak(optim.base_lr, optim.batch_size);
  }
  static float base_peak(float base_lr, int64_t batch) {
    return base_lr * static_cast<float>(batch) / 256.0f;
  }
  LossConfig loss_config() const;
};

// Desk-scale defaults (the documented reference configuration).
TrainConfig desk_default_config();

// Strict parse: unknown keys are rejected with their full path. A top-level
// `"defaults": true` starts from the desk defaults and treats every other key
// as an override; without it the document must be complete.
TrainConfig parse_config_json(const nlohmann::json& j);
TrainConfig parse_config_file(const std::string& path);

// Canonical form: fully explicit, sorted keys; parses back to an equal config.
nlohmann::json config_to_json(const TrainConfig& cfg);

}  // namespace pcd
