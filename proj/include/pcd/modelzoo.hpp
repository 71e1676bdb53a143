#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pcd/adaptor.hpp"
#include "pcd/checkpoint.hpp"
#include "pcd/config.hpp"
#include "pcd/layers.hpp"

namespace pcd {

// ---- micro residual backbone ----

// Two 3x3 convs with BN/ReLU and an identity or projected shortcut.
struct BasicBlock {
  ConvParams conv1;
  BatchNormParams bn1;
  ConvParams conv2;
  BatchNormParams bn2;
  std::optional<ConvParams> proj;
  std::optional<BatchNormParams> proj_bn;
};

struct Backbone {
  BackboneConfig spec;
  ConvParams stem;
  BatchNormParams stem_bn;
  std::vector<std::vector<BasicBlock>> stages;

  int64_t out_channels() const;
  int64_t total_stride() const;
  void set_train(bool train);
};

// Deterministic Kaiming init; every parameter draws from its own stream
// derived from (seed, parameter path).
Backbone build_backbone(const BackboneConfig& spec, uint64_t seed,
                        const std::string& path_prefix = "backbone");

Tensor backbone_forward(const Tensor& x, Backbone& b);  // [N,3,H,W] -> map

int64_t param_count(const Backbone& b);

// ---- student ----

// Projection MLP block on maps: Conv1x1(in->hidden) - BN - ReLU -
// Conv1x1(hidden->out).
struct MlpBlock {
  ConvParams conv1;
  BatchNormParams bn;
  ConvParams conv2;
};

struct Student {
  ModelConfig spec;
  Backbone backbone;
  MlpBlock mlp1, mlp2;
  std::optional<MhsaParams> mhsa;

  void set_train(bool train);
};

Student build_student(const ModelConfig& spec, uint64_t seed);

struct StudentOutput {
  Tensor s_map;   // backbone features [N,C,H,W]
  Tensor s_star;  // projected (and attention-enhanced) features [N,D,H,W]
};
StudentOutput student_forward(const Tensor& x, Student& s);

// ---- teacher ----

struct Teacher {
  BackboneConfig backbone_spec;
  Backbone backbone;                // frozen, BN inference
  std::optional<HeadSpec> head;     // adapted map-kind head; absent = raw maps
  InvarianceReport invariance;      // from assembly (defaulted when headless)
};

// Backbone plus vector head (FC-BN-ReLU-FC-BN, last BN affine-free) as
// produced by pre-training and consumed by head adaptation.
struct TeacherTrainModel {
  ModelConfig spec;
  Backbone backbone;
  HeadSpec head;  // vector-kind

  void set_train(bool train);
};

TeacherTrainModel build_teacher_train_model(const ModelConfig& spec, uint64_t seed);
Tensor teacher_train_forward(const Tensor& x, TeacherTrainModel& m);  // [N,D]

// Rebuilds the frozen teacher from a checkpoint. Vector-kind checkpoints are
// adapted and invariance-verified here (failure aborts assembly); map-kind
// checkpoints are accepted only when their metadata carries a passing
// invariance record. use_head=false drops the projection head and distills
// against raw backbone maps.
Teacher assemble_teacher(const Checkpoint& ckpt, bool drop_trailing_bn,
                         bool use_head = true, double tol = 1e-5,
                         int trials = 64);

Tensor teacher_forward(const Tensor& x, Teacher& t);  // projected maps

uint64_t teacher_param_hash(const Teacher& t);

// ---- parameter plumbing ----

struct ParamRef {
  std::string name;
  Tensor tensor;
  bool decay_excluded;  // biases and BN affine params
};
using ParamList = std::vector<ParamRef>;

ParamList trainable_params(Student& s);
ParamList trainable_params(TeacherTrainModel& m);

// ---- checkpoint conversion ----

Checkpoint student_to_checkpoint(const Student& s, uint64_t seed);
Student student_from_checkpoint(const Checkpoint& ckpt);

Checkpoint teacher_train_to_checkpoint(const TeacherTrainModel& m, uint64_t seed);

// Head layer structure as JSON (parameters live in checkpoint entries).
nlohmann::json head_structure_json(const HeadSpec& h);
void append_head(Checkpoint& ckpt, const std::string& prefix, const HeadSpec& h);
HeadSpec head_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix,
                              const nlohmann::json& structure);

// Export for fine-tuning: head and MHSA stripped, every backbone convolution
// kernel multiplied by `anchor`; BN parameters, BN statistics and biases
// untouched. The anchor is recorded in the metadata.
Checkpoint norm_rescale_export(const Student& s, float anchor, uint64_t seed);

// Rebuilds a bare backbone from any checkpoint that carries one (teacher,
// student raw, or exported backbone), frozen and in inference mode.
Backbone backbone_from_any_checkpoint(const Checkpoint& ckpt);

}  // namespace pcd
