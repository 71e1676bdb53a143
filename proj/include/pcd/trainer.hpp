#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pcd/config.hpp"
#include "pcd/distill.hpp"
#include "pcd/modelzoo.hpp"

namespace pcd {

// ---- LARS ----

struct LarsState {
  std::vector<std::vector<float>> momentum;  // parallel to the param list
};

// Layer-wise adaptive rate scaling. Per parameter tensor:
//   trust ratio  lambda = |w| / (|g| + wd * |w|)   (1 when either norm is 0)
//   update       m <- momentum * m + lambda * lr * (g + wd * w);  w <- w - m
// Excluded parameters (biases, BN affine) use wd = 0 and lambda = 1, which is
// plain SGD with momentum. Throws on non-finite gradients.
void lars_step(ParamList& params, LarsState& state, float lr, float momentum,
               float weight_decay);

// Linear warmup from 0 to peak, then cosine decay to 0.
double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps,
                   double peak);

// ---- synthetic dataset ----

struct ImageStore {
  int64_t size = 0;            // image side length
  std::vector<Tensor> images;  // [3,S,S], values in [0,1]
  nlohmann::json manifest;     // generator params + per-image shape layout

  int64_t count() const { return static_cast<int64_t>(images.size()); }
};

// Procedural RGB images: 2-5 colored shapes (rectangles, circles, triangles)
// over a low-frequency noise background; deterministic per (n, size, seed).
ImageStore synth_dataset(int64_t n, int64_t size, uint64_t seed);

void save_dataset(const ImageStore& store, const std::string& dir);
ImageStore load_dataset(const std::string& dir);

// ---- augmentation ----

// Random crop (scale within [crop_min, crop_max] of the side), resize back,
// horizontal flip, multiplicative brightness jitter with [0,1] clamping.
Tensor augment_view(const Tensor& img, const ViewConfig& view, RngStream& rng);

// One view from each policy distribution; each view has its own stream.
std::pair<Tensor, Tensor> two_view(const Tensor& img, const AugmentConfig& policy,
                                   RngStream& rng_a, RngStream& rng_b);

// ---- training runs ----

struct StepLog {
  int64_t step = 0;
  double loss = 0.0;
  double pixel_cosine = 0.0;
  double lr = 0.0;
  int64_t queue_size = 0;
};

using StepObserver = std::function<void(const StepLog&)>;

void write_metrics(const std::vector<StepLog>& log, const std::string& path);

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<StepLog> log;
};

// Self-supervised image-level pre-training of the teacher (backbone plus
// vector head) with cross-view InfoNCE against the memory queue. With
// random_init=true the model is saved untouched (frozen random teacher).
PretrainResult pretrain_teacher(const TrainConfig& cfg, const ImageStore& data,
                                bool random_init = false,
                                const StepObserver& observer = nullptr);

struct DistillResult {
  Checkpoint raw;       // full student (heads on), resumable
  Checkpoint exported;  // norm-rescaled backbone only
  std::vector<StepLog> log;
};

// The distillation loop: two augmented views, teacher/student forwards on the
// same views, contrastive loss, LARS step, then queue push of the teacher's
// pooled features.
DistillResult distill(const TrainConfig& cfg, const ImageStore& data,
                      const Checkpoint& teacher_ckpt,
                      const Checkpoint* resume = nullptr,
                      bool use_teacher_head = true,
                      bool drop_trailing_bn = true,
                      const StepObserver& observer = nullptr);

// Step budget derived from the config (epochs over the store, max_steps cap).
struct StepBudget {
  int64_t total = 0;
  int64_t warmup = 0;
};
StepBudget step_budget(const TrainConfig& cfg, int64_t n_images);

}  // namespace pcd
