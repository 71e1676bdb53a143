#pragma once

#include <vector>

#include "pcd/tensor.hpp"

namespace pcd {

enum class LossLevel { pixel, image };

struct LossConfig {
  float tau = 0.2f;
  bool symmetric = true;
  LossLevel level = LossLevel::pixel;
  bool enqueue_both_views = true;
};

// Fixed-capacity FIFO ring of unit-norm feature vectors (the contrastive
// negatives). Pushes are detached: no gradient ever reaches stored entries.
class MemoryQueue {
 public:
  MemoryQueue(int64_t capacity, int64_t dim);

  // Global-average-pools each sample of a [N,C,H,W] map, l2-normalizes, and
  // enqueues; oldest entries are evicted beyond capacity.
  void push_map(const Tensor& t);
  // Same, for already-pooled [N,D] vectors.
  void push_vectors(const Tensor& v);

  int64_t size() const { return count_; }
  int64_t capacity() const { return capacity_; }
  int64_t dim() const { return dim_; }

  // [size, D] copy in insertion order (oldest first); undefined when empty.
  Tensor snapshot() const;

 private:
  void push_row(const float* row);

  int64_t capacity_, dim_;
  int64_t head_ = 0, count_ = 0;
  std::vector<float> buf_;
};

// Row-wise InfoNCE: sum over rows p of
//   -log( exp(s_p.t_p/tau) / (exp(s_p.t_p/tau) + sum_k exp(s_p.n_k/tau)) )
// computed with max-subtracted log-sum-exp. s_rows/t_rows are [P,D]; negs is
// [K,D] or undefined (empty queue -> positive-only term). Differentiable
// w.r.t. every input that requires grad; callers detach the teacher side.
Tensor infonce_rows(const Tensor& s_rows, const Tensor& t_rows,
                    const Tensor& negs, float tau);

// Single-pair InfoNCE on [D] vectors against an explicit negative list.
Tensor pixel_infonce(const Tensor& s, const Tensor& t,
                     const std::vector<Tensor>& negs, float tau);
Tensor pixel_infonce(const Tensor& s, const Tensor& t, const Tensor& negs,
                     float tau);

// Per-pixel contrastive distillation loss, averaged over samples and pixels.
// s_star: student projection [N,D,H,W]; t_proj: teacher projection
// [N,D,Ht,Wt], bilinearly resized to (H,W) when the sizes differ. The teacher
// side is detached; pixels of both sides are l2-normalized over channels.
Tensor pcd_loss(const Tensor& s_star, const Tensor& t_proj,
                const MemoryQueue& q, const LossConfig& cfg);

// Image-level variant: pools both maps to vectors before the contrastive
// term, averaged over the batch.
Tensor image_level_loss(const Tensor& s_star, const Tensor& t_proj,
                        const MemoryQueue& q, const LossConfig& cfg);
// Same, for pre-pooled [N,D] features.
Tensor image_level_loss_pooled(const Tensor& s_pooled, const Tensor& t_pooled,
                               const MemoryQueue& q, const LossConfig& cfg);

Tensor distillation_loss(const Tensor& s_star, const Tensor& t_proj,
                         const MemoryQueue& q, const LossConfig& cfg);

// Mean of the two per-view losses, evaluated on one queue snapshot.
Tensor two_view_loss(const Tensor& s_star_a, const Tensor& t_a,
                     const Tensor& s_star_b, const Tensor& t_b,
                     const MemoryQueue& q, const LossConfig& cfg);

struct UniformityReport {
  double max_pairwise_dev = 0.0;  // max over (n,c) of spatial grad spread
  double max_abs_grad = 0.0;
  double rel = 0.0;  // spread relative to the largest gradient magnitude
  bool uniform = false;
};

// Probes d(loss)/d(s_map) at the map fed into the loss (before any pooling
// the image-level path performs) and reports how much the per-pixel
// gradients differ across positions.
UniformityReport gradient_uniformity_check(LossLevel level, Tensor s_map,
                                           const Tensor& t_map,
                                           const MemoryQueue& q,
                                           const LossConfig& cfg);

// Mean cosine similarity between corresponding pixels of two maps (teacher
// side resized if needed); the training-progress metric.
double mean_pixel_cosine(const Tensor& s_star, const Tensor& t_proj);

}  // namespace pcd
