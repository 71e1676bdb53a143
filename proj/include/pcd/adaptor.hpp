#pragma once

#include <string>
#include <vector>

#include "pcd/layers.hpp"
#include "pcd/tensor.hpp"

namespace pcd {

// Projection-head description: an ordered stack of layers over either pooled
// vectors ([N,C]) or feature maps ([N,C,H,W]). Vector heads are what
// image-level pre-training produces (FC/BN/ReLU stacks); map heads are what
// adaptation yields (Conv1x1/BN/CW-ReLU stacks).
enum class HeadKind { vector, map };
enum class HeadLayerKind { fc, bn, relu, conv1x1, cw_relu };

struct HeadLayer {
  HeadLayerKind kind;
  FcParams fc;         // kind == fc
  ConvParams conv;     // kind == conv1x1
  BatchNormParams bn;  // kind == bn

  static HeadLayer make_fc(FcParams p);
  static HeadLayer make_bn(BatchNormParams p);
  static HeadLayer make_relu();
  static HeadLayer make_conv1x1(ConvParams p);
  static HeadLayer make_cw_relu();
};

struct HeadSpec {
  HeadKind input_kind = HeadKind::vector;
  std::vector<HeadLayer> layers;
};

// Throws if layer kinds are illegal for the head kind or dims do not chain.
void validate_head(const HeadSpec& h);

int64_t head_in_features(const HeadSpec& h);
int64_t head_out_features(const HeadSpec& h);

// Applies the stack. Non-const because train-mode BN updates running stats.
Tensor head_forward(const Tensor& x, HeadSpec& h);

// Deep copy (fresh parameter buffers).
HeadSpec clone_head(const HeadSpec& h);
void freeze_head(HeadSpec& h);  // requires_grad = false, BN to inference

// Folds an inference-mode BN into the preceding linear layer:
// W' = diag(g/sqrt(var+eps)) W, b' = g (b - mean)/sqrt(var+eps) + beta.
FcParams fuse_fc_bn(const FcParams& fc, const BatchNormParams& bn);
ConvParams fuse_conv1x1_bn(const ConvParams& conv, const BatchNormParams& bn);

// Reinterprets an FC weight matrix [out,in] as a 1x1 convolution kernel
// [out,in,1,1] with stride 1 and no padding; bias is copied.
ConvParams fc_to_conv1x1(const FcParams& fc);

// Removes a final affine-free BN if present (no-op otherwise).
HeadSpec strip_trailing_affine_free_bn(const HeadSpec& h);

// The head rewrite: FC -> Conv1x1, BN(vector) -> BN(map) with identical
// statistics, ReLU -> CW-ReLU. When drop_trailing_affine_free_bn is set the
// final affine-free BN is removed before adaptation. Rejects map-kind input.
HeadSpec adapt_head(const HeadSpec& h, bool drop_trailing_affine_free_bn);

struct InvarianceReport {
  double max_abs_dev = 0.0;
  double tol = 1e-5;
  int trials = 64;
  int64_t spatial = 7;
  bool pass = false;
  std::string text() const;  // plain-text report
};

// Samples Gaussian maps x and measures
// max | original(pool(x)) - pool(adapted(x)) | over trials and channels.
// The caller must pass an `original` consistent with how `adapted` was built
// (same trailing-BN drop applied to both sides).
InvarianceReport verify_invariance(HeadSpec& original, HeadSpec& adapted,
                                   int trials = 64, int64_t spatial = 7,
                                   double tol = 1e-5, uint64_t seed = 9001,
                                   int64_t batch = 2);

}  // namespace pcd
