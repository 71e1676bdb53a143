#pragma once

#include <optional>
#include <vector>

#include "pcd/tensor.hpp"

namespace pcd {

// ---- parameter bundles ----

struct ConvParams {
  Tensor kernel;  // [C_out, C_in, k_h, k_w]
  Tensor bias;    // [C_out] or undefined
  int64_t stride = 1;
  int64_t padding = 0;

  int64_t out_channels() const { return kernel.dim(0); }
  int64_t in_channels() const { return kernel.dim(1); }
};

enum class BnLayout { vector, map };

struct BatchNormParams {
  Tensor gamma;         // [C] or undefined (no affine)
  Tensor beta;          // [C] or undefined
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
  float eps = 1e-5f;
  float momentum = 0.1f;
  bool train = false;
  BnLayout layout = BnLayout::map;

  bool affine() const { return gamma.defined(); }
  int64_t channels() const { return running_mean.dim(0); }
};

struct FcParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out] or undefined
  int64_t out_features() const { return weight.dim(0); }
  int64_t in_features() const { return weight.dim(1); }
};

struct MhsaParams {
  int64_t heads = 8;
  int64_t head_dim = 64;
  std::vector<ConvParams> q, k, v;  // per head 1x1 convs, C -> head_dim
  ConvParams out;                   // 1x1 conv, heads*head_dim -> C
};

// ---- constructors (Kaiming fan-in init for weights) ----

ConvParams make_conv(int64_t c_out, int64_t c_in, int64_t k, int64_t stride,
                     int64_t padding, bool bias, RngStream& rng);
FcParams make_fc(int64_t out, int64_t in, bool bias, RngStream& rng);
BatchNormParams make_batchnorm(int64_t channels, bool affine, BnLayout layout);
MhsaParams make_mhsa(int64_t channels, int64_t heads, int64_t head_dim,
                     RngStream& rng);

// ---- layer ops ----

// Zero-padded 2-D convolution, differentiable w.r.t. input, kernel and bias.
Tensor conv2d(const Tensor& x, const ConvParams& p);

// Inference mode is a pure per-channel affine from the running statistics
// (differentiable w.r.t. x only). Train mode normalizes with biased batch
// statistics, updates running stats in place, and has full gradients.
Tensor batchnorm(const Tensor& x, BatchNormParams& p);

Tensor relu(const Tensor& x);

// Channel-Wise ReLU: zeroes every channel whose spatial mean is negative and
// passes kept channels through unchanged, so that
// relu(global_avg_pool(x)) == global_avg_pool(cw_relu(x)).
Tensor cw_relu(const Tensor& x);

Tensor l2_normalize(const Tensor& v, int axis, float eps = 1e-12f);

// Half-pixel-center convention: src = (dst + 0.5) * size_ratio - 0.5,
// clamped to the source range.
Tensor bilinear_resize(const Tensor& t, int64_t out_h, int64_t out_w);

Tensor global_avg_pool(const Tensor& x);  // [N,C,H,W] -> [N,C]

Tensor fc_forward(const Tensor& x, const FcParams& p);  // [N,in] -> [N,out]

// Multi-head self-attention over spatial positions, no positional encodings.
Tensor mhsa(const Tensor& x, const MhsaParams& p);

// ---- graph-recorded shape/attention helpers ----

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor transpose_last2(const Tensor& x);
Tensor bmm(const Tensor& a, const Tensor& b);  // [B,m,k] x [B,k,n]
Tensor softmax_lastdim(const Tensor& x);
Tensor concat_channels(const std::vector<Tensor>& xs);  // along dim 1 of 4-D maps
Tensor to_pixel_rows(const Tensor& x);  // [N,C,H,W] -> [N*H*W, C]

}  // namespace pcd
