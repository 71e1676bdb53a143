#include "pcd/layers.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace pcd {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

// ---- constructors ----

ConvParams make_conv(int64_t c_out, int64_t c_in, int64_t k, int64_t stride,
                     int64_t padding, bool bias, RngStream& rng) {
  ConvParams p;
  float std = std::sqrt(2.0f / static_cast<float>(c_in * k * k));
  p.kernel = Tensor::gaussian({c_out, c_in, k, k}, rng, std, true);
  if (bias) p.bias = Tensor::zeros({c_out}, true);
  p.stride = stride;
  p.padding = padding;
  return p;
}

FcParams make_fc(int64_t out, int64_t in, bool bias, RngStream& rng) {
  FcParams p;
  float std = std::sqrt(2.0f / static_cast<float>(in));
  p.weight = Tensor::gaussian({out, in}, rng, std, true);
  if (bias) p.bias = Tensor::zeros({out}, true);
  return p;
}

BatchNormParams make_batchnorm(int64_t channels, bool affine, BnLayout layout) {
  BatchNormParams p;
  if (affine) {
    p.gamma = Tensor::ones({channels}, true);
    p.beta = Tensor::zeros({channels}, true);
  }
  p.running_mean = Tensor::zeros({channels});
  p.running_var = Tensor::ones({channels});
  p.layout = layout;
  return p;
}

MhsaParams make_mhsa(int64_t channels, int64_t heads, int64_t head_dim,
                     RngStream& rng) {
  MhsaParams p;
  p.heads = heads;
  p.head_dim = head_dim;
  for (int64_t h = 0; h < heads; ++h) {
    p.q.push_back(make_conv(head_dim, channels, 1, 1, 0, true, rng));
    p.k.push_back(make_conv(head_dim, channels, 1, 1, 0, true, rng));
    p.v.push_back(make_conv(head_dim, channels, 1, 1, 0, true, rng));
  }
  p.out = make_conv(channels, heads * head_dim, 1, 1, 0, true, rng);
  return p;
}

// ---- conv2d ----

Tensor conv2d(const Tensor& x, const ConvParams& p) {
  require(x.ndim() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  require(p.kernel.ndim() == 4, "conv2d: kernel must be 4-D");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Co = p.kernel.dim(0), Ci = p.kernel.dim(1);
  int64_t kh = p.kernel.dim(2), kw = p.kernel.dim(3);
  int64_t s = p.stride, pad = p.padding;
  require(C == Ci, "conv2d: channel mismatch, input has " + std::to_string(C) +
                       ", kernel expects " + std::to_string(Ci));
  int64_t Ho = (H + 2 * pad - kh) / s + 1;
  int64_t Wo = (W + 2 * pad - kw) / s + 1;
  require(H + 2 * pad >= kh && W + 2 * pad >= kw && Ho >= 1 && Wo >= 1,
          "conv2d: kernel larger than padded input");
  bool has_bias = p.bias.defined();
  if (has_bias) require(p.bias.dim(0) == Co, "conv2d: bias size mismatch");

  std::vector<Tensor> ins = {x, p.kernel};
  if (has_bias) ins.push_back(p.bias);

  auto fwd = [=](const std::vector<Tensor>& in, float* out) {
    const float* X = in[0].data().data();
    const float* K = in[1].data().data();
    const float* B = has_bias ? in[2].data().data() : nullptr;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t co = 0; co < Co; ++co)
        for (int64_t oh = 0; oh < Ho; ++oh) {
          int64_t ih0 = oh * s - pad;
          int64_t u0 = std::max<int64_t>(0, -ih0);
          int64_t u1 = std::min<int64_t>(kh, H - ih0);
          for (int64_t ow = 0; ow < Wo; ++ow) {
            int64_t iw0 = ow * s - pad;
            int64_t v0 = std::max<int64_t>(0, -iw0);
            int64_t v1 = std::min<int64_t>(kw, W - iw0);
            double acc = B ? static_cast<double>(B[co]) : 0.0;
            for (int64_t ci = 0; ci < C; ++ci)
              for (int64_t u = u0; u < u1; ++u) {
                const float* xrow = X + ((n * C + ci) * H + ih0 + u) * W + iw0;
                const float* krow = K + ((co * Ci + ci) * kh + u) * kw;
                for (int64_t v = v0; v < v1; ++v)
                  acc += static_cast<double>(xrow[v]) * static_cast<double>(krow[v]);
              }
            out[((n * Co + co) * Ho + oh) * Wo + ow] = static_cast<float>(acc);
          }
        }
  };

  auto bwd = [=](const std::vector<Tensor>& in, const Tensor&, const float* g,
                 const std::vector<float*>& gins) {
    const float* X = in[0].data().data();
    const float* K = in[1].data().data();
    std::vector<double> gx(gins[0] ? static_cast<size_t>(N * C * H * W) : 0, 0.0);
    std::vector<double> gk(gins[1] ? static_cast<size_t>(Co * Ci * kh * kw) : 0, 0.0);
    std::vector<double> gb(has_bias && gins[2] ? static_cast<size_t>(Co) : 0, 0.0);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t co = 0; co < Co; ++co)
        for (int64_t oh = 0; oh < Ho; ++oh) {
          int64_t ih0 = oh * s - pad;
          int64_t u0 = std::max<int64_t>(0, -ih0);
          int64_t u1 = std::min<int64_t>(kh, H - ih0);
          for (int64_t ow = 0; ow < Wo; ++ow) {
            int64_t iw0 = ow * s - pad;
            int64_t v0 = std::max<int64_t>(0, -iw0);
            int64_t v1 = std::min<int64_t>(kw, W - iw0);
            double gv = static_cast<double>(g[((n * Co + co) * Ho + oh) * Wo + ow]);
            if (!gb.empty()) gb[static_cast<size_t>(co)] += gv;
            for (int64_t ci = 0; ci < C; ++ci)
              for (int64_t u = u0; u < u1; ++u) {
                int64_t xbase = ((n * C + ci) * H + ih0 + u) * W + iw0;
                int64_t kbase = ((co * Ci + ci) * kh + u) * kw;
                for (int64_t v = v0; v < v1; ++v) {
                  if (!gx.empty())
                    gx[static_cast<size_t>(xbase + v)] +=
                        gv * static_cast<double>(K[kbase + v]);
                  if (!gk.empty())
                    gk[static_cast<size_t>(kbase + v)] +=
                        gv * static_cast<double>(X[xbase + v]);
                }
              }
          }
        }
    if (gins[0])
      for (size_t i = 0; i < gx.size(); ++i) gins[0][i] += static_cast<float>(gx[i]);
    if (gins[1])
      for (size_t i = 0; i < gk.size(); ++i) gins[1][i] += static_cast<float>(gk[i]);
    if (has_bias && gins[2])
      for (size_t i = 0; i < gb.size(); ++i) gins[2][i] += static_cast<float>(gb[i]);
  };

  return record_op("conv2d", std::move(ins), {N, Co, Ho, Wo}, std::move(fwd),
                   std::move(bwd));
}

// ---- batchnorm ----

namespace {

struct BnDims {
  int64_t N, C, S;  // batch, channels, spatial positions per channel
};

BnDims bn_dims(const Tensor& x, const BatchNormParams& p) {
  if (p.layout == BnLayout::vector) {
    require(x.ndim() == 2, "batchnorm: vector layout expects [N,C], got " +
                               shape_str(x.shape()));
    require(x.dim(1) == p.channels(), "batchnorm: channel mismatch");
    return {x.dim(0), x.dim(1), 1};
  }
  require(x.ndim() == 4, "batchnorm: map layout expects [N,C,H,W], got " +
                             shape_str(x.shape()));
  require(x.dim(1) == p.channels(), "batchnorm: channel mismatch");
  return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
}

}  // namespace

Tensor batchnorm(const Tensor& x, BatchNormParams& p) {
  BnDims d = bn_dims(x, p);
  int64_t N = d.N, C = d.C, S = d.S;
  bool affine = p.affine();

  if (!p.train) {
    // Fold running stats (and affine) into a per-channel scale/shift.
    std::vector<float> scale(static_cast<size_t>(C)), shift(static_cast<size_t>(C));
    for (int64_t c = 0; c < C; ++c) {
      double g = affine ? p.gamma.data()[static_cast<size_t>(c)] : 1.0;
      double b = affine ? p.beta.data()[static_cast<size_t>(c)] : 0.0;
      double inv = 1.0 / std::sqrt(static_cast<double>(p.running_var.data()[static_cast<size_t>(c)]) +
                                   static_cast<double>(p.eps));
      scale[static_cast<size_t>(c)] = static_cast<float>(g * inv);
      shift[static_cast<size_t>(c)] = static_cast<float>(
          b - static_cast<double>(p.running_mean.data()[static_cast<size_t>(c)]) * g * inv);
    }
    return record_op(
        "batchnorm_inference", {x}, x.shape(),
        [N, C, S, scale, shift](const std::vector<Tensor>& in, float* out) {
          const float* X = in[0].data().data();
          for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
              int64_t base = (n * C + c) * S;
              for (int64_t i = 0; i < S; ++i)
                out[base + i] = X[base + i] * scale[static_cast<size_t>(c)] +
                                shift[static_cast<size_t>(c)];
            }
        },
        [N, C, S, scale](const std::vector<Tensor>&, const Tensor&, const float* g,
                         const std::vector<float*>& gins) {
          if (!gins[0]) return;
          for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
              int64_t base = (n * C + c) * S;
              for (int64_t i = 0; i < S; ++i)
                gins[0][base + i] += g[base + i] * scale[static_cast<size_t>(c)];
            }
        });
  }

  // Train mode: stats are recomputed from the input inside the closures so
  // the recorded op stays pure (replayable); the running-stat update happens
  // once, here.
  int64_t M = N * S;
  require(M >= 1, "batchnorm: empty batch");
  float eps = p.eps;

  auto stats = [N, C, S, eps](const float* X, std::vector<double>& mean,
                              std::vector<double>& inv_std) {
    mean.assign(static_cast<size_t>(C), 0.0);
    inv_std.assign(static_cast<size_t>(C), 0.0);
    std::vector<double> sq(static_cast<size_t>(C), 0.0);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        int64_t base = (n * C + c) * S;
        for (int64_t i = 0; i < S; ++i) {
          double v = X[base + i];
          mean[static_cast<size_t>(c)] += v;
          sq[static_cast<size_t>(c)] += v * v;
        }
      }
    double inv_m = 1.0 / static_cast<double>(N * S);
    for (int64_t c = 0; c < C; ++c) {
      mean[static_cast<size_t>(c)] *= inv_m;
      double var = sq[static_cast<size_t>(c)] * inv_m -
                   mean[static_cast<size_t>(c)] * mean[static_cast<size_t>(c)];
      if (var < 0) var = 0;  // guard rounding
      sq[static_cast<size_t>(c)] = var;
      inv_std[static_cast<size_t>(c)] = 1.0 / std::sqrt(var + static_cast<double>(eps));
    }
  };

  // Update running statistics from this batch.
  {
    std::vector<double> mean, inv_std;
    std::vector<double> sq(static_cast<size_t>(C), 0.0);
    mean.assign(static_cast<size_t>(C), 0.0);
    const float* X = x.data().data();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        int64_t base = (n * C + c) * S;
        for (int64_t i = 0; i < S; ++i) {
          double v = X[base + i];
          mean[static_cast<size_t>(c)] += v;
          sq[static_cast<size_t>(c)] += v * v;
        }
      }
    double inv_m = 1.0 / static_cast<double>(M);
    auto rm = p.running_mean.mutable_data();
    auto rv = p.running_var.mutable_data();
    for (int64_t c = 0; c < C; ++c) {
      double m = mean[static_cast<size_t>(c)] * inv_m;
      double var = sq[static_cast<size_t>(c)] * inv_m - m * m;
      if (var < 0) var = 0;
      rm[static_cast<size_t>(c)] = static_cast<float>(
          (1.0 - p.momentum) * rm[static_cast<size_t>(c)] + p.momentum * m);
      rv[static_cast<size_t>(c)] = static_cast<float>(
          (1.0 - p.momentum) * rv[static_cast<size_t>(c)] + p.momentum * var);
    }
  }

  std::vector<Tensor> ins = {x};
  if (affine) {
    ins.push_back(p.gamma);
    ins.push_back(p.beta);
  }

  auto fwd = [N, C, S, affine, stats](const std::vector<Tensor>& in, float* out) {
    const float* X = in[0].data().data();
    std::vector<double> mean, inv_std;
    stats(X, mean, inv_std);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        double g = affine ? in[1].data()[static_cast<size_t>(c)] : 1.0;
        double b = affine ? in[2].data()[static_cast<size_t>(c)] : 0.0;
        int64_t base = (n * C + c) * S;
        for (int64_t i = 0; i < S; ++i)
          out[base + i] = static_cast<float>(
              (static_cast<double>(X[base + i]) - mean[static_cast<size_t>(c)]) *
                  inv_std[static_cast<size_t>(c)] * g +
              b);
      }
  };

  auto bwd = [N, C, S, affine, stats](const std::vector<Tensor>& in, const Tensor&,
                                      const float* g, const std::vector<float*>& gins) {
    const float* X = in[0].data().data();
    std::vector<double> mean, inv_std;
    stats(X, mean, inv_std);
    int64_t M2 = N * S;
    for (int64_t c = 0; c < C; ++c) {
      double gamma = affine ? in[1].data()[static_cast<size_t>(c)] : 1.0;
      double s1 = 0.0, s2 = 0.0;  // sum gy, sum gy*xhat
      for (int64_t n = 0; n < N; ++n) {
        int64_t base = (n * C + c) * S;
        for (int64_t i = 0; i < S; ++i) {
          double gy = g[base + i];
          double xhat = (static_cast<double>(X[base + i]) - mean[static_cast<size_t>(c)]) *
                        inv_std[static_cast<size_t>(c)];
          s1 += gy;
          s2 += gy * xhat;
        }
      }
      if (gins[0]) {
        double k = gamma * inv_std[static_cast<size_t>(c)];
        for (int64_t n = 0; n < N; ++n) {
          int64_t base = (n * C + c) * S;
          for (int64_t i = 0; i < S; ++i) {
            double gy = g[base + i];
            double xhat = (static_cast<double>(X[base + i]) - mean[static_cast<size_t>(c)]) *
                          inv_std[static_cast<size_t>(c)];
            gins[0][base + i] += static_cast<float>(
                k * (gy - s1 / static_cast<double>(M2) - xhat * s2 / static_cast<double>(M2)));
          }
        }
      }
      if (affine && gins[1]) gins[1][c] += static_cast<float>(s2);
      if (affine && gins[2]) gins[2][c] += static_cast<float>(s1);
    }
  };

  return record_op("batchnorm_train", std::move(ins), x.shape(), std::move(fwd),
                   std::move(bwd));
}

// ---- activations ----

Tensor relu(const Tensor& x) {
  return record_op(
      "relu", {x}, x.shape(),
      [](const std::vector<Tensor>& in, float* out) {
        auto v = in[0].data();
        for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0f ? v[i] : 0.0f;
      },
      [](const std::vector<Tensor>& in, const Tensor&, const float* g,
         const std::vector<float*>& gins) {
        if (!gins[0]) return;
        auto v = in[0].data();
        for (size_t i = 0; i < v.size(); ++i)
          if (v[i] > 0.0f) gins[0][i] += g[i];
      });
}

namespace {

// Channel keep-mask from spatial means; shared by cw_relu fwd/bwd. The
// summation matches global_avg_pool exactly so that
// relu(pool(x)) == pool(cw_relu(x)) holds bit-for-bit.
void cw_mask(const float* X, int64_t N, int64_t C, int64_t S, std::vector<bool>& keep) {
  keep.assign(static_cast<size_t>(N * C), false);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      int64_t base = (n * C + c) * S;
      double acc = 0.0;
      for (int64_t i = 0; i < S; ++i) acc += static_cast<double>(X[base + i]);
      keep[static_cast<size_t>(n * C + c)] =
          static_cast<float>(acc / static_cast<double>(S)) > 0.0f;
    }
}

}  // namespace

Tensor cw_relu(const Tensor& x) {
  require(x.ndim() == 4, "cw_relu: input must be [N,C,H,W], got " + shape_str(x.shape()));
  int64_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  return record_op(
      "cw_relu", {x}, x.shape(),
      [N, C, S](const std::vector<Tensor>& in, float* out) {
        const float* X = in[0].data().data();
        std::vector<bool> keep;
        cw_mask(X, N, C, S, keep);
        for (int64_t nc = 0; nc < N * C; ++nc) {
          int64_t base = nc * S;
          if (keep[static_cast<size_t>(nc)]) {
            std::memcpy(out + base, X + base, static_cast<size_t>(S) * sizeof(float));
          } else {
            std::memset(out + base, 0, static_cast<size_t>(S) * sizeof(float));
          }
        }
      },
      [N, C, S](const std::vector<Tensor>& in, const Tensor&, const float* g,
                const std::vector<float*>& gins) {
        if (!gins[0]) return;
        const float* X = in[0].data().data();
        std::vector<bool> keep;
        cw_mask(X, N, C, S, keep);
        for (int64_t nc = 0; nc < N * C; ++nc) {
          if (!keep[static_cast<size_t>(nc)]) continue;
          int64_t base = nc * S;
          for (int64_t i = 0; i < S; ++i) gins[0][base + i] += g[base + i];
        }
      });
}

// ---- l2 normalize ----

Tensor l2_normalize(const Tensor& v, int axis, float eps) {
  require(axis >= 0 && axis < v.ndim(), "l2_normalize: axis out of range");
  int64_t L = v.dim(axis);
  int64_t inner = 1;
  for (int i = axis + 1; i < v.ndim(); ++i) inner *= v.dim(i);
  int64_t outer = v.numel() / (L * inner);
  double eps2 = static_cast<double>(eps) * static_cast<double>(eps);

  auto fwd = [outer, L, inner, eps2](const std::vector<Tensor>& in, float* out) {
    const float* X = in[0].data().data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        int64_t base = o * L * inner + i;
        double s = 0.0;
        for (int64_t l = 0; l < L; ++l) {
          double x = X[base + l * inner];
          s += x * x;
        }
        double inv = 1.0 / std::sqrt(s + eps2);
        for (int64_t l = 0; l < L; ++l)
          out[base + l * inner] = static_cast<float>(X[base + l * inner] * inv);
      }
  };
  auto bwd = [outer, L, inner, eps2](const std::vector<Tensor>& in, const Tensor&,
                                     const float* g, const std::vector<float*>& gins) {
    if (!gins[0]) return;
    const float* X = in[0].data().data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        int64_t base = o * L * inner + i;
        double s = 0.0, dot = 0.0;
        for (int64_t l = 0; l < L; ++l) {
          double x = X[base + l * inner];
          s += x * x;
          dot += x * static_cast<double>(g[base + l * inner]);
        }
        double n2 = s + eps2;
        double inv = 1.0 / std::sqrt(n2);
        double inv3 = inv / n2;
        for (int64_t l = 0; l < L; ++l) {
          double x = X[base + l * inner];
          gins[0][base + l * inner] +=
              static_cast<float>(static_cast<double>(g[base + l * inner]) * inv - x * dot * inv3);
        }
      }
  };
  return record_op("l2_normalize", {v}, v.shape(), std::move(fwd), std::move(bwd));
}

// ---- bilinear resize ----

namespace {

struct LerpIndex {
  int64_t lo, hi;
  double w;  // weight of hi
};

std::vector<LerpIndex> half_pixel_grid(int64_t dst, int64_t src) {
  std::vector<LerpIndex> g(static_cast<size_t>(dst));
  double ratio = static_cast<double>(src) / static_cast<double>(dst);
  for (int64_t d = 0; d < dst; ++d) {
    double s = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    if (s < 0) s = 0;
    if (s > static_cast<double>(src - 1)) s = static_cast<double>(src - 1);
    int64_t lo = static_cast<int64_t>(std::floor(s));
    if (lo > src - 1) lo = src - 1;
    int64_t hi = std::min(lo + 1, src - 1);
    g[static_cast<size_t>(d)] = {lo, hi, s - static_cast<double>(lo)};
  }
  return g;
}

}  // namespace

Tensor bilinear_resize(const Tensor& t, int64_t out_h, int64_t out_w) {
  require(t.ndim() == 4, "bilinear_resize: input must be [N,C,H,W]");
  require(out_h >= 1 && out_w >= 1, "bilinear_resize: target size must be >= 1");
  int64_t N = t.dim(0), C = t.dim(1), H = t.dim(2), W = t.dim(3);
  auto gy = half_pixel_grid(out_h, H);
  auto gx = half_pixel_grid(out_w, W);

  auto fwd = [=](const std::vector<Tensor>& in, float* out) {
    const float* X = in[0].data().data();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const float* plane = X + (n * C + c) * H * W;
        float* oplane = out + (n * C + c) * out_h * out_w;
        for (int64_t oh = 0; oh < out_h; ++oh) {
          const auto& iy = gy[static_cast<size_t>(oh)];
          for (int64_t ow = 0; ow < out_w; ++ow) {
            const auto& ix = gx[static_cast<size_t>(ow)];
            double v00 = plane[iy.lo * W + ix.lo];
            double v01 = plane[iy.lo * W + ix.hi];
            double v10 = plane[iy.hi * W + ix.lo];
            double v11 = plane[iy.hi * W + ix.hi];
            double top = v00 + (v01 - v00) * ix.w;
            double bot = v10 + (v11 - v10) * ix.w;
            oplane[oh * out_w + ow] = static_cast<float>(top + (bot - top) * iy.w);
          }
        }
      }
  };
  auto bwd = [=](const std::vector<Tensor>&, const Tensor&, const float* g,
                 const std::vector<float*>& gins) {
    if (!gins[0]) return;
    std::vector<double> acc(static_cast<size_t>(N * C * H * W), 0.0);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        double* plane = acc.data() + (n * C + c) * H * W;
        const float* gplane = g + (n * C + c) * out_h * out_w;
        for (int64_t oh = 0; oh < out_h; ++oh) {
          const auto& iy = gy[static_cast<size_t>(oh)];
          for (int64_t ow = 0; ow < out_w; ++ow) {
            const auto& ix = gx[static_cast<size_t>(ow)];
            double gv = gplane[oh * out_w + ow];
            plane[iy.lo * W + ix.lo] += gv * (1 - iy.w) * (1 - ix.w);
            plane[iy.lo * W + ix.hi] += gv * (1 - iy.w) * ix.w;
            plane[iy.hi * W + ix.lo] += gv * iy.w * (1 - ix.w);
            plane[iy.hi * W + ix.hi] += gv * iy.w * ix.w;
          }
        }
      }
    for (size_t i = 0; i < acc.size(); ++i) gins[0][i] += static_cast<float>(acc[i]);
  };
  return record_op("bilinear_resize", {t}, {N, C, out_h, out_w}, std::move(fwd),
                   std::move(bwd));
}

// ---- pooling ----

Tensor global_avg_pool(const Tensor& x) {
  require(x.ndim() == 4, "global_avg_pool: input must be [N,C,H,W]");
  int64_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  return record_op(
      "global_avg_pool", {x}, {N, C},
      [N, C, S](const std::vector<Tensor>& in, float* out) {
        const float* X = in[0].data().data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
          int64_t base = nc * S;
          double acc = 0.0;
          for (int64_t i = 0; i < S; ++i) acc += static_cast<double>(X[base + i]);
          out[nc] = static_cast<float>(acc / static_cast<double>(S));
        }
      },
      [N, C, S](const std::vector<Tensor>&, const Tensor&, const float* g,
                const std::vector<float*>& gins) {
        if (!gins[0]) return;
        float inv = 1.0f / static_cast<float>(S);
        for (int64_t nc = 0; nc < N * C; ++nc) {
          int64_t base = nc * S;
          for (int64_t i = 0; i < S; ++i) gins[0][base + i] += g[nc] * inv;
        }
      });
}

// ---- fully connected ----

Tensor fc_forward(const Tensor& x, const FcParams& p) {
  require(x.ndim() == 2, "fc_forward: input must be [N,in], got " + shape_str(x.shape()));
  int64_t N = x.dim(0), In = p.in_features(), Out = p.out_features();
  require(x.dim(1) == In, "fc_forward: feature dim mismatch, input has " +
                              std::to_string(x.dim(1)) + ", weight expects " +
                              std::to_string(In));
  bool has_bias = p.bias.defined();
  std::vector<Tensor> ins = {x, p.weight};
  if (has_bias) ins.push_back(p.bias);
  auto fwd = [=](const std::vector<Tensor>& in, float* out) {
    const float* X = in[0].data().data();
    const float* Wt = in[1].data().data();
    const float* B = has_bias ? in[2].data().data() : nullptr;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t o = 0; o < Out; ++o) {
        double acc = B ? static_cast<double>(B[o]) : 0.0;
        for (int64_t i = 0; i < In; ++i)
          acc += static_cast<double>(X[n * In + i]) * static_cast<double>(Wt[o * In + i]);
        out[n * Out + o] = static_cast<float>(acc);
      }
  };
  auto bwd = [=](const std::vector<Tensor>& in, const Tensor&, const float* g,
                 const std::vector<float*>& gins) {
    const float* X = in[0].data().data();
    const float* Wt = in[1].data().data();
    if (gins[0]) {
      for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < In; ++i) {
          double acc = 0.0;
          for (int64_t o = 0; o < Out; ++o)
            acc += static_cast<double>(g[n * Out + o]) * static_cast<double>(Wt[o * In + i]);
          gins[0][n * In + i] += static_cast<float>(acc);
        }
    }
    if (gins[1]) {
      for (int64_t o = 0; o < Out; ++o)
        for (int64_t i = 0; i < In; ++i) {
          double acc = 0.0;
          for (int64_t n = 0; n < N; ++n)
            acc += static_cast<double>(g[n * Out + o]) * static_cast<double>(X[n * In + i]);
          gins[1][o * In + i] += static_cast<float>(acc);
        }
    }
    if (has_bias && gins[2]) {
      for (int64_t o = 0; o < Out; ++o) {
        double acc = 0.0;
        for (int64_t n = 0; n < N; ++n) acc += static_cast<double>(g[n * Out + o]);
        gins[2][o] += static_cast<float>(acc);
      }
    }
  };
  return record_op("fc", std::move(ins), {N, Out}, std::move(fwd), std::move(bwd));
}

// ---- shape helpers ----

Tensor reshape(const Tensor& x, Shape new_shape) {
  require(numel_of(new_shape) == x.numel(),
          "reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
              shape_str(new_shape));
  return record_op(
      "reshape", {x}, std::move(new_shape),
      [](const std::vector<Tensor>& in, float* out) {
        auto v = in[0].data();
        std::memcpy(out, v.data(), v.size() * sizeof(float));
      },
      [](const std::vector<Tensor>& in, const Tensor&, const float* g,
         const std::vector<float*>& gins) {
        if (!gins[0]) return;
        size_t n = in[0].data().size();
        for (size_t i = 0; i < n; ++i) gins[0][i] += g[i];
      });
}

Tensor transpose_last2(const Tensor& x) {
  require(x.ndim() >= 2, "transpose_last2: needs >= 2 dims");
  int64_t m = x.dim(x.ndim() - 2), n = x.dim(x.ndim() - 1);
  int64_t B = x.numel() / (m * n);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  return record_op(
      "transpose_last2", {x}, std::move(out_shape),
      [B, m, n](const std::vector<Tensor>& in, float* out) {
        const float* X = in[0].data().data();
        for (int64_t b = 0; b < B; ++b)
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j)
              out[b * m * n + j * m + i] = X[b * m * n + i * n + j];
      },
      [B, m, n](const std::vector<Tensor>&, const Tensor&, const float* g,
                const std::vector<float*>& gins) {
        if (!gins[0]) return;
        for (int64_t b = 0; b < B; ++b)
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j)
              gins[0][b * m * n + i * n + j] += g[b * m * n + j * m + i];
      });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 3 && b.ndim() == 3, "bmm: expects [B,m,k] x [B,k,n]");
  require(a.dim(0) == b.dim(0), "bmm: batch dims differ");
  require(a.dim(2) == b.dim(1), "bmm: inner dims differ, " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
  int64_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  return record_op(
      "bmm", {a, b}, {B, m, n},
      [B, m, k, n](const std::vector<Tensor>& in, float* out) {
        const float* A = in[0].data().data();
        const float* Bm = in[1].data().data();
        for (int64_t bi = 0; bi < B; ++bi) {
          const float* Ab = A + bi * m * k;
          const float* Bb = Bm + bi * k * n;
          float* Ob = out + bi * m * n;
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) {
              double acc = 0.0;
              for (int64_t t = 0; t < k; ++t)
                acc += static_cast<double>(Ab[i * k + t]) * static_cast<double>(Bb[t * n + j]);
              Ob[i * n + j] = static_cast<float>(acc);
            }
        }
      },
      [B, m, k, n](const std::vector<Tensor>& in, const Tensor&, const float* g,
                   const std::vector<float*>& gins) {
        const float* A = in[0].data().data();
        const float* Bm = in[1].data().data();
        for (int64_t bi = 0; bi < B; ++bi) {
          const float* Ab = A + bi * m * k;
          const float* Bb = Bm + bi * k * n;
          const float* Gb = g + bi * m * n;
          if (gins[0]) {
            float* Ga = gins[0] + bi * m * k;
            for (int64_t i = 0; i < m; ++i)
              for (int64_t t = 0; t < k; ++t) {
                double acc = 0.0;
                for (int64_t j = 0; j < n; ++j)
                  acc += static_cast<double>(Gb[i * n + j]) * static_cast<double>(Bb[t * n + j]);
                Ga[i * k + t] += static_cast<float>(acc);
              }
          }
          if (gins[1]) {
            float* Gbm = gins[1] + bi * k * n;
            for (int64_t t = 0; t < k; ++t)
              for (int64_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int64_t i = 0; i < m; ++i)
                  acc += static_cast<double>(Ab[i * k + t]) * static_cast<double>(Gb[i * n + j]);
                Gbm[t * n + j] += static_cast<float>(acc);
              }
          }
        }
      });
}

Tensor softmax_lastdim(const Tensor& x) {
  int64_t L = x.dim(x.ndim() - 1);
  int64_t R = x.numel() / L;
  return record_op(
      "softmax_lastdim", {x}, x.shape(),
      [R, L](const std::vector<Tensor>& in, float* out) {
        const float* X = in[0].data().data();
        for (int64_t r = 0; r < R; ++r) {
          const float* row = X + r * L;
          double mx = row[0];
          for (int64_t l = 1; l < L; ++l) mx = std::max(mx, static_cast<double>(row[l]));
          double sum = 0.0;
          for (int64_t l = 0; l < L; ++l) sum += std::exp(static_cast<double>(row[l]) - mx);
          for (int64_t l = 0; l < L; ++l)
            out[r * L + l] =
                static_cast<float>(std::exp(static_cast<double>(row[l]) - mx) / sum);
        }
      },
      [R, L](const std::vector<Tensor>&, const Tensor& out, const float* g,
             const std::vector<float*>& gins) {
        if (!gins[0]) return;
        const float* Y = out.data().data();
        for (int64_t r = 0; r < R; ++r) {
          double dot = 0.0;
          for (int64_t l = 0; l < L; ++l)
            dot += static_cast<double>(g[r * L + l]) * static_cast<double>(Y[r * L + l]);
          for (int64_t l = 0; l < L; ++l)
            gins[0][r * L + l] += static_cast<float>(
                static_cast<double>(Y[r * L + l]) * (static_cast<double>(g[r * L + l]) - dot));
        }
      });
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
  require(!xs.empty(), "concat_channels: empty input list");
  int64_t N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
  int64_t Ctot = 0;
  for (const auto& t : xs) {
    require(t.ndim() == 4 && t.dim(0) == N && t.dim(2) == H && t.dim(3) == W,
            "concat_channels: inputs must be [N,Ci,H,W] with matching N,H,W");
    Ctot += t.dim(1);
  }
  int64_t S = H * W;
  auto fwd = [N, Ctot, S](const std::vector<Tensor>& in, float* out) {
    for (int64_t n = 0; n < N; ++n) {
      int64_t coff = 0;
      for (const auto& t : in) {
        int64_t Ci = t.dim(1);
        const float* src = t.data().data() + n * Ci * S;
        std::memcpy(out + (n * Ctot + coff) * S, src,
                    static_cast<size_t>(Ci * S) * sizeof(float));
        coff += Ci;
      }
    }
  };
  auto bwd = [N, Ctot, S](const std::vector<Tensor>& in, const Tensor&, const float* g,
                          const std::vector<float*>& gins) {
    for (int64_t n = 0; n < N; ++n) {
      int64_t coff = 0;
      for (size_t t = 0; t < in.size(); ++t) {
        int64_t Ci = in[t].dim(1);
        if (gins[t]) {
          const float* src = g + (n * Ctot + coff) * S;
          float* dst = gins[t] + n * Ci * S;
          for (int64_t i = 0; i < Ci * S; ++i) dst[i] += src[i];
        }
        coff += Ci;
      }
    }
  };
  return record_op("concat_channels", xs, {N, Ctot, H, W}, std::move(fwd),
                   std::move(bwd));
}

Tensor to_pixel_rows(const Tensor& x) {
  require(x.ndim() == 4, "to_pixel_rows: input must be [N,C,H,W]");
  int64_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  return record_op(
      "to_pixel_rows", {x}, {N * S, C},
      [N, C, S](const std::vector<Tensor>& in, float* out) {
        const float* X = in[0].data().data();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < S; ++i)
              out[(n * S + i) * C + c] = X[(n * C + c) * S + i];
      },
      [N, C, S](const std::vector<Tensor>&, const Tensor&, const float* g,
                const std::vector<float*>& gins) {
        if (!gins[0]) return;
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < S; ++i)
              gins[0][(n * C + c) * S + i] += g[(n * S + i) * C + c];
      });
}

// ---- multi-head self-attention ----

Tensor mhsa(const Tensor& x, const MhsaParams& p) {
  require(x.ndim() == 4, "mhsa: input must be [N,C,H,W]");
  require(static_cast<int64_t>(p.q.size()) == p.heads &&
              static_cast<int64_t>(p.k.size()) == p.heads &&
              static_cast<int64_t>(p.v.size()) == p.heads,
          "mhsa: per-head conv count does not match heads");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(p.out.in_channels() == p.heads * p.head_dim && p.out.out_channels() == C,
          "mhsa: output projection must map heads*head_dim back to input channels");
  int64_t L = H * W;
  float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(p.head_dim));

  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<size_t>(p.heads));
  for (int64_t h = 0; h < p.heads; ++h) {
    require(p.q[static_cast<size_t>(h)].in_channels() == C &&
                p.q[static_cast<size_t>(h)].out_channels() == p.head_dim,
            "mhsa: q conv shape mismatch");
    Tensor q = reshape(conv2d(x, p.q[static_cast<size_t>(h)]), {N, p.head_dim, L});
    Tensor k = reshape(conv2d(x, p.k[static_cast<size_t>(h)]), {N, p.head_dim, L});
    Tensor v = reshape(conv2d(x, p.v[static_cast<size_t>(h)]), {N, p.head_dim, L});
    Tensor scores = mul(bmm(transpose_last2(q), k), inv_sqrt_d);  // [N,L,L]
    Tensor attn = softmax_lastdim(scores);
    Tensor out = bmm(v, transpose_last2(attn));  // [N,d,L]
    head_outs.push_back(reshape(out, {N, p.head_dim, H, W}));
  }
  return conv2d(concat_channels(head_outs), p.out);
}

}  // namespace pcd
