#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "pcd/layers.hpp"
#include "pcd/tensor.hpp"
#include "pcd/verify.hpp"

using namespace pcd;

namespace {

// Straightforward six-loop convolution, written independently as the oracle.
// Same accumulation order as the definition: per output element, sum over
// (ci, u, v) in row-major order with a double accumulator.
std::vector<float> conv_oracle(const Tensor& x, const Tensor& k, const Tensor* bias,
                               int64_t stride, int64_t pad, int64_t Ho, int64_t Wo) {
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  std::vector<float> out(static_cast<size_t>(N * Co * Ho * Wo));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          double acc = bias ? bias->data()[static_cast<size_t>(co)] : 0.0;
          for (int64_t ci = 0; ci < C; ++ci)
            for (int64_t u = 0; u < kh; ++u)
              for (int64_t v = 0; v < kw; ++v) {
                int64_t ih = oh * stride - pad + u;
                int64_t iw = ow * stride - pad + v;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += static_cast<double>(x.data()[static_cast<size_t>(((n * C + ci) * H + ih) * W + iw)]) *
                       static_cast<double>(k.data()[static_cast<size_t>(((co * C + ci) * kh + u) * kw + v)]);
              }
          out[static_cast<size_t>(((n * Co + co) * Ho + oh) * Wo + ow)] =
              static_cast<float>(acc);
        }
  return out;
}

}  // namespace

TEST_CASE("conv2d: 1x1 conv equals per-pixel fc") {
  RngStream rng(5);
  Tensor x = Tensor::gaussian({1, 3, 4, 4}, rng);
  ConvParams conv = make_conv(2, 3, 1, 1, 0, true, rng);
  Tensor y = conv2d(x, conv);

  FcParams fc;
  fc.weight = reshape(conv.kernel, {2, 3});
  fc.bias = conv.bias;
  for (int64_t h = 0; h < 4; ++h)
    for (int64_t w = 0; w < 4; ++w) {
      std::vector<float> pix(3);
      for (int64_t c = 0; c < 3; ++c)
        pix[static_cast<size_t>(c)] = x.data()[static_cast<size_t>((c * 4 + h) * 4 + w)];
      Tensor row = Tensor::from_data({1, 3}, pix);
      Tensor ref = fc_forward(row, fc);
      for (int64_t c = 0; c < 2; ++c)
        CHECK(y.data()[static_cast<size_t>((c * 4 + h) * 4 + w)] ==
              doctest::Approx(ref.data()[static_cast<size_t>(c)]).epsilon(1e-6));
    }
}

TEST_CASE("conv2d: center-one 3x3 kernel with pad 1 is the identity") {
  RngStream rng(6);
  Tensor x = Tensor::gaussian({2, 3, 5, 5}, rng);
  ConvParams p;
  std::vector<float> k(3 * 3 * 3 * 3, 0.0f);
  for (int64_t c = 0; c < 3; ++c) k[static_cast<size_t>(((c * 3 + c) * 3 + 1) * 3 + 1)] = 1.0f;
  p.kernel = Tensor::from_data({3, 3, 3, 3}, k);
  p.stride = 1;
  p.padding = 1;
  Tensor y = conv2d(x, p);
  for (size_t i = 0; i < x.data().size(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d: random case matches the naive loop oracle exactly") {
  RngStream rng(7);
  Tensor x = Tensor::gaussian({2, 3, 6, 7}, rng);
  ConvParams p = make_conv(4, 3, 3, 2, 1, true, rng);
  // give the bias nonzero values
  for (auto& b : p.bias.mutable_data()) b = rng.gaussian();
  Tensor y = conv2d(x, p);
  auto ref = conv_oracle(x, p.kernel, &p.bias, 2, 1, y.dim(2), y.dim(3));
  REQUIRE(ref.size() == y.data().size());
  for (size_t i = 0; i < ref.size(); ++i) CHECK(y.data()[i] == ref[i]);
}

TEST_CASE("conv2d: errors") {
  RngStream rng(8);
  Tensor x = Tensor::gaussian({1, 3, 4, 4}, rng);
  ConvParams wrong_c = make_conv(2, 5, 1, 1, 0, false, rng);
  CHECK_THROWS(conv2d(x, wrong_c));
  ConvParams too_big = make_conv(2, 3, 7, 1, 0, false, rng);
  CHECK_THROWS(conv2d(x, too_big));
}

TEST_CASE("conv2d: gradients vs finite differences") {
  RngStream rng(9);
  Tensor x = Tensor::gaussian({1, 2, 4, 4}, rng);
  ConvParams p = make_conv(3, 2, 3, 1, 1, true, rng);
  double ex = finite_diff_check(
      [&](const Tensor& t) { return sum_all(mul(conv2d(t, p), conv2d(t, p))); }, x, 1e-2);
  CHECK(ex <= 1e-3);

  Tensor x2 = Tensor::gaussian({1, 2, 4, 4}, rng);
  ConvParams p2 = make_conv(3, 2, 3, 2, 1, true, rng);
  double ek = finite_diff_check(
      [&](const Tensor& t) {
        ConvParams q{t, p2.bias, p2.stride, p2.padding};
        return sum_all(mul(conv2d(x2, q), conv2d(x2, q)));
      },
      p2.kernel, 1e-2);
  CHECK(ek <= 1e-3);
  double eb = finite_diff_check(
      [&](const Tensor& t) {
        ConvParams q{p2.kernel, t, p2.stride, p2.padding};
        return sum_all(mul(conv2d(x2, q), conv2d(x2, q)));
      },
      p2.bias, 1e-2);
  CHECK(eb <= 1e-3);
}

TEST_CASE("batchnorm: inference with neutral stats is the identity") {
  RngStream rng(10);
  Tensor x = Tensor::gaussian({3, 4, 2, 2}, rng);
  BatchNormParams p = make_batchnorm(4, true, BnLayout::map);
  Tensor y = batchnorm(x, p);
  for (size_t i = 0; i < x.data().size(); ++i)
    CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-5));
}

TEST_CASE("batchnorm: train mode normalizes per channel") {
  RngStream rng(11);
  Tensor x = Tensor::gaussian({8, 3, 4, 4}, rng, 2.5f);
  BatchNormParams p = make_batchnorm(3, true, BnLayout::map);
  p.train = true;
  Tensor y = batchnorm(x, p);
  int64_t S = 16, N = 8;
  for (int64_t c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < S; ++i)
        mean += y.data()[static_cast<size_t>((n * 3 + c) * S + i)];
    mean /= static_cast<double>(N * S);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < S; ++i) {
        double d = y.data()[static_cast<size_t>((n * 3 + c) * S + i)] - mean;
        var += d * d;
      }
    var /= static_cast<double>(N * S);
    CHECK(std::fabs(mean) < 1e-5);
    CHECK(std::fabs(var - 1.0) < 1e-4);
  }
  // running stats moved off their defaults
  CHECK(p.running_mean.data()[0] != 0.0f);
  CHECK(p.running_var.data()[0] != 1.0f);
}

TEST_CASE("batchnorm: vector layout equals map layout on [N,C,1,1]") {
  RngStream rng(12);
  Tensor xv = Tensor::gaussian({6, 5}, rng);
  Tensor xm = reshape(xv, {6, 5, 1, 1});
  BatchNormParams pv = make_batchnorm(5, true, BnLayout::vector);
  BatchNormParams pm = make_batchnorm(5, true, BnLayout::map);
  for (int64_t c = 0; c < 5; ++c) {
    float m = rng.gaussian(), v = 0.5f + rng.uniform();
    pv.running_mean.mutable_data()[static_cast<size_t>(c)] = m;
    pm.running_mean.mutable_data()[static_cast<size_t>(c)] = m;
    pv.running_var.mutable_data()[static_cast<size_t>(c)] = v;
    pm.running_var.mutable_data()[static_cast<size_t>(c)] = v;
    pv.gamma.mutable_data()[static_cast<size_t>(c)] = rng.gaussian();
    pm.gamma.mutable_data()[static_cast<size_t>(c)] = pv.gamma.data()[static_cast<size_t>(c)];
    pv.beta.mutable_data()[static_cast<size_t>(c)] = rng.gaussian();
    pm.beta.mutable_data()[static_cast<size_t>(c)] = pv.beta.data()[static_cast<size_t>(c)];
  }
  Tensor yv = batchnorm(xv, pv);
  Tensor ym = batchnorm(xm, pm);
  for (size_t i = 0; i < yv.data().size(); ++i) CHECK(yv.data()[i] == ym.data()[i]);
}

TEST_CASE("batchnorm: inference is a per-channel affine (closed form)") {
  RngStream rng(13);
  BatchNormParams p = make_batchnorm(2, true, BnLayout::map);
  for (int64_t c = 0; c < 2; ++c) {
    p.running_mean.mutable_data()[static_cast<size_t>(c)] = rng.gaussian();
    p.running_var.mutable_data()[static_cast<size_t>(c)] = 0.3f + rng.uniform();
    p.gamma.mutable_data()[static_cast<size_t>(c)] = rng.gaussian();
    p.beta.mutable_data()[static_cast<size_t>(c)] = rng.gaussian();
  }
  Tensor x = Tensor::gaussian({1, 2, 3, 3}, rng);
  float a = 1.7f, b = -0.4f;
  Tensor lhs = batchnorm(add(mul(x, a), b), p);
  // affine of affine: bn(a*x + b) = a*bn(x) + (b*scale + shift*(1-a))... derive
  // directly from scale/shift instead:
  Tensor bnx = batchnorm(x, p);
  for (int64_t c = 0; c < 2; ++c) {
    double scale = p.gamma.data()[static_cast<size_t>(c)] /
                   std::sqrt(static_cast<double>(p.running_var.data()[static_cast<size_t>(c)]) + 1e-5);
    for (int64_t i = 0; i < 9; ++i) {
      double expect = bnx.data()[static_cast<size_t>(c * 9 + i)] +
                      scale * ((a - 1.0) * x.data()[static_cast<size_t>(c * 9 + i)] + b);
      CHECK(lhs.data()[static_cast<size_t>(c * 9 + i)] ==
            doctest::Approx(expect).epsilon(1e-4));
    }
  }
}

TEST_CASE("batchnorm: gradients in both modes") {
  RngStream rng(14);
  Tensor x = Tensor::gaussian({4, 3, 2, 2}, rng);
  BatchNormParams inf = make_batchnorm(3, true, BnLayout::map);
  for (int64_t c = 0; c < 3; ++c) {
    inf.running_mean.mutable_data()[static_cast<size_t>(c)] = rng.gaussian();
    inf.running_var.mutable_data()[static_cast<size_t>(c)] = 0.4f + rng.uniform();
  }
  double e1 = layer_gradient_check(
      [&](const Tensor& t) { return batchnorm(t, inf); }, x);
  CHECK(e1 <= 1e-3);

  BatchNormParams tr = make_batchnorm(3, true, BnLayout::map);
  tr.train = true;  // running-stat drift between probes does not affect outputs
  double e2 = layer_gradient_check(
      [&](const Tensor& t) { return batchnorm(t, tr); }, x);
  CHECK(e2 <= 1e-3);

  double eg = layer_gradient_check(
      [&](const Tensor& t) {
        BatchNormParams q = tr;
        q.gamma = t;
        return batchnorm(x, q);
      },
      Tensor::gaussian({3}, rng));
  CHECK(eg <= 1e-3);
  double eb = layer_gradient_check(
      [&](const Tensor& t) {
        BatchNormParams q = tr;
        q.beta = t;
        return batchnorm(x, q);
      },
      Tensor::gaussian({3}, rng));
  CHECK(eb <= 1e-3);
}

TEST_CASE("cw_relu: kept and masked channels") {
  // channel mean 1 -> unchanged, channel mean -1 -> zeroed
  Tensor x = Tensor::from_data({1, 2, 1, 2}, {-1, 3, -3, 1});
  Tensor y = cw_relu(x);
  CHECK(y.data()[0] == -1.0f);
  CHECK(y.data()[1] == 3.0f);
  CHECK(y.data()[2] == 0.0f);
  CHECK(y.data()[3] == 0.0f);

  Tensor pooled_in = global_avg_pool(x);
  Tensor pooled_out = global_avg_pool(y);
  CHECK(pooled_out.data()[0] == doctest::Approx(1.0f));
  CHECK(pooled_out.data()[1] == doctest::Approx(0.0f));
  CHECK(pooled_out.data()[0] == relu(pooled_in).data()[0]);
  CHECK(pooled_out.data()[1] == relu(pooled_in).data()[1]);
}

TEST_CASE("cw_relu: commutes with global average pooling on 100 random maps") {
  RngStream rng(15);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = Tensor::gaussian({2, 4, 3, 5}, rng, 1.5f);
    Tensor lhs = relu(global_avg_pool(x));
    Tensor rhs = global_avg_pool(cw_relu(x));
    for (size_t i = 0; i < lhs.data().size(); ++i)
      CHECK(std::fabs(lhs.data()[i] - rhs.data()[i]) <= 1e-6f);
  }
}

TEST_CASE("cw_relu: gradient away from the kink") {
  RngStream rng(16);
  Tensor x = Tensor::gaussian({1, 3, 2, 2}, rng, 2.0f);
  double e = layer_gradient_check([](const Tensor& t) { return cw_relu(t); }, x, 1e-3);
  CHECK(e <= 1e-3);
}

TEST_CASE("l2_normalize: cases") {
  Tensor v = Tensor::from_data({1, 2}, {3, 4});
  Tensor n = l2_normalize(v, 1);
  CHECK(n.data()[0] == doctest::Approx(0.6f));
  CHECK(n.data()[1] == doctest::Approx(0.8f));

  Tensor unit = Tensor::from_data({1, 2}, {0.6f, 0.8f});
  Tensor n2 = l2_normalize(unit, 1);
  CHECK(n2.data()[0] == doctest::Approx(0.6f).epsilon(1e-6));
  CHECK(n2.data()[1] == doctest::Approx(0.8f).epsilon(1e-6));

  Tensor zero = Tensor::zeros({1, 3});
  Tensor nz = l2_normalize(zero, 1);
  for (float x : nz.data()) {
    CHECK(x == 0.0f);
    CHECK(!std::isnan(x));
  }

  RngStream rng(17);
  Tensor x = Tensor::gaussian({2, 5}, rng);
  double e = finite_diff_check(
      [](const Tensor& t) {
        Tensor y = l2_normalize(t, 1);
        return sum_all(mul(y, add(y, 0.3f)));
      },
      x, 1e-3);
  CHECK(e <= 1e-3);
}

TEST_CASE("bilinear_resize: identities") {
  RngStream rng(18);
  Tensor x = Tensor::gaussian({1, 2, 4, 5}, rng);
  Tensor same = bilinear_resize(x, 4, 5);
  for (size_t i = 0; i < x.data().size(); ++i)
    CHECK(same.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-6));

  Tensor c = Tensor::full({1, 1, 3, 3}, 2.75f);
  Tensor up = bilinear_resize(c, 7, 5);
  for (float v : up.data()) CHECK(v == doctest::Approx(2.75f).epsilon(1e-6));

  Tensor one = Tensor::full({1, 1, 1, 1}, 5.0f);
  Tensor big = bilinear_resize(one, 4, 6);
  for (float v : big.data()) CHECK(v == 5.0f);
}

TEST_CASE("bilinear_resize: half-pixel hand case and gradient") {
  // 1-D stripe 2 -> 4 along W: src = (d+0.5)*0.5 - 0.5 = {-0.25,0.25,0.75,1.25}
  Tensor x = Tensor::from_data({1, 1, 1, 2}, {0, 4});
  Tensor y = bilinear_resize(x, 1, 4);
  CHECK(y.data()[0] == doctest::Approx(0.0f));
  CHECK(y.data()[1] == doctest::Approx(1.0f));
  CHECK(y.data()[2] == doctest::Approx(3.0f));
  CHECK(y.data()[3] == doctest::Approx(4.0f));

  RngStream rng(19);
  Tensor t = Tensor::gaussian({1, 2, 3, 3}, rng);
  double e = finite_diff_check(
      [](const Tensor& u) {
        Tensor y2 = bilinear_resize(u, 5, 2);
        return sum_all(mul(y2, y2));
      },
      t, 1e-2);
  CHECK(e <= 1e-3);
}

TEST_CASE("global_avg_pool: value, gradient, and resize interplay") {
  Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 3, 5, 7}, true);
  Tensor p = global_avg_pool(x);
  CHECK(p.item() == 4.0f);
  {
    Tape tape;
    backward(sum_all(global_avg_pool(x)));
  }
  for (float g : x.grad()) CHECK(g == doctest::Approx(0.25f));

  Tensor c = Tensor::full({1, 3, 2, 2}, -1.5f);
  Tensor pooled = global_avg_pool(bilinear_resize(c, 5, 7));
  for (float v : pooled.data()) CHECK(v == doctest::Approx(-1.5f).epsilon(1e-6));
}

TEST_CASE("softmax rows sum to one") {
  RngStream rng(20);
  Tensor x = Tensor::gaussian({3, 4, 6}, rng, 3.0f);
  Tensor y = softmax_lastdim(x);
  for (int64_t r = 0; r < 12; ++r) {
    double s = 0.0;
    for (int64_t l = 0; l < 6; ++l) s += y.data()[static_cast<size_t>(r * 6 + l)];
    CHECK(std::fabs(s - 1.0) <= 1e-6);
  }
}

TEST_CASE("mhsa: spatially constant input gives spatially constant output") {
  RngStream rng(21);
  MhsaParams p = make_mhsa(6, 2, 4, rng);
  std::vector<float> data(6 * 9);
  for (int64_t c = 0; c < 6; ++c)
    for (int64_t i = 0; i < 9; ++i) data[static_cast<size_t>(c * 9 + i)] = 0.3f * static_cast<float>(c) - 1.0f;
  Tensor x = Tensor::from_data({1, 6, 3, 3}, data);
  Tensor y = mhsa(x, p);
  for (int64_t c = 0; c < 6; ++c)
    for (int64_t i = 1; i < 9; ++i)
      CHECK(y.data()[static_cast<size_t>(c * 9 + i)] ==
            doctest::Approx(y.data()[static_cast<size_t>(c * 9)]).epsilon(1e-5));
}

TEST_CASE("mhsa: 1x1 spatial reduces to composed linear maps") {
  RngStream rng(22);
  MhsaParams p = make_mhsa(4, 2, 3, rng);
  Tensor x = Tensor::gaussian({2, 4, 1, 1}, rng);
  Tensor y = mhsa(x, p);
  // single position: attention weight is exactly 1, so y = out(concat_h(v_h(x)))
  std::vector<Tensor> vouts;
  for (auto& vp : p.v) vouts.push_back(conv2d(x, vp));
  Tensor ref = conv2d(concat_channels(vouts), p.out);
  for (size_t i = 0; i < y.data().size(); ++i)
    CHECK(y.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-6));
}

TEST_CASE("mhsa: one head, two positions, scalar hand computation") {
  // channels=1, head_dim=1, 1x2 spatial; all convs are scalar multiplies.
  MhsaParams p;
  p.heads = 1;
  p.head_dim = 1;
  ConvParams wq{Tensor::from_data({1, 1, 1, 1}, {2.0f}), Tensor(), 1, 0};
  ConvParams wk{Tensor::from_data({1, 1, 1, 1}, {0.5f}), Tensor(), 1, 0};
  ConvParams wv{Tensor::from_data({1, 1, 1, 1}, {1.5f}), Tensor(), 1, 0};
  ConvParams wo{Tensor::from_data({1, 1, 1, 1}, {1.0f}), Tensor(), 1, 0};
  p.q = {wq};
  p.k = {wk};
  p.v = {wv};
  p.out = wo;
  float x0 = 1.0f, x1 = -2.0f;
  Tensor x = Tensor::from_data({1, 1, 1, 2}, {x0, x1});
  Tensor y = mhsa(x, p);
  // hand computation: q_i = 2x_i, k_j = 0.5x_j, v_j = 1.5x_j, scores=q_i*k_j
  auto expect = [&](float q) {
    double s0 = q * 0.5 * x0, s1 = q * 0.5 * x1;
    double m = std::max(s0, s1);
    double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
    double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
    return a0 * 1.5 * x0 + a1 * 1.5 * x1;
  };
  CHECK(y.data()[0] == doctest::Approx(expect(2.0f * x0)).epsilon(1e-6));
  CHECK(y.data()[1] == doctest::Approx(expect(2.0f * x1)).epsilon(1e-6));
}

TEST_CASE("mhsa: permuting spatial positions permutes the output") {
  RngStream rng(23);
  MhsaParams p = make_mhsa(5, 2, 4, rng);
  Tensor x = Tensor::gaussian({1, 5, 2, 3}, rng);
  Tensor y = mhsa(x, p);
  // reverse the 6 spatial positions
  std::vector<float> perm(x.data().size());
  for (int64_t c = 0; c < 5; ++c)
    for (int64_t i = 0; i < 6; ++i)
      perm[static_cast<size_t>(c * 6 + i)] = x.data()[static_cast<size_t>(c * 6 + 5 - i)];
  Tensor xp = Tensor::from_data({1, 5, 2, 3}, perm);
  Tensor yp = mhsa(xp, p);
  for (int64_t c = 0; c < 5; ++c)
    for (int64_t i = 0; i < 6; ++i)
      CHECK(yp.data()[static_cast<size_t>(c * 6 + i)] ==
            doctest::Approx(y.data()[static_cast<size_t>(c * 6 + 5 - i)]).epsilon(1e-5));
}

TEST_CASE("mhsa: gradient check") {
  RngStream rng(24);
  MhsaParams p = make_mhsa(3, 1, 2, rng);
  Tensor x = Tensor::gaussian({1, 3, 2, 2}, rng);
  double e = finite_diff_check(
      [&](const Tensor& t) {
        Tensor y = mhsa(t, p);
        return sum_all(mul(y, y));
      },
      x, 1e-2);
  CHECK(e <= 1e-3);
}

TEST_CASE("helper ops: bmm, transpose, pixel rows, concat gradients") {
  RngStream rng(25);
  Tensor a = Tensor::gaussian({2, 3, 4}, rng);
  Tensor b = Tensor::gaussian({2, 4, 2}, rng);
  double e1 = layer_gradient_check([&](const Tensor& t) { return bmm(t, b); }, a);
  CHECK(e1 <= 1e-3);
  double e2 = layer_gradient_check([&](const Tensor& t) { return bmm(a, t); }, b);
  CHECK(e2 <= 1e-3);

  Tensor m = Tensor::gaussian({2, 3, 4}, rng);
  Tensor mt = transpose_last2(m);
  CHECK(mt.shape() == Shape{2, 4, 3});
  for (int64_t bi = 0; bi < 2; ++bi)
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 4; ++j)
        CHECK(mt.data()[static_cast<size_t>(bi * 12 + j * 3 + i)] ==
              m.data()[static_cast<size_t>(bi * 12 + i * 4 + j)]);

  Tensor x4 = Tensor::gaussian({2, 3, 2, 2}, rng);
  Tensor rows = to_pixel_rows(x4);
  CHECK(rows.shape() == Shape{8, 3});
  CHECK(rows.data()[0 * 3 + 1] == x4.data()[static_cast<size_t>(1 * 4 + 0)]);

  Tensor c1 = Tensor::gaussian({1, 2, 2, 2}, rng);
  Tensor c2 = Tensor::gaussian({1, 3, 2, 2}, rng);
  Tensor cat = concat_channels({c1, c2});
  CHECK(cat.shape() == Shape{1, 5, 2, 2});
  double e3 = finite_diff_check(
      [&](const Tensor& t) {
        Tensor y = concat_channels({t, c2});
        return sum_all(mul(y, y));
      },
      c1, 1e-2);
  CHECK(e3 <= 1e-3);
}

TEST_CASE("softmax gradient") {
  RngStream rng(26);
  Tensor x = Tensor::gaussian({2, 5}, rng);
  double e = finite_diff_check(
      [](const Tensor& t) {
        Tensor y = softmax_lastdim(t);
        return sum_all(mul(y, add(y, 1.0f)));
      },
      x, 1e-2);
  CHECK(e <= 1e-3);
}
