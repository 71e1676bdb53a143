#include "pcd/verify.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pcd/distill.hpp"
#include "pcd/layers.hpp"

namespace pcd {

HeadSpec random_vector_head(RngStream& rng, int64_t in_dim, int64_t max_width) {
  HeadSpec h;
  h.input_kind = HeadKind::vector;
  int64_t cur = in_dim;
  int depth = 2 + static_cast<int>(rng.uniform_index(5));
  for (int i = 0; i < depth; ++i) {
    // first layer always sized so the input width is inferable
    int kind = i == 0 ? 0 : static_cast<int>(rng.uniform_index(4));
    if (kind <= 1) {  // fc
      int64_t out = 2 + static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(max_width - 1)));
      FcParams fc = make_fc(out, cur, rng.uniform() < 0.5f, rng);
      if (fc.bias.defined())
        for (auto& b : fc.bias.mutable_data()) b = rng.gaussian(0.5f);
      h.layers.push_back(HeadLayer::make_fc(std::move(fc)));
      cur = out;
    } else if (kind == 2) {  // bn with randomized statistics
      BatchNormParams bn = make_batchnorm(cur, rng.uniform() < 0.7f, BnLayout::vector);
      for (int64_t c = 0; c < cur; ++c) {
        bn.running_mean.mutable_data()[static_cast<size_t>(c)] = rng.gaussian();
        bn.running_var.mutable_data()[static_cast<size_t>(c)] = 0.25f + 2.0f * rng.uniform();
        if (bn.affine()) {
          bn.gamma.mutable_data()[static_cast<size_t>(c)] = rng.gaussian();
          bn.beta.mutable_data()[static_cast<size_t>(c)] = rng.gaussian(0.5f);
        }
      }
      h.layers.push_back(HeadLayer::make_bn(std::move(bn)));
    } else {
      h.layers.push_back(HeadLayer::make_relu());
    }
  }
  validate_head(h);
  return h;
}

double scalar_gradient_check(const std::function<Tensor(const Tensor&)>& f,
                             const std::vector<Tensor>& points, double eps) {
  if (points.empty())
    throw std::invalid_argument("scalar_gradient_check: needs at least one point");
  std::vector<double> best(points[0].data().size(), 1e300);
  for (Tensor x : points) {
    x.set_requires_grad(true);
    x.zero_grad();
    {
      Tape tape;
      Tensor y = f(x);
      if (y.numel() != 1)
        throw std::invalid_argument("scalar_gradient_check: f must return a scalar");
      backward(y);
    }
    std::vector<float> analytic(best.size(), 0.0f);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    auto buf = x.mutable_data();
    for (size_t i = 0; i < buf.size(); ++i) {
      float orig = buf[i];
      buf[i] = static_cast<float>(orig + eps);
      double fp = static_cast<double>(f(x).item());
      buf[i] = static_cast<float>(orig - eps);
      double fm = static_cast<double>(f(x).item());
      buf[i] = orig;
      double numeric = (fp - fm) / (2.0 * eps);
      double a = static_cast<double>(analytic[i]);
      double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
      best[i] = std::min(best[i], std::fabs(a - numeric) / denom);
    }
  }
  double worst = 0.0;
  for (double e : best) worst = std::max(worst, e);
  return worst;
}

double pcd_loss_bruteforce(const std::vector<float>& s_star,
                           const std::vector<float>& t, int64_t batch,
                           int64_t dim, int64_t spatial,
                           const std::vector<float>& negs, int64_t num_negs,
                           double tau) {
  const double eps2 = 1e-12 * 1e-12;
  auto normalized_pixel = [&](const std::vector<float>& buf, int64_t n, int64_t i,
                              std::vector<double>& out) {
    out.assign(static_cast<size_t>(dim), 0.0);
    double ss = 0.0;
    for (int64_t d = 0; d < dim; ++d) {
      double v = buf[static_cast<size_t>((n * dim + d) * spatial + i)];
      out[static_cast<size_t>(d)] = v;
      ss += v * v;
    }
    double inv = 1.0 / std::sqrt(ss + eps2);
    for (auto& v : out) v = static_cast<double>(static_cast<float>(v * inv));
  };

  double total = 0.0;
  std::vector<double> sv, tv;
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t i = 0; i < spatial; ++i) {
      normalized_pixel(s_star, n, i, sv);
      normalized_pixel(t, n, i, tv);
      double pos = 0.0;
      for (int64_t d = 0; d < dim; ++d) pos += sv[static_cast<size_t>(d)] * tv[static_cast<size_t>(d)];
      double denom = std::exp(pos / tau);
      for (int64_t k = 0; k < num_negs; ++k) {
        double dot = 0.0;
        for (int64_t d = 0; d < dim; ++d)
          dot += sv[static_cast<size_t>(d)] *
                 static_cast<double>(negs[static_cast<size_t>(k * dim + d)]);
        denom += std::exp(dot / tau);
      }
      total += -std::log(std::exp(pos / tau) / denom);
    }
  return total / static_cast<double>(batch * spatial);
}

// Scalarizes fn's output with a random cotangent r, centered at the
// unperturbed output so the probe scalar is O(eps) and its f32 rounding is
// negligible. A single cotangent can be ill-conditioned on elements where
// sum_j r_j * J_ji nearly cancels (BN-style Jacobians have zero column sums),
// so three independent cotangents are probed and each element keeps its
// best-conditioned estimate; a wrong Jacobian entry fails under every probe.
double layer_gradient_check(const std::function<Tensor(const Tensor&)>& fn,
                            Tensor x, double eps, uint64_t probe_seed) {
  constexpr int kProbes = 3;
  const size_t n = x.data().size();
  std::vector<double> best(n, 1e300);

  Tensor y0 = fn(x).detached();

  for (int pi = 0; pi < kProbes; ++pi) {
    RngStream rng(probe_seed + static_cast<uint64_t>(pi));
    Tensor r = add(Tensor::uniform(y0.shape(), rng), 0.25f);
    auto scalar = [&](const Tensor& t) -> double {
      return static_cast<double>(mean_all(mul(sub(fn(t), y0), r)).item());
    };

    x.set_requires_grad(true);
    x.zero_grad();
    {
      Tape tape;
      backward(mean_all(mul(sub(fn(x), y0), r)));
    }
    std::vector<float> analytic(n, 0.0f);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

    auto buf = x.mutable_data();
    for (size_t i = 0; i < n; ++i) {
      float orig = buf[i];
      buf[i] = static_cast<float>(orig + eps);
      double fp = scalar(x);
      buf[i] = static_cast<float>(orig - eps);
      double fm = scalar(x);
      buf[i] = orig;
      double numeric = (fp - fm) / (2.0 * eps);
      double a = static_cast<double>(analytic[i]);
      double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
      best[i] = std::min(best[i], std::fabs(a - numeric) / denom);
    }
    x.zero_grad();
  }
  double worst = 0.0;
  for (double e : best) worst = std::max(worst, e);
  return worst;
}


// ---- suites ----

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

}  // namespace

CheckResult run_adaptor_invariance_suite(uint64_t seed, int heads, int trials,
                                         int64_t spatial, double tol) {
  CheckResult r;
  r.name = "adaptor invariance";
  RngStream rng = RngStream::derive(seed, "suite-adaptor");
  double worst = 0.0;
  for (int h = 0; h < heads; ++h) {
    int64_t in_dim = 3 + static_cast<int64_t>(rng.uniform_index(10));
    HeadSpec head = random_vector_head(rng, in_dim);
    HeadSpec adapted = adapt_head(head, true);
    HeadSpec base = strip_trailing_affine_free_bn(head);
    InvarianceReport rep =
        verify_invariance(base, adapted, trials, spatial, tol, rng.next_u64());
    worst = std::max(worst, rep.max_abs_dev);
  }
  r.measure = worst;
  r.pass = worst <= tol;
  r.detail = std::to_string(heads) + " heads, max |original(pool) - pool(adapted)| = " +
             fmt(worst) + " (tol " + fmt(tol) + ")";
  return r;
}

CheckResult run_cw_relu_suite(uint64_t seed, int trials) {
  CheckResult r;
  r.name = "cw-relu commutation";
  RngStream rng = RngStream::derive(seed, "suite-cwrelu");
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    Tensor x = Tensor::gaussian({2, 4, 3, 5}, rng, 1.5f);
    Tensor lhs = relu(global_avg_pool(x));
    Tensor rhs = global_avg_pool(cw_relu(x));
    for (size_t i = 0; i < lhs.data().size(); ++i)
      worst = std::max(worst, std::fabs(static_cast<double>(lhs.data()[i]) -
                                        static_cast<double>(rhs.data()[i])));
  }
  bool commutes = worst <= 1e-6;

  // the plain-ReLU substitute must break on the constructed counterexample:
  // channel values [-3, 1] -> relu(pool) = relu(-1) = 0 but pool(relu) = 0.5
  Tensor counter = Tensor::from_data({1, 1, 1, 2}, {-3.0f, 1.0f});
  double lhs = relu(global_avg_pool(counter)).item();
  double rhs = global_avg_pool(relu(counter)).item();
  bool violates = std::fabs(lhs - rhs) > 1e-3;

  r.measure = worst;
  r.pass = commutes && violates;
  r.detail = std::to_string(trials) + " maps, max commutation deviation = " + fmt(worst) +
             "; plain-ReLU counterexample deviation = " + fmt(std::fabs(lhs - rhs));
  return r;
}

CheckResult run_gradient_uniformity_suite(uint64_t seed) {
  CheckResult r;
  r.name = "gradient uniformity";
  RngStream rng = RngStream::derive(seed, "suite-uniformity");
  LossConfig cfg;
  MemoryQueue q(16, 4);
  q.push_vectors(Tensor::gaussian({6, 4}, rng));
  Tensor s = Tensor::gaussian({2, 4, 3, 3}, rng);
  Tensor t = Tensor::gaussian({2, 4, 3, 3}, rng);

  UniformityReport image = gradient_uniformity_check(LossLevel::image, s.clone(), t, q, cfg);
  UniformityReport pixel = gradient_uniformity_check(LossLevel::pixel, s.clone(), t, q, cfg);

  r.measure = image.rel;
  r.pass = image.uniform && pixel.max_pairwise_dev > 0.0;
  r.detail = "image-level relative spread = " + fmt(image.rel) +
             " (uniform); pixel-level spread = " + fmt(pixel.max_pairwise_dev) +
             " (> 0)";
  return r;
}

CheckResult run_loss_oracle_suite(uint64_t seed, int instances, double tol) {
  CheckResult r;
  r.name = "loss oracle";
  RngStream rng = RngStream::derive(seed, "suite-oracle");
  LossConfig cfg;
  double worst = 0.0;
  for (int inst = 0; inst < instances; ++inst) {
    int64_t N = 1 + static_cast<int64_t>(rng.uniform_index(2));
    int64_t H = 1 + static_cast<int64_t>(rng.uniform_index(4));
    int64_t W = 1 + static_cast<int64_t>(rng.uniform_index(4));
    int64_t D = 3 + static_cast<int64_t>(rng.uniform_index(6));
    int64_t K = static_cast<int64_t>(rng.uniform_index(9));
    Tensor s = Tensor::gaussian({N, D, H, W}, rng);
    Tensor t = Tensor::gaussian({N, D, H, W}, rng);
    MemoryQueue q(16, D);
    if (K > 0) q.push_vectors(Tensor::gaussian({K, D}, rng));
    Tensor negs = q.snapshot();
    std::vector<float> negbuf;
    if (negs.defined()) negbuf = {negs.data().begin(), negs.data().end()};
    double got = pcd_loss(s, t, q, cfg).item();
    double want = pcd_loss_bruteforce({s.data().begin(), s.data().end()},
                                      {t.data().begin(), t.data().end()}, N, D,
                                      H * W, negbuf, K, cfg.tau);
    worst = std::max(worst, std::fabs(got - want));
  }

  // analytic scalar case: unit positive pair, one orthogonal negative, tau 0.2
  Tensor su = Tensor::from_data({3}, {1, 0, 0});
  Tensor nu = Tensor::from_data({3}, {0, 1, 0});
  double scalar_case = pixel_infonce(su, su.clone(), std::vector<Tensor>{nu}, 0.2f).item();
  double scalar_dev = std::fabs(scalar_case - std::log1p(std::exp(-5.0)));

  r.measure = worst;
  r.pass = worst <= tol && scalar_dev <= 1e-7;
  r.detail = std::to_string(instances) + " instances vs brute force, max |dev| = " +
             fmt(worst) + "; log(1+e^-5) case dev = " + fmt(scalar_dev);
  return r;
}

CheckResult run_gradient_check_suite(uint64_t seed) {
  CheckResult r;
  r.name = "gradient checks";
  RngStream rng = RngStream::derive(seed, "suite-grad");
  double worst = 0.0;
  auto track = [&](const char* what, double err) {
    worst = std::max(worst, err);
    if (err > 1e-3)
      r.detail += std::string(r.detail.empty() ? "" : "; ") + what + " = " + fmt(err);
  };

  {
    ConvParams p = make_conv(3, 2, 3, 2, 1, true, rng);
    Tensor x = Tensor::gaussian({1, 2, 5, 5}, rng);
    track("conv d/dx", layer_gradient_check(
                           [&](const Tensor& t) { return conv2d(t, p); }, x.clone()));
    track("conv d/dk", layer_gradient_check(
                           [&](const Tensor& t) {
                             ConvParams q{t, p.bias, p.stride, p.padding};
                             return conv2d(x, q);
                           },
                           p.kernel.detached()));
    track("conv d/db", layer_gradient_check(
                           [&](const Tensor& t) {
                             ConvParams q{p.kernel, t, p.stride, p.padding};
                             return conv2d(x, q);
                           },
                           p.bias.detached()));
  }
  {
    BatchNormParams inf = make_batchnorm(3, true, BnLayout::map);
    for (int64_t c = 0; c < 3; ++c) {
      inf.running_mean.mutable_data()[static_cast<size_t>(c)] = rng.gaussian();
      inf.running_var.mutable_data()[static_cast<size_t>(c)] = 0.4f + rng.uniform();
    }
    Tensor x = Tensor::gaussian({3, 3, 2, 2}, rng);
    track("bn-inference d/dx", layer_gradient_check(
                                   [&](const Tensor& t) { return batchnorm(t, inf); },
                                   x.clone()));
    BatchNormParams tr = make_batchnorm(3, true, BnLayout::map);
    tr.train = true;
    track("bn-train d/dx", layer_gradient_check(
                               [&](const Tensor& t) { return batchnorm(t, tr); },
                               x.clone()));
    track("bn-train d/dgamma", layer_gradient_check(
                                   [&](const Tensor& t) {
                                     BatchNormParams q = tr;
                                     q.gamma = t;
                                     return batchnorm(x, q);
                                   },
                                   Tensor::gaussian({3}, rng)));
    track("bn-train d/dbeta", layer_gradient_check(
                                  [&](const Tensor& t) {
                                    BatchNormParams q = tr;
                                    q.beta = t;
                                    return batchnorm(x, q);
                                  },
                                  Tensor::gaussian({3}, rng)));
  }
  {
    Tensor x = Tensor::gaussian({1, 3, 2, 2}, rng, 2.0f);
    track("cw-relu", layer_gradient_check([](const Tensor& t) { return cw_relu(t); },
                                          x.clone(), 1e-3));
    track("l2-normalize", layer_gradient_check(
                              [](const Tensor& t) { return l2_normalize(t, 1); },
                              x.clone()));
    track("bilinear-resize", layer_gradient_check(
                                 [](const Tensor& t) { return bilinear_resize(t, 5, 3); },
                                 x.clone()));
    track("global-avg-pool", layer_gradient_check(
                                 [](const Tensor& t) { return global_avg_pool(t); },
                                 x.clone()));
  }
  {
    MhsaParams p = make_mhsa(4, 2, 3, rng);
    Tensor x = Tensor::gaussian({1, 4, 2, 2}, rng);
    track("mhsa", layer_gradient_check([&](const Tensor& t) { return mhsa(t, p); },
                                       x.clone()));
  }
  {
    LossConfig cfg;
    MemoryQueue q(8, 3);
    q.push_vectors(Tensor::gaussian({3, 3}, rng));
    Tensor t = Tensor::gaussian({1, 3, 2, 2}, rng);
    std::vector<Tensor> points;
    for (int k = 0; k < 3; ++k) points.push_back(Tensor::gaussian({1, 3, 2, 2}, rng));
    track("pcd-loss", scalar_gradient_check(
                          [&](const Tensor& x2) { return pcd_loss(x2, t, q, cfg); }, points));
    track("image-loss", scalar_gradient_check(
                            [&](const Tensor& x2) { return image_level_loss(x2, t, q, cfg); },
                            points));
  }

  r.measure = worst;
  r.pass = worst <= 1e-3;
  if (r.detail.empty())
    r.detail = "all layers and losses, max rel err = " + fmt(worst);
  return r;
}

CheckResult run_queue_suite() {
  CheckResult r;
  r.name = "queue semantics";
  r.pass = true;
  MemoryQueue q(4, 3);
  double worst_norm_dev = 0.0;
  for (int i = 1; i <= 11; ++i) {
    Tensor v = Tensor::from_data({1, 3}, {static_cast<float>(i), 1.0f, 0.5f}, true);
    q.push_vectors(v);
    if (q.size() != std::min<int64_t>(4, i)) r.pass = false;
    Tensor snap = q.snapshot();
    if (snap.requires_grad()) r.pass = false;
    int64_t expect_first = std::max(1, i - 3);
    for (int64_t row = 0; row < snap.dim(0); ++row) {
      double x = snap.data()[static_cast<size_t>(row * 3)];
      double y = snap.data()[static_cast<size_t>(row * 3 + 1)];
      double z = snap.data()[static_cast<size_t>(row * 3 + 2)];
      if (std::fabs(x / y - static_cast<double>(expect_first + row)) > 1e-4)
        r.pass = false;
      worst_norm_dev =
          std::max(worst_norm_dev, std::fabs(std::sqrt(x * x + y * y + z * z) - 1.0));
    }
  }
  if (worst_norm_dev > 1e-5) r.pass = false;

  // no gradient reaches the negatives or the teacher side
  RngStream rng(1);
  LossConfig cfg;
  Tensor s = Tensor::gaussian({1, 3, 2, 2}, rng, 1.0f, true);
  Tensor t = Tensor::gaussian({1, 3, 2, 2}, rng, 1.0f, true);
  {
    Tape tape;
    backward(pcd_loss(s, t, q, cfg));
  }
  if (!s.has_grad() || t.has_grad()) r.pass = false;

  r.measure = worst_norm_dev;
  r.detail = "capacity 4, 11 pushes: FIFO order, max |norm - 1| = " + fmt(worst_norm_dev) +
             ", teacher and negatives gradient-free";
  return r;
}

std::vector<CheckResult> run_all_suites(uint64_t seed) {
  return {run_adaptor_invariance_suite(seed, 100, 16, 7, 1e-5),
          run_cw_relu_suite(seed, 100),
          run_gradient_uniformity_suite(seed),
          run_loss_oracle_suite(seed, 50, 1e-6),
          run_gradient_check_suite(seed),
          run_queue_suite()};
}

}  // namespace pcd
