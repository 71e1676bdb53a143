#include "pcd/adaptor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace pcd {

HeadLayer HeadLayer::make_fc(FcParams p) {
  HeadLayer l;
  l.kind = HeadLayerKind::fc;
  l.fc = std::move(p);
  return l;
}
HeadLayer HeadLayer::make_bn(BatchNormParams p) {
  HeadLayer l;
  l.kind = HeadLayerKind::bn;
  l.bn = std::move(p);
  return l;
}
HeadLayer HeadLayer::make_relu() {
  HeadLayer l;
  l.kind = HeadLayerKind::relu;
  return l;
}
HeadLayer HeadLayer::make_conv1x1(ConvParams p) {
  HeadLayer l;
  l.kind = HeadLayerKind::conv1x1;
  l.conv = std::move(p);
  return l;
}
HeadLayer HeadLayer::make_cw_relu() {
  HeadLayer l;
  l.kind = HeadLayerKind::cw_relu;
  return l;
}

namespace {

int64_t layer_out_dim(const HeadLayer& l, int64_t cur) {
  switch (l.kind) {
    case HeadLayerKind::fc:
      if (l.fc.in_features() != cur)
        throw std::invalid_argument("head: fc expects " + std::to_string(l.fc.in_features()) +
                                    " features, chain provides " + std::to_string(cur));
      return l.fc.out_features();
    case HeadLayerKind::conv1x1:
      if (l.conv.kernel.dim(2) != 1 || l.conv.kernel.dim(3) != 1 ||
          l.conv.stride != 1 || l.conv.padding != 0)
        throw std::invalid_argument("head: conv layers must be 1x1, stride 1, pad 0");
      if (l.conv.in_channels() != cur)
        throw std::invalid_argument("head: conv expects " + std::to_string(l.conv.in_channels()) +
                                    " channels, chain provides " + std::to_string(cur));
      return l.conv.out_channels();
    case HeadLayerKind::bn:
      if (l.bn.channels() != cur)
        throw std::invalid_argument("head: bn expects " + std::to_string(l.bn.channels()) +
                                    " channels, chain provides " + std::to_string(cur));
      return cur;
    case HeadLayerKind::relu:
    case HeadLayerKind::cw_relu:
      return cur;
  }
  throw std::invalid_argument("head: unknown layer kind");
}

}  // namespace

void validate_head(const HeadSpec& h) {
  if (h.layers.empty()) throw std::invalid_argument("head: empty layer list");
  for (const auto& l : h.layers) {
    if (h.input_kind == HeadKind::vector) {
      if (l.kind == HeadLayerKind::conv1x1 || l.kind == HeadLayerKind::cw_relu)
        throw std::invalid_argument("head: vector heads may only contain fc/bn/relu");
      if (l.kind == HeadLayerKind::bn && l.bn.layout != BnLayout::vector)
        throw std::invalid_argument("head: vector head carries a map-layout bn");
    } else {
      if (l.kind == HeadLayerKind::fc)
        throw std::invalid_argument("head: map heads may not contain fc layers");
      if (l.kind == HeadLayerKind::bn && l.bn.layout != BnLayout::map)
        throw std::invalid_argument("head: map head carries a vector-layout bn");
    }
  }
  int64_t cur = head_in_features(h);
  for (const auto& l : h.layers) cur = layer_out_dim(l, cur);
}

int64_t head_in_features(const HeadSpec& h) {
  for (const auto& l : h.layers) {
    if (l.kind == HeadLayerKind::fc) return l.fc.in_features();
    if (l.kind == HeadLayerKind::conv1x1) return l.conv.in_channels();
    if (l.kind == HeadLayerKind::bn) return l.bn.channels();
  }
  throw std::invalid_argument("head: cannot infer input width (no sized layer)");
}

int64_t head_out_features(const HeadSpec& h) {
  int64_t cur = head_in_features(h);
  for (const auto& l : h.layers) cur = layer_out_dim(l, cur);
  return cur;
}

Tensor head_forward(const Tensor& x, HeadSpec& h) {
  if (h.input_kind == HeadKind::vector && x.ndim() != 2)
    throw std::invalid_argument("head_forward: vector head expects [N,C], got " +
                                shape_str(x.shape()));
  if (h.input_kind == HeadKind::map && x.ndim() != 4)
    throw std::invalid_argument("head_forward: map head expects [N,C,H,W], got " +
                                shape_str(x.shape()));
  Tensor cur = x;
  for (auto& l : h.layers) {
    switch (l.kind) {
      case HeadLayerKind::fc: cur = fc_forward(cur, l.fc); break;
      case HeadLayerKind::conv1x1: cur = conv2d(cur, l.conv); break;
      case HeadLayerKind::bn: cur = batchnorm(cur, l.bn); break;
      case HeadLayerKind::relu: cur = relu(cur); break;
      case HeadLayerKind::cw_relu: cur = cw_relu(cur); break;
    }
  }
  return cur;
}

namespace {

Tensor clone_or_null(const Tensor& t) { return t.defined() ? t.clone() : Tensor(); }

BatchNormParams clone_bn(const BatchNormParams& p) {
  BatchNormParams c;
  c.gamma = clone_or_null(p.gamma);
  c.beta = clone_or_null(p.beta);
  c.running_mean = p.running_mean.clone();
  c.running_var = p.running_var.clone();
  c.eps = p.eps;
  c.momentum = p.momentum;
  c.train = p.train;
  c.layout = p.layout;
  return c;
}

}  // namespace

HeadSpec clone_head(const HeadSpec& h) {
  HeadSpec c;
  c.input_kind = h.input_kind;
  for (const auto& l : h.layers) {
    HeadLayer cl;
    cl.kind = l.kind;
    switch (l.kind) {
      case HeadLayerKind::fc:
        cl.fc.weight = l.fc.weight.clone();
        cl.fc.bias = clone_or_null(l.fc.bias);
        break;
      case HeadLayerKind::conv1x1:
        cl.conv.kernel = l.conv.kernel.clone();
        cl.conv.bias = clone_or_null(l.conv.bias);
        cl.conv.stride = l.conv.stride;
        cl.conv.padding = l.conv.padding;
        break;
      case HeadLayerKind::bn: cl.bn = clone_bn(l.bn); break;
      default: break;
    }
    c.layers.push_back(std::move(cl));
  }
  return c;
}

void freeze_head(HeadSpec& h) {
  for (auto& l : h.layers) {
    switch (l.kind) {
      case HeadLayerKind::fc:
        l.fc.weight.set_requires_grad(false);
        if (l.fc.bias.defined()) l.fc.bias.set_requires_grad(false);
        break;
      case HeadLayerKind::conv1x1:
        l.conv.kernel.set_requires_grad(false);
        if (l.conv.bias.defined()) l.conv.bias.set_requires_grad(false);
        break;
      case HeadLayerKind::bn:
        if (l.bn.gamma.defined()) l.bn.gamma.set_requires_grad(false);
        if (l.bn.beta.defined()) l.bn.beta.set_requires_grad(false);
        l.bn.train = false;
        break;
      default: break;
    }
  }
}

FcParams fuse_fc_bn(const FcParams& fc, const BatchNormParams& bn) {
  if (bn.train)
    throw std::invalid_argument("fuse_fc_bn: train-mode BN cannot be fused");
  if (bn.channels() != fc.out_features())
    throw std::invalid_argument("fuse_fc_bn: channel mismatch");
  int64_t out = fc.out_features(), in = fc.in_features();
  std::vector<float> w(static_cast<size_t>(out * in));
  std::vector<float> b(static_cast<size_t>(out));
  for (int64_t o = 0; o < out; ++o) {
    double g = bn.affine() ? bn.gamma.data()[static_cast<size_t>(o)] : 1.0;
    double beta = bn.affine() ? bn.beta.data()[static_cast<size_t>(o)] : 0.0;
    double s = g / std::sqrt(static_cast<double>(bn.running_var.data()[static_cast<size_t>(o)]) +
                             static_cast<double>(bn.eps));
    for (int64_t i = 0; i < in; ++i)
      w[static_cast<size_t>(o * in + i)] =
          static_cast<float>(s * static_cast<double>(fc.weight.data()[static_cast<size_t>(o * in + i)]));
    double bias = fc.bias.defined() ? fc.bias.data()[static_cast<size_t>(o)] : 0.0;
    b[static_cast<size_t>(o)] = static_cast<float>(
        s * (bias - static_cast<double>(bn.running_mean.data()[static_cast<size_t>(o)])) + beta);
  }
  FcParams fused;
  fused.weight = Tensor::from_data({out, in}, std::move(w));
  fused.bias = Tensor::from_data({out}, std::move(b));
  return fused;
}

ConvParams fuse_conv1x1_bn(const ConvParams& conv, const BatchNormParams& bn) {
  FcParams as_fc;
  as_fc.weight = Tensor::from_data({conv.out_channels(), conv.in_channels()},
                                   {conv.kernel.data().begin(), conv.kernel.data().end()});
  as_fc.bias = conv.bias.defined() ? conv.bias.clone() : Tensor();
  FcParams fused = fuse_fc_bn(as_fc, bn);
  ConvParams out = fc_to_conv1x1(fused);
  out.stride = conv.stride;
  out.padding = conv.padding;
  return out;
}

ConvParams fc_to_conv1x1(const FcParams& fc) {
  ConvParams p;
  p.kernel = Tensor::from_data({fc.out_features(), fc.in_features(), 1, 1},
                               {fc.weight.data().begin(), fc.weight.data().end()});
  p.bias = fc.bias.defined() ? fc.bias.clone() : Tensor();
  p.stride = 1;
  p.padding = 0;
  return p;
}

HeadSpec strip_trailing_affine_free_bn(const HeadSpec& h) {
  HeadSpec out = clone_head(h);
  if (!out.layers.empty() && out.layers.back().kind == HeadLayerKind::bn &&
      !out.layers.back().bn.affine()) {
    out.layers.pop_back();
  }
  return out;
}

HeadSpec adapt_head(const HeadSpec& h, bool drop_trailing_affine_free_bn) {
  if (h.input_kind == HeadKind::map)
    throw std::invalid_argument("adapt_head: head is already adapted (map-kind input)");
  validate_head(h);
  HeadSpec src = drop_trailing_affine_free_bn ? strip_trailing_affine_free_bn(h)
                                              : clone_head(h);
  HeadSpec out;
  out.input_kind = HeadKind::map;
  for (auto& l : src.layers) {
    switch (l.kind) {
      case HeadLayerKind::fc:
        out.layers.push_back(HeadLayer::make_conv1x1(fc_to_conv1x1(l.fc)));
        break;
      case HeadLayerKind::bn: {
        BatchNormParams bn = clone_bn(l.bn);
        bn.layout = BnLayout::map;
        out.layers.push_back(HeadLayer::make_bn(std::move(bn)));
        break;
      }
      case HeadLayerKind::relu:
        out.layers.push_back(HeadLayer::make_cw_relu());
        break;
      default:
        throw std::invalid_argument("adapt_head: unknown layer kind in vector head");
    }
  }
  validate_head(out);
  return out;
}

std::string InvarianceReport::text() const {
  std::ostringstream os;
  os << "head adaptation invariance report\n"
     << "  inputs: standard Gaussian maps, " << trials << " trials, spatial "
     << spatial << "x" << spatial << "\n"
     << "  max |original(pool(x)) - pool(adapted(x))| = " << max_abs_dev << "\n"
     << "  tolerance " << tol << " -> " << (pass ? "PASS" : "FAIL") << "\n";
  return os.str();
}

InvarianceReport verify_invariance(HeadSpec& original, HeadSpec& adapted,
                                   int trials, int64_t spatial, double tol,
                                   uint64_t seed, int64_t batch) {
  if (original.input_kind != HeadKind::vector)
    throw std::invalid_argument("verify_invariance: original must be vector-kind");
  if (adapted.input_kind != HeadKind::map)
    throw std::invalid_argument("verify_invariance: adapted must be map-kind");
  if (head_in_features(original) != head_in_features(adapted) ||
      head_out_features(original) != head_out_features(adapted))
    throw std::invalid_argument("verify_invariance: head dims do not match");

  int64_t c_in = head_in_features(original);
  RngStream rng = RngStream::derive(seed, "invariance");
  InvarianceReport rep;
  rep.trials = trials;
  rep.spatial = spatial;
  rep.tol = tol;
  for (int t = 0; t < trials; ++t) {
    Tensor x = Tensor::gaussian({batch, c_in, spatial, spatial}, rng);
    Tensor lhs = head_forward(global_avg_pool(x), original);
    Tensor rhs = global_avg_pool(head_forward(x, adapted));
    for (size_t i = 0; i < lhs.data().size(); ++i) {
      double d = std::fabs(static_cast<double>(lhs.data()[i]) -
                           static_cast<double>(rhs.data()[i]));
      rep.max_abs_dev = std::max(rep.max_abs_dev, d);
    }
  }
  rep.pass = rep.max_abs_dev <= tol;
  return rep;
}

}  // namespace pcd
