#include "pcd/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace pcd {

int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

void check_shape(const Shape& s) {
  if (s.empty()) throw std::invalid_argument("tensor shape must be nonempty");
  for (int64_t d : s) {
    if (d < 1)
      throw std::invalid_argument("tensor dims must be >= 1, got " + shape_str(s));
  }
}

std::shared_ptr<TensorData> make_data(Shape shape, bool requires_grad) {
  check_shape(shape);
  auto d = std::make_shared<TensorData>();
  d->data.assign(static_cast<size_t>(numel_of(shape)), 0.0f);
  d->shape = std::move(shape);
  d->requires_grad = requires_grad;
  return d;
}

thread_local Tape* g_current_tape = nullptr;

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(make_data(std::move(shape), requires_grad));
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), 1.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  Tensor t(make_data(std::move(shape), requires_grad));
  for (auto& v : t.d_->data) v = value;
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
  check_shape(shape);
  if (static_cast<int64_t>(data.size()) != numel_of(shape))
    throw std::invalid_argument("from_data: buffer size " +
                                std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->data = std::move(data);
  d->requires_grad = requires_grad;
  return Tensor(d);
}

Tensor Tensor::uniform(Shape shape, RngStream& rng, bool requires_grad) {
  Tensor t(make_data(std::move(shape), requires_grad));
  for (auto& v : t.d_->data) v = rng.uniform();
  return t;
}

Tensor Tensor::uniform(Shape shape, uint64_t seed, bool requires_grad) {
  RngStream rng(seed);
  return uniform(std::move(shape), rng, requires_grad);
}

Tensor Tensor::gaussian(Shape shape, RngStream& rng, float stddev, bool requires_grad) {
  Tensor t(make_data(std::move(shape), requires_grad));
  for (auto& v : t.d_->data) v = rng.gaussian(stddev);
  return t;
}

Tensor Tensor::gaussian(Shape shape, uint64_t seed, float stddev, bool requires_grad) {
  RngStream rng(seed);
  return gaussian(std::move(shape), rng, stddev, requires_grad);
}

float Tensor::item() const {
  if (numel() != 1)
    throw std::invalid_argument("item(): tensor has " + std::to_string(numel()) +
                                " elements, expected 1");
  return d_->data[0];
}

Tensor Tensor::detached() const {
  return from_data(d_->shape, d_->data, false);
}

Tensor Tensor::clone() const {
  return from_data(d_->shape, d_->data, d_->requires_grad);
}

// ---- tape ----

Tape::Tape() {
  prev_ = g_current_tape;
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

bool Tape::verify_replay() const {
  for (const auto& n : nodes_) {
    std::vector<float> scratch(n.output.raw()->data.size());
    n.fwd(n.inputs, scratch.data());
    if (std::memcmp(scratch.data(), n.output.raw()->data.data(),
                    scratch.size() * sizeof(float)) != 0)
      return false;
  }
  return true;
}

Tensor record_op(const char* name, std::vector<Tensor> inputs, Shape out_shape,
                 ForwardFn fwd, BackwardFn bwd) {
  Tensor out = Tensor::zeros(std::move(out_shape));
  fwd(inputs, out.mutable_data().data());
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  Tape* tape = Tape::current();
  if (needs && tape) {
    out.set_requires_grad(true);
    tape->nodes_.push_back(
        {std::move(inputs), out, name, std::move(fwd), std::move(bwd)});
  }
  return out;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  Tape* tape = Tape::current();
  if (!tape) throw std::runtime_error("backward: no active tape");

  std::unordered_map<TensorData*, std::vector<float>> flow;
  flow[loss.raw()] = {1.0f};

  for (auto it = tape->nodes_.rbegin(); it != tape->nodes_.rend(); ++it) {
    auto gi = flow.find(it->output.raw());
    if (gi == flow.end()) continue;
    std::vector<float*> gins(it->inputs.size(), nullptr);
    for (size_t i = 0; i < it->inputs.size(); ++i) {
      const Tensor& in = it->inputs[i];
      if (!in.requires_grad()) continue;
      auto& buf = flow[in.raw()];
      if (buf.empty()) buf.assign(in.raw()->data.size(), 0.0f);
      gins[i] = buf.data();
    }
    gi = flow.find(it->output.raw());  // map may have rehashed
    it->bwd(it->inputs, it->output, gi->second.data(), gins);
  }

  for (auto& [td, buf] : flow) {
    if (!td->requires_grad) continue;
    if (td->grad.empty()) td->grad.assign(td->data.size(), 0.0f);
    for (size_t i = 0; i < buf.size(); ++i) td->grad[i] += buf[i];
  }
}

// ---- elementwise ----

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  return record_op(
      "add", {a, b}, a.shape(),
      [](const std::vector<Tensor>& ins, float* out) {
        auto x = ins[0].data(), y = ins[1].data();
        for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
      },
      [](const std::vector<Tensor>& ins, const Tensor&, const float* g,
         const std::vector<float*>& gins) {
        size_t n = ins[0].data().size();
        if (gins[0]) for (size_t i = 0; i < n; ++i) gins[0][i] += g[i];
        if (gins[1]) for (size_t i = 0; i < n; ++i) gins[1][i] += g[i];
      });
}

Tensor add(const Tensor& a, float b) {
  return record_op(
      "add_scalar", {a}, a.shape(),
      [b](const std::vector<Tensor>& ins, float* out) {
        auto x = ins[0].data();
        for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] + b;
      },
      [](const std::vector<Tensor>& ins, const Tensor&, const float* g,
         const std::vector<float*>& gins) {
        if (!gins[0]) return;
        size_t n = ins[0].data().size();
        for (size_t i = 0; i < n; ++i) gins[0][i] += g[i];
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  return record_op(
      "sub", {a, b}, a.shape(),
      [](const std::vector<Tensor>& ins, float* out) {
        auto x = ins[0].data(), y = ins[1].data();
        for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
      },
      [](const std::vector<Tensor>& ins, const Tensor&, const float* g,
         const std::vector<float*>& gins) {
        size_t n = ins[0].data().size();
        if (gins[0]) for (size_t i = 0; i < n; ++i) gins[0][i] += g[i];
        if (gins[1]) for (size_t i = 0; i < n; ++i) gins[1][i] -= g[i];
      });
}

Tensor sub(const Tensor& a, float b) { return add(a, -b); }

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  return record_op(
      "mul", {a, b}, a.shape(),
      [](const std::vector<Tensor>& ins, float* out) {
        auto x = ins[0].data(), y = ins[1].data();
        for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
      },
      [](const std::vector<Tensor>& ins, const Tensor&, const float* g,
         const std::vector<float*>& gins) {
        auto x = ins[0].data(), y = ins[1].data();
        if (gins[0]) for (size_t i = 0; i < x.size(); ++i) gins[0][i] += g[i] * y[i];
        if (gins[1]) for (size_t i = 0; i < x.size(); ++i) gins[1][i] += g[i] * x[i];
      });
}

Tensor mul(const Tensor& a, float b) {
  return record_op(
      "scale", {a}, a.shape(),
      [b](const std::vector<Tensor>& ins, float* out) {
        auto x = ins[0].data();
        for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * b;
      },
      [b](const std::vector<Tensor>& ins, const Tensor&, const float* g,
          const std::vector<float*>& gins) {
        if (!gins[0]) return;
        size_t n = ins[0].data().size();
        for (size_t i = 0; i < n; ++i) gins[0][i] += g[i] * b;
      });
}

Tensor exp(const Tensor& a) {
  return record_op(
      "exp", {a}, a.shape(),
      [](const std::vector<Tensor>& ins, float* out) {
        auto x = ins[0].data();
        for (size_t i = 0; i < x.size(); ++i)
          out[i] = static_cast<float>(std::exp(static_cast<double>(x[i])));
      },
      [](const std::vector<Tensor>&, const Tensor& out, const float* g,
         const std::vector<float*>& gins) {
        if (!gins[0]) return;
        auto y = out.data();
        for (size_t i = 0; i < y.size(); ++i) gins[0][i] += g[i] * y[i];
      });
}

Tensor log(const Tensor& a) {
  for (float v : a.data())
    if (!(v > 0.0f))
      throw std::domain_error("log: input must be strictly positive, got " +
                              std::to_string(v));
  return record_op(
      "log", {a}, a.shape(),
      [](const std::vector<Tensor>& ins, float* out) {
        auto x = ins[0].data();
        for (size_t i = 0; i < x.size(); ++i)
          out[i] = static_cast<float>(std::log(static_cast<double>(x[i])));
      },
      [](const std::vector<Tensor>& ins, const Tensor&, const float* g,
         const std::vector<float*>& gins) {
        if (!gins[0]) return;
        auto x = ins[0].data();
        for (size_t i = 0; i < x.size(); ++i) gins[0][i] += g[i] / x[i];
      });
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw std::invalid_argument("matmul: expects 2-D tensors, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: inner dims differ, " +
                                shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  return record_op(
      "matmul", {a, b}, {m, n},
      [m, k, n](const std::vector<Tensor>& ins, float* out) {
        const float* A = ins[0].data().data();
        const float* B = ins[1].data().data();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t t = 0; t < k; ++t)
              acc += static_cast<double>(A[i * k + t]) * static_cast<double>(B[t * n + j]);
            out[i * n + j] = static_cast<float>(acc);
          }
      },
      [m, k, n](const std::vector<Tensor>& ins, const Tensor&, const float* g,
                const std::vector<float*>& gins) {
        const float* A = ins[0].data().data();
        const float* B = ins[1].data().data();
        if (gins[0]) {  // dA = g * B^T
          for (int64_t i = 0; i < m; ++i)
            for (int64_t t = 0; t < k; ++t) {
              double acc = 0.0;
              for (int64_t j = 0; j < n; ++j)
                acc += static_cast<double>(g[i * n + j]) * static_cast<double>(B[t * n + j]);
              gins[0][i * k + t] += static_cast<float>(acc);
            }
        }
        if (gins[1]) {  // dB = A^T * g
          for (int64_t t = 0; t < k; ++t)
            for (int64_t j = 0; j < n; ++j) {
              double acc = 0.0;
              for (int64_t i = 0; i < m; ++i)
                acc += static_cast<double>(A[i * k + t]) * static_cast<double>(g[i * n + j]);
              gins[1][t * n + j] += static_cast<float>(acc);
            }
        }
      });
}

// ---- reductions ----

namespace {

struct ReducePlan {
  Shape out_shape;
  std::vector<int64_t> out_index;  // input linear index -> output linear index
  int64_t group_size = 1;
};

ReducePlan plan_reduce(const Shape& in, std::vector<int> axes) {
  ReducePlan p;
  std::vector<bool> reduced(in.size(), false);
  for (int ax : axes) {
    if (ax < 0 || ax >= static_cast<int>(in.size()))
      throw std::invalid_argument("reduce: axis " + std::to_string(ax) +
                                  " out of range for " + shape_str(in));
    if (reduced[static_cast<size_t>(ax)])
      throw std::invalid_argument("reduce: duplicate axis " + std::to_string(ax));
    reduced[static_cast<size_t>(ax)] = true;
    p.group_size *= in[static_cast<size_t>(ax)];
  }
  for (size_t i = 0; i < in.size(); ++i)
    if (!reduced[i]) p.out_shape.push_back(in[i]);
  if (p.out_shape.empty()) p.out_shape.push_back(1);

  // Row-major strides of the output laid over the kept axes.
  std::vector<int64_t> out_strides(in.size(), 0);
  int64_t stride = 1;
  for (int i = static_cast<int>(in.size()) - 1; i >= 0; --i) {
    if (!reduced[static_cast<size_t>(i)]) {
      out_strides[static_cast<size_t>(i)] = stride;
      stride *= in[static_cast<size_t>(i)];
    }
  }
  int64_t total = numel_of(in);
  p.out_index.resize(static_cast<size_t>(total));
  std::vector<int64_t> idx(in.size(), 0);
  for (int64_t lin = 0; lin < total; ++lin) {
    int64_t o = 0;
    for (size_t d = 0; d < in.size(); ++d) o += idx[d] * out_strides[d];
    p.out_index[static_cast<size_t>(lin)] = o;
    for (int d = static_cast<int>(in.size()) - 1; d >= 0; --d) {
      if (++idx[static_cast<size_t>(d)] < in[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
    }
  }
  return p;
}

Tensor identity_copy(const Tensor& x, const char* name) {
  return record_op(
      name, {x}, x.shape(),
      [](const std::vector<Tensor>& ins, float* out) {
        auto v = ins[0].data();
        std::memcpy(out, v.data(), v.size() * sizeof(float));
      },
      [](const std::vector<Tensor>& ins, const Tensor&, const float* g,
         const std::vector<float*>& gins) {
        if (!gins[0]) return;
        size_t n = ins[0].data().size();
        for (size_t i = 0; i < n; ++i) gins[0][i] += g[i];
      });
}

enum class RKind { Sum, Mean, Max };

Tensor reduce_impl(const Tensor& x, std::vector<int> axes, RKind kind) {
  if (axes.empty()) return identity_copy(x, "reduce_identity");
  auto plan = std::make_shared<ReducePlan>(plan_reduce(x.shape(), std::move(axes)));
  int64_t out_n = numel_of(plan->out_shape);
  const char* name = kind == RKind::Sum ? "reduce_sum"
                     : kind == RKind::Mean ? "reduce_mean" : "reduce_max";
  ForwardFn fwd;
  BackwardFn bwd;
  if (kind == RKind::Max) {
    fwd = [plan, out_n](const std::vector<Tensor>& ins, float* out) {
      auto v = ins[0].data();
      std::vector<bool> seen(static_cast<size_t>(out_n), false);
      for (size_t i = 0; i < v.size(); ++i) {
        int64_t o = plan->out_index[i];
        if (!seen[static_cast<size_t>(o)] || v[i] > out[o]) {
          out[o] = v[i];
          seen[static_cast<size_t>(o)] = true;
        }
      }
    };
    bwd = [plan, out_n](const std::vector<Tensor>& ins, const Tensor&,
                        const float* g, const std::vector<float*>& gins) {
      if (!gins[0]) return;
      auto v = ins[0].data();
      // Ties break to the lowest linear index: strict > during the rescan.
      std::vector<int64_t> arg(static_cast<size_t>(out_n), -1);
      std::vector<float> best(static_cast<size_t>(out_n), 0.0f);
      for (size_t i = 0; i < v.size(); ++i) {
        int64_t o = plan->out_index[i];
        if (arg[static_cast<size_t>(o)] < 0 || v[i] > best[static_cast<size_t>(o)]) {
          arg[static_cast<size_t>(o)] = static_cast<int64_t>(i);
          best[static_cast<size_t>(o)] = v[i];
        }
      }
      for (int64_t o = 0; o < out_n; ++o)
        gins[0][arg[static_cast<size_t>(o)]] += g[o];
    };
  } else {
    double inv = kind == RKind::Mean ? 1.0 / static_cast<double>(plan->group_size) : 1.0;
    fwd = [plan, out_n, inv](const std::vector<Tensor>& ins, float* out) {
      auto v = ins[0].data();
      std::vector<double> acc(static_cast<size_t>(out_n), 0.0);
      for (size_t i = 0; i < v.size(); ++i)
        acc[static_cast<size_t>(plan->out_index[i])] += static_cast<double>(v[i]);
      for (int64_t o = 0; o < out_n; ++o)
        out[o] = static_cast<float>(acc[static_cast<size_t>(o)] * inv);
    };
    bwd = [plan, inv](const std::vector<Tensor>& ins, const Tensor&,
                      const float* g, const std::vector<float*>& gins) {
      if (!gins[0]) return;
      size_t n = ins[0].data().size();
      for (size_t i = 0; i < n; ++i)
        gins[0][i] += static_cast<float>(static_cast<double>(g[plan->out_index[i]]) * inv);
    };
  }
  return record_op(name, {x}, plan->out_shape, std::move(fwd), std::move(bwd));
}

std::vector<int> all_axes(const Tensor& x) {
  std::vector<int> axes(static_cast<size_t>(x.ndim()));
  for (int i = 0; i < x.ndim(); ++i) axes[static_cast<size_t>(i)] = i;
  return axes;
}

}  // namespace

Tensor reduce_sum(const Tensor& x, std::vector<int> axes) {
  return reduce_impl(x, std::move(axes), RKind::Sum);
}
Tensor reduce_mean(const Tensor& x, std::vector<int> axes) {
  return reduce_impl(x, std::move(axes), RKind::Mean);
}
Tensor reduce_max(const Tensor& x, std::vector<int> axes) {
  return reduce_impl(x, std::move(axes), RKind::Max);
}
Tensor sum_all(const Tensor& x) { return reduce_sum(x, all_axes(x)); }
Tensor mean_all(const Tensor& x) { return reduce_mean(x, all_axes(x)); }

// ---- finite differences ----

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         Tensor x, double eps) {
  if (eps <= 0) throw std::invalid_argument("finite_diff_check: eps must be > 0");
  x.set_requires_grad(true);
  x.zero_grad();
  {
    Tape tape;
    Tensor y = f(x);
    if (y.numel() != 1)
      throw std::invalid_argument("finite_diff_check: f must return a scalar");
    backward(y);
  }
  std::vector<float> analytic(x.data().begin(), x.data().end());
  if (x.has_grad()) {
    std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
  } else {
    std::fill(analytic.begin(), analytic.end(), 0.0f);
  }

  auto eval = [&](void) -> double {
    Tensor y = f(x);
    if (y.numel() != 1)
      throw std::invalid_argument("finite_diff_check: f must return a scalar");
    return static_cast<double>(y.item());
  };

  double max_rel = 0.0;
  auto buf = x.mutable_data();
  for (size_t i = 0; i < buf.size(); ++i) {
    float orig = buf[i];
    buf[i] = static_cast<float>(orig + eps);
    double fp = eval();
    buf[i] = static_cast<float>(orig - eps);
    double fm = eval();
    buf[i] = orig;
    double numeric = (fp - fm) / (2.0 * eps);
    double a = static_cast<double>(analytic[i]);
    double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
    max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
  }
  return max_rel;
}

}  // namespace pcd
