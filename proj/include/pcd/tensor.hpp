#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pcd/rng.hpp"

namespace pcd {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorData {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until backward() populates it
  bool requires_grad = false;
};

// Dense row-major f32 tensor. A Tensor is a cheap handle; the buffer is
// treated as immutable once an op has consumed it (grad accumulation and
// optimizer updates between steps are the only sanctioned mutations).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor uniform(Shape shape, RngStream& rng, bool requires_grad = false);
  static Tensor uniform(Shape shape, uint64_t seed, bool requires_grad = false);
  static Tensor gaussian(Shape shape, RngStream& rng, float stddev = 1.0f,
                         bool requires_grad = false);
  static Tensor gaussian(Shape shape, uint64_t seed, float stddev = 1.0f,
                         bool requires_grad = false);

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  int ndim() const { return static_cast<int>(d_->shape.size()); }
  int64_t dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(d_->data.size()); }

  std::span<const float> data() const { return d_->data; }
  // Sanctioned mutation points: optimizer/state updates outside any live tape.
  std::span<float> mutable_data() { return d_->data; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool v) { d_->requires_grad = v; }

  bool has_grad() const { return !d_->grad.empty(); }
  std::span<const float> grad() const { return d_->grad; }
  std::span<float> mutable_grad() { return d_->grad; }
  void zero_grad() { d_->grad.clear(); }

  float item() const;

  // Deep copy with gradient tracking severed.
  Tensor detached() const;
  // Deep copy (data only), keeps requires_grad flag.
  Tensor clone() const;

  TensorData* raw() const { return d_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;
};

// Custom-op hooks. fwd must be pure: recomputing it from the saved inputs
// reproduces the recorded output bit-exactly (tape replay contract).
// bwd accumulates (+=) into gins; gins[i] is null when input i needs no grad.
using ForwardFn = std::function<void(const std::vector<Tensor>& ins, float* out)>;
using BackwardFn =
    std::function<void(const std::vector<Tensor>& ins, const Tensor& out,
                       const float* gout, const std::vector<float*>& gins)>;

// Thread-confined record of executed differentiable ops, in execution order
// (hence topological). Construction installs the tape as the thread's current
// one; destruction restores the previous.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  size_t size() const { return nodes_.size(); }
  // Recomputes every node's forward from its saved inputs and compares
  // bit-exactly against the recorded output.
  bool verify_replay() const;

 private:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    const char* op;
    ForwardFn fwd;
    BackwardFn bwd;
  };
  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;

  friend Tensor record_op(const char* name, std::vector<Tensor> inputs,
                          Shape out_shape, ForwardFn fwd, BackwardFn bwd);
  friend void backward(const Tensor& loss);
};

// Runs fwd, and if any input requires grad under an active tape, records the
// node and marks the output as requiring grad.
Tensor record_op(const char* name, std::vector<Tensor> inputs, Shape out_shape,
                 ForwardFn fwd, BackwardFn bwd);

// Reverse-mode sweep over the current tape. Gradients accumulate additively
// into every reachable requires_grad tensor; repeated calls add again.
void backward(const Tensor& loss);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, float b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, float b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, float b);  // scale
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // rejects non-positive inputs

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]

// ---- reductions (axes removed from the output; {} = identity copy) ----
Tensor reduce_sum(const Tensor& x, std::vector<int> axes);
Tensor reduce_mean(const Tensor& x, std::vector<int> axes);
Tensor reduce_max(const Tensor& x, std::vector<int> axes);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// Central-difference gradient check: returns the max elementwise relative
// error between analytic and numeric gradients of the scalar function f at x.
// Denominator: max(|analytic|, |numeric|, 1e-6).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         Tensor x, double eps = 1e-3);

}  // namespace pcd
