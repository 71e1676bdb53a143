#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pcd/adaptor.hpp"
#include "pcd/tensor.hpp"

namespace pcd {

// Random grammar-valid vector head (FC/BN/ReLU stack with chained dims,
// randomized weights and BN statistics, inference mode).
HeadSpec random_vector_head(RngStream& rng, int64_t in_dim, int64_t max_width = 24);

// Brute-force reference for the per-pixel distillation loss: plain double
// loops over raw buffers, one pixel at a time, direct formula without the
// log-sum-exp rearrangement. Requires matching spatial sizes. negs holds K
// unit vectors of length D back to back.
double pcd_loss_bruteforce(const std::vector<float>& s_star,
                           const std::vector<float>& t, int64_t batch,
                           int64_t dim, int64_t spatial,
                           const std::vector<float>& negs, int64_t num_negs,
                           double tau);

// Gradient check for a tensor-to-tensor function. Scalarizes the output with
// a fixed random cotangent and centers it at the unperturbed output, so the
// f32 rounding of the probe scalar stays proportional to eps instead of to
// the raw output magnitude. Returns max elementwise relative error.
double layer_gradient_check(const std::function<Tensor(const Tensor&)>& fn,
                            Tensor x, double eps = 1e-2,
                            uint64_t probe_seed = 1234);

// Gradient check for scalar functions (losses). Evaluated at several input
// points; each element keeps its best-conditioned relative error. A wrong
// gradient mismatches at every point, while a zero-crossing component is
// specific to one point.
double scalar_gradient_check(const std::function<Tensor(const Tensor&)>& f,
                             const std::vector<Tensor>& points,
                             double eps = 1e-2);

// One verification suite outcome; `detail` carries the measured quantity.
struct CheckResult {
  std::string name;
  bool pass = false;
  double measure = 0.0;  // suite-specific: max deviation, max rel err, ...
  std::string detail;
};

// The mechanism suites behind `pcd verify` (and the acceptance criteria).
CheckResult run_adaptor_invariance_suite(uint64_t seed, int heads, int trials,
                                         int64_t spatial, double tol);
CheckResult run_cw_relu_suite(uint64_t seed, int trials);
CheckResult run_gradient_uniformity_suite(uint64_t seed);
CheckResult run_loss_oracle_suite(uint64_t seed, int instances, double tol);
CheckResult run_gradient_check_suite(uint64_t seed);
CheckResult run_queue_suite();

std::vector<CheckResult> run_all_suites(uint64_t seed);

}  // namespace pcd
