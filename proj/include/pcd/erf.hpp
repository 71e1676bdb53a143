#pragma once

#include <functional>
#include <string>

#include "pcd/tensor.hpp"

namespace pcd {

// Effective receptive field of one output position: average |input gradient|
// (summed over input channels) when the center output pixel of every channel
// receives an upstream gradient of 1.
struct ErfMap {
  Tensor values;  // [S,S], non-negative, max element 1 unless degenerate
  bool degenerate = false;
  int64_t center_h = 0, center_w = 0;  // probed output coordinate
};

using ModelFn = std::function<Tensor(const Tensor&)>;  // [1,3,S,S] -> [1,C,H,W]

// Probes n_samples standard-Gaussian inputs; ties for the center pixel break
// to the lower index on even sizes.
ErfMap compute_erf(const ModelFn& model, int64_t input_size, int n_samples,
                   uint64_t seed);

// Smallest r such that the centered (2r+1)^2 window (clipped to the map)
// holds at least `mass` of the total. Rejects degenerate maps.
int64_t erf_radius(const ErfMap& m, double mass = 0.95);

// format "pgm": binary 8-bit P5, values round(255*v).
// format "csv": row-major, comma separated, 6 significant digits.
void write_heatmap(const ErfMap& m, const std::string& path,
                   const std::string& format);

}  // namespace pcd
