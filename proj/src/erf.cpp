#include "pcd/erf.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace pcd {

ErfMap compute_erf(const ModelFn& model, int64_t input_size, int n_samples,
                   uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("compute_erf: n_samples must be >= 1");
  int64_t S = input_size;
  std::vector<double> accum(static_cast<size_t>(S * S), 0.0);

  ErfMap map;
  for (int i = 0; i < n_samples; ++i) {
    RngStream rng = RngStream::derive(seed, "erf", static_cast<uint64_t>(i));
    Tensor x = Tensor::gaussian({1, 3, S, S}, rng, 1.0f, true);
    Tape tape;
    Tensor y = model(x);
    if (y.ndim() != 4 || y.dim(2) < 1 || y.dim(3) < 1)
      throw std::invalid_argument("compute_erf: model must emit spatial maps [N,C,H,W]");
    int64_t C = y.dim(1), H = y.dim(2), W = y.dim(3);
    map.center_h = (H - 1) / 2;
    map.center_w = (W - 1) / 2;

    // upstream gradient of 1 on all channels of the center output pixel
    std::vector<float> mask(static_cast<size_t>(C * H * W), 0.0f);
    for (int64_t c = 0; c < C; ++c)
      mask[static_cast<size_t>((c * H + map.center_h) * W + map.center_w)] = 1.0f;
    Tensor probe = sum_all(mul(y, Tensor::from_data({1, C, H, W}, std::move(mask))));
    backward(probe);

    if (!x.has_grad()) continue;
    auto g = x.grad();
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t p = 0; p < S * S; ++p)
        accum[static_cast<size_t>(p)] +=
            std::fabs(static_cast<double>(g[static_cast<size_t>(c * S * S + p)]));
  }

  double peak = 0.0;
  for (double v : accum) peak = std::max(peak, v);
  std::vector<float> values(accum.size(), 0.0f);
  if (peak > 0.0) {
    for (size_t i = 0; i < accum.size(); ++i)
      values[i] = static_cast<float>(accum[i] / peak);
  } else {
    map.degenerate = true;
  }
  map.values = Tensor::from_data({S, S}, std::move(values));
  return map;
}

int64_t erf_radius(const ErfMap& m, double mass) {
  if (m.degenerate) throw std::invalid_argument("erf_radius: degenerate map");
  if (!(mass > 0.0 && mass <= 1.0))
    throw std::invalid_argument("erf_radius: mass must be in (0,1]");
  int64_t S = m.values.dim(0);
  int64_t ch = (S - 1) / 2, cw = (S - 1) / 2;
  double total = 0.0;
  for (float v : m.values.data()) total += static_cast<double>(v);
  for (int64_t r = 0; r < 2 * S; ++r) {
    double win = 0.0;
    for (int64_t y = std::max<int64_t>(0, ch - r); y <= std::min(S - 1, ch + r); ++y)
      for (int64_t x = std::max<int64_t>(0, cw - r); x <= std::min(S - 1, cw + r); ++x)
        win += static_cast<double>(m.values.data()[static_cast<size_t>(y * S + x)]);
    if (win >= mass * total) return r;
  }
  return 2 * S;
}

void write_heatmap(const ErfMap& m, const std::string& path,
                   const std::string& format) {
  int64_t H = m.values.dim(0), W = m.values.dim(1);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_heatmap: cannot open '" + path + "'");
  if (format == "pgm") {
    f << "P5\n" << W << " " << H << "\n255\n";
    for (float v : m.values.data()) {
      int byte = static_cast<int>(std::lround(255.0 * static_cast<double>(v)));
      byte = std::clamp(byte, 0, 255);
      f.put(static_cast<char>(byte));
    }
  } else if (format == "csv") {
    char buf[48];
    for (int64_t y = 0; y < H; ++y) {
      for (int64_t x = 0; x < W; ++x) {
        std::snprintf(buf, sizeof(buf), "%.6g",
                      static_cast<double>(m.values.data()[static_cast<size_t>(y * W + x)]));
        f << (x ? "," : "") << buf;
      }
      f << "\n";
    }
  } else {
    throw std::invalid_argument("write_heatmap: unknown format '" + format + "'");
  }
  if (!f) throw std::runtime_error("write_heatmap: write failed for '" + path + "'");
}

}  // namespace pcd
