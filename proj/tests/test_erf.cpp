#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "pcd/erf.hpp"
#include "pcd/layers.hpp"
#include "pcd/modelzoo.hpp"

using namespace pcd;

namespace {

ModelFn conv_stack(std::vector<ConvParams> convs) {
  return [convs](const Tensor& x) mutable {
    Tensor h = x;
    for (auto& c : convs) h = conv2d(h, c);
    return h;
  };
}

}  // namespace

TEST_CASE("erf: single 3x3 conv lights exactly the 3x3 patch") {
  RngStream rng(90);
  ConvParams c = make_conv(4, 3, 3, 1, 1, false, rng);
  ErfMap m = compute_erf(conv_stack({c}), 9, 8, 91);
  REQUIRE(!m.degenerate);
  CHECK(m.values.shape() == Shape{9, 9});
  int64_t center = 4;
  for (int64_t y = 0; y < 9; ++y)
    for (int64_t x = 0; x < 9; ++x) {
      float v = m.values.data()[static_cast<size_t>(y * 9 + x)];
      bool inside = std::llabs(y - center) <= 1 && std::llabs(x - center) <= 1;
      if (inside) {
        CHECK(v > 0.0f);
      } else {
        CHECK(v == 0.0f);
      }
    }
  CHECK(erf_radius(m, 0.95) == 1);
  // max element is 1 by normalization
  float peak = 0.0f;
  for (float v : m.values.data()) peak = std::max(peak, v);
  CHECK(peak == 1.0f);
}

TEST_CASE("erf: two stacked 3x3 convs support exactly 5x5") {
  RngStream rng(92);
  ConvParams c1 = make_conv(4, 3, 3, 1, 1, false, rng);
  ConvParams c2 = make_conv(2, 4, 3, 1, 1, false, rng);
  ErfMap m = compute_erf(conv_stack({c1, c2}), 11, 8, 93);
  int64_t center = 5;
  for (int64_t y = 0; y < 11; ++y)
    for (int64_t x = 0; x < 11; ++x) {
      float v = m.values.data()[static_cast<size_t>(y * 11 + x)];
      bool inside = std::llabs(y - center) <= 2 && std::llabs(x - center) <= 2;
      if (inside) {
        CHECK(v > 0.0f);
      } else {
        CHECK(v == 0.0f);
      }
    }
}

TEST_CASE("erf: attention reaches every input position including corners") {
  RngStream rng(94);
  ConvParams stem = make_conv(6, 3, 3, 1, 1, false, rng);
  MhsaParams attn = make_mhsa(6, 2, 4, rng);
  ModelFn model = [&](const Tensor& x) { return mhsa(conv2d(x, stem), attn); };
  ErfMap m = compute_erf(model, 10, 8, 95);
  for (float v : m.values.data()) CHECK(v > 0.0f);
}

TEST_CASE("erf_radius: delta map and degenerate map") {
  ErfMap delta;
  std::vector<float> d(49, 0.0f);
  d[3 * 7 + 3] = 1.0f;
  delta.values = Tensor::from_data({7, 7}, std::move(d));
  CHECK(erf_radius(delta, 0.95) == 0);

  ErfMap degen;
  degen.values = Tensor::zeros({5, 5});
  degen.degenerate = true;
  CHECK_THROWS(erf_radius(degen, 0.95));
}

TEST_CASE("erf: deeper backbone has radius >= shallower") {
  BackboneConfig shallow;
  shallow.stem_channels = 6;
  shallow.stages = {{1, 8, 1}};
  BackboneConfig deep = shallow;
  deep.stages.push_back({1, 12, 1});
  deep.stages.push_back({1, 16, 1});

  for (uint64_t seed : {1, 2, 3}) {
    Backbone bs = build_backbone(shallow, seed);
    Backbone bd = build_backbone(deep, seed);
    ModelFn fs = [&](const Tensor& x) { return backbone_forward(x, bs); };
    ModelFn fd = [&](const Tensor& x) { return backbone_forward(x, bd); };
    ErfMap ms = compute_erf(fs, 17, 12, seed + 10);
    ErfMap md = compute_erf(fd, 17, 12, seed + 10);
    CHECK(erf_radius(md, 0.95) >= erf_radius(ms, 0.95));
  }
}

TEST_CASE("erf: sample count beyond convergence moves the radius by at most 1") {
  BackboneConfig spec;
  spec.stem_channels = 6;
  spec.stages = {{1, 8, 2}};
  Backbone b = build_backbone(spec, 5);
  ModelFn f = [&](const Tensor& x) { return backbone_forward(x, b); };
  ErfMap m64 = compute_erf(f, 12, 64, 50);
  ErfMap m128 = compute_erf(f, 12, 128, 50);
  CHECK(std::llabs(erf_radius(m64, 0.95) - erf_radius(m128, 0.95)) <= 1);
}

TEST_CASE("erf: left-right symmetric kernel yields a symmetric map") {
  // single conv, one output channel, kernel symmetric in the width axis
  std::vector<float> k(3 * 3 * 3);
  RngStream rng(96);
  for (int64_t ci = 0; ci < 3; ++ci)
    for (int64_t u = 0; u < 3; ++u) {
      float a = rng.gaussian(), b = rng.gaussian();
      k[static_cast<size_t>((ci * 3 + u) * 3 + 0)] = a;
      k[static_cast<size_t>((ci * 3 + u) * 3 + 1)] = b;
      k[static_cast<size_t>((ci * 3 + u) * 3 + 2)] = a;
    }
  ConvParams c{Tensor::from_data({1, 3, 3, 3}, std::move(k)), Tensor(), 1, 1};
  ErfMap m = compute_erf(conv_stack({c}), 9, 4, 97);
  for (int64_t y = 0; y < 9; ++y)
    for (int64_t x = 0; x < 9; ++x)
      CHECK(m.values.data()[static_cast<size_t>(y * 9 + x)] ==
            doctest::Approx(m.values.data()[static_cast<size_t>(y * 9 + 8 - x)])
                .epsilon(1e-6));
}

TEST_CASE("erf: pooled (non-spatial) outputs are rejected") {
  RngStream rng(98);
  ConvParams c = make_conv(4, 3, 3, 1, 1, false, rng);
  ModelFn bad = [&](const Tensor& x) { return global_avg_pool(conv2d(x, c)); };
  CHECK_THROWS(compute_erf(bad, 8, 2, 99));
}

TEST_CASE("write_heatmap: pgm bytes and csv round trip") {
  ErfMap ones;
  ones.values = Tensor::ones({3, 4});
  std::string pgm = "/tmp/pcd_test_erf.pgm";
  write_heatmap(ones, pgm, "pgm");
  std::ifstream f(pgm, std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  CHECK(content.substr(0, 3) == "P5\n");
  CHECK(content.find("4 3\n255\n") != std::string::npos);
  std::string pixels = content.substr(content.find("255\n") + 4);
  REQUIRE(pixels.size() == 12);
  for (char ch : pixels) CHECK(static_cast<unsigned char>(ch) == 255);

  RngStream rng(100);
  ErfMap randmap;
  randmap.values = Tensor::uniform({5, 6}, rng);
  std::string csv = "/tmp/pcd_test_erf.csv";
  write_heatmap(randmap, csv, "csv");
  std::ifstream cf(csv);
  std::vector<float> parsed;
  std::string line;
  while (std::getline(cf, line)) {
    size_t pos = 0;
    while (pos < line.size()) {
      size_t comma = line.find(',', pos);
      if (comma == std::string::npos) comma = line.size();
      parsed.push_back(std::stof(line.substr(pos, comma - pos)));
      pos = comma + 1;
    }
  }
  REQUIRE(parsed.size() == 30);
  for (size_t i = 0; i < 30; ++i)
    CHECK(std::fabs(parsed[i] - randmap.values.data()[i]) <= 1e-5f);

  CHECK_THROWS(write_heatmap(ones, "/tmp/pcd_test_erf.x", "bmp"));
  CHECK_THROWS(write_heatmap(ones, "/nonexistent-dir/erf.pgm", "pgm"));
  std::filesystem::remove(pgm);
  std::filesystem::remove(csv);
}
