#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pcd/trainer.hpp"

using namespace pcd;

namespace {

Tensor param_with_grad(std::vector<float> w, std::vector<float> g) {
  int64_t n = static_cast<int64_t>(w.size());
  Tensor t = Tensor::from_data({n}, std::move(w), true);
  {
    Tape tape;
    backward(mul(sum_all(t), 0.0f));
  }
  auto grad = t.mutable_grad();
  for (size_t i = 0; i < g.size(); ++i) grad[i] = g[i];
  return t;
}

TrainConfig smoke_config() {
  TrainConfig cfg;
  cfg.seed = 7;
  cfg.data.n_images = 32;
  cfg.data.image_size = 16;
  cfg.model.student_backbone.stem_channels = 8;
  cfg.model.student_backbone.stages = {{1, 12, 2}, {1, 16, 2}};
  cfg.model.teacher_backbone.stem_channels = 8;
  cfg.model.teacher_backbone.stages = {{1, 12, 2}, {1, 16, 2}};
  cfg.model.student_head_hidden = 16;
  cfg.model.teacher_head_hidden = 16;
  cfg.model.embed_dim = 8;
  cfg.model.mhsa = {true, 2, 4};
  cfg.loss.queue_capacity = 64;
  cfg.optim.batch_size = 8;
  cfg.optim.epochs = 3;
  cfg.optim.warmup_epochs = 0.5;
  cfg.optim.base_lr = 0.5f;
  cfg.optim.max_steps = 10;
  return cfg;
}

}  // namespace

TEST_CASE("lars: zero gradient with zero momentum leaves parameters unchanged") {
  Tensor t = param_with_grad({1.5f, -2.0f}, {0.0f, 0.0f});
  ParamList params = {{"w", t, false}};
  LarsState st;
  lars_step(params, st, 0.1f, 0.9f, 0.0f);
  CHECK(t.data()[0] == 1.5f);
  CHECK(t.data()[1] == -2.0f);
}

TEST_CASE("lars: scalar case follows the trust-ratio formula") {
  // w=2, g=1, wd=0, momentum=0, lr=0.1: lambda = 2/1, update = 2*0.1*1 = 0.2
  Tensor t = param_with_grad({2.0f}, {1.0f});
  ParamList params = {{"w", t, false}};
  LarsState st;
  lars_step(params, st, 0.1f, 0.0f, 0.0f);
  CHECK(t.data()[0] == doctest::Approx(1.8f).epsilon(1e-6));
}

TEST_CASE("lars: excluded parameters behave as plain SGD with momentum") {
  Tensor bias = param_with_grad({1.0f}, {0.5f});
  ParamList params = {{"b", bias, true}};
  LarsState st;
  float lr = 0.2f, mom = 0.9f;
  // step 1: m = 0.9*0 + 0.2*0.5 = 0.1 ; w = 0.9
  lars_step(params, st, lr, mom, 0.123f);  // wd must be ignored for excluded
  CHECK(bias.data()[0] == doctest::Approx(0.9f).epsilon(1e-6));
  // step 2 with the same grad: m = 0.9*0.1 + 0.1 = 0.19 ; w = 0.71
  auto g = bias.mutable_grad();
  g[0] = 0.5f;
  lars_step(params, st, lr, mom, 0.123f);
  CHECK(bias.data()[0] == doctest::Approx(0.71f).epsilon(1e-6));
}

TEST_CASE("lars: weight decay only touches non-excluded parameters") {
  Tensor a1 = param_with_grad({1.0f}, {0.0f});
  Tensor a2 = param_with_grad({1.0f}, {0.0f});
  ParamList excluded = {{"b", a1, true}};
  ParamList included = {{"w", a2, false}};
  LarsState s1, s2;
  lars_step(excluded, s1, 0.1f, 0.0f, 0.5f);
  lars_step(included, s2, 0.1f, 0.0f, 0.5f);
  CHECK(a1.data()[0] == 1.0f);   // zero grad, no decay
  CHECK(a2.data()[0] != 1.0f);   // decay shrinks the weight
  CHECK(a2.data()[0] < 1.0f);
}

TEST_CASE("lars: non-finite gradients abort with the parameter name") {
  Tensor t = param_with_grad({1.0f}, {0.3f});
  t.mutable_grad()[0] = std::numeric_limits<float>::quiet_NaN();
  ParamList params = {{"stem.kernel", t, false}};
  LarsState st;
  CHECK_THROWS_WITH_AS(lars_step(params, st, 0.1f, 0.9f, 0.0f),
                       doctest::Contains("stem.kernel"), std::runtime_error);
}

TEST_CASE("lr_schedule: warmup endpoint, midpoint, tail, errors") {
  double peak = 4.0;
  CHECK(lr_schedule(0, 100, 10, peak) == 0.0);
  CHECK(lr_schedule(5, 100, 10, peak) == doctest::Approx(2.0));
  CHECK(lr_schedule(10, 100, 10, peak) == doctest::Approx(peak));
  // cosine midpoint: u = 0.5 -> peak/2
  CHECK(lr_schedule(55, 100, 10, peak) == doctest::Approx(peak / 2).epsilon(1e-9));
  // final step of a 50-step cosine leg is below 1e-3 * peak
  CHECK(lr_schedule(99, 100, 50, peak) < 1e-3 * peak);
  CHECK_THROWS(lr_schedule(0, 10, 10, peak));
  CHECK_THROWS(lr_schedule(-1, 10, 2, peak));
  CHECK_THROWS(lr_schedule(10, 10, 2, peak));
}

TEST_CASE("linear scaling rule: peak lr is base * batch / 256 exactly") {
  TrainConfig cfg;
  cfg.optim.base_lr = 1.0f;
  cfg.optim.batch_size = 64;
  CHECK(cfg.peak_lr() == 0.25f);
  cfg.optim.batch_size = 256;
  CHECK(cfg.peak_lr() == 1.0f);
  cfg.optim.base_lr = 0.5f;
  cfg.optim.batch_size = 1024;
  CHECK(cfg.peak_lr() == 2.0f);
}

TEST_CASE("synth_dataset: deterministic, bounded, metadata-complete") {
  ImageStore a = synth_dataset(6, 16, 42);
  ImageStore b = synth_dataset(6, 16, 42);
  REQUIRE(a.count() == 6);
  for (int64_t i = 0; i < 6; ++i) {
    auto da = a.images[static_cast<size_t>(i)].data();
    auto db = b.images[static_cast<size_t>(i)].data();
    for (size_t k = 0; k < da.size(); ++k) CHECK(da[k] == db[k]);
    for (float v : da) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    const auto& shapes = a.manifest.at("images")[static_cast<size_t>(i)].at("shapes");
    CHECK(shapes.size() >= 2);
    CHECK(shapes.size() <= 5);
  }
  ImageStore c = synth_dataset(6, 16, 43);
  bool differs = false;
  for (size_t k = 0; k < a.images[0].data().size(); ++k)
    differs = differs || a.images[0].data()[k] != c.images[0].data()[k];
  CHECK(differs);

  ImageStore empty = synth_dataset(0, 16, 1);
  CHECK(empty.count() == 0);
  TrainConfig cfg = smoke_config();
  CHECK_THROWS_WITH_AS(step_budget(cfg, empty.count()), doctest::Contains("empty"),
                       std::invalid_argument);
  CHECK_THROWS(synth_dataset(4, 8, 1));  // below the minimum size
}

TEST_CASE("dataset store round trip") {
  ImageStore a = synth_dataset(3, 16, 9);
  std::string dir = "/tmp/pcd_test_store";
  std::filesystem::remove_all(dir);
  save_dataset(a, dir);
  ImageStore b = load_dataset(dir);
  REQUIRE(b.count() == 3);
  CHECK(b.size == 16);
  for (int64_t i = 0; i < 3; ++i)
    for (size_t k = 0; k < a.images[static_cast<size_t>(i)].data().size(); ++k)
      CHECK(a.images[static_cast<size_t>(i)].data()[k] ==
            b.images[static_cast<size_t>(i)].data()[k]);
  std::filesystem::remove_all(dir);
}

TEST_CASE("augment_view: identity policy, flip involution, reproducibility") {
  ImageStore store = synth_dataset(1, 16, 11);
  const Tensor& img = store.images[0];

  ViewConfig identity{1.0f, 1.0f, 0.0f, 0.0f};
  RngStream r1(5);
  Tensor same = augment_view(img, identity, r1);
  for (size_t i = 0; i < img.data().size(); ++i)
    CHECK(same.data()[i] == doctest::Approx(img.data()[i]).epsilon(1e-6));

  ViewConfig always_flip{1.0f, 1.0f, 1.0f, 0.0f};
  RngStream r2(6), r3(7);
  Tensor once = augment_view(img, always_flip, r2);
  Tensor twice = augment_view(once, always_flip, r3);
  for (size_t i = 0; i < img.data().size(); ++i)
    CHECK(twice.data()[i] == doctest::Approx(img.data()[i]).epsilon(1e-6));

  ViewConfig rand_view{0.5f, 1.0f, 0.5f, 0.2f};
  RngStream r4(8), r5(8);
  Tensor v1 = augment_view(img, rand_view, r4);
  Tensor v2 = augment_view(img, rand_view, r5);
  for (size_t i = 0; i < v1.data().size(); ++i) CHECK(v1.data()[i] == v2.data()[i]);
}

TEST_CASE("pretrain_teacher: smoke run learns and round-trips through adaptation") {
  TrainConfig cfg = smoke_config();
  cfg.optim.epochs = 10;
  cfg.optim.max_steps = 30;
  ImageStore data = synth_dataset(cfg.data.n_images, cfg.data.image_size, cfg.seed);
  PretrainResult res = pretrain_teacher(cfg, data);
  REQUIRE(res.log.size() == 30);
  CHECK(res.checkpoint.metadata.at("pretrained").get<bool>());

  // the queue holds content from step 1 on; losses should come down overall
  double early = 0.0, late = 0.0;
  for (int i = 2; i < 7; ++i) early += res.log[static_cast<size_t>(i)].loss;
  for (int i = 25; i < 30; ++i) late += res.log[static_cast<size_t>(i)].loss;
  CHECK(late < early);

  // saved head adapts with a passing invariance report
  Teacher teacher = assemble_teacher(res.checkpoint, true);
  CHECK(teacher.invariance.pass);

  // frozen-random mode skips training
  PretrainResult frozen = pretrain_teacher(cfg, data, /*random_init=*/true);
  CHECK(frozen.log.empty());
  CHECK(!frozen.checkpoint.metadata.at("pretrained").get<bool>());
  Teacher random_teacher = assemble_teacher(frozen.checkpoint, true);
  CHECK(random_teacher.invariance.pass);
}

TEST_CASE("distill: smoke run with queue semantics and metrics") {
  TrainConfig cfg = smoke_config();
  cfg.optim.max_steps = 8;
  ImageStore data = synth_dataset(cfg.data.n_images, cfg.data.image_size, cfg.seed);
  PretrainResult teacher = pretrain_teacher(cfg, data, /*random_init=*/true);

  std::vector<int64_t> queue_sizes;
  DistillResult res = distill(cfg, data, teacher.checkpoint, nullptr, true, true,
                              [&](const StepLog& s) { queue_sizes.push_back(s.queue_size); });
  REQUIRE(res.log.size() == 8);
  // symmetric mode with enqueue_both pushes 2 * batch per step
  for (size_t i = 0; i < queue_sizes.size(); ++i)
    CHECK(queue_sizes[i] ==
          std::min<int64_t>(cfg.loss.queue_capacity,
                            static_cast<int64_t>(i + 1) * 2 * cfg.optim.batch_size));

  // metrics file format: step<TAB>loss<TAB>pixel_cosine<TAB>lr
  std::string path = "/tmp/pcd_test_metrics.tsv";
  write_metrics(res.log, path);
  std::ifstream f(path);
  std::string line;
  int64_t rows = 0;
  while (std::getline(f, line)) {
    long long step;
    double loss, cosine, lr;
    REQUIRE(std::sscanf(line.c_str(), "%lld\t%lf\t%lf\t%lf", &step, &loss, &cosine, &lr) == 4);
    CHECK(step == rows);
    ++rows;
  }
  CHECK(rows == 8);
  std::filesystem::remove(path);

  // raw checkpoint resumes, export carries the anchor
  CHECK(res.exported.metadata.at("norm_rescale_anchor").get<float>() == 0.25f);
  DistillResult resumed = distill(cfg, data, teacher.checkpoint, &res.raw);
  CHECK(resumed.log.size() == 8);
}

TEST_CASE("distill: asymmetric mode pushes one view per step") {
  TrainConfig cfg = smoke_config();
  cfg.optim.max_steps = 4;
  cfg.loss.symmetric = false;
  ImageStore data = synth_dataset(cfg.data.n_images, cfg.data.image_size, cfg.seed);
  PretrainResult teacher = pretrain_teacher(cfg, data, true);
  std::vector<int64_t> queue_sizes;
  DistillResult res = distill(cfg, data, teacher.checkpoint, nullptr, true, true,
                              [&](const StepLog& s) { queue_sizes.push_back(s.queue_size); });
  for (size_t i = 0; i < queue_sizes.size(); ++i)
    CHECK(queue_sizes[i] == static_cast<int64_t>(i + 1) * cfg.optim.batch_size);
}

TEST_CASE("distill: rerun with the same seed is bit-identical") {
  TrainConfig cfg = smoke_config();
  cfg.optim.max_steps = 6;
  ImageStore data = synth_dataset(cfg.data.n_images, cfg.data.image_size, cfg.seed);
  PretrainResult teacher = pretrain_teacher(cfg, data, true);
  DistillResult a = distill(cfg, data, teacher.checkpoint);
  DistillResult b = distill(cfg, data, teacher.checkpoint);
  CHECK(checkpoint_hash(a.raw) == checkpoint_hash(b.raw));
  CHECK(checkpoint_hash(a.exported) == checkpoint_hash(b.exported));
  for (size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].loss == b.log[i].loss);
    CHECK(a.log[i].pixel_cosine == b.log[i].pixel_cosine);
  }
  // a different seed diverges
  TrainConfig other = cfg;
  other.seed = 8;
  DistillResult c = distill(other, data, teacher.checkpoint);
  CHECK(checkpoint_hash(a.raw) != checkpoint_hash(c.raw));
}

TEST_CASE("distill: teacher dim mismatch is rejected") {
  TrainConfig cfg = smoke_config();
  cfg.optim.max_steps = 2;
  ImageStore data = synth_dataset(8, 16, 3);
  PretrainResult teacher = pretrain_teacher(cfg, data, true);
  TrainConfig bad = cfg;
  bad.model.embed_dim = 12;  // student head now projects to 12, teacher emits 8
  CHECK_THROWS(distill(bad, data, teacher.checkpoint));
}
