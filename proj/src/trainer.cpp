#include "pcd/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "pcd/layers.hpp"

namespace pcd {

// ---- LARS ----

void lars_step(ParamList& params, LarsState& state, float lr, float momentum,
               float weight_decay) {
  if (state.momentum.empty()) state.momentum.resize(params.size());
  if (state.momentum.size() != params.size())
    throw std::invalid_argument("lars_step: state does not match param list");

  for (size_t i = 0; i < params.size(); ++i) {
    ParamRef& p = params[i];
    if (!p.tensor.has_grad()) continue;  // parameter unused by this step's graph
    auto w = p.tensor.mutable_data();
    auto g = p.tensor.grad();
    for (float gv : g)
      if (!std::isfinite(gv))
        throw std::runtime_error("lars_step: non-finite gradient in '" + p.name + "'");

    double wd = p.decay_excluded ? 0.0 : static_cast<double>(weight_decay);
    double lambda = 1.0;
    if (!p.decay_excluded) {
      double wn = 0.0, gn = 0.0;
      for (float v : w) wn += static_cast<double>(v) * static_cast<double>(v);
      for (float v : g) gn += static_cast<double>(v) * static_cast<double>(v);
      wn = std::sqrt(wn);
      gn = std::sqrt(gn);
      if (wn > 0.0 && gn > 0.0) lambda = wn / (gn + wd * wn);
    }

    auto& m = state.momentum[i];
    if (m.empty()) m.assign(w.size(), 0.0f);
    for (size_t k = 0; k < w.size(); ++k) {
      double update = static_cast<double>(momentum) * static_cast<double>(m[k]) +
                      lambda * static_cast<double>(lr) *
                          (static_cast<double>(g[k]) + wd * static_cast<double>(w[k]));
      m[k] = static_cast<float>(update);
      w[k] = static_cast<float>(static_cast<double>(w[k]) - update);
    }
  }
}

double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps,
                   double peak) {
  if (warmup_steps >= total_steps)
    throw std::invalid_argument("lr_schedule: warmup must be < total steps");
  if (step < 0 || step >= total_steps)
    throw std::invalid_argument("lr_schedule: step out of range");
  if (step < warmup_steps)
    return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  double u = static_cast<double>(step - warmup_steps) /
             static_cast<double>(total_steps - warmup_steps);
  return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * u));
}

// ---- synthetic dataset ----

namespace {

struct Rgb {
  float r, g, b;
};

Rgb random_color(RngStream& rng) {
  return {0.1f + 0.8f * rng.uniform(), 0.1f + 0.8f * rng.uniform(),
          0.1f + 0.8f * rng.uniform()};
}

void paint(std::vector<float>& img, int64_t size, int64_t x, int64_t y, Rgb c) {
  img[static_cast<size_t>(0 * size * size + y * size + x)] = c.r;
  img[static_cast<size_t>(1 * size * size + y * size + x)] = c.g;
  img[static_cast<size_t>(2 * size * size + y * size + x)] = c.b;
}

}  // namespace

ImageStore synth_dataset(int64_t n, int64_t size, uint64_t seed) {
  if (n < 0) throw std::invalid_argument("synth_dataset: n must be >= 0");
  if (size < 16) throw std::invalid_argument("synth_dataset: size must be >= 16");
  ImageStore store;
  store.size = size;
  store.manifest = {{"n", n}, {"size", size}, {"seed", seed},
                    {"images", nlohmann::json::array()}};

  for (int64_t i = 0; i < n; ++i) {
    RngStream rng = RngStream::derive(seed, "data", static_cast<uint64_t>(i));

    // low-frequency background: 4x4 Gaussian grid upsampled to full size
    Tensor grid = Tensor::gaussian({1, 3, 4, 4}, rng);
    Tensor bg = bilinear_resize(grid, size, size);
    std::vector<float> img(bg.data().begin(), bg.data().end());
    for (auto& v : img) v = std::clamp(0.55f + 0.18f * v, 0.05f, 0.95f);

    nlohmann::json shapes = nlohmann::json::array();
    int64_t count = 2 + static_cast<int64_t>(rng.uniform_index(4));
    for (int64_t s = 0; s < count; ++s) {
      int kind = static_cast<int>(rng.uniform_index(3));
      Rgb color = random_color(rng);
      float fs = static_cast<float>(size);
      if (kind == 0) {  // rectangle
        int64_t w = static_cast<int64_t>(fs * (0.15f + 0.25f * rng.uniform()));
        int64_t h = static_cast<int64_t>(fs * (0.15f + 0.25f * rng.uniform()));
        int64_t x0 = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(size - w)));
        int64_t y0 = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(size - h)));
        for (int64_t y = y0; y < y0 + h; ++y)
          for (int64_t x = x0; x < x0 + w; ++x) paint(img, size, x, y, color);
        shapes.push_back({{"kind", "rect"}, {"x", x0}, {"y", y0}, {"w", w}, {"h", h}});
      } else if (kind == 1) {  // circle
        float cx = fs * (0.2f + 0.6f * rng.uniform());
        float cy = fs * (0.2f + 0.6f * rng.uniform());
        float rad = fs * (0.08f + 0.17f * rng.uniform());
        for (int64_t y = 0; y < size; ++y)
          for (int64_t x = 0; x < size; ++x) {
            float dx = static_cast<float>(x) + 0.5f - cx;
            float dy = static_cast<float>(y) + 0.5f - cy;
            if (dx * dx + dy * dy <= rad * rad) paint(img, size, x, y, color);
          }
        shapes.push_back({{"kind", "circle"}, {"cx", cx}, {"cy", cy}, {"r", rad}});
      } else {  // triangle
        float ax = fs * rng.uniform(), ay = fs * rng.uniform();
        float bx = fs * rng.uniform(), by = fs * rng.uniform();
        float cx2 = fs * rng.uniform(), cy2 = fs * rng.uniform();
        auto edge = [](float x0, float y0, float x1, float y1, float px, float py) {
          return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
        };
        for (int64_t y = 0; y < size; ++y)
          for (int64_t x = 0; x < size; ++x) {
            float px = static_cast<float>(x) + 0.5f, py = static_cast<float>(y) + 0.5f;
            float e0 = edge(ax, ay, bx, by, px, py);
            float e1 = edge(bx, by, cx2, cy2, px, py);
            float e2 = edge(cx2, cy2, ax, ay, px, py);
            bool inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
            if (inside) paint(img, size, x, y, color);
          }
        shapes.push_back({{"kind", "triangle"},
                          {"ax", ax}, {"ay", ay}, {"bx", bx}, {"by", by},
                          {"cx", cx2}, {"cy", cy2}});
      }
    }
    store.manifest["images"].push_back(
        {{"file", "img_" + std::to_string(i) + ".pcdt"}, {"shapes", shapes}});
    store.images.push_back(Tensor::from_data({3, size, size}, std::move(img)));
  }
  return store;
}

void save_dataset(const ImageStore& store, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (int64_t i = 0; i < store.count(); ++i) {
    Checkpoint c;
    c.metadata = {{"format_version", 1}, {"model_kind", "image"}, {"index", i}};
    c.add("image", store.images[static_cast<size_t>(i)]);
    std::string file =
        store.manifest.at("images")[static_cast<size_t>(i)].at("file").get<std::string>();
    save_checkpoint(c, dir + "/" + file);
  }
  std::ofstream f(dir + "/manifest.json");
  if (!f) throw std::runtime_error("save_dataset: cannot write manifest in '" + dir + "'");
  f << store.manifest.dump(2) << "\n";
}

ImageStore load_dataset(const std::string& dir) {
  std::ifstream f(dir + "/manifest.json");
  if (!f) throw std::runtime_error("load_dataset: missing manifest in '" + dir + "'");
  ImageStore store;
  f >> store.manifest;
  store.size = store.manifest.at("size").get<int64_t>();
  for (const auto& entry : store.manifest.at("images")) {
    Checkpoint c = load_checkpoint(dir + "/" + entry.at("file").get<std::string>());
    store.images.push_back(c.tensor("image"));
  }
  return store;
}

// ---- augmentation ----

Tensor augment_view(const Tensor& img, const ViewConfig& view, RngStream& rng) {
  if (img.ndim() != 3 || img.dim(0) != 3)
    throw std::invalid_argument("augment_view: image must be [3,S,S]");
  int64_t size = img.dim(1);

  // crop scale, clamped to at least one pixel
  float scale = rng.uniform(view.crop_min, view.crop_max);
  int64_t side = std::max<int64_t>(1, static_cast<int64_t>(std::round(
                                          static_cast<float>(size) * scale)));
  side = std::min(side, size);
  int64_t max_off = size - side;
  int64_t top = max_off > 0 ? static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(max_off + 1))) : 0;
  int64_t left = max_off > 0 ? static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(max_off + 1))) : 0;
  bool flip = rng.uniform() < view.flip_prob;
  float factor = 1.0f + rng.uniform(-view.brightness, view.brightness);

  std::vector<float> crop(static_cast<size_t>(3 * side * side));
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < side; ++y)
      for (int64_t x = 0; x < side; ++x)
        crop[static_cast<size_t>((c * side + y) * side + x)] =
            img.data()[static_cast<size_t>((c * size + top + y) * size + left + x)];

  Tensor resized = bilinear_resize(
      Tensor::from_data({1, 3, side, side}, std::move(crop)), size, size);

  std::vector<float> out(resized.data().begin(), resized.data().end());
  if (flip) {
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size / 2; ++x)
          std::swap(out[static_cast<size_t>((c * size + y) * size + x)],
                    out[static_cast<size_t>((c * size + y) * size + size - 1 - x)]);
  }
  for (auto& v : out) v = std::clamp(v * factor, 0.0f, 1.0f);
  return Tensor::from_data({3, size, size}, std::move(out));
}

std::pair<Tensor, Tensor> two_view(const Tensor& img, const AugmentConfig& policy,
                                   RngStream& rng_a, RngStream& rng_b) {
  return {augment_view(img, policy.view_a, rng_a),
          augment_view(img, policy.view_b, rng_b)};
}

// ---- training loops ----

StepBudget step_budget(const TrainConfig& cfg, int64_t n_images) {
  if (n_images <= 0)
    throw std::invalid_argument("trainer: dataset is empty (n_images = 0)");
  int64_t per_epoch =
      std::max<int64_t>(1, (n_images + cfg.optim.batch_size - 1) / cfg.optim.batch_size);
  StepBudget b;
  b.total = per_epoch * cfg.optim.epochs;
  if (cfg.optim.max_steps > 0) b.total = std::min(b.total, cfg.optim.max_steps);
  b.warmup = static_cast<int64_t>(std::llround(cfg.optim.warmup_epochs *
                                               static_cast<double>(per_epoch)));
  if (b.warmup >= b.total) b.warmup = std::max<int64_t>(0, b.total - 1);
  return b;
}

namespace {

// Deterministic batch assembly: indices from the sampling stream, views from
// per-(image, step, view) streams.
struct Batch {
  std::vector<int64_t> indices;
  Tensor view_a, view_b;
};

Batch make_batch(const TrainConfig& cfg, const ImageStore& data, int64_t step,
                 bool need_b) {
  RngStream sample = RngStream::derive(cfg.seed, "sample", static_cast<uint64_t>(step));
  int64_t n = data.count(), b = cfg.optim.batch_size, s = data.size;
  Batch batch;
  std::vector<float> abuf, bbuf;
  abuf.reserve(static_cast<size_t>(b * 3 * s * s));
  if (need_b) bbuf.reserve(static_cast<size_t>(b * 3 * s * s));
  for (int64_t i = 0; i < b; ++i) {
    int64_t idx = static_cast<int64_t>(sample.uniform_index(static_cast<uint64_t>(n)));
    batch.indices.push_back(idx);
    RngStream ra = RngStream::derive(cfg.seed, "augment", static_cast<uint64_t>(idx),
                                     static_cast<uint64_t>(step), 0);
    Tensor va = augment_view(data.images[static_cast<size_t>(idx)], cfg.augment.view_a, ra);
    abuf.insert(abuf.end(), va.data().begin(), va.data().end());
    if (need_b) {
      RngStream rb = RngStream::derive(cfg.seed, "augment", static_cast<uint64_t>(idx),
                                       static_cast<uint64_t>(step), 1);
      Tensor vb = augment_view(data.images[static_cast<size_t>(idx)], cfg.augment.view_b, rb);
      bbuf.insert(bbuf.end(), vb.data().begin(), vb.data().end());
    }
  }
  batch.view_a = Tensor::from_data({b, 3, s, s}, std::move(abuf));
  if (need_b) batch.view_b = Tensor::from_data({b, 3, s, s}, std::move(bbuf));
  return batch;
}

void check_finite_loss(double loss, int64_t step) {
  if (!std::isfinite(loss))
    throw std::runtime_error("training diverged: non-finite loss at step " +
                             std::to_string(step));
}

}  // namespace

void write_metrics(const std::vector<StepLog>& log, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_metrics: cannot open '" + path + "'");
  char line[160];
  for (const auto& s : log) {
    std::snprintf(line, sizeof(line), "%lld\t%.8g\t%.8g\t%.8g\n",
                  static_cast<long long>(s.step), s.loss, s.pixel_cosine, s.lr);
    f << line;
  }
}

PretrainResult pretrain_teacher(const TrainConfig& cfg, const ImageStore& data,
                                bool random_init, const StepObserver& observer) {
  uint64_t model_seed = RngStream::derive(cfg.seed, "init-teacher").next_u64();
  TeacherTrainModel model = build_teacher_train_model(cfg.model, model_seed);

  PretrainResult result;
  if (random_init) {
    model.set_train(false);
    result.checkpoint = teacher_train_to_checkpoint(model, cfg.seed);
    result.checkpoint.metadata["pretrained"] = false;
    return result;
  }

  StepBudget budget = step_budget(cfg, data.count());
  double peak = cfg.peak_lr();
  MemoryQueue queue(cfg.loss.queue_capacity, cfg.model.embed_dim);
  ParamList params = trainable_params(model);
  LarsState opt;
  LossConfig lc = cfg.loss_config();
  lc.level = LossLevel::image;

  for (int64_t step = 0; step < budget.total; ++step) {
    double lr = lr_schedule(step, budget.total, budget.warmup, peak);
    Batch batch = make_batch(cfg, data, step, true);
    model.set_train(true);

    StepLog entry;
    entry.step = step;
    entry.lr = lr;
    {
      Tape tape;
      Tensor za = teacher_train_forward(batch.view_a, model);
      Tensor zb = teacher_train_forward(batch.view_b, model);
      Tensor loss;
      if (cfg.loss.symmetric) {
        Tensor la = image_level_loss_pooled(za, zb.detached(), queue, lc);
        Tensor lb = image_level_loss_pooled(zb, za.detached(), queue, lc);
        loss = mul(add(la, lb), 0.5f);
      } else {
        loss = image_level_loss_pooled(za, zb.detached(), queue, lc);
      }
      entry.loss = loss.item();
      check_finite_loss(entry.loss, step);
      backward(loss);

      // alignment metric: mean cosine between the two views' projections
      Tensor zar = reshape(za, {cfg.optim.batch_size, cfg.model.embed_dim, 1, 1});
      Tensor zbr = reshape(zb, {cfg.optim.batch_size, cfg.model.embed_dim, 1, 1});
      entry.pixel_cosine = mean_pixel_cosine(zar, zbr);

      lars_step(params, opt, static_cast<float>(lr), cfg.optim.momentum,
                cfg.optim.weight_decay);
      for (auto& p : params) p.tensor.zero_grad();

      queue.push_vectors(za.detached());
      if (cfg.loss.enqueue_both_views) queue.push_vectors(zb.detached());
    }
    entry.queue_size = queue.size();
    result.log.push_back(entry);
    if (observer) observer(entry);
  }

  model.set_train(false);
  result.checkpoint = teacher_train_to_checkpoint(model, cfg.seed);
  result.checkpoint.metadata["pretrained"] = true;
  result.checkpoint.metadata["trained_steps"] = budget.total;
  return result;
}

DistillResult distill(const TrainConfig& cfg, const ImageStore& data,
                      const Checkpoint& teacher_ckpt, const Checkpoint* resume,
                      bool use_teacher_head, bool drop_trailing_bn,
                      const StepObserver& observer) {
  Teacher teacher = assemble_teacher(teacher_ckpt, drop_trailing_bn, use_teacher_head);
  uint64_t teacher_hash_before = teacher_param_hash(teacher);

  uint64_t student_seed = RngStream::derive(cfg.seed, "init-student").next_u64();
  Student student = resume ? student_from_checkpoint(*resume)
                           : build_student(cfg.model, student_seed);

  int64_t teacher_dim = teacher.head ? head_out_features(*teacher.head)
                                     : teacher.backbone.out_channels();
  if (teacher_dim != cfg.model.embed_dim)
    throw std::invalid_argument(
        "distill: teacher output dim " + std::to_string(teacher_dim) +
        " does not match embed_dim " + std::to_string(cfg.model.embed_dim));

  StepBudget budget = step_budget(cfg, data.count());
  double peak = cfg.peak_lr();
  MemoryQueue queue(cfg.loss.queue_capacity, cfg.model.embed_dim);
  ParamList params = trainable_params(student);
  LarsState opt;
  LossConfig lc = cfg.loss_config();

  DistillResult result;
  for (int64_t step = 0; step < budget.total; ++step) {
    double lr = lr_schedule(step, budget.total, budget.warmup, peak);
    Batch batch = make_batch(cfg, data, step, cfg.loss.symmetric);

    Tensor ta = teacher_forward(batch.view_a, teacher);
    Tensor tb;
    if (cfg.loss.symmetric) tb = teacher_forward(batch.view_b, teacher);

    student.set_train(true);
    StepLog entry;
    entry.step = step;
    entry.lr = lr;
    {
      Tape tape;
      StudentOutput sa = student_forward(batch.view_a, student);
      Tensor loss;
      if (cfg.loss.symmetric) {
        StudentOutput sb = student_forward(batch.view_b, student);
        loss = two_view_loss(sa.s_star, ta, sb.s_star, tb, queue, lc);
      } else {
        loss = distillation_loss(sa.s_star, ta, queue, lc);
      }
      entry.loss = loss.item();
      check_finite_loss(entry.loss, step);
      backward(loss);
      entry.pixel_cosine = mean_pixel_cosine(sa.s_star, ta);

      lars_step(params, opt, static_cast<float>(lr), cfg.optim.momentum,
                cfg.optim.weight_decay);
      for (auto& p : params) p.tensor.zero_grad();
    }

    queue.push_map(ta);
    if (cfg.loss.symmetric && cfg.loss.enqueue_both_views) queue.push_map(tb);

    entry.queue_size = queue.size();
    result.log.push_back(entry);
    if (observer) observer(entry);
  }

  if (teacher_param_hash(teacher) != teacher_hash_before)
    throw std::runtime_error("distill: teacher parameters changed during training");

  student.set_train(false);
  result.raw = student_to_checkpoint(student, cfg.seed);
  result.raw.metadata["trained_steps"] = budget.total;
  result.exported = norm_rescale_export(student, cfg.exports.norm_rescale_anchor, cfg.seed);
  return result;
}

}  // namespace pcd
