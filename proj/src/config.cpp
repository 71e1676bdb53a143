#include "pcd/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace pcd {

using nlohmann::json;

LossConfig TrainConfig::loss_config() const {
  LossConfig c;
  c.tau = loss.tau;
  c.symmetric = loss.symmetric;
  c.level = loss.level == "pixel" ? LossLevel::pixel : LossLevel::image;
  c.enqueue_both_views = loss.enqueue_both_views;
  return c;
}

TrainConfig desk_default_config() {
  TrainConfig cfg;
  cfg.model.student_backbone.stem_channels = 16;
  cfg.model.student_backbone.stages = {{1, 32, 2}, {1, 64, 2}, {1, 128, 2}};
  cfg.model.teacher_backbone.stem_channels = 24;
  cfg.model.teacher_backbone.stages = {{2, 48, 2}, {2, 96, 2}, {2, 192, 2}};
  return cfg;
}

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& msg) {
  throw std::invalid_argument("config: " + path + ": " + msg);
}

// Tracks consumed keys per object so leftovers are reported with their path.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_, "expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  template <typename T, typename Pred>
  void read(const char* key, T& out, bool required, Pred check,
            const char* constraint) {
    seen_.insert(key);
    if (!j_.contains(key)) {
      if (required) fail(path_ + "." + key, "missing required key");
      return;
    }
    const json& v = j_.at(key);
    try {
      out = v.get<T>();
    } catch (const json::exception&) {
      fail(path_ + "." + key, "type mismatch");
    }
    if (!check(out)) fail(path_ + "." + key, constraint);
  }

  template <typename T>
  void read(const char* key, T& out, bool required) {
    read(key, out, required, [](const T&) { return true; }, "");
  }

  Section child(const char* key, bool required) {
    seen_.insert(key);
    if (!j_.contains(key)) {
      if (required) fail(path_ + "." + key, "missing required key");
      return Section(empty_, path_ + "." + key);
    }
    return Section(j_.at(key), path_ + "." + key);
  }

  const json& raw(const char* key, bool required) {
    seen_.insert(key);
    if (!j_.contains(key)) {
      if (required) fail(path_ + "." + key, "missing required key");
      return empty_;
    }
    return j_.at(key);
  }

  const std::string& path() const { return path_; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        fail(path_ + "." + it.key(), "unknown key");
  }

 private:
  static inline const json empty_ = json::object();
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void parse_backbone(Section s, BackboneConfig& out, bool strict) {
  s.read("stem_channels", out.stem_channels, strict,
         [](int64_t v) { return v >= 1; }, "must be >= 1");
  const json& stages = s.raw("stages", strict);
  if (!stages.is_null() && !(stages.is_object() && stages.empty())) {
    if (!stages.is_array() || stages.empty())
      fail(s.path() + ".stages", "expected a nonempty array of [blocks,channels,stride]");
    out.stages.clear();
    for (const auto& st : stages) {
      if (!st.is_array() || st.size() != 3)
        fail(s.path() + ".stages", "entries must be [blocks,channels,stride]");
      StageConfig sc{st[0].get<int64_t>(), st[1].get<int64_t>(), st[2].get<int64_t>()};
      if (sc.blocks < 1 || sc.channels < 1 || sc.stride < 1)
        fail(s.path() + ".stages", "stage values must be >= 1");
      out.stages.push_back(sc);
    }
  }
  s.finish();
}

void parse_view(Section s, ViewConfig& out, bool strict) {
  s.read("crop_min", out.crop_min, strict,
         [](float v) { return v > 0.0f && v <= 1.0f; }, "must be in (0,1]");
  s.read("crop_max", out.crop_max, strict,
         [](float v) { return v > 0.0f && v <= 1.0f; }, "must be in (0,1]");
  s.read("flip_prob", out.flip_prob, strict,
         [](float v) { return v >= 0.0f && v <= 1.0f; }, "must be in [0,1]");
  s.read("brightness", out.brightness, strict,
         [](float v) { return v >= 0.0f && v < 1.0f; }, "must be in [0,1)");
  if (out.crop_min > out.crop_max)
    fail(s.path() + ".crop_min", "must be <= crop_max");
  s.finish();
}

}  // namespace

TrainConfig parse_config_json(const json& j) {
  Section root(j, "config");
  bool defaults = false;
  root.read("defaults", defaults, false);
  TrainConfig cfg = desk_default_config();
  bool strict = !defaults;  // complete document required unless defaults:true

  root.read("seed", cfg.seed, strict);

  Section data = root.child("data", strict);
  data.read("n_images", cfg.data.n_images, strict,
            [](int64_t v) { return v >= 0; }, "must be >= 0");
  data.read("image_size", cfg.data.image_size, strict,
            [](int64_t v) { return v >= 16; }, "must be >= 16");
  data.finish();

  Section model = root.child("model", strict);
  parse_backbone(model.child("student_backbone", strict), cfg.model.student_backbone, strict);
  parse_backbone(model.child("teacher_backbone", strict), cfg.model.teacher_backbone, strict);
  model.read("student_head_hidden", cfg.model.student_head_hidden, strict,
             [](int64_t v) { return v >= 1; }, "must be >= 1");
  model.read("teacher_head_hidden", cfg.model.teacher_head_hidden, strict,
             [](int64_t v) { return v >= 1; }, "must be >= 1");
  model.read("embed_dim", cfg.model.embed_dim, strict,
             [](int64_t v) { return v >= 1; }, "must be >= 1");
  Section mhsa = model.child("mhsa", strict);
  mhsa.read("enabled", cfg.model.mhsa.enabled, strict);
  mhsa.read("heads", cfg.model.mhsa.heads, strict,
            [](int64_t v) { return v >= 1; }, "must be >= 1");
  mhsa.read("head_dim", cfg.model.mhsa.head_dim, strict,
            [](int64_t v) { return v >= 1; }, "must be >= 1");
  mhsa.finish();
  model.finish();

  Section loss = root.child("loss", strict);
  loss.read("tau", cfg.loss.tau, strict,
            [](float v) { return v > 0.0f; }, "must be > 0");
  loss.read("level", cfg.loss.level, strict,
            [](const std::string& v) { return v == "pixel" || v == "image"; },
            "must be 'pixel' or 'image'");
  loss.read("symmetric", cfg.loss.symmetric, strict);
  loss.read("queue_capacity", cfg.loss.queue_capacity, strict,
            [](int64_t v) { return v >= 1; }, "must be >= 1");
  loss.read("enqueue_both_views", cfg.loss.enqueue_both_views, strict);
  loss.finish();

  Section optim = root.child("optim", strict);
  optim.read("base_lr", cfg.optim.base_lr, strict,
             [](float v) { return v > 0.0f; }, "must be > 0");
  optim.read("batch_size", cfg.optim.batch_size, strict,
             [](int64_t v) { return v >= 1; }, "must be >= 1");
  optim.read("epochs", cfg.optim.epochs, strict,
             [](int64_t v) { return v >= 1; }, "must be >= 1");
  optim.read("warmup_epochs", cfg.optim.warmup_epochs, strict,
             [](double v) { return v >= 0.0; }, "must be >= 0");
  optim.read("momentum", cfg.optim.momentum, strict,
             [](float v) { return v >= 0.0f && v < 1.0f; }, "must be in [0,1)");
  optim.read("weight_decay", cfg.optim.weight_decay, strict,
             [](float v) { return v >= 0.0f; }, "must be >= 0");
  optim.read("max_steps", cfg.optim.max_steps, strict,
             [](int64_t v) { return v >= 0; }, "must be >= 0");
  optim.finish();
  if (cfg.optim.warmup_epochs >= static_cast<double>(cfg.optim.epochs))
    throw std::invalid_argument("config: optim.warmup_epochs: must be < optim.epochs");

  Section exp = root.child("export", strict);
  exp.read("norm_rescale_anchor", cfg.exports.norm_rescale_anchor, strict,
           [](float v) { return v > 0.0f; }, "must be > 0");
  exp.finish();

  Section aug = root.child("augment", strict);
  parse_view(aug.child("view_a", strict), cfg.augment.view_a, strict);
  parse_view(aug.child("view_b", strict), cfg.augment.view_b, strict);
  aug.finish();

  root.finish();
  return cfg;
}

TrainConfig parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open '" + path + "'");
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config_json(j);
}

namespace {

json backbone_to_json(const BackboneConfig& b) {
  json stages = json::array();
  for (const auto& s : b.stages) stages.push_back({s.blocks, s.channels, s.stride});
  return {{"stem_channels", b.stem_channels}, {"stages", stages}};
}

json view_to_json(const ViewConfig& v) {
  return {{"crop_min", v.crop_min},
          {"crop_max", v.crop_max},
          {"flip_prob", v.flip_prob},
          {"brightness", v.brightness}};
}

}  // namespace

json config_to_json(const TrainConfig& cfg) {
  return {
      {"seed", cfg.seed},
      {"data", {{"n_images", cfg.data.n_images}, {"image_size", cfg.data.image_size}}},
      {"model",
       {{"student_backbone", backbone_to_json(cfg.model.student_backbone)},
        {"teacher_backbone", backbone_to_json(cfg.model.teacher_backbone)},
        {"student_head_hidden", cfg.model.student_head_hidden},
        {"teacher_head_hidden", cfg.model.teacher_head_hidden},
        {"embed_dim", cfg.model.embed_dim},
        {"mhsa",
         {{"enabled", cfg.model.mhsa.enabled},
          {"heads", cfg.model.mhsa.heads},
          {"head_dim", cfg.model.mhsa.head_dim}}}}},
      {"loss",
       {{"tau", cfg.loss.tau},
        {"level", cfg.loss.level},
        {"symmetric", cfg.loss.symmetric},
        {"queue_capacity", cfg.loss.queue_capacity},
        {"enqueue_both_views", cfg.loss.enqueue_both_views}}},
      {"optim",
       {{"base_lr", cfg.optim.base_lr},
        {"batch_size", cfg.optim.batch_size},
        {"epochs", cfg.optim.epochs},
        {"warmup_epochs", cfg.optim.warmup_epochs},
        {"momentum", cfg.optim.momentum},
        {"weight_decay", cfg.optim.weight_decay},
        {"max_steps", cfg.optim.max_steps}}},
      {"export", {{"norm_rescale_anchor", cfg.exports.norm_rescale_anchor}}},
      {"augment",
       {{"view_a", view_to_json(cfg.augment.view_a)},
        {"view_b", view_to_json(cfg.augment.view_b)}}},
  };
}

}  // namespace pcd
