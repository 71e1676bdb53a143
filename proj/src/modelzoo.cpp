#include "pcd/modelzoo.hpp"

#include <cmath>
#include <stdexcept>

namespace pcd {

namespace {

RngStream path_stream(uint64_t seed, const std::string& path) {
  return RngStream::derive(seed, path);
}

ConvParams init_conv(uint64_t seed, const std::string& path, int64_t c_out,
                     int64_t c_in, int64_t k, int64_t stride, int64_t pad,
                     bool bias) {
  RngStream rng = path_stream(seed, path);
  return make_conv(c_out, c_in, k, stride, pad, bias, rng);
}

}  // namespace

// ---- backbone ----

int64_t Backbone::out_channels() const {
  return spec.stages.empty() ? spec.stem_channels : spec.stages.back().channels;
}

int64_t Backbone::total_stride() const {
  int64_t s = 1;
  for (const auto& st : spec.stages) s *= st.stride;
  return s;
}

void Backbone::set_train(bool train) {
  stem_bn.train = train;
  for (auto& stage : stages)
    for (auto& b : stage) {
      b.bn1.train = train;
      b.bn2.train = train;
      if (b.proj_bn) b.proj_bn->train = train;
    }
}

Backbone build_backbone(const BackboneConfig& spec, uint64_t seed,
                        const std::string& prefix) {
  if (spec.stem_channels < 1)
    throw std::invalid_argument("backbone: stem_channels must be >= 1");
  Backbone b;
  b.spec = spec;
  b.stem = init_conv(seed, prefix + ".stem.conv", spec.stem_channels, 3, 3, 1, 1, false);
  b.stem_bn = make_batchnorm(spec.stem_channels, true, BnLayout::map);

  int64_t in_ch = spec.stem_channels;
  for (size_t si = 0; si < spec.stages.size(); ++si) {
    const StageConfig& st = spec.stages[si];
    std::vector<BasicBlock> blocks;
    for (int64_t bi = 0; bi < st.blocks; ++bi) {
      std::string bp = prefix + ".s" + std::to_string(si) + ".b" + std::to_string(bi);
      int64_t stride = bi == 0 ? st.stride : 1;
      BasicBlock blk;
      blk.conv1 = init_conv(seed, bp + ".conv1", st.channels, in_ch, 3, stride, 1, false);
      blk.bn1 = make_batchnorm(st.channels, true, BnLayout::map);
      blk.conv2 = init_conv(seed, bp + ".conv2", st.channels, st.channels, 3, 1, 1, false);
      blk.bn2 = make_batchnorm(st.channels, true, BnLayout::map);
      if (stride != 1 || in_ch != st.channels) {
        blk.proj = init_conv(seed, bp + ".proj", st.channels, in_ch, 1, stride, 0, false);
        blk.proj_bn = make_batchnorm(st.channels, true, BnLayout::map);
      }
      blocks.push_back(std::move(blk));
      in_ch = st.channels;
    }
    b.stages.push_back(std::move(blocks));
  }
  return b;
}

namespace {

Tensor block_forward(const Tensor& x, BasicBlock& blk) {
  Tensor h = relu(batchnorm(conv2d(x, blk.conv1), blk.bn1));
  h = batchnorm(conv2d(h, blk.conv2), blk.bn2);
  Tensor shortcut = x;
  if (blk.proj) shortcut = batchnorm(conv2d(x, *blk.proj), *blk.proj_bn);
  return relu(add(h, shortcut));
}

}  // namespace

Tensor backbone_forward(const Tensor& x, Backbone& b) {
  if (x.ndim() != 4 || x.dim(1) != 3)
    throw std::invalid_argument("backbone_forward: input must be [N,3,H,W], got " +
                                shape_str(x.shape()));
  int64_t min_side = std::min(x.dim(2), x.dim(3));
  if (min_side / b.total_stride() < 1)
    throw std::invalid_argument("backbone_forward: total stride " +
                                std::to_string(b.total_stride()) +
                                " reduces spatial size below 1");
  Tensor h = relu(batchnorm(conv2d(x, b.stem), b.stem_bn));
  for (auto& stage : b.stages)
    for (auto& blk : stage) h = block_forward(h, blk);
  return h;
}

int64_t param_count(const Backbone& b) {
  int64_t n = b.stem.kernel.numel();
  n += b.stem_bn.gamma.numel() + b.stem_bn.beta.numel();
  for (const auto& stage : b.stages)
    for (const auto& blk : stage) {
      n += blk.conv1.kernel.numel() + blk.conv2.kernel.numel();
      n += blk.bn1.gamma.numel() + blk.bn1.beta.numel();
      n += blk.bn2.gamma.numel() + blk.bn2.beta.numel();
      if (blk.proj) n += blk.proj->kernel.numel();
      if (blk.proj_bn) n += blk.proj_bn->gamma.numel() + blk.proj_bn->beta.numel();
    }
  return n;
}

// ---- student ----

namespace {

MlpBlock init_mlp(uint64_t seed, const std::string& path, int64_t in, int64_t hidden,
                  int64_t out) {
  MlpBlock m;
  m.conv1 = init_conv(seed, path + ".conv1", hidden, in, 1, 1, 0, true);
  m.bn = make_batchnorm(hidden, true, BnLayout::map);
  m.conv2 = init_conv(seed, path + ".conv2", out, hidden, 1, 1, 0, true);
  return m;
}

Tensor mlp_forward(const Tensor& x, MlpBlock& m) {
  return conv2d(relu(batchnorm(conv2d(x, m.conv1), m.bn)), m.conv2);
}

MhsaParams init_mhsa(uint64_t seed, const std::string& path, int64_t channels,
                     int64_t heads, int64_t head_dim) {
  MhsaParams p;
  p.heads = heads;
  p.head_dim = head_dim;
  for (int64_t h = 0; h < heads; ++h) {
    std::string hp = path + ".h" + std::to_string(h);
    p.q.push_back(init_conv(seed, hp + ".q", head_dim, channels, 1, 1, 0, true));
    p.k.push_back(init_conv(seed, hp + ".k", head_dim, channels, 1, 1, 0, true));
    p.v.push_back(init_conv(seed, hp + ".v", head_dim, channels, 1, 1, 0, true));
  }
  p.out = init_conv(seed, path + ".out", channels, heads * head_dim, 1, 1, 0, true);
  return p;
}

}  // namespace

void Student::set_train(bool train) {
  backbone.set_train(train);
  mlp1.bn.train = train;
  mlp2.bn.train = train;
}

Student build_student(const ModelConfig& spec, uint64_t seed) {
  Student s;
  s.spec = spec;
  s.backbone = build_backbone(spec.student_backbone, seed, "backbone");
  int64_t c = s.backbone.out_channels();
  int64_t d = spec.embed_dim;
  s.mlp1 = init_mlp(seed, "head.mlp1", c, spec.student_head_hidden, d);
  s.mlp2 = init_mlp(seed, "head.mlp2", d, spec.student_head_hidden, d);
  if (spec.mhsa.enabled)
    s.mhsa = init_mhsa(seed, "mhsa", d, spec.mhsa.heads, spec.mhsa.head_dim);
  return s;
}

StudentOutput student_forward(const Tensor& x, Student& s) {
  StudentOutput out;
  out.s_map = backbone_forward(x, s.backbone);
  Tensor h = mlp_forward(mlp_forward(out.s_map, s.mlp1), s.mlp2);
  out.s_star = s.mhsa ? mhsa(h, *s.mhsa) : h;
  return out;
}

// ---- teacher training model ----

void TeacherTrainModel::set_train(bool train) {
  backbone.set_train(train);
  for (auto& l : head.layers)
    if (l.kind == HeadLayerKind::bn) l.bn.train = train;
}

TeacherTrainModel build_teacher_train_model(const ModelConfig& spec, uint64_t seed) {
  TeacherTrainModel m;
  m.spec = spec;
  m.backbone = build_backbone(spec.teacher_backbone, seed, "backbone");
  int64_t c = m.backbone.out_channels();
  int64_t hidden = spec.teacher_head_hidden;
  int64_t d = spec.embed_dim;
  RngStream r1 = path_stream(seed, "head.0.fc");
  RngStream r2 = path_stream(seed, "head.3.fc");
  m.head.input_kind = HeadKind::vector;
  m.head.layers.push_back(HeadLayer::make_fc(make_fc(hidden, c, false, r1)));
  m.head.layers.push_back(HeadLayer::make_bn(make_batchnorm(hidden, true, BnLayout::vector)));
  m.head.layers.push_back(HeadLayer::make_relu());
  m.head.layers.push_back(HeadLayer::make_fc(make_fc(d, hidden, false, r2)));
  m.head.layers.push_back(HeadLayer::make_bn(make_batchnorm(d, false, BnLayout::vector)));
  return m;
}

Tensor teacher_train_forward(const Tensor& x, TeacherTrainModel& m) {
  return head_forward(global_avg_pool(backbone_forward(x, m.backbone)), m.head);
}

// ---- parameter plumbing ----

namespace {

void collect_conv(ParamList& out, const std::string& name, ConvParams& p) {
  out.push_back({name + ".kernel", p.kernel, false});
  if (p.bias.defined()) out.push_back({name + ".bias", p.bias, true});
}

void collect_bn(ParamList& out, const std::string& name, BatchNormParams& p) {
  if (p.gamma.defined()) {
    out.push_back({name + ".gamma", p.gamma, true});
    out.push_back({name + ".beta", p.beta, true});
  }
}

void collect_backbone(ParamList& out, const std::string& prefix, Backbone& b) {
  collect_conv(out, prefix + ".stem.conv", b.stem);
  collect_bn(out, prefix + ".stem.bn", b.stem_bn);
  for (size_t si = 0; si < b.stages.size(); ++si)
    for (size_t bi = 0; bi < b.stages[si].size(); ++bi) {
      BasicBlock& blk = b.stages[si][bi];
      std::string bp = prefix + ".s" + std::to_string(si) + ".b" + std::to_string(bi);
      collect_conv(out, bp + ".conv1", blk.conv1);
      collect_bn(out, bp + ".bn1", blk.bn1);
      collect_conv(out, bp + ".conv2", blk.conv2);
      collect_bn(out, bp + ".bn2", blk.bn2);
      if (blk.proj) collect_conv(out, bp + ".proj", *blk.proj);
      if (blk.proj_bn) collect_bn(out, bp + ".proj_bn", *blk.proj_bn);
    }
}

void collect_mlp(ParamList& out, const std::string& prefix, MlpBlock& m) {
  collect_conv(out, prefix + ".conv1", m.conv1);
  collect_bn(out, prefix + ".bn", m.bn);
  collect_conv(out, prefix + ".conv2", m.conv2);
}

void collect_head(ParamList& out, const std::string& prefix, HeadSpec& h) {
  for (size_t i = 0; i < h.layers.size(); ++i) {
    HeadLayer& l = h.layers[i];
    std::string lp = prefix + "." + std::to_string(i);
    switch (l.kind) {
      case HeadLayerKind::fc:
        out.push_back({lp + ".weight", l.fc.weight, false});
        if (l.fc.bias.defined()) out.push_back({lp + ".bias", l.fc.bias, true});
        break;
      case HeadLayerKind::conv1x1:
        out.push_back({lp + ".kernel", l.conv.kernel, false});
        if (l.conv.bias.defined()) out.push_back({lp + ".bias", l.conv.bias, true});
        break;
      case HeadLayerKind::bn:
        collect_bn(out, lp, l.bn);
        break;
      default:
        break;
    }
  }
}

}  // namespace

ParamList trainable_params(Student& s) {
  ParamList out;
  collect_backbone(out, "backbone", s.backbone);
  collect_mlp(out, "head.mlp1", s.mlp1);
  collect_mlp(out, "head.mlp2", s.mlp2);
  if (s.mhsa) {
    for (int64_t h = 0; h < s.mhsa->heads; ++h) {
      std::string hp = "mhsa.h" + std::to_string(h);
      collect_conv(out, hp + ".q", s.mhsa->q[static_cast<size_t>(h)]);
      collect_conv(out, hp + ".k", s.mhsa->k[static_cast<size_t>(h)]);
      collect_conv(out, hp + ".v", s.mhsa->v[static_cast<size_t>(h)]);
    }
    collect_conv(out, "mhsa.out", s.mhsa->out);
  }
  return out;
}

ParamList trainable_params(TeacherTrainModel& m) {
  ParamList out;
  collect_backbone(out, "backbone", m.backbone);
  collect_head(out, "head", m.head);
  return out;
}

// ---- checkpoint conversion ----

namespace {

void append_conv(Checkpoint& c, const std::string& name, const ConvParams& p) {
  c.add(name + ".kernel", p.kernel);
  if (p.bias.defined()) c.add(name + ".bias", p.bias);
}

void append_bn(Checkpoint& c, const std::string& name, const BatchNormParams& p) {
  if (p.gamma.defined()) {
    c.add(name + ".gamma", p.gamma);
    c.add(name + ".beta", p.beta);
  }
  c.add(name + ".running_mean", p.running_mean);
  c.add(name + ".running_var", p.running_var);
}

void append_backbone(Checkpoint& c, const std::string& prefix, const Backbone& b) {
  append_conv(c, prefix + ".stem.conv", b.stem);
  append_bn(c, prefix + ".stem.bn", b.stem_bn);
  for (size_t si = 0; si < b.stages.size(); ++si)
    for (size_t bi = 0; bi < b.stages[si].size(); ++bi) {
      const BasicBlock& blk = b.stages[si][bi];
      std::string bp = prefix + ".s" + std::to_string(si) + ".b" + std::to_string(bi);
      append_conv(c, bp + ".conv1", blk.conv1);
      append_bn(c, bp + ".bn1", blk.bn1);
      append_conv(c, bp + ".conv2", blk.conv2);
      append_bn(c, bp + ".bn2", blk.bn2);
      if (blk.proj) append_conv(c, bp + ".proj", *blk.proj);
      if (blk.proj_bn) append_bn(c, bp + ".proj_bn", *blk.proj_bn);
    }
}

ConvParams conv_from(const Checkpoint& c, const std::string& name, int64_t stride,
                     int64_t pad, bool trainable) {
  ConvParams p;
  p.kernel = c.tensor(name + ".kernel", trainable);
  if (c.has(name + ".bias")) p.bias = c.tensor(name + ".bias", trainable);
  p.stride = stride;
  p.padding = pad;
  return p;
}

BatchNormParams bn_from(const Checkpoint& c, const std::string& name, BnLayout layout,
                        bool trainable) {
  BatchNormParams p;
  if (c.has(name + ".gamma")) {
    p.gamma = c.tensor(name + ".gamma", trainable);
    p.beta = c.tensor(name + ".beta", trainable);
  }
  p.running_mean = c.tensor(name + ".running_mean");
  p.running_var = c.tensor(name + ".running_var");
  p.layout = layout;
  return p;
}

BackboneConfig backbone_spec_from_json(const nlohmann::json& j) {
  BackboneConfig spec;
  spec.stem_channels = j.at("stem_channels").get<int64_t>();
  for (const auto& st : j.at("stages"))
    spec.stages.push_back({st[0].get<int64_t>(), st[1].get<int64_t>(), st[2].get<int64_t>()});
  return spec;
}

nlohmann::json backbone_spec_json(const BackboneConfig& spec) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : spec.stages) stages.push_back({s.blocks, s.channels, s.stride});
  return {{"stem_channels", spec.stem_channels}, {"stages", stages}};
}

Backbone backbone_from_checkpoint(const Checkpoint& c, const std::string& prefix,
                                  const BackboneConfig& spec, bool trainable) {
  Backbone b;
  b.spec = spec;
  b.stem = conv_from(c, prefix + ".stem.conv", 1, 1, trainable);
  b.stem_bn = bn_from(c, prefix + ".stem.bn", BnLayout::map, trainable);
  for (size_t si = 0; si < spec.stages.size(); ++si) {
    std::vector<BasicBlock> blocks;
    for (int64_t bi = 0; bi < spec.stages[si].blocks; ++bi) {
      std::string bp = prefix + ".s" + std::to_string(si) + ".b" + std::to_string(bi);
      int64_t stride = bi == 0 ? spec.stages[si].stride : 1;
      BasicBlock blk;
      blk.conv1 = conv_from(c, bp + ".conv1", stride, 1, trainable);
      blk.bn1 = bn_from(c, bp + ".bn1", BnLayout::map, trainable);
      blk.conv2 = conv_from(c, bp + ".conv2", 1, 1, trainable);
      blk.bn2 = bn_from(c, bp + ".bn2", BnLayout::map, trainable);
      if (c.has(bp + ".proj.kernel")) {
        blk.proj = conv_from(c, bp + ".proj", stride, 0, trainable);
        blk.proj_bn = bn_from(c, bp + ".proj_bn", BnLayout::map, trainable);
      }
      blocks.push_back(std::move(blk));
    }
    b.stages.push_back(std::move(blocks));
  }
  return b;
}

nlohmann::json model_config_json(const ModelConfig& m) {
  return {{"student_backbone", backbone_spec_json(m.student_backbone)},
          {"teacher_backbone", backbone_spec_json(m.teacher_backbone)},
          {"student_head_hidden", m.student_head_hidden},
          {"teacher_head_hidden", m.teacher_head_hidden},
          {"embed_dim", m.embed_dim},
          {"mhsa",
           {{"enabled", m.mhsa.enabled},
            {"heads", m.mhsa.heads},
            {"head_dim", m.mhsa.head_dim}}}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.student_backbone = backbone_spec_from_json(j.at("student_backbone"));
  m.teacher_backbone = backbone_spec_from_json(j.at("teacher_backbone"));
  m.student_head_hidden = j.at("student_head_hidden").get<int64_t>();
  m.teacher_head_hidden = j.at("teacher_head_hidden").get<int64_t>();
  m.embed_dim = j.at("embed_dim").get<int64_t>();
  m.mhsa.enabled = j.at("mhsa").at("enabled").get<bool>();
  m.mhsa.heads = j.at("mhsa").at("heads").get<int64_t>();
  m.mhsa.head_dim = j.at("mhsa").at("head_dim").get<int64_t>();
  return m;
}

}  // namespace

nlohmann::json head_structure_json(const HeadSpec& h) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : h.layers) {
    switch (l.kind) {
      case HeadLayerKind::fc:
        layers.push_back({{"type", "fc"},
                          {"in", l.fc.in_features()},
                          {"out", l.fc.out_features()},
                          {"bias", l.fc.bias.defined()}});
        break;
      case HeadLayerKind::conv1x1:
        layers.push_back({{"type", "conv1x1"},
                          {"in", l.conv.in_channels()},
                          {"out", l.conv.out_channels()},
                          {"bias", l.conv.bias.defined()}});
        break;
      case HeadLayerKind::bn:
        layers.push_back({{"type", "bn"},
                          {"channels", l.bn.channels()},
                          {"affine", l.bn.affine()}});
        break;
      case HeadLayerKind::relu:
        layers.push_back({{"type", "relu"}});
        break;
      case HeadLayerKind::cw_relu:
        layers.push_back({{"type", "cw_relu"}});
        break;
    }
  }
  return {{"kind", h.input_kind == HeadKind::vector ? "vector" : "map"},
          {"layers", layers}};
}

void append_head(Checkpoint& ckpt, const std::string& prefix, const HeadSpec& h) {
  for (size_t i = 0; i < h.layers.size(); ++i) {
    const HeadLayer& l = h.layers[i];
    std::string lp = prefix + "." + std::to_string(i);
    switch (l.kind) {
      case HeadLayerKind::fc:
        ckpt.add(lp + ".weight", l.fc.weight);
        if (l.fc.bias.defined()) ckpt.add(lp + ".bias", l.fc.bias);
        break;
      case HeadLayerKind::conv1x1:
        ckpt.add(lp + ".kernel", l.conv.kernel);
        if (l.conv.bias.defined()) ckpt.add(lp + ".bias", l.conv.bias);
        break;
      case HeadLayerKind::bn:
        append_bn(ckpt, lp, l.bn);
        break;
      default:
        break;
    }
  }
}

HeadSpec head_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix,
                              const nlohmann::json& structure) {
  HeadSpec h;
  std::string kind = structure.at("kind").get<std::string>();
  if (kind == "vector") {
    h.input_kind = HeadKind::vector;
  } else if (kind == "map") {
    h.input_kind = HeadKind::map;
  } else {
    throw std::runtime_error("head structure: unknown head kind '" + kind + "'");
  }
  BnLayout layout = h.input_kind == HeadKind::vector ? BnLayout::vector : BnLayout::map;
  const auto& layers = structure.at("layers");
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& lj = layers[i];
    std::string lp = prefix + "." + std::to_string(i);
    std::string type = lj.at("type").get<std::string>();
    if (type == "fc") {
      FcParams fc;
      fc.weight = ckpt.tensor(lp + ".weight");
      if (lj.at("bias").get<bool>()) fc.bias = ckpt.tensor(lp + ".bias");
      h.layers.push_back(HeadLayer::make_fc(std::move(fc)));
    } else if (type == "conv1x1") {
      ConvParams conv;
      conv.kernel = ckpt.tensor(lp + ".kernel");
      if (lj.at("bias").get<bool>()) conv.bias = ckpt.tensor(lp + ".bias");
      conv.stride = 1;
      conv.padding = 0;
      h.layers.push_back(HeadLayer::make_conv1x1(std::move(conv)));
    } else if (type == "bn") {
      h.layers.push_back(HeadLayer::make_bn(bn_from(ckpt, lp, layout, false)));
    } else if (type == "relu") {
      h.layers.push_back(HeadLayer::make_relu());
    } else if (type == "cw_relu") {
      h.layers.push_back(HeadLayer::make_cw_relu());
    } else {
      throw std::runtime_error("head structure: unknown layer kind '" + type + "'");
    }
  }
  validate_head(h);
  return h;
}

Checkpoint student_to_checkpoint(const Student& s, uint64_t seed) {
  Checkpoint c;
  c.metadata = {{"format_version", 1},
                {"model_kind", "student"},
                {"head_kind", "map"},
                {"seed_lineage", {seed}},
                {"model", model_config_json(s.spec)}};
  append_backbone(c, "backbone", s.backbone);
  append_conv(c, "head.mlp1.conv1", s.mlp1.conv1);
  append_bn(c, "head.mlp1.bn", s.mlp1.bn);
  append_conv(c, "head.mlp1.conv2", s.mlp1.conv2);
  append_conv(c, "head.mlp2.conv1", s.mlp2.conv1);
  append_bn(c, "head.mlp2.bn", s.mlp2.bn);
  append_conv(c, "head.mlp2.conv2", s.mlp2.conv2);
  if (s.mhsa) {
    for (int64_t h = 0; h < s.mhsa->heads; ++h) {
      std::string hp = "mhsa.h" + std::to_string(h);
      append_conv(c, hp + ".q", s.mhsa->q[static_cast<size_t>(h)]);
      append_conv(c, hp + ".k", s.mhsa->k[static_cast<size_t>(h)]);
      append_conv(c, hp + ".v", s.mhsa->v[static_cast<size_t>(h)]);
    }
    append_conv(c, "mhsa.out", s.mhsa->out);
  }
  return c;
}

Student student_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.metadata.at("model_kind").get<std::string>() != "student")
    throw std::runtime_error("checkpoint is not a student checkpoint");
  ModelConfig spec = model_config_from_json(ckpt.metadata.at("model"));
  Student s;
  s.spec = spec;
  s.backbone = backbone_from_checkpoint(ckpt, "backbone", spec.student_backbone, true);
  auto load_mlp = [&](const std::string& prefix) {
    MlpBlock m;
    m.conv1 = conv_from(ckpt, prefix + ".conv1", 1, 0, true);
    m.bn = bn_from(ckpt, prefix + ".bn", BnLayout::map, true);
    m.conv2 = conv_from(ckpt, prefix + ".conv2", 1, 0, true);
    return m;
  };
  s.mlp1 = load_mlp("head.mlp1");
  s.mlp2 = load_mlp("head.mlp2");
  if (spec.mhsa.enabled) {
    MhsaParams p;
    p.heads = spec.mhsa.heads;
    p.head_dim = spec.mhsa.head_dim;
    for (int64_t h = 0; h < p.heads; ++h) {
      std::string hp = "mhsa.h" + std::to_string(h);
      p.q.push_back(conv_from(ckpt, hp + ".q", 1, 0, true));
      p.k.push_back(conv_from(ckpt, hp + ".k", 1, 0, true));
      p.v.push_back(conv_from(ckpt, hp + ".v", 1, 0, true));
    }
    p.out = conv_from(ckpt, "mhsa.out", 1, 0, true);
    s.mhsa = std::move(p);
  }
  return s;
}

Checkpoint teacher_train_to_checkpoint(const TeacherTrainModel& m, uint64_t seed) {
  Checkpoint c;
  c.metadata = {{"format_version", 1},
                {"model_kind", "teacher"},
                {"head_kind", "vector"},
                {"seed_lineage", {seed}},
                {"backbone", backbone_spec_json(m.backbone.spec)},
                {"embed_dim", m.spec.embed_dim},
                {"head", head_structure_json(m.head)}};
  append_backbone(c, "backbone", m.backbone);
  append_head(c, "head", m.head);
  return c;
}

Teacher assemble_teacher(const Checkpoint& ckpt, bool drop_trailing_bn,
                         bool use_head, double tol, int trials) {
  std::string head_kind = ckpt.metadata.at("head_kind").get<std::string>();
  BackboneConfig spec = backbone_spec_from_json(ckpt.metadata.at("backbone"));
  Teacher t;
  t.backbone_spec = spec;
  t.backbone = backbone_from_checkpoint(ckpt, "backbone", spec, false);
  t.backbone.set_train(false);

  if (!use_head) return t;

  if (head_kind == "vector") {
    HeadSpec original = head_from_checkpoint(ckpt, "head", ckpt.metadata.at("head"));
    freeze_head(original);
    HeadSpec adapted = adapt_head(original, drop_trailing_bn);
    freeze_head(adapted);
    HeadSpec base = drop_trailing_bn ? strip_trailing_affine_free_bn(original)
                                     : clone_head(original);
    freeze_head(base);
    t.invariance = verify_invariance(base, adapted, trials, 7, tol);
    if (!t.invariance.pass)
      throw std::runtime_error(
          "assemble_teacher: head adaptation failed invariance verification "
          "(max deviation " + std::to_string(t.invariance.max_abs_dev) + " > " +
          std::to_string(tol) + ")");
    t.head = std::move(adapted);
  } else if (head_kind == "map") {
    if (!ckpt.metadata.contains("invariance") ||
        !ckpt.metadata.at("invariance").value("pass", false))
      throw std::runtime_error(
          "assemble_teacher: map-kind head lacks a passing invariance record");
    HeadSpec head = head_from_checkpoint(ckpt, "head", ckpt.metadata.at("head"));
    freeze_head(head);
    t.invariance.pass = true;
    t.invariance.max_abs_dev = ckpt.metadata.at("invariance").value("max_abs_dev", 0.0);
    t.head = std::move(head);
  } else {
    throw std::runtime_error("assemble_teacher: unsupported head kind '" + head_kind + "'");
  }
  return t;
}

Tensor teacher_forward(const Tensor& x, Teacher& t) {
  Tensor maps = backbone_forward(x.detached(), t.backbone);
  if (!t.head) return maps;
  return head_forward(maps, *t.head);
}

uint64_t teacher_param_hash(const Teacher& t) {
  Checkpoint c;
  append_backbone(c, "backbone", t.backbone);
  if (t.head) append_head(c, "head", *t.head);
  return checkpoint_hash(c);
}

Backbone backbone_from_any_checkpoint(const Checkpoint& ckpt) {
  BackboneConfig spec;
  if (ckpt.metadata.contains("backbone")) {
    spec = backbone_spec_from_json(ckpt.metadata.at("backbone"));
  } else if (ckpt.metadata.contains("model")) {
    spec = backbone_spec_from_json(ckpt.metadata.at("model").at("student_backbone"));
  } else {
    throw std::runtime_error("checkpoint carries no backbone description");
  }
  Backbone b = backbone_from_checkpoint(ckpt, "backbone", spec, false);
  b.set_train(false);
  return b;
}

Checkpoint norm_rescale_export(const Student& s, float anchor, uint64_t seed) {
  if (!(anchor > 0.0f))
    throw std::invalid_argument("norm_rescale_export: anchor must be > 0");
  Checkpoint c;
  c.metadata = {{"format_version", 1},
                {"model_kind", "backbone"},
                {"head_kind", "none"},
                {"norm_rescale_anchor", anchor},
                {"seed_lineage", {seed}},
                {"backbone", backbone_spec_json(s.backbone.spec)}};
  append_backbone(c, "backbone", s.backbone);
  for (auto& e : c.entries) {
    if (e.path.size() >= 7 && e.path.substr(e.path.size() - 7) == ".kernel")
      for (auto& v : e.data) v *= anchor;
  }
  return c;
}

}  // namespace pcd
