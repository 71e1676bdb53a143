#include "pcd/distill.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "pcd/layers.hpp"

namespace pcd {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

// ---- memory queue ----

MemoryQueue::MemoryQueue(int64_t capacity, int64_t dim)
    : capacity_(capacity), dim_(dim) {
  require(capacity >= 1, "MemoryQueue: capacity must be >= 1");
  require(dim >= 1, "MemoryQueue: dim must be >= 1");
  buf_.assign(static_cast<size_t>(capacity * dim), 0.0f);
}

void MemoryQueue::push_row(const float* row) {
  std::memcpy(buf_.data() + head_ * dim_, row, static_cast<size_t>(dim_) * sizeof(float));
  head_ = (head_ + 1) % capacity_;
  count_ = std::min(count_ + 1, capacity_);
}

void MemoryQueue::push_map(const Tensor& t) {
  require(t.ndim() == 4, "MemoryQueue::push_map: expects [N,C,H,W]");
  require(t.dim(1) == dim_, "MemoryQueue::push_map: dim mismatch, map has " +
                                std::to_string(t.dim(1)) + " channels, queue stores " +
                                std::to_string(dim_));
  Tensor pooled = global_avg_pool(t.detached());
  push_vectors(pooled);
}

void MemoryQueue::push_vectors(const Tensor& v) {
  require(v.ndim() == 2, "MemoryQueue::push_vectors: expects [N,D]");
  require(v.dim(1) == dim_, "MemoryQueue::push_vectors: dim mismatch");
  Tensor normed = l2_normalize(v.detached(), 1);
  for (int64_t n = 0; n < v.dim(0); ++n)
    push_row(normed.data().data() + n * dim_);
}

Tensor MemoryQueue::snapshot() const {
  if (count_ == 0) return Tensor();
  std::vector<float> out(static_cast<size_t>(count_ * dim_));
  int64_t oldest = (head_ - count_ + capacity_) % capacity_;
  for (int64_t i = 0; i < count_; ++i) {
    int64_t slot = (oldest + i) % capacity_;
    std::memcpy(out.data() + i * dim_, buf_.data() + slot * dim_,
                static_cast<size_t>(dim_) * sizeof(float));
  }
  return Tensor::from_data({count_, dim_}, std::move(out));
}

// ---- InfoNCE ----

Tensor infonce_rows(const Tensor& s_rows, const Tensor& t_rows,
                    const Tensor& negs, float tau) {
  if (!(tau > 0.0f)) throw std::invalid_argument("infonce: tau must be > 0");
  require(s_rows.ndim() == 2 && t_rows.ndim() == 2, "infonce: rows must be [P,D]");
  require(s_rows.shape() == t_rows.shape(), "infonce: s/t row shapes differ");
  bool has_negs = negs.defined();
  int64_t P = s_rows.dim(0), D = s_rows.dim(1);
  int64_t K = has_negs ? negs.dim(0) : 0;
  if (has_negs)
    require(negs.ndim() == 2 && negs.dim(1) == D, "infonce: negatives must be [K,D]");

  std::vector<Tensor> ins = {s_rows, t_rows};
  if (has_negs) ins.push_back(negs);

  // One row's logits (pos first), all in double.
  auto row_logits = [P, D, K, tau](const std::vector<Tensor>& in, int64_t p,
                                   std::vector<double>& logits) {
    (void)P;
    const float* S = in[0].data().data() + p * D;
    const float* T = in[1].data().data() + p * D;
    logits.assign(static_cast<size_t>(K + 1), 0.0);
    double pos = 0.0;
    for (int64_t d = 0; d < D; ++d)
      pos += static_cast<double>(S[d]) * static_cast<double>(T[d]);
    logits[0] = pos / static_cast<double>(tau);
    for (int64_t k = 0; k < K; ++k) {
      const float* Nk = in[2].data().data() + k * D;
      double acc = 0.0;
      for (int64_t d = 0; d < D; ++d)
        acc += static_cast<double>(S[d]) * static_cast<double>(Nk[d]);
      logits[static_cast<size_t>(k + 1)] = acc / static_cast<double>(tau);
    }
  };

  auto fwd = [P, row_logits](const std::vector<Tensor>& in, float* out) {
    double total = 0.0;
    std::vector<double> logits;
    for (int64_t p = 0; p < P; ++p) {
      row_logits(in, p, logits);
      double m = logits[0];
      for (double l : logits) m = std::max(m, l);
      double sum = 0.0;
      for (double l : logits) sum += std::exp(l - m);
      total += m + std::log(sum) - logits[0];
    }
    out[0] = static_cast<float>(total);
  };

  auto bwd = [P, D, K, tau, has_negs, row_logits](const std::vector<Tensor>& in,
                                                  const Tensor&, const float* g,
                                                  const std::vector<float*>& gins) {
    double go = g[0];
    double inv_tau = 1.0 / static_cast<double>(tau);
    std::vector<double> logits, prob;
    for (int64_t p = 0; p < P; ++p) {
      row_logits(in, p, logits);
      double m = logits[0];
      for (double l : logits) m = std::max(m, l);
      double sum = 0.0;
      prob.assign(logits.size(), 0.0);
      for (size_t i = 0; i < logits.size(); ++i) {
        prob[i] = std::exp(logits[i] - m);
        sum += prob[i];
      }
      for (auto& pr : prob) pr /= sum;

      const float* S = in[0].data().data() + p * D;
      const float* T = in[1].data().data() + p * D;
      if (gins[0]) {
        for (int64_t d = 0; d < D; ++d) {
          double acc = (prob[0] - 1.0) * static_cast<double>(T[d]);
          for (int64_t k = 0; k < K; ++k)
            acc += prob[static_cast<size_t>(k + 1)] *
                   static_cast<double>(in[2].data()[static_cast<size_t>(k * D + d)]);
          gins[0][p * D + d] += static_cast<float>(go * acc * inv_tau);
        }
      }
      if (gins[1]) {
        for (int64_t d = 0; d < D; ++d)
          gins[1][p * D + d] +=
              static_cast<float>(go * (prob[0] - 1.0) * static_cast<double>(S[d]) * inv_tau);
      }
      if (has_negs && gins[2]) {
        for (int64_t k = 0; k < K; ++k)
          for (int64_t d = 0; d < D; ++d)
            gins[2][k * D + d] += static_cast<float>(
                go * prob[static_cast<size_t>(k + 1)] * static_cast<double>(S[d]) * inv_tau);
      }
    }
  };

  return record_op("infonce_rows", std::move(ins), {1}, std::move(fwd), std::move(bwd));
}

Tensor pixel_infonce(const Tensor& s, const Tensor& t, const Tensor& negs, float tau) {
  require(s.ndim() == 1 && t.ndim() == 1, "pixel_infonce: s and t must be [D]");
  Tensor s_row = reshape(s, {1, s.dim(0)});
  Tensor t_row = reshape(t, {1, t.dim(0)});
  return infonce_rows(s_row, t_row, negs, tau);
}

Tensor pixel_infonce(const Tensor& s, const Tensor& t,
                     const std::vector<Tensor>& negs, float tau) {
  Tensor stack;
  if (!negs.empty()) {
    int64_t D = s.dim(0);
    std::vector<float> data;
    data.reserve(negs.size() * static_cast<size_t>(D));
    for (const auto& n : negs) {
      require(n.ndim() == 1 && n.dim(0) == D, "pixel_infonce: negative dim mismatch");
      data.insert(data.end(), n.data().begin(), n.data().end());
    }
    stack = Tensor::from_data({static_cast<int64_t>(negs.size()), D}, std::move(data));
  }
  return pixel_infonce(s, t, stack, tau);
}

// ---- losses ----

namespace {

// Teacher maps enter detached and resized to the student's spatial size.
Tensor prepare_teacher(const Tensor& t_proj, int64_t H, int64_t W) {
  Tensor t = t_proj.detached();
  if (t.dim(2) != H || t.dim(3) != W) t = bilinear_resize(t, H, W);
  return t;
}

void check_loss_inputs(const Tensor& s_star, const Tensor& t_proj,
                       const MemoryQueue& q) {
  require(s_star.ndim() == 4 && t_proj.ndim() == 4,
          "loss: student and teacher features must be [N,D,H,W]");
  require(s_star.dim(0) == t_proj.dim(0), "loss: batch sizes differ");
  require(s_star.dim(1) == t_proj.dim(1),
          "loss: channel mismatch after projection, student " +
              std::to_string(s_star.dim(1)) + " vs teacher " +
              std::to_string(t_proj.dim(1)));
  require(s_star.dim(1) == q.dim(), "loss: queue dim mismatch");
}

}  // namespace

Tensor pcd_loss(const Tensor& s_star, const Tensor& t_proj, const MemoryQueue& q,
                const LossConfig& cfg) {
  check_loss_inputs(s_star, t_proj, q);
  int64_t N = s_star.dim(0), H = s_star.dim(2), W = s_star.dim(3);
  Tensor t = prepare_teacher(t_proj, H, W);
  Tensor s_rows = to_pixel_rows(l2_normalize(s_star, 1));
  Tensor t_rows = to_pixel_rows(l2_normalize(t, 1));
  Tensor sum = infonce_rows(s_rows, t_rows, q.snapshot(), cfg.tau);
  return mul(sum, 1.0f / static_cast<float>(N * H * W));
}

Tensor image_level_loss_pooled(const Tensor& s_pooled, const Tensor& t_pooled,
                               const MemoryQueue& q, const LossConfig& cfg) {
  require(s_pooled.ndim() == 2 && t_pooled.ndim() == 2,
          "image_level_loss: pooled features must be [N,D]");
  Tensor s_rows = l2_normalize(s_pooled, 1);
  Tensor t_rows = l2_normalize(t_pooled.detached(), 1);
  Tensor sum = infonce_rows(s_rows, t_rows, q.snapshot(), cfg.tau);
  return mul(sum, 1.0f / static_cast<float>(s_pooled.dim(0)));
}

Tensor image_level_loss(const Tensor& s_star, const Tensor& t_proj,
                        const MemoryQueue& q, const LossConfig& cfg) {
  check_loss_inputs(s_star, t_proj, q);
  Tensor t = prepare_teacher(t_proj, s_star.dim(2), s_star.dim(3));
  return image_level_loss_pooled(global_avg_pool(s_star), global_avg_pool(t), q, cfg);
}

Tensor distillation_loss(const Tensor& s_star, const Tensor& t_proj,
                         const MemoryQueue& q, const LossConfig& cfg) {
  return cfg.level == LossLevel::pixel ? pcd_loss(s_star, t_proj, q, cfg)
                                       : image_level_loss(s_star, t_proj, q, cfg);
}

Tensor two_view_loss(const Tensor& s_star_a, const Tensor& t_a,
                     const Tensor& s_star_b, const Tensor& t_b,
                     const MemoryQueue& q, const LossConfig& cfg) {
  Tensor la = distillation_loss(s_star_a, t_a, q, cfg);
  Tensor lb = distillation_loss(s_star_b, t_b, q, cfg);
  return mul(add(la, lb), 0.5f);
}

// ---- gradient uniformity ----

UniformityReport gradient_uniformity_check(LossLevel level, Tensor s_map,
                                           const Tensor& t_map,
                                           const MemoryQueue& q,
                                           const LossConfig& cfg) {
  s_map.set_requires_grad(true);
  s_map.zero_grad();
  {
    Tape tape;
    LossConfig c = cfg;
    c.level = level;
    backward(distillation_loss(s_map, t_map, q, c));
  }
  UniformityReport rep;
  int64_t N = s_map.dim(0), C = s_map.dim(1), S = s_map.dim(2) * s_map.dim(3);
  auto g = s_map.grad();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    float lo = g[static_cast<size_t>(nc * S)], hi = lo;
    for (int64_t i = 0; i < S; ++i) {
      float v = g[static_cast<size_t>(nc * S + i)];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      rep.max_abs_grad = std::max(rep.max_abs_grad, static_cast<double>(std::fabs(v)));
    }
    rep.max_pairwise_dev =
        std::max(rep.max_pairwise_dev, static_cast<double>(hi) - static_cast<double>(lo));
  }
  rep.rel = rep.max_abs_grad > 0 ? rep.max_pairwise_dev / rep.max_abs_grad : 0.0;
  rep.uniform = rep.rel <= 1e-6;
  return rep;
}

double mean_pixel_cosine(const Tensor& s_star, const Tensor& t_proj) {
  Tensor t = prepare_teacher(t_proj.detached(), s_star.dim(2), s_star.dim(3));
  Tensor s_rows = to_pixel_rows(l2_normalize(s_star.detached(), 1));
  Tensor t_rows = to_pixel_rows(l2_normalize(t, 1));
  int64_t P = s_rows.dim(0), D = s_rows.dim(1);
  double total = 0.0;
  for (int64_t p = 0; p < P; ++p) {
    double dot = 0.0;
    for (int64_t d = 0; d < D; ++d)
      dot += static_cast<double>(s_rows.data()[static_cast<size_t>(p * D + d)]) *
             static_cast<double>(t_rows.data()[static_cast<size_t>(p * D + d)]);
    total += dot;
  }
  return total / static_cast<double>(P);
}

}  // namespace pcd
