#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mars/autograd.hpp"
#include "mars/detector.hpp"

namespace mars {

struct TrainConfig {
  real learning_rate = 1e-3;
  int batch_size = 32;
  int epochs = 300;
  real lambda_domain = 0.1;
  std::uint64_t seed = 0;
  real ignore_iou_threshold = 0.5;
  bool use_gradient_reversal = false;  // adversarial domain head; off by default
  real clip_grad_norm = 0;             // 0 disables clipping

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("train config: learning_rate must be positive");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be at least 1");
    if (epochs < 1) throw ConfigError("train config: epochs must be at least 1");
    if (!(lambda_domain >= 0)) throw ConfigError("train config: lambda_domain must be >= 0");
    if (!(ignore_iou_threshold >= 0) || !(ignore_iou_threshold <= 1))
      throw ConfigError("train config: ignore_iou_threshold must lie in [0,1]");
    if (!(clip_grad_norm >= 0)) throw ConfigError("train config: clip_grad_norm must be >= 0");
  }
};

/// Dense per-image teaching signal for one scale. Cell (a,i,j) is "positive"
/// when obj_mask is 1 there; box/cls targets are meaningful only at positives.
/// ignore_mask marks near-miss anchors excluded from the objectness loss;
/// obj_mask and ignore_mask are disjoint by construction.
struct ScaleTargets {
  Tensor obj_mask;     // [A,G,G]
  Tensor ignore_mask;  // [A,G,G]
  Tensor box;          // [A,4,G,G]: x,y in sigmoid space, w,h in log space
  Tensor cls;          // [A,C,G,G]: one-hot
};

struct TargetAssignment {
  std::array<ScaleTargets, 3> scales;
  int num_assigned = 0;
};

/// Overlap of two boxes sharing a center, so only width/height matter.
inline real shape_iou(real w1, real h1, real w2, real h2) {
  const real inter = std::min(w1, w2) * std::min(h1, h2);
  const real uni = w1 * h1 + w2 * h2 - inter;
  return uni > 0 ? inter / uni : 0;
}

inline real clamped_logit(real p) {
  if (!(p > 0)) return -15.0;
  if (!(p < 1)) return 15.0;
  return std::clamp(std::log(p) - std::log1p(-p), -15.0, 15.0);
}

/// Maps ground-truth boxes (input-pixel corner coords) onto grid targets.
/// Each box goes to its best shape-IoU anchor at the responsible cell of that
/// anchor's scale; if that slot is taken by an earlier box, the next-ranked
/// anchor is tried so every box lands in exactly one (scale, cell, anchor)
/// slot. Non-best anchors with shape IoU at or above the ignore threshold are
/// masked out of the objectness loss unless some box is assigned there.
inline TargetAssignment assign_targets(const std::vector<GroundTruthBox>& gt,
                                       const ModelConfig& cfg, const TrainConfig& tc,
                                       const std::string& image_name = "") {
  const int A = kAnchorsPerScale;
  const int C = cfg.num_classes;
  TargetAssignment ta;
  for (int s = 0; s < 3; ++s) {
    const int G = cfg.grid(s);
    ta.scales[s].obj_mask = Tensor({A, G, G}, 0.0);
    ta.scales[s].ignore_mask = Tensor({A, G, G}, 0.0);
    ta.scales[s].box = Tensor({A, 4, G, G}, 0.0);
    ta.scales[s].cls = Tensor({A, C, G, G}, 0.0);
  }

  const std::string where = image_name.empty() ? "" : " in image " + image_name;
  auto cell_of = [&](int k, real cx, real cy, int& s, int& a, int& i, int& j) {
    s = k / A;
    a = k % A;
    const int G = cfg.grid(s);
    const real stride = static_cast<real>(kStrides[s]);
    j = std::clamp(static_cast<int>(std::floor(cx / stride)), 0, G - 1);
    i = std::clamp(static_cast<int>(std::floor(cy / stride)), 0, G - 1);
  };

  std::vector<std::array<real, 9>> ious(gt.size());
  for (size_t g = 0; g < gt.size(); ++g) {
    const auto& b = gt[g];
    const real w = b.x_max - b.x_min, h = b.y_max - b.y_min;
    if (!(w > 0) || !(h > 0))
      throw DataError("assign_targets: degenerate box for class " + std::to_string(b.class_id) +
                      where);
    if (b.class_id < 0 || b.class_id >= C)
      throw DataError("assign_targets: class id " + std::to_string(b.class_id) +
                      " out of range" + where);
    for (int k = 0; k < 9; ++k)
      ious[g][k] = shape_iou(w, h, cfg.anchors[k][0], cfg.anchors[k][1]);
  }

  for (size_t g = 0; g < gt.size(); ++g) {
    const auto& b = gt[g];
    const real cx = 0.5 * (b.x_min + b.x_max), cy = 0.5 * (b.y_min + b.y_max);
    const real w = b.x_max - b.x_min, h = b.y_max - b.y_min;

    std::array<int, 9> rank;
    std::iota(rank.begin(), rank.end(), 0);
    std::stable_sort(rank.begin(), rank.end(),
                     [&](int p, int q) { return ious[g][p] > ious[g][q]; });

    bool placed = false;
    for (int k : rank) {
      int s, a, i, j;
      cell_of(k, cx, cy, s, a, i, j);
      auto& sc = ta.scales[s];
      if (sc.obj_mask(a, i, j) != 0) continue;  // earlier box owns this slot
      const real stride = static_cast<real>(kStrides[s]);
      sc.obj_mask(a, i, j) = 1;
      sc.ignore_mask(a, i, j) = 0;
      sc.box(a, 0, i, j) = cx / stride - j;
      sc.box(a, 1, i, j) = cy / stride - i;
      sc.box(a, 2, i, j) = std::log(w / cfg.anchors[k][0]);
      sc.box(a, 3, i, j) = std::log(h / cfg.anchors[k][1]);
      sc.cls(a, b.class_id, i, j) = 1;
      ++ta.num_assigned;
      placed = true;
      break;
    }
    if (!placed)
      throw DataError("assign_targets: no free anchor slot for box of class " +
                      std::to_string(b.class_id) + where);
  }

  // Near misses: keep them out of the objectness loss rather than teaching
  // the model they are background. Assigned slots always win.
  for (size_t g = 0; g < gt.size(); ++g) {
    const auto& b = gt[g];
    const real cx = 0.5 * (b.x_min + b.x_max), cy = 0.5 * (b.y_min + b.y_max);
    for (int k = 0; k < 9; ++k) {
      if (ious[g][k] < tc.ignore_iou_threshold) continue;
      int s, a, i, j;
      cell_of(k, cx, cy, s, a, i, j);
      auto& sc = ta.scales[s];
      if (sc.obj_mask(a, i, j) == 0) sc.ignore_mask(a, i, j) = 1;
    }
  }
  return ta;
}

/// Inverse of assign_targets for a single image: raw grids whose decoded
/// output reproduces the assigned boxes, with saturated logits at +/-15.
/// Mainly for verifying the encode/decode round trip.
inline std::array<Tensor, 3> saturated_raw_from_assignment(const TargetAssignment& ta,
                                                           const ModelConfig& cfg) {
  const int A = kAnchorsPerScale;
  const int C = cfg.num_classes;
  std::array<Tensor, 3> raw;
  for (int s = 0; s < 3; ++s) {
    const int G = cfg.grid(s);
    raw[s] = Tensor({1, A * (5 + C), G, G}, 0.0);
    const auto& sc = ta.scales[s];
    for (int a = 0; a < A; ++a)
      for (int i = 0; i < G; ++i)
        for (int j = 0; j < G; ++j) {
          const int base = a * (5 + C);
          if (sc.obj_mask(a, i, j) != 0) {
            raw[s](0, base + 0, i, j) = clamped_logit(sc.box(a, 0, i, j));
            raw[s](0, base + 1, i, j) = clamped_logit(sc.box(a, 1, i, j));
            raw[s](0, base + 2, i, j) = sc.box(a, 2, i, j);
            raw[s](0, base + 3, i, j) = sc.box(a, 3, i, j);
            raw[s](0, base + 4, i, j) = 15.0;
            for (int c = 0; c < C; ++c)
              raw[s](0, base + 5 + c, i, j) = sc.cls(a, c, i, j) != 0 ? 15.0 : -15.0;
          } else {
            raw[s](0, base + 4, i, j) = -15.0;
          }
        }
  }
  return raw;
}

struct LossBreakdown {
  real box = 0, obj = 0, cls = 0, domain = 0, total = 0;
};

struct DetectionLossTerms {
  Var box, obj, cls;
};

/// Detection loss over a batch, per component, each averaged over the batch:
///   box: squared error on (x,y) in sigmoid space and (w,h) in log space,
///        summed over assigned cells;
///   obj: binary cross-entropy on objectness over all non-ignored cells;
///   cls: binary cross-entropy per class over assigned cells.
/// Fused op: the forward pass precomputes d(sum)/d(raw) for each component, so
/// backward is three scaled accumulations instead of a deep elementwise graph.
inline DetectionLossTerms detection_loss_op(Tape& t, const std::array<Var, 3>& raw,
                                            const std::vector<TargetAssignment>& targets,
                                            const ModelConfig& cfg) {
  const int A = kAnchorsPerScale;
  const int C = cfg.num_classes;
  const int B = static_cast<int>(targets.size());
  if (B == 0) throw ShapeError("detection_loss: empty batch");

  real box_sum = 0, obj_sum = 0, cls_sum = 0;
  auto gbox = std::make_shared<std::array<Tensor, 3>>();
  auto gobj = std::make_shared<std::array<Tensor, 3>>();
  auto gcls = std::make_shared<std::array<Tensor, 3>>();

  for (int s = 0; s < 3; ++s) {
    const int G = cfg.grid(s);
    const Tensor& r = raw[s].value();
    if (r.rank() != 4 || r.dim(0) != B || r.dim(1) != A * (5 + C) || r.dim(2) != G ||
        r.dim(3) != G)
      throw ShapeError("detection_loss: raw scale " + std::to_string(s) + " has shape " +
                       r.shape_str() + ", expected [" + std::to_string(B) + "," +
                       std::to_string(A * (5 + C)) + "," + std::to_string(G) + "," +
                       std::to_string(G) + "]");
    (*gbox)[s] = Tensor(r.shape, 0.0);
    (*gobj)[s] = Tensor(r.shape, 0.0);
    (*gcls)[s] = Tensor(r.shape, 0.0);

    const real* rp = r.ptr();
    real* gb = (*gbox)[s].ptr();
    real* go = (*gobj)[s].ptr();
    real* gc = (*gcls)[s].ptr();
    const int64_t plane = static_cast<int64_t>(G) * G;

    for (int b = 0; b < B; ++b) {
      const auto& sc = targets[b].scales[s];
      for (int a = 0; a < A; ++a) {
        const int64_t cell0 =
            ((static_cast<int64_t>(b) * A * (5 + C)) + a * (5 + C)) * plane;
        for (int i = 0; i < G; ++i)
          for (int j = 0; j < G; ++j) {
            const int64_t at = static_cast<int64_t>(i) * G + j;
            const int64_t px = cell0 + at;            // tx channel
            const int64_t po = cell0 + 4 * plane + at;  // objectness channel
            if (sc.obj_mask(a, i, j) != 0) {
              const real sx = sigmoid_scalar(rp[px]);
              const real sy = sigmoid_scalar(rp[px + plane]);
              const real tx = sc.box(a, 0, i, j), ty = sc.box(a, 1, i, j);
              const real dw = rp[px + 2 * plane] - sc.box(a, 2, i, j);
              const real dh = rp[px + 3 * plane] - sc.box(a, 3, i, j);
              box_sum += (sx - tx) * (sx - tx) + (sy - ty) * (sy - ty) + dw * dw + dh * dh;
              gb[px] = 2 * (sx - tx) * sx * (1 - sx);
              gb[px + plane] = 2 * (sy - ty) * sy * (1 - sy);
              gb[px + 2 * plane] = 2 * dw;
              gb[px + 3 * plane] = 2 * dh;

              obj_sum += bce_logit(rp[po], 1.0);
              go[po] = sigmoid_scalar(rp[po]) - 1.0;

              for (int c = 0; c < C; ++c) {
                const int64_t pc = cell0 + (5 + c) * plane + at;
                const real y = sc.cls(a, c, i, j);
                cls_sum += bce_logit(rp[pc], y);
                gc[pc] = sigmoid_scalar(rp[pc]) - y;
              }
            } else if (sc.ignore_mask(a, i, j) == 0) {
              obj_sum += bce_logit(rp[po], 0.0);
              go[po] = sigmoid_scalar(rp[po]);
            }
          }
      }
    }
  }

  const real inv_b = 1.0 / B;
  DetectionLossTerms out;
  auto make_term = [&](real sum, const std::shared_ptr<std::array<Tensor, 3>>& grads) {
    Node* n = detail::make_result(
        t, Tensor({1}, sum * inv_b),
        {raw[0].node(), raw[1].node(), raw[2].node()});
    std::array<Node*, 3> parents{raw[0].node(), raw[1].node(), raw[2].node()};
    n->backprop = [n, parents, grads, inv_b]() {
      const real up = n->grad.data[0] * inv_b;
      for (int s = 0; s < 3; ++s) {
        if (!parents[s]->requires_grad) continue;
        parents[s]->ensure_grad();
        real* dst = parents[s]->grad.ptr();
        const real* src = (*grads)[s].ptr();
        const int64_t nels = (*grads)[s].numel();
        for (int64_t k = 0; k < nels; ++k) dst[k] += up * src[k];
      }
    };
    return Var(n);
  };
  out.box = make_term(box_sum, gbox);
  out.obj = make_term(obj_sum, gobj);
  out.cls = make_term(cls_sum, gcls);
  return out;
}

/// Value-only breakdown; `domain_value` is folded in as total += lambda * domain.
inline LossBreakdown detection_loss(const std::array<Tensor, 3>& raw,
                                    const std::vector<TargetAssignment>& targets,
                                    const ModelConfig& cfg, real lambda = 0.1,
                                    real domain_value = 0) {
  Tape t;
  std::array<Var, 3> rv{t.leaf(raw[0]), t.leaf(raw[1]), t.leaf(raw[2])};
  DetectionLossTerms terms = detection_loss_op(t, rv, targets, cfg);
  LossBreakdown lb;
  lb.box = terms.box.value().data[0];
  lb.obj = terms.obj.value().data[0];
  lb.cls = terms.cls.value().data[0];
  lb.domain = domain_value;
  lb.total = lb.box + lb.obj + lb.cls + lambda * lb.domain;
  return lb;
}

/// Mean over the three scale heads of -log p[label], one item.
inline real domain_loss(const std::array<std::vector<real>, 3>& probs_per_scale, int label) {
  real acc = 0;
  for (int s = 0; s < 3; ++s) {
    const auto& p = probs_per_scale[s];
    if (label < 0 || label >= static_cast<int>(p.size()))
      throw DataError("domain_loss: label " + std::to_string(label) +
                      " out of range for " + std::to_string(p.size()) + " domains");
    acc += -std::log(p[static_cast<size_t>(label)]);
  }
  return acc / 3.0;
}

/// Batched tape version on logits: mean over scales of softmax cross-entropy.
inline Var domain_loss_op(Tape& t, const std::array<Var, 3>& domain_logits,
                          const std::vector<int>& labels) {
  Var acc;
  for (int s = 0; s < 3; ++s) {
    Var ce = softmax_cross_entropy(t, domain_logits[s], labels);
    acc = acc.defined() ? add(t, acc, ce) : ce;
  }
  return mul_scalar(t, acc, 1.0 / 3.0);
}

struct AdamOptimizer {
  std::vector<Parameter*> params;
  real lr;
  real beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t steps = 0;
  std::vector<Tensor> m, v;

  AdamOptimizer(std::vector<Parameter*> ps, real learning_rate)
      : params(std::move(ps)), lr(learning_rate) {
    if (!(lr > 0)) throw ConfigError("adam: learning rate must be positive");
    m.reserve(params.size());
    v.reserve(params.size());
    for (Parameter* p : params) {
      m.emplace_back(p->value.shape, 0.0);
      v.emplace_back(p->value.shape, 0.0);
    }
  }

  void zero_grad() {
    for (Parameter* p : params)
      if (!p->grad.data.empty()) p->grad.fill(0);
  }

  void step() {
    ++steps;
    const real bc1 = 1.0 - std::pow(beta1, static_cast<real>(steps));
    const real bc2 = 1.0 - std::pow(beta2, static_cast<real>(steps));
    for (size_t k = 0; k < params.size(); ++k) {
      Parameter* p = params[k];
      if (p->grad.data.empty()) continue;  // parameter not reached by backward
      real* th = p->value.ptr();
      const real* g = p->grad.ptr();
      real* mk = m[k].ptr();
      real* vk = v[k].ptr();
      for (int64_t i = 0; i < p->value.numel(); ++i) {
        mk[i] = beta1 * mk[i] + (1 - beta1) * g[i];
        vk[i] = beta2 * vk[i] + (1 - beta2) * g[i] * g[i];
        th[i] -= lr * (mk[i] / bc1) / (std::sqrt(vk[i] / bc2) + eps);
      }
    }
  }
};

/// One labelled training item: image tensor plus boxes in input coordinates.
struct TrainExample {
  Tensor image;  // [3,S,S]
  std::vector<GroundTruthBox> boxes;
  int domain_id = 0;
  std::string name;
};

struct EpochRecord {
  int epoch = 0;
  real box = 0, obj = 0, cls = 0, domain = 0, total = 0;
  std::optional<real> map;
  real seconds = 0;
};

struct FitOptions {
  int checkpoint_interval = 0;  // epochs between saves; 0 = final epoch only
  int eval_interval = 0;        // epochs between evaluate() calls; 0 = never
  std::function<real(Model&)> evaluate;         // returns mAP on a held-out set
  std::function<void(Model&, int)> save;        // checkpoint writer, gets epoch
  std::function<void(const EpochRecord&)> on_epoch;
  long max_steps = 0;    // hard cap on optimizer steps; 0 = unlimited
  real target_map = -1;  // stop once evaluate() reaches this; < 0 disables
};

inline real global_grad_norm(const std::vector<Parameter*>& params) {
  real acc = 0;
  for (const Parameter* p : params)
    for (real g : p->grad.data) acc += g * g;
  return std::sqrt(acc);
}

/// Epoch-driven training loop. Deterministic for a fixed (model seed, config
/// seed, dataset order): shuffling derives from the run seed and epoch alone.
/// Aborts with NumericError naming the batch if any loss goes non-finite.
inline std::vector<EpochRecord> fit(Model& model, const std::vector<TrainExample>& data,
                                    const TrainConfig& tc, const FitOptions& opt = {}) {
  tc.validate();
  model.cfg.validate();
  if (data.empty()) throw DataError("fit: empty dataset");
  const int S = model.cfg.input_size;
  for (const auto& ex : data) {
    if (ex.image.rank() != 3 || ex.image.dim(0) != 3 || ex.image.dim(1) != S ||
        ex.image.dim(2) != S)
      throw ShapeError("fit: image " + ex.name + " has shape " + ex.image.shape_str() +
                       ", expected [3," + std::to_string(S) + "," + std::to_string(S) + "]");
    if (model.cfg.use_domain && (ex.domain_id < 0 || ex.domain_id >= model.cfg.num_domains))
      throw DataError("fit: domain id " + std::to_string(ex.domain_id) + " out of range for " +
                      ex.name);
  }

  AdamOptimizer adam(model.parameters(), tc.learning_rate);
  const bool with_domain = model.cfg.use_domain && tc.lambda_domain > 0;

  std::vector<EpochRecord> history;
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), size_t{0});
  long steps_done = 0;
  bool stop = false;

  for (int epoch = 0; epoch < tc.epochs && !stop; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto rng = seeded_rng(tc.seed, "fit.shuffle.epoch" + std::to_string(epoch));
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch;
    long images_seen = 0;

    for (size_t start = 0; start < order.size() && !stop;
         start += static_cast<size_t>(tc.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(tc.batch_size));
      const int B = static_cast<int>(end - start);

      Tensor batch({B, 3, S, S});
      std::vector<TargetAssignment> targets;
      std::vector<int> labels;
      targets.reserve(static_cast<size_t>(B));
      std::string batch_names;
      for (int b = 0; b < B; ++b) {
        const TrainExample& ex = data[order[start + static_cast<size_t>(b)]];
        std::copy(ex.image.data.begin(), ex.image.data.end(),
                  batch.data.begin() + static_cast<int64_t>(b) * 3 * S * S);
        targets.push_back(assign_targets(ex.boxes, model.cfg, tc, ex.name));
        labels.push_back(ex.domain_id);
        if (!batch_names.empty()) batch_names += ", ";
        batch_names += ex.name.empty() ? "#" + std::to_string(order[start + b]) : ex.name;
      }

      Tape tape;
      Var images = tape.leaf(std::move(batch));
      ForwardResult fw = model_forward(model, tape, images, /*training=*/true,
                                       tc.use_gradient_reversal && model.cfg.use_domain);
      DetectionLossTerms det = detection_loss_op(tape, fw.raw, targets, model.cfg);
      Var total = add(tape, add(tape, det.box, det.obj), det.cls);
      Var dom;
      if (with_domain) {
        dom = domain_loss_op(tape, fw.domain_logits, labels);
        total = add(tape, total, mul_scalar(tape, dom, tc.lambda_domain));
      }

      const real tv = total.value().data[0];
      if (!std::isfinite(tv))
        throw NumericError("fit: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch starting at item " + std::to_string(start) + " (" +
                           batch_names + ")");

      adam.zero_grad();
      tape.backward(total);
      if (tc.clip_grad_norm > 0) {
        const real norm = global_grad_norm(adam.params);
        if (norm > tc.clip_grad_norm) {
          const real scale = tc.clip_grad_norm / norm;
          for (Parameter* p : adam.params)
            for (real& g : p->grad.data) g *= scale;
        }
      }
      adam.step();
      ++steps_done;

      rec.box += det.box.value().data[0] * B;
      rec.obj += det.obj.value().data[0] * B;
      rec.cls += det.cls.value().data[0] * B;
      if (dom.defined()) rec.domain += dom.value().data[0] * B;
      rec.total += tv * B;
      images_seen += B;

      if (opt.max_steps > 0 && steps_done >= opt.max_steps) stop = true;
    }

    const real inv = images_seen > 0 ? 1.0 / static_cast<real>(images_seen) : 0.0;
    rec.box *= inv;
    rec.obj *= inv;
    rec.cls *= inv;
    rec.domain *= inv;
    rec.total *= inv;

    const bool eval_now =
        opt.evaluate && ((opt.eval_interval > 0 && (epoch + 1) % opt.eval_interval == 0) ||
                         stop || epoch + 1 == tc.epochs);
    if (eval_now) {
      rec.map = opt.evaluate(model);
      if (opt.target_map >= 0 && *rec.map >= opt.target_map) stop = true;
    }

    rec.seconds =
        std::chrono::duration<real>(std::chrono::steady_clock::now() - t0).count();
    if (opt.on_epoch) opt.on_epoch(rec);
    history.push_back(rec);

    const bool last = stop || epoch + 1 == tc.epochs;
    if (opt.save &&
        (last || (opt.checkpoint_interval > 0 && (epoch + 1) % opt.checkpoint_interval == 0)))
      opt.save(model, epoch);
  }
  return history;
}

}  // namespace mars
