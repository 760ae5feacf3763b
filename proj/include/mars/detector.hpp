#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mars/blocks.hpp"

namespace mars {

// Scale 0 is the coarsest map (stride 32); scales 1 and 2 halve the stride.
inline constexpr std::array<int, 3> kStrides{32, 16, 8};
inline constexpr int kAnchorsPerScale = 3;

/// Canonical 416-input anchor set, scale-major: the stride-32 triple first.
inline std::array<std::array<real, 2>, 9> default_anchors() {
  return {{{116, 90}, {156, 198}, {373, 326}, {30, 61}, {62, 45}, {59, 119}, {10, 13}, {16, 30}, {33, 23}}};
}

struct ModelConfig {
  bool use_residual = false;
  bool use_channel_attention = false;
  bool use_residual_attention = false;  // fused block
  bool use_multi_scale_attention = false;
  bool use_domain = false;
  int num_classes = 5;
  int num_domains = 7;
  int input_size = 416;
  std::string backbone = "full";  // "full" | "toy"
  std::array<std::array<real, 2>, 9> anchors = default_anchors();
  int attention_reduction = 16;   // channel attention bottleneck ratio
  int domain_feat_channels = 64;  // domain classifier internal width

  int out_channels() const { return kAnchorsPerScale * (5 + num_classes); }
  int grid(int scale) const { return input_size / kStrides[scale]; }

  void validate() const {
    if (num_classes < 1) throw ConfigError("model config: num_classes must be positive");
    if (num_domains < 1) throw ConfigError("model config: num_domains must be positive");
    if (input_size < 32 || input_size % 32 != 0)
      throw ConfigError("model config: input_size must be a positive multiple of 32, got " +
                        std::to_string(input_size));
    if (backbone != "full" && backbone != "toy")
      throw ConfigError("model config: backbone must be 'full' or 'toy', got '" + backbone + "'");
    if (use_residual_attention && use_residual && use_channel_attention)
      throw ConfigError(
          "model config: the fused residual-attention block excludes the separate "
          "residual + channel-attention pair at the same attachment site");
    for (const auto& a : anchors)
      if (!(a[0] > 0) || !(a[1] > 0)) throw ConfigError("model config: anchors must be positive");
    if (attention_reduction < 1) throw ConfigError("model config: attention_reduction must be >= 1");
    if (domain_feat_channels < 1)
      throw ConfigError("model config: domain_feat_channels must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Layer primitives. Toy layers are conv + bias (+ leaky ReLU); the full
// backbone uses the bias-free conv + batch norm + leaky ReLU unit throughout,
// except for the final detection convolutions, which are plain affine convs.
// ---------------------------------------------------------------------------

struct ConvLayer {
  Parameter w, b;
  int stride = 1, pad = 0;

  static ConvLayer init(const std::string& name, int ci, int co, int k, int stride, int pad,
                        uint64_t seed) {
    ConvLayer l;
    l.w = init_kernel(name + ".w", {co, ci, k, k}, ci * k * k, seed);
    l.b = init_const(name + ".b", {co}, 0.0);
    l.stride = stride;
    l.pad = pad;
    return l;
  }
  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

struct NormConvLayer {
  Parameter w, gamma, beta;
  Tensor mean, var;
  int stride = 1, pad = 0;

  static NormConvLayer init(const std::string& name, int ci, int co, int k, int stride, int pad,
                            uint64_t seed) {
    NormConvLayer l;
    l.w = init_kernel(name + ".w", {co, ci, k, k}, ci * k * k, seed);
    l.gamma = init_const(name + ".gamma", {co}, 1.0);
    l.beta = init_const(name + ".beta", {co}, 0.0);
    l.mean = Tensor({co}, 0.0);
    l.var = Tensor({co}, 1.0);
    l.stride = stride;
    l.pad = pad;
    return l;
  }
  void collect(std::vector<Parameter*>& out) {
    for (Parameter* p : {&w, &gamma, &beta}) out.push_back(p);
  }
  void collect_buffers(const std::string& name, BufferList& out) {
    out.emplace_back(name + ".mean", &mean);
    out.emplace_back(name + ".var", &var);
  }
};

inline Var conv_leaky(Tape& t, Var x, ConvLayer& l) {
  return leaky_relu(t, conv2d(t, x, t.param(l.w), t.param(l.b), l.stride, l.pad), 0.1);
}

inline Var norm_conv_leaky(Tape& t, Var x, NormConvLayer& l, bool training) {
  Var h = conv2d(t, x, t.param(l.w), Var(), l.stride, l.pad);
  h = batch_norm(t, h, t.param(l.gamma), t.param(l.beta), l.mean, l.var, training);
  return leaky_relu(t, h, 0.1);
}

// ---------------------------------------------------------------------------
// Backbones. Both expose taps at strides 8/16/32; the neck below is shared
// structure (reduce -> expand -> detect, with upsample routes), differing
// only in widths and layer style.
// ---------------------------------------------------------------------------

// Toy: six plain convolutions, strides 1,2,2,2,2,2; taps after the last
// three. Wide enough to overfit a handful of images in seconds, small enough
// for finite-difference tests.
inline constexpr std::array<int, 6> kToyWidths{16, 24, 32, 48, 64, 96};
// Pre-detection channels per scale (coarse to fine) for each backbone.
inline constexpr std::array<int, 3> kToyHeadChannels{96, 64, 56};
inline constexpr std::array<int, 3> kFullHeadChannels{1024, 512, 256};

struct ToyBackbone {
  std::array<ConvLayer, 6> convs;

  static ToyBackbone init(uint64_t seed) {
    ToyBackbone b;
    int ci = 3;
    for (int i = 0; i < 6; ++i) {
      b.convs[i] = ConvLayer::init("backbone.conv" + std::to_string(i), ci, kToyWidths[i], 3,
                                   i == 0 ? 1 : 2, 1, seed);
      ci = kToyWidths[i];
    }
    return b;
  }
  void collect(std::vector<Parameter*>& out) {
    for (auto& c : convs) c.collect(out);
  }
};

struct FullBackbone {
  struct Unit {
    NormConvLayer squeeze;  // 1x1 to half width
    NormConvLayer expand;   // 3x3 back to full width
  };
  struct Stage {
    NormConvLayer down;  // 3x3 stride 2
    std::vector<Unit> units;
  };
  NormConvLayer stem;
  std::array<Stage, 5> stages;

  static FullBackbone init(uint64_t seed) {
    FullBackbone b;
    b.stem = NormConvLayer::init("backbone.stem", 3, 32, 3, 1, 1, seed);
    const std::array<int, 5> widths{64, 128, 256, 512, 1024};
    const std::array<int, 5> counts{1, 2, 8, 8, 4};
    int ci = 32;
    for (int s = 0; s < 5; ++s) {
      const std::string base = "backbone.stage" + std::to_string(s);
      b.stages[s].down = NormConvLayer::init(base + ".down", ci, widths[s], 3, 2, 1, seed);
      b.stages[s].units.resize(counts[s]);
      for (int u = 0; u < counts[s]; ++u) {
        const std::string ub = base + ".unit" + std::to_string(u);
        b.stages[s].units[u].squeeze =
            NormConvLayer::init(ub + ".squeeze", widths[s], widths[s] / 2, 1, 1, 0, seed);
        b.stages[s].units[u].expand =
            NormConvLayer::init(ub + ".expand", widths[s] / 2, widths[s], 3, 1, 1, seed);
      }
      ci = widths[s];
    }
    return b;
  }
  void collect(std::vector<Parameter*>& out) {
    stem.collect(out);
    for (auto& s : stages) {
      s.down.collect(out);
      for (auto& u : s.units) {
        u.squeeze.collect(out);
        u.expand.collect(out);
      }
    }
  }
  void collect_buffers(BufferList& out) {
    stem.collect_buffers("backbone.stem", out);
    for (int s = 0; s < 5; ++s) {
      const std::string base = "backbone.stage" + std::to_string(s);
      stages[s].down.collect_buffers(base + ".down", out);
      for (size_t u = 0; u < stages[s].units.size(); ++u) {
        const std::string ub = base + ".unit" + std::to_string(u);
        stages[s].units[u].squeeze.collect_buffers(ub + ".squeeze", out);
        stages[s].units[u].expand.collect_buffers(ub + ".expand", out);
      }
    }
  }
};

struct ToyNeck {
  std::array<ConvLayer, 3> reduce;  // 1x1
  std::array<ConvLayer, 3> expand;  // 3x3
  std::array<ConvLayer, 2> route;   // 1x1 before upsample

  static ToyNeck init(uint64_t seed) {
    ToyNeck n;
    n.reduce[0] = ConvLayer::init("neck.s0.reduce", 96, 48, 1, 1, 0, seed);
    n.expand[0] = ConvLayer::init("neck.s0.expand", 48, 96, 3, 1, 1, seed);
    n.route[0] = ConvLayer::init("neck.route01", 48, 24, 1, 1, 0, seed);
    n.reduce[1] = ConvLayer::init("neck.s1.reduce", 24 + 64, 32, 1, 1, 0, seed);
    n.expand[1] = ConvLayer::init("neck.s1.expand", 32, 64, 3, 1, 1, seed);
    n.route[1] = ConvLayer::init("neck.route12", 32, 16, 1, 1, 0, seed);
    n.reduce[2] = ConvLayer::init("neck.s2.reduce", 16 + 48, 28, 1, 1, 0, seed);
    n.expand[2] = ConvLayer::init("neck.s2.expand", 28, 56, 3, 1, 1, seed);
    return n;
  }
  void collect(std::vector<Parameter*>& out) {
    for (int s = 0; s < 3; ++s) {
      reduce[s].collect(out);
      expand[s].collect(out);
      if (s < 2) route[s].collect(out);
    }
  }
};

struct FullNeck {
  std::array<std::array<NormConvLayer, 5>, 3> blocks;  // alternating 1x1 / 3x3
  std::array<NormConvLayer, 3> pre_detect;             // 3x3 widening
  std::array<NormConvLayer, 2> route;                  // 1x1 before upsample

  static FullNeck init(uint64_t seed) {
    FullNeck n;
    const std::array<int, 3> in{1024, 256 + 512, 128 + 256};
    const std::array<int, 3> mid{512, 256, 128};
    for (int s = 0; s < 3; ++s) {
      const std::string base = "neck.s" + std::to_string(s) + ".conv";
      int ci = in[s];
      for (int i = 0; i < 5; ++i) {
        const bool squeeze = i % 2 == 0;
        const int co = squeeze ? mid[s] : mid[s] * 2;
        n.blocks[s][i] = NormConvLayer::init(base + std::to_string(i), ci, co, squeeze ? 1 : 3, 1,
                                             squeeze ? 0 : 1, seed);
        ci = co;
      }
      n.pre_detect[s] = NormConvLayer::init("neck.s" + std::to_string(s) + ".pre", mid[s],
                                            mid[s] * 2, 3, 1, 1, seed);
      if (s < 2)
        n.route[s] = NormConvLayer::init("neck.route" + std::to_string(s) + std::to_string(s + 1),
                                         mid[s], mid[s] / 2, 1, 1, 0, seed);
    }
    return n;
  }
  void collect(std::vector<Parameter*>& out) {
    for (int s = 0; s < 3; ++s) {
      for (auto& c : blocks[s]) c.collect(out);
      pre_detect[s].collect(out);
      if (s < 2) route[s].collect(out);
    }
  }
  void collect_buffers(BufferList& out) {
    for (int s = 0; s < 3; ++s) {
      const std::string base = "neck.s" + std::to_string(s);
      for (int i = 0; i < 5; ++i) blocks[s][i].collect_buffers(base + ".conv" + std::to_string(i), out);
      pre_detect[s].collect_buffers(base + ".pre", out);
      if (s < 2)
        route[s].collect_buffers("neck.route" + std::to_string(s) + std::to_string(s + 1), out);
    }
  }
};

// ---------------------------------------------------------------------------
// The assembled model. Optional blocks sit immediately before each detection
// convolution; insertion is strictly additive (routes always branch off the
// unmodified neck), so enabling a block never changes the other scales'
// inputs.
// ---------------------------------------------------------------------------

struct Model {
  ModelConfig cfg;
  uint64_t seed = 0;

  std::optional<ToyBackbone> toy;
  std::optional<ToyNeck> toy_neck;
  std::optional<FullBackbone> full;
  std::optional<FullNeck> full_neck;

  std::array<ConvLayer, 3> detect;
  std::vector<ResidualBlockParams> residual;           // per scale if enabled
  std::vector<ChannelAttentionParams> channel_attn;    // per scale if enabled
  std::vector<ResidualBlockParams> fused_residual;     // fused block halves
  std::vector<ChannelAttentionParams> fused_attn;
  std::optional<MultiScaleAttentionParams> msa;
  std::vector<DomainClassifierParams> domain;          // per scale if enabled

  std::array<int, 3> head_channels{};

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    if (toy) toy->collect(out);
    if (full) full->collect(out);
    if (toy_neck) toy_neck->collect(out);
    if (full_neck) full_neck->collect(out);
    for (auto& r : residual) r.collect(out);
    for (auto& c : channel_attn) c.collect(out);
    for (size_t s = 0; s < fused_residual.size(); ++s) {
      fused_residual[s].collect(out);
      fused_attn[s].collect(out);
    }
    if (msa) msa->collect(out);
    for (auto& d : domain) d.collect(out);
    for (auto& d : detect) d.collect(out);
    return out;
  }

  BufferList buffers() {
    BufferList out;
    if (full) full->collect_buffers(out);
    if (full_neck) full_neck->collect_buffers(out);
    for (size_t s = 0; s < residual.size(); ++s)
      residual[s].collect_buffers("block.res" + std::to_string(s) + ".", out);
    for (size_t s = 0; s < fused_residual.size(); ++s)
      fused_residual[s].collect_buffers("block.fused" + std::to_string(s) + ".", out);
    return out;
  }

  int64_t parameter_count() {
    int64_t n = 0;
    for (Parameter* p : parameters()) n += p->value.numel();
    return n;
  }
};

inline Model build_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  m.seed = seed;
  if (cfg.backbone == "toy") {
    m.toy = ToyBackbone::init(seed);
    m.toy_neck = ToyNeck::init(seed);
    m.head_channels = kToyHeadChannels;
  } else {
    m.full = FullBackbone::init(seed);
    m.full_neck = FullNeck::init(seed);
    m.head_channels = kFullHeadChannels;
  }
  for (int s = 0; s < 3; ++s) {
    const int C = m.head_channels[s];
    const std::string suffix = std::to_string(s);
    if (cfg.use_residual)
      m.residual.push_back(ResidualBlockParams::init(C, seed, "block.res" + suffix + "."));
    if (cfg.use_channel_attention)
      m.channel_attn.push_back(
          ChannelAttentionParams::init(C, cfg.attention_reduction, seed, "block.ca" + suffix + "."));
    if (cfg.use_residual_attention) {
      m.fused_residual.push_back(ResidualBlockParams::init(C, seed, "block.fused" + suffix + "."));
      m.fused_attn.push_back(ChannelAttentionParams::init(C, cfg.attention_reduction, seed,
                                                          "block.fusedca" + suffix + "."));
    }
    if (cfg.use_domain)
      m.domain.push_back(DomainClassifierParams::init(C, cfg.domain_feat_channels, cfg.num_domains,
                                                      seed, "domain.s" + suffix + "."));
    m.detect[s] = ConvLayer::init("detect.s" + suffix, C, cfg.out_channels(), 1, 1, 0, seed);
    // Start heavily biased toward "no object": all-background grids dominate
    // early training, and this keeps the objectness loss from swamping it.
    for (int a = 0; a < kAnchorsPerScale; ++a)
      m.detect[s].b.value(a * (5 + cfg.num_classes) + 4) = -4.0;
  }
  if (cfg.use_multi_scale_attention)
    m.msa = MultiScaleAttentionParams::init(m.head_channels, seed, "block.msa.");
  return m;
}

struct ForwardResult {
  std::array<Var, 3> raw;            // [B, 3*(5+C), G_s, G_s], scale 0 = stride 32
  std::array<Var, 3> domain_logits;  // [B, K] per scale, defined iff use_domain
  std::array<Var, 3> domain_probs;
};

inline ForwardResult model_forward(Model& m, Tape& t, Var images, bool training,
                                   bool reverse_domain_gradient = false) {
  const Tensor& xv = images.value();
  if (xv.rank() != 4 || xv.dim(1) != 3)
    throw ShapeError("model_forward: expected [B,3,S,S] images, got " + xv.shape_str());
  if (xv.dim(2) != m.cfg.input_size || xv.dim(3) != m.cfg.input_size)
    throw ShapeError("model_forward: expected spatial size " + std::to_string(m.cfg.input_size) +
                     ", got " + xv.shape_str());

  // Backbone taps, coarse to fine: [stride 32, stride 16, stride 8].
  std::array<Var, 3> taps;
  if (m.toy) {
    Var h = images;
    for (int i = 0; i < 6; ++i) {
      h = conv_leaky(t, h, m.toy->convs[i]);
      if (i == 3) taps[2] = h;
      if (i == 4) taps[1] = h;
      if (i == 5) taps[0] = h;
    }
  } else {
    Var h = norm_conv_leaky(t, images, m.full->stem, training);
    for (int s = 0; s < 5; ++s) {
      auto& stage = m.full->stages[s];
      h = norm_conv_leaky(t, h, stage.down, training);
      for (auto& u : stage.units) {
        Var branch = norm_conv_leaky(t, h, u.squeeze, training);
        branch = norm_conv_leaky(t, branch, u.expand, training);
        h = add(t, h, branch);
      }
      if (s == 2) taps[2] = h;
      if (s == 3) taps[1] = h;
      if (s == 4) taps[0] = h;
    }
  }

  // Neck: per-scale reduce/expand with upsample routes into the finer scales.
  std::array<Var, 3> heads;
  if (m.toy_neck) {
    Var carry;
    for (int s = 0; s < 3; ++s) {
      Var in = s == 0 ? taps[0] : concat_channels(t, carry, taps[s]);
      Var r = conv_leaky(t, in, m.toy_neck->reduce[s]);
      heads[s] = conv_leaky(t, r, m.toy_neck->expand[s]);
      if (s < 2) carry = upsample2(t, conv_leaky(t, r, m.toy_neck->route[s]));
    }
  } else {
    Var carry;
    for (int s = 0; s < 3; ++s) {
      Var h = s == 0 ? taps[0] : concat_channels(t, carry, taps[s]);
      for (auto& c : m.full_neck->blocks[s]) h = norm_conv_leaky(t, h, c, training);
      heads[s] = norm_conv_leaky(t, h, m.full_neck->pre_detect[s], training);
      if (s < 2) carry = upsample2(t, norm_conv_leaky(t, h, m.full_neck->route[s], training));
    }
  }

  // Optional blocks, immediately before the detection convolutions.
  for (int s = 0; s < 3; ++s) {
    if (m.cfg.use_residual) heads[s] = residual_block_forward(t, heads[s], m.residual[s], training);
    if (m.cfg.use_channel_attention)
      heads[s] = channel_attention_forward(t, heads[s], m.channel_attn[s]);
    if (m.cfg.use_residual_attention)
      heads[s] = residual_attention_forward(t, heads[s], m.fused_residual[s], m.fused_attn[s],
                                            training);
  }
  if (m.msa) heads = multi_scale_attention_forward(t, heads, *m.msa);

  ForwardResult out;
  for (int s = 0; s < 3; ++s) {
    if (m.cfg.use_domain) {
      out.domain_logits[s] =
          domain_classifier_logits(t, heads[s], m.domain[s], reverse_domain_gradient);
      out.domain_probs[s] = softmax(t, out.domain_logits[s]);
    }
    out.raw[s] = conv2d(t, heads[s], t.param(m.detect[s].w), t.param(m.detect[s].b),
                        m.detect[s].stride, m.detect[s].pad);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Decoding and non-maximum suppression (pure functions on raw tensors).
// ---------------------------------------------------------------------------

struct Detection {
  real x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  int class_id = 0;
  real confidence = 0;
};

struct GroundTruthBox {
  real x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  int class_id = 0;
};

inline real box_iou(real ax0, real ay0, real ax1, real ay1, real bx0, real by0, real bx1,
                    real by1) {
  const real ix0 = std::max(ax0, bx0), iy0 = std::max(ay0, by0);
  const real ix1 = std::min(ax1, bx1), iy1 = std::min(ay1, by1);
  const real iw = std::max(real(0), ix1 - ix0), ih = std::max(real(0), iy1 - iy0);
  const real inter = iw * ih;
  const real uni = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
  return uni > 0 ? inter / uni : real(0);
}

inline real detection_iou(const Detection& a, const Detection& b) {
  return box_iou(a.x_min, a.y_min, a.x_max, a.y_max, b.x_min, b.y_min, b.x_max, b.y_max);
}

/// Decode raw network outputs into per-image detections in input-image pixel
/// coordinates (clipped to [0, input_size]).
inline std::vector<std::vector<Detection>> decode_predictions(const std::array<Tensor, 3>& raw,
                                                              const ModelConfig& cfg,
                                                              real conf_threshold) {
  if (conf_threshold < 0 || conf_threshold > 1)
    throw ConfigError("decode_predictions: conf_threshold must lie in [0,1]");
  const int C = cfg.num_classes;
  const int block = 5 + C;
  const int B = raw[0].dim(0);
  std::vector<std::vector<Detection>> out(B);
  for (int s = 0; s < 3; ++s) {
    const Tensor& r = raw[s];
    const int G = cfg.grid(s);
    if (r.rank() != 4 || r.dim(0) != B || r.dim(1) != kAnchorsPerScale * block || r.dim(2) != G ||
        r.dim(3) != G)
      throw ShapeError("decode_predictions: scale " + std::to_string(s) + " has shape " +
                       r.shape_str() + ", expected [B," + std::to_string(kAnchorsPerScale * block) +
                       "," + std::to_string(G) + "," + std::to_string(G) + "]");
    const real stride = static_cast<real>(kStrides[s]);
    for (int b = 0; b < B; ++b)
      for (int a = 0; a < kAnchorsPerScale; ++a) {
        const auto& anchor = cfg.anchors[s * kAnchorsPerScale + a];
        const int base = a * block;
        for (int i = 0; i < G; ++i)
          for (int j = 0; j < G; ++j) {
            const real obj = sigmoid_scalar(r(b, base + 4, i, j));
            int best_c = 0;
            real best_p = sigmoid_scalar(r(b, base + 5, i, j));
            for (int c = 1; c < C; ++c) {
              const real p = sigmoid_scalar(r(b, base + 5 + c, i, j));
              if (p > best_p) {
                best_p = p;
                best_c = c;
              }
            }
            const real conf = obj * best_p;
            if (conf < conf_threshold) continue;
            const real cx = (j + sigmoid_scalar(r(b, base + 0, i, j))) * stride;
            const real cy = (i + sigmoid_scalar(r(b, base + 1, i, j))) * stride;
            const real bw = anchor[0] * std::exp(std::min(r(b, base + 2, i, j), real(40)));
            const real bh = anchor[1] * std::exp(std::min(r(b, base + 3, i, j), real(40)));
            const real lim = static_cast<real>(cfg.input_size);
            Detection d;
            d.x_min = std::clamp(cx - bw / 2, real(0), lim);
            d.y_min = std::clamp(cy - bh / 2, real(0), lim);
            d.x_max = std::clamp(cx + bw / 2, real(0), lim);
            d.y_max = std::clamp(cy + bh / 2, real(0), lim);
            d.class_id = best_c;
            d.confidence = conf;
            out[b].push_back(d);
          }
      }
  }
  return out;
}

inline bool detection_order(const Detection& a, const Detection& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.class_id != b.class_id) return a.class_id < b.class_id;
  if (a.x_min != b.x_min) return a.x_min < b.x_min;
  if (a.y_min != b.y_min) return a.y_min < b.y_min;
  if (a.x_max != b.x_max) return a.x_max < b.x_max;
  return a.y_max < b.y_max;
}

/// Greedy per-class suppression; fully deterministic (total ordering on ties).
inline std::vector<Detection> non_max_suppression(std::vector<Detection> dets,
                                                  real iou_threshold) {
  if (!(iou_threshold > 0) || !(iou_threshold < 1))
    throw ConfigError("non_max_suppression: iou_threshold must lie in (0,1)");
  std::sort(dets.begin(), dets.end(), detection_order);
  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    bool keep = true;
    for (const Detection& k : kept) {
      if (k.class_id != d.class_id) continue;
      if (detection_iou(k, d) >= iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(d);
  }
  return kept;
}

}  // namespace mars
