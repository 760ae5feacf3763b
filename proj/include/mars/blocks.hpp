#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mars/autograd.hpp"
#include "mars/tensor.hpp"

namespace mars {

// ---------------------------------------------------------------------------
// Parameter initialization. Every parameter gets its own RNG stream keyed by
// (seed, full parameter name), so adding or removing unrelated parameters
// never shifts anyone else's initial values. Kernels draw Kaiming-uniform
// U(-sqrt(6/fan_in), +sqrt(6/fan_in)), which keeps activation variance flat
// through leaky-ReLU conv stacks — with a smaller bound the deep multiplicative
// paths (notably the pooled-feature x attention product feeding the domain
// head) decay to ~1e-12 and Adam's epsilon floor freezes them. Norms start at
// identity; biases start at zero.
// ---------------------------------------------------------------------------

inline Parameter init_kernel(const std::string& name, std::vector<int> shape, int fan_in,
                             uint64_t seed) {
  auto rng = seeded_rng(seed, name);
  const real bound = std::sqrt(6.0 / static_cast<real>(fan_in));
  Parameter p;
  p.name = name;
  p.value = Tensor::uniform(std::move(shape), -bound, bound, rng);
  return p;
}

inline Parameter init_const(const std::string& name, std::vector<int> shape, real v) {
  Parameter p;
  p.name = name;
  p.value = Tensor(std::move(shape), v);
  return p;
}

using BufferList = std::vector<std::pair<std::string, Tensor*>>;

inline void require_finite(const Tensor& x, const std::string& what) {
  if (!x.all_finite()) throw NumericError(what + ": non-finite values in input");
}

// ---------------------------------------------------------------------------
// Residual block: y = x + bn2(conv2(relu(bn1(conv1(x))))), both convolutions
// 1x1 with bias, channel-preserving. No activation after the addition.
// ---------------------------------------------------------------------------

struct ResidualBlockParams {
  int channels = 0;
  real bn_eps = 1e-5;
  real bn_momentum = 0.1;
  Parameter conv1_w, conv1_b, bn1_gamma, bn1_beta;
  Parameter conv2_w, conv2_b, bn2_gamma, bn2_beta;
  Tensor bn1_mean, bn1_var, bn2_mean, bn2_var;

  static ResidualBlockParams init(int channels, uint64_t seed, const std::string& prefix) {
    if (channels < 1) throw ConfigError("residual block: channels must be positive");
    ResidualBlockParams p;
    p.channels = channels;
    p.conv1_w = init_kernel(prefix + "conv1.w", {channels, channels, 1, 1}, channels, seed);
    p.conv1_b = init_const(prefix + "conv1.b", {channels}, 0.0);
    p.bn1_gamma = init_const(prefix + "bn1.gamma", {channels}, 1.0);
    p.bn1_beta = init_const(prefix + "bn1.beta", {channels}, 0.0);
    p.conv2_w = init_kernel(prefix + "conv2.w", {channels, channels, 1, 1}, channels, seed);
    p.conv2_b = init_const(prefix + "conv2.b", {channels}, 0.0);
    p.bn2_gamma = init_const(prefix + "bn2.gamma", {channels}, 1.0);
    p.bn2_beta = init_const(prefix + "bn2.beta", {channels}, 0.0);
    p.bn1_mean = Tensor({channels}, 0.0);
    p.bn1_var = Tensor({channels}, 1.0);
    p.bn2_mean = Tensor({channels}, 0.0);
    p.bn2_var = Tensor({channels}, 1.0);
    return p;
  }

  void collect(std::vector<Parameter*>& out) {
    for (Parameter* p : {&conv1_w, &conv1_b, &bn1_gamma, &bn1_beta, &conv2_w, &conv2_b, &bn2_gamma,
                         &bn2_beta})
      out.push_back(p);
  }
  void collect_buffers(const std::string& prefix, BufferList& out) {
    out.emplace_back(prefix + "bn1.mean", &bn1_mean);
    out.emplace_back(prefix + "bn1.var", &bn1_var);
    out.emplace_back(prefix + "bn2.mean", &bn2_mean);
    out.emplace_back(prefix + "bn2.var", &bn2_var);
  }
};

inline Var residual_branch(Tape& t, Var x, ResidualBlockParams& p, bool training) {
  Var h = conv2d(t, x, t.param(p.conv1_w), t.param(p.conv1_b), 1, 0);
  h = batch_norm(t, h, t.param(p.bn1_gamma), t.param(p.bn1_beta), p.bn1_mean, p.bn1_var, training,
                 p.bn_momentum, p.bn_eps);
  h = relu(t, h);
  h = conv2d(t, h, t.param(p.conv2_w), t.param(p.conv2_b), 1, 0);
  h = batch_norm(t, h, t.param(p.bn2_gamma), t.param(p.bn2_beta), p.bn2_mean, p.bn2_var, training,
                 p.bn_momentum, p.bn_eps);
  return h;
}

inline Var residual_block_forward(Tape& t, Var x, ResidualBlockParams& p, bool training) {
  if (x.value().rank() != 4 || x.value().dim(1) != p.channels)
    throw ShapeError("residual_block_forward: input channels " +
                     std::to_string(x.value().rank() == 4 ? x.value().dim(1) : -1) +
                     " do not match block channels " + std::to_string(p.channels));
  require_finite(x.value(), "residual_block_forward");
  for (const Tensor* v : {&p.bn1_var, &p.bn2_var})
    for (real e : v->data)
      if (!(e > 0) && !training)
        throw NumericError("residual_block_forward: running variance must stay positive");
  return add(t, x, residual_branch(t, x, p, training));
}

// ---------------------------------------------------------------------------
// Channel attention: squeeze with a global average pool, excite through a
// bottleneck (two 1x1 maps on the pooled vector), gate channels with sigmoid.
// ---------------------------------------------------------------------------

struct ChannelAttentionParams {
  int channels = 0;
  int reduction_ratio = 16;
  int hidden = 0;  // ceil(channels / reduction_ratio), at least 1
  Parameter reduce_w, reduce_b, expand_w, expand_b;

  static ChannelAttentionParams init(int channels, int reduction_ratio, uint64_t seed,
                                     const std::string& prefix) {
    if (channels < 1) throw ConfigError("channel attention: channels must be positive");
    if (reduction_ratio < 1) throw ConfigError("channel attention: reduction ratio must be positive");
    ChannelAttentionParams p;
    p.channels = channels;
    p.reduction_ratio = reduction_ratio;
    p.hidden = std::max(1, (channels + reduction_ratio - 1) / reduction_ratio);
    p.reduce_w = init_kernel(prefix + "reduce.w", {p.hidden, channels}, channels, seed);
    p.reduce_b = init_const(prefix + "reduce.b", {p.hidden}, 0.0);
    p.expand_w = init_kernel(prefix + "expand.w", {channels, p.hidden}, p.hidden, seed);
    p.expand_b = init_const(prefix + "expand.b", {channels}, 0.0);
    return p;
  }

  void collect(std::vector<Parameter*>& out) {
    for (Parameter* p : {&reduce_w, &reduce_b, &expand_w, &expand_b}) out.push_back(p);
  }
};

/// Returns the [B,C] gate itself; callers that want the gated map use
/// channel_attention_forward.
inline Var channel_attention_gate(Tape& t, Var x, ChannelAttentionParams& p) {
  Var pooled = global_avg_pool(t, x);  // [B,C]
  Var h = linear(t, pooled, t.param(p.reduce_w), t.param(p.reduce_b));
  h = relu(t, h);
  h = linear(t, h, t.param(p.expand_w), t.param(p.expand_b));
  return sigmoid(t, h);
}

inline Var channel_attention_forward(Tape& t, Var x, ChannelAttentionParams& p) {
  if (x.value().rank() != 4 || x.value().dim(1) != p.channels)
    throw ShapeError("channel_attention_forward: input channels do not match block channels");
  return scale_channels(t, x, channel_attention_gate(t, x, p));
}

// ---------------------------------------------------------------------------
// Multi-scale attention: one independent 1x1-conv + sigmoid gate per
// detection scale, applied over both space and channels. No cross-scale
// mixing.
// ---------------------------------------------------------------------------

struct MultiScaleAttentionParams {
  std::array<int, 3> channels{};
  std::array<Parameter, 3> gate_w;
  std::array<Parameter, 3> gate_b;

  static MultiScaleAttentionParams init(const std::array<int, 3>& channels, uint64_t seed,
                                        const std::string& prefix) {
    MultiScaleAttentionParams p;
    p.channels = channels;
    for (int s = 0; s < 3; ++s) {
      if (channels[s] < 1) throw ConfigError("multi-scale attention: channels must be positive");
      const std::string base = prefix + "gate" + std::to_string(s);
      p.gate_w[s] =
          init_kernel(base + ".w", {channels[s], channels[s], 1, 1}, channels[s], seed);
      p.gate_b[s] = init_const(base + ".b", {channels[s]}, 0.0);
    }
    return p;
  }

  void collect(std::vector<Parameter*>& out) {
    for (int s = 0; s < 3; ++s) {
      out.push_back(&gate_w[s]);
      out.push_back(&gate_b[s]);
    }
  }
};

inline std::array<Var, 3> multi_scale_attention_forward(Tape& t, const std::array<Var, 3>& maps,
                                                        MultiScaleAttentionParams& p) {
  std::array<Var, 3> out;
  for (int s = 0; s < 3; ++s) {
    if (maps[s].value().rank() != 4 || maps[s].value().dim(1) != p.channels[s])
      throw ShapeError("multi_scale_attention_forward: scale " + std::to_string(s) +
                       " channels do not match gate kernel");
    Var logits = conv2d(t, maps[s], t.param(p.gate_w[s]), t.param(p.gate_b[s]), 1, 0);
    out[s] = mul(t, maps[s], sigmoid(t, logits));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fused residual + channel attention: the gate acts on the residual branch
// output before the skip addition, so a zero branch still reduces to the
// identity.
// ---------------------------------------------------------------------------

inline Var residual_attention_forward(Tape& t, Var x, ResidualBlockParams& rp,
                                      ChannelAttentionParams& cp, bool training) {
  if (x.value().rank() != 4 || x.value().dim(1) != rp.channels || rp.channels != cp.channels)
    throw ShapeError("residual_attention_forward: channel counts disagree");
  require_finite(x.value(), "residual_attention_forward");
  Var branch = residual_branch(t, x, rp, training);
  return add(t, x, scale_channels(t, branch, channel_attention_gate(t, branch, cp)));
}

// ---------------------------------------------------------------------------
// Domain classifier: two stride-2 convs build a feature stack F, a parallel
// attention stack pools to a vector A, and the elementwise product of the
// pooled feature vector P with A feeds an affine head + softmax over the K
// degradation domains.
// ---------------------------------------------------------------------------

struct DomainClassifierParams {
  int in_channels = 0;
  int feat_channels = 64;
  int num_domains = 7;
  Parameter feat7_w, feat7_b, feat5_w, feat5_b;
  Parameter attn7_w, attn7_b, attn5_w, attn5_b;
  Parameter head_w, head_b;

  static DomainClassifierParams init(int in_channels, int feat_channels, int num_domains,
                                     uint64_t seed, const std::string& prefix) {
    if (in_channels < 1 || feat_channels < 1) throw ConfigError("domain classifier: bad channels");
    if (num_domains < 1) throw ConfigError("domain classifier: need at least one domain");
    DomainClassifierParams p;
    p.in_channels = in_channels;
    p.feat_channels = feat_channels;
    p.num_domains = num_domains;
    p.feat7_w = init_kernel(prefix + "feat7.w", {feat_channels, in_channels, 7, 7},
                            in_channels * 49, seed);
    p.feat7_b = init_const(prefix + "feat7.b", {feat_channels}, 0.0);
    p.feat5_w = init_kernel(prefix + "feat5.w", {feat_channels, feat_channels, 5, 5},
                            feat_channels * 25, seed);
    p.feat5_b = init_const(prefix + "feat5.b", {feat_channels}, 0.0);
    p.attn7_w = init_kernel(prefix + "attn7.w", {feat_channels, feat_channels, 7, 7},
                            feat_channels * 49, seed);
    p.attn7_b = init_const(prefix + "attn7.b", {feat_channels}, 0.0);
    p.attn5_w = init_kernel(prefix + "attn5.w", {feat_channels, feat_channels, 5, 5},
                            feat_channels * 25, seed);
    p.attn5_b = init_const(prefix + "attn5.b", {feat_channels}, 0.0);
    p.head_w = init_kernel(prefix + "head.w", {num_domains, feat_channels}, feat_channels, seed);
    p.head_b = init_const(prefix + "head.b", {num_domains}, 0.0);
    return p;
  }

  void collect(std::vector<Parameter*>& out) {
    for (Parameter* p : {&feat7_w, &feat7_b, &feat5_w, &feat5_b, &attn7_w, &attn7_b, &attn5_w,
                         &attn5_b, &head_w, &head_b})
      out.push_back(p);
  }
};

/// Raw head logits [B,K]; training losses want these.
inline Var domain_classifier_logits(Tape& t, Var x, DomainClassifierParams& p,
                                    bool reverse_gradient = false) {
  if (x.value().rank() != 4 || x.value().dim(1) != p.in_channels)
    throw ShapeError("domain_classifier_logits: input channels do not match");
  if (reverse_gradient) x = grad_reverse(t, x);
  Var f = relu(t, conv2d(t, x, t.param(p.feat7_w), t.param(p.feat7_b), 2, 3));
  f = relu(t, conv2d(t, f, t.param(p.feat5_w), t.param(p.feat5_b), 2, 2));
  Var pooled = global_avg_pool(t, f);  // P
  Var a = relu(t, conv2d(t, f, t.param(p.attn7_w), t.param(p.attn7_b), 2, 3));
  a = relu(t, conv2d(t, a, t.param(p.attn5_w), t.param(p.attn5_b), 2, 2));
  Var attn = global_avg_pool(t, a);  // A
  Var z = mul(t, pooled, attn);
  return linear(t, z, t.param(p.head_w), t.param(p.head_b));
}

/// Probability simplex over the K domains, [B,K].
inline Var domain_classifier_forward(Tape& t, Var x, DomainClassifierParams& p) {
  return softmax(t, domain_classifier_logits(t, x, p));
}

}  // namespace mars
