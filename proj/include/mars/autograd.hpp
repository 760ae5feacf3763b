#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "mars/tensor.hpp"

namespace mars {

using MatMap = Eigen::Map<Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline real sigmoid_scalar(real z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  real e = std::exp(z);
  return e / (1.0 + e);
}

// Numerically stable ln(1 + e^z).
inline real softplus_scalar(real z) { return std::max(z, real(0)) + std::log1p(std::exp(-std::abs(z))); }

// Binary cross-entropy on a logit: softplus(z) - z*y. Gradient is sigmoid(z) - y.
inline real bce_logit(real z, real y) { return softplus_scalar(z) - z * y; }

class Tape;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  bool grad_ready = false;
  Parameter* bound = nullptr;  // leaf bound to a model parameter
  std::function<void()> backprop;

  void ensure_grad() {
    if (!grad_ready) {
      grad = Tensor(value.shape);
      grad_ready = true;
    }
  }
};

/// Handle into the tape. Cheap to copy; valid as long as the tape lives.
class Var {
 public:
  Var() = default;
  explicit Var(Node* n) : node_(n) {}
  Node* node() const { return node_; }
  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool defined() const { return node_ != nullptr; }

 private:
  Node* node_ = nullptr;
};

/// Records every op of a forward pass in execution order, which is already a
/// topological order, so backward is a single reverse sweep. One tape per
/// forward+backward; tapes are cheap to build and discard.
class Tape {
 public:
  Var leaf(Tensor v, bool requires_grad = false) {
    Node* n = new_node();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return Var(n);
  }

  Var param(Parameter& p) {
    Node* n = new_node();
    n->value = p.value;
    n->requires_grad = true;
    n->bound = &p;
    return Var(n);
  }

  /// Reverse sweep from `loss` (a scalar). Accumulates into bound Parameter
  /// grads; leaves created with requires_grad keep their grads readable.
  void backward(Var loss) {
    Node* ln = loss.node();
    if (ln->value.numel() != 1) throw ShapeError("backward: loss must be a scalar");
    ln->ensure_grad();
    ln->grad.data[0] = 1.0;
    bool seen = false;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node* n = it->get();
      if (n == ln) seen = true;
      if (!seen) continue;
      if (!n->grad_ready) continue;
      if (n->backprop) n->backprop();
      if (n->bound) {
        n->bound->ensure_grad();
        real* g = n->bound->grad.ptr();
        const real* s = n->grad.ptr();
        for (int64_t i = 0; i < n->grad.numel(); ++i) g[i] += s[i];
      }
    }
  }

  size_t size() const { return nodes_.size(); }

  Node* new_node() {
    nodes_.push_back(std::make_unique<Node>());
    return nodes_.back().get();
  }

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
};

namespace detail {

inline Node* make_result(Tape& t, Tensor value, std::initializer_list<Node*> parents) {
  Node* n = t.new_node();
  n->value = std::move(value);
  for (Node* p : parents)
    if (p && p->requires_grad) n->requires_grad = true;
  return n;
}

// Scatter-gather between an image plane [C,H,W] and the column matrix
// [C*kh*kw, Ho*Wo] used to express convolution as one GEMM.
inline void im2col(const real* x, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int Ho, int Wo, real* col) {
  const int64_t plane = static_cast<int64_t>(H) * W;
  const int64_t out = static_cast<int64_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        real* dst = col + ((static_cast<int64_t>(c) * kh + ki) * kw + kj) * out;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + Wo, real(0));
            dst += Wo;
            continue;
          }
          const real* src = x + c * plane + static_cast<int64_t>(iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            *dst++ = (ix >= 0 && ix < W) ? src[ix] : real(0);
          }
        }
      }
    }
  }
}

inline void col2im_add(const real* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                       int Ho, int Wo, real* x) {
  const int64_t plane = static_cast<int64_t>(H) * W;
  const int64_t out = static_cast<int64_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const real* src = col + ((static_cast<int64_t>(c) * kh + ki) * kw + kj) * out;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) {
            src += Wo;
            continue;
          }
          real* dst = x + c * plane + static_cast<int64_t>(iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
          src += Wo;
        }
      }
    }
  }
}

}  // namespace detail

/// 2D convolution, zero padding, square stride. x [B,Ci,H,W], w [Co,Ci,kh,kw],
/// optional bias [Co]. Errors if the padded extent is smaller than the kernel.
inline Var conv2d(Tape& t, Var x, Var w, Var bias, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4) throw ShapeError("conv2d: expected 4D input and kernel");
  const int B = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != Ci)
    throw ShapeError("conv2d: kernel expects " + std::to_string(wv.dim(1)) + " input channels, got " +
                     std::to_string(Ci));
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    throw ShapeError("conv2d: spatial extent smaller than kernel after padding");
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  const int K = Ci * kh * kw;
  const int64_t out = static_cast<int64_t>(Ho) * Wo;

  Tensor y({B, Co, Ho, Wo});
  auto cols = std::make_shared<Tensor>(std::vector<int>{B, K, static_cast<int>(out)});
  ConstMatMap wm(wv.ptr(), Co, K);
  for (int b = 0; b < B; ++b) {
    real* colp = cols->ptr() + static_cast<int64_t>(b) * K * out;
    detail::im2col(xv.ptr() + static_cast<int64_t>(b) * Ci * H * W, Ci, H, W, kh, kw, stride, pad,
                   Ho, Wo, colp);
    ConstMatMap cm(colp, K, out);
    MatMap ym(y.ptr() + static_cast<int64_t>(b) * Co * out, Co, out);
    ym.noalias() = wm * cm;
    if (bias.defined()) {
      const real* bp = bias.value().ptr();
      for (int co = 0; co < Co; ++co) ym.row(co).array() += bp[co];
    }
  }

  Node* xn = x.node();
  Node* wn = w.node();
  Node* bn = bias.defined() ? bias.node() : nullptr;
  Node* r = detail::make_result(t, std::move(y), {xn, wn, bn});
  if (r->requires_grad) {
    r->backprop = [=]() {
      const Tensor& g = r->grad;
      for (int b = 0; b < B; ++b) {
        ConstMatMap gm(g.ptr() + static_cast<int64_t>(b) * Co * out, Co, out);
        ConstMatMap cm(cols->ptr() + static_cast<int64_t>(b) * K * out, K, out);
        if (wn->requires_grad) {
          wn->ensure_grad();
          MatMap dwm(wn->grad.ptr(), Co, K);
          dwm.noalias() += gm * cm.transpose();
        }
        if (bn && bn->requires_grad) {
          bn->ensure_grad();
          real* dbp = bn->grad.ptr();
          for (int co = 0; co < Co; ++co) dbp[co] += gm.row(co).sum();
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          Tensor dcol({K, static_cast<int>(out)});
          MatMap dcm(dcol.ptr(), K, out);
          ConstMatMap wm2(wn->value.ptr(), Co, K);
          dcm.noalias() = wm2.transpose() * gm;
          detail::col2im_add(dcol.ptr(), Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                             xn->grad.ptr() + static_cast<int64_t>(b) * Ci * H * W);
        }
      }
    };
  }
  return Var(r);
}

/// Batch normalization over (B,H,W) per channel. In train mode the batch
/// statistics normalize and the running buffers are updated in place; in eval
/// mode the running buffers normalize and nothing is mutated.
inline Var batch_norm(Tape& t, Var x, Var gamma, Var beta, Tensor& run_mean, Tensor& run_var,
                      bool training, real momentum = 0.1, real eps = 1e-5) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("batch_norm: expected 4D input");
  const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (gamma.value().numel() != C || beta.value().numel() != C)
    throw ShapeError("batch_norm: scale/shift length must equal channel count");
  const int64_t plane = static_cast<int64_t>(H) * W;
  const int64_t n = static_cast<int64_t>(B) * plane;

  Tensor y(xv.shape);
  auto xhat = std::make_shared<Tensor>(xv.shape);
  auto inv_std = std::make_shared<Tensor>(std::vector<int>{C});

  std::vector<real> mean(C, 0), var(C, 0);
  if (training) {
    for (int c = 0; c < C; ++c) {
      real m = 0;
      for (int b = 0; b < B; ++b) {
        const real* p = xv.ptr() + (static_cast<int64_t>(b) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) m += p[i];
      }
      m /= static_cast<real>(n);
      real v = 0;
      for (int b = 0; b < B; ++b) {
        const real* p = xv.ptr() + (static_cast<int64_t>(b) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          real d = p[i] - m;
          v += d * d;
        }
      }
      v /= static_cast<real>(n);
      mean[c] = m;
      var[c] = v;
      real unbiased = n > 1 ? v * static_cast<real>(n) / static_cast<real>(n - 1) : v;
      run_mean(c) = (1 - momentum) * run_mean(c) + momentum * m;
      run_var(c) = (1 - momentum) * run_var(c) + momentum * unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = run_mean(c);
      var[c] = run_var(c);
      if (var[c] + eps <= 0) throw NumericError("batch_norm: nonpositive running variance");
    }
  }
  for (int c = 0; c < C; ++c) (*inv_std)(c) = 1.0 / std::sqrt(var[c] + eps);

  const real* gp = gamma.value().ptr();
  const real* bp = beta.value().ptr();
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const real* xp = xv.ptr() + (static_cast<int64_t>(b) * C + c) * plane;
      real* hp = xhat->ptr() + (static_cast<int64_t>(b) * C + c) * plane;
      real* yp = y.ptr() + (static_cast<int64_t>(b) * C + c) * plane;
      const real is = (*inv_std)(c), m = mean[c], g = gp[c], bb = bp[c];
      for (int64_t i = 0; i < plane; ++i) {
        hp[i] = (xp[i] - m) * is;
        yp[i] = g * hp[i] + bb;
      }
    }
  }

  Node* xn = x.node();
  Node* gn = gamma.node();
  Node* bn = beta.node();
  Node* r = detail::make_result(t, std::move(y), {xn, gn, bn});
  if (r->requires_grad) {
    r->backprop = [=]() {
      const Tensor& g = r->grad;
      for (int c = 0; c < C; ++c) {
        // Per-channel reductions of dY and dY*xhat feed every formula below.
        real sum_dy = 0, sum_dy_xhat = 0;
        for (int b = 0; b < B; ++b) {
          const real* gpp = g.ptr() + (static_cast<int64_t>(b) * C + c) * plane;
          const real* hp = xhat->ptr() + (static_cast<int64_t>(b) * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            sum_dy += gpp[i];
            sum_dy_xhat += gpp[i] * hp[i];
          }
        }
        if (gn->requires_grad) {
          gn->ensure_grad();
          gn->grad(c) += sum_dy_xhat;
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          bn->grad(c) += sum_dy;
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          const real gam = gn->value(c), is = (*inv_std)(c);
          if (training) {
            const real inv_n = 1.0 / static_cast<real>(n);
            for (int b = 0; b < B; ++b) {
              const real* gpp = g.ptr() + (static_cast<int64_t>(b) * C + c) * plane;
              const real* hp = xhat->ptr() + (static_cast<int64_t>(b) * C + c) * plane;
              real* dxp = xn->grad.ptr() + (static_cast<int64_t>(b) * C + c) * plane;
              for (int64_t i = 0; i < plane; ++i)
                dxp[i] += gam * is * (gpp[i] - inv_n * sum_dy - inv_n * hp[i] * sum_dy_xhat);
            }
          } else {
            for (int b = 0; b < B; ++b) {
              const real* gpp = g.ptr() + (static_cast<int64_t>(b) * C + c) * plane;
              real* dxp = xn->grad.ptr() + (static_cast<int64_t>(b) * C + c) * plane;
              for (int64_t i = 0; i < plane; ++i) dxp[i] += gam * is * gpp[i];
            }
          }
        }
      }
    };
  }
  return Var(r);
}

inline Var relu(Tape& t, Var x) {
  Tensor y(x.value().shape);
  const Tensor& xv = x.value();
  for (int64_t i = 0; i < xv.numel(); ++i) y.data[i] = xv.data[i] > 0 ? xv.data[i] : 0;
  Node* xn = x.node();
  Node* r = detail::make_result(t, std::move(y), {xn});
  if (r->requires_grad)
    r->backprop = [=]() {
      xn->ensure_grad();
      for (int64_t i = 0; i < r->grad.numel(); ++i)
        if (xn->value.data[i] > 0) xn->grad.data[i] += r->grad.data[i];
    };
  return Var(r);
}

inline Var leaky_relu(Tape& t, Var x, real slope = 0.1) {
  Tensor y(x.value().shape);
  const Tensor& xv = x.value();
  for (int64_t i = 0; i < xv.numel(); ++i) y.data[i] = xv.data[i] > 0 ? xv.data[i] : slope * xv.data[i];
  Node* xn = x.node();
  Node* r = detail::make_result(t, std::move(y), {xn});
  if (r->requires_grad)
    r->backprop = [=]() {
      xn->ensure_grad();
      for (int64_t i = 0; i < r->grad.numel(); ++i)
        xn->grad.data[i] += (xn->value.data[i] > 0 ? 1.0 : slope) * r->grad.data[i];
    };
  return Var(r);
}

inline Var sigmoid(Tape& t, Var x) {
  Tensor y(x.value().shape);
  const Tensor& xv = x.value();
  for (int64_t i = 0; i < xv.numel(); ++i) y.data[i] = sigmoid_scalar(xv.data[i]);
  Node* xn = x.node();
  Node* r = detail::make_result(t, std::move(y), {xn});
  if (r->requires_grad)
    r->backprop = [=]() {
      xn->ensure_grad();
      for (int64_t i = 0; i < r->grad.numel(); ++i) {
        real s = r->value.data[i];
        xn->grad.data[i] += s * (1 - s) * r->grad.data[i];
      }
    };
  return Var(r);
}

inline Var add(Tape& t, Var a, Var b) {
  if (!a.value().same_shape(b.value())) throw ShapeError("add: shape mismatch");
  Tensor y(a.value().shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = a.value().data[i] + b.value().data[i];
  Node* an = a.node();
  Node* bn = b.node();
  Node* r = detail::make_result(t, std::move(y), {an, bn});
  if (r->requires_grad)
    r->backprop = [=]() {
      for (Node* p : {an, bn})
        if (p->requires_grad) {
          p->ensure_grad();
          for (int64_t i = 0; i < r->grad.numel(); ++i) p->grad.data[i] += r->grad.data[i];
        }
    };
  return Var(r);
}

inline Var mul(Tape& t, Var a, Var b) {
  if (!a.value().same_shape(b.value())) throw ShapeError("mul: shape mismatch");
  Tensor y(a.value().shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = a.value().data[i] * b.value().data[i];
  Node* an = a.node();
  Node* bn = b.node();
  Node* r = detail::make_result(t, std::move(y), {an, bn});
  if (r->requires_grad)
    r->backprop = [=]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (int64_t i = 0; i < r->grad.numel(); ++i)
          an->grad.data[i] += bn->value.data[i] * r->grad.data[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t i = 0; i < r->grad.numel(); ++i)
          bn->grad.data[i] += an->value.data[i] * r->grad.data[i];
      }
    };
  return Var(r);
}

inline Var mul_scalar(Tape& t, Var a, real c) {
  Tensor y(a.value().shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = c * a.value().data[i];
  Node* an = a.node();
  Node* r = detail::make_result(t, std::move(y), {an});
  if (r->requires_grad)
    r->backprop = [=]() {
      an->ensure_grad();
      for (int64_t i = 0; i < r->grad.numel(); ++i) an->grad.data[i] += c * r->grad.data[i];
    };
  return Var(r);
}

/// Per-channel scaling: x [B,C,H,W] * g [B,C] broadcast over space.
inline Var scale_channels(Tape& t, Var x, Var g) {
  const Tensor& xv = x.value();
  const Tensor& gv = g.value();
  if (xv.rank() != 4 || gv.rank() != 2 || gv.dim(0) != xv.dim(0) || gv.dim(1) != xv.dim(1))
    throw ShapeError("scale_channels: gate must be [B,C] matching input");
  const int B = xv.dim(0), C = xv.dim(1);
  const int64_t plane = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
  Tensor y(xv.shape);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const real s = gv(b, c);
      const real* xp = xv.ptr() + (static_cast<int64_t>(b) * C + c) * plane;
      real* yp = y.ptr() + (static_cast<int64_t>(b) * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) yp[i] = s * xp[i];
    }
  Node* xn = x.node();
  Node* gn = g.node();
  Node* r = detail::make_result(t, std::move(y), {xn, gn});
  if (r->requires_grad)
    r->backprop = [=]() {
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const real* gp = r->grad.ptr() + (static_cast<int64_t>(b) * C + c) * plane;
          const real* xp = xn->value.ptr() + (static_cast<int64_t>(b) * C + c) * plane;
          if (xn->requires_grad) {
            xn->ensure_grad();
            real* dxp = xn->grad.ptr() + (static_cast<int64_t>(b) * C + c) * plane;
            const real s = gn->value(b, c);
            for (int64_t i = 0; i < plane; ++i) dxp[i] += s * gp[i];
          }
          if (gn->requires_grad) {
            gn->ensure_grad();
            real acc = 0;
            for (int64_t i = 0; i < plane; ++i) acc += gp[i] * xp[i];
            gn->grad(b, c) += acc;
          }
        }
    };
  return Var(r);
}

/// Global average pool: [B,C,H,W] -> [B,C].
inline Var global_avg_pool(Tape& t, Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("global_avg_pool: expected 4D input");
  const int B = xv.dim(0), C = xv.dim(1);
  const int64_t plane = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
  Tensor y({B, C});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const real* xp = xv.ptr() + (static_cast<int64_t>(b) * C + c) * plane;
      real acc = 0;
      for (int64_t i = 0; i < plane; ++i) acc += xp[i];
      y(b, c) = acc / static_cast<real>(plane);
    }
  Node* xn = x.node();
  Node* r = detail::make_result(t, std::move(y), {xn});
  if (r->requires_grad)
    r->backprop = [=]() {
      xn->ensure_grad();
      const real inv = 1.0 / static_cast<real>(plane);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const real gv = r->grad(b, c) * inv;
          real* dxp = xn->grad.ptr() + (static_cast<int64_t>(b) * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) dxp[i] += gv;
        }
    };
  return Var(r);
}

/// Affine map on feature vectors: x [B,F], w [K,F], b [K] -> [B,K].
inline Var linear(Tape& t, Var x, Var w, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1))
    throw ShapeError("linear: shape mismatch");
  const int B = xv.dim(0), F = xv.dim(1), K = wv.dim(0);
  Tensor y({B, K});
  ConstMatMap xm(xv.ptr(), B, F);
  ConstMatMap wm(wv.ptr(), K, F);
  MatMap ym(y.ptr(), B, K);
  ym.noalias() = xm * wm.transpose();
  if (bias.defined()) {
    const real* bp = bias.value().ptr();
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < K; ++k) y(b, k) += bp[k];
  }
  Node* xn = x.node();
  Node* wn = w.node();
  Node* bn = bias.defined() ? bias.node() : nullptr;
  Node* r = detail::make_result(t, std::move(y), {xn, wn, bn});
  if (r->requires_grad)
    r->backprop = [=]() {
      ConstMatMap gm(r->grad.ptr(), B, K);
      if (xn->requires_grad) {
        xn->ensure_grad();
        MatMap dxm(xn->grad.ptr(), B, F);
        ConstMatMap wm2(wn->value.ptr(), K, F);
        dxm.noalias() += gm * wm2;
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        MatMap dwm(wn->grad.ptr(), K, F);
        ConstMatMap xm2(xn->value.ptr(), B, F);
        dwm.noalias() += gm.transpose() * xm2;
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (int k = 0; k < K; ++k) bn->grad(k) += gm.col(k).sum();
      }
    };
  return Var(r);
}

/// Nearest-neighbour 2x upsample.
inline Var upsample2(Tape& t, Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("upsample2: expected 4D input");
  const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Tensor y({B, C, 2 * H, 2 * W});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          real v = xv(b, c, i, j);
          y(b, c, 2 * i, 2 * j) = v;
          y(b, c, 2 * i, 2 * j + 1) = v;
          y(b, c, 2 * i + 1, 2 * j) = v;
          y(b, c, 2 * i + 1, 2 * j + 1) = v;
        }
  Node* xn = x.node();
  Node* r = detail::make_result(t, std::move(y), {xn});
  if (r->requires_grad)
    r->backprop = [=]() {
      xn->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j)
              xn->grad(b, c, i, j) += r->grad(b, c, 2 * i, 2 * j) + r->grad(b, c, 2 * i, 2 * j + 1) +
                                      r->grad(b, c, 2 * i + 1, 2 * j) +
                                      r->grad(b, c, 2 * i + 1, 2 * j + 1);
    };
  return Var(r);
}

/// Channel concatenation of two [B,*,H,W] maps.
inline Var concat_channels(Tape& t, Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 4 || bv.rank() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) ||
      av.dim(3) != bv.dim(3))
    throw ShapeError("concat_channels: incompatible shapes");
  const int B = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), H = av.dim(2), W = av.dim(3);
  const int64_t plane = static_cast<int64_t>(H) * W;
  Tensor y({B, Ca + Cb, H, W});
  for (int bi = 0; bi < B; ++bi) {
    std::copy_n(av.ptr() + static_cast<int64_t>(bi) * Ca * plane, Ca * plane,
                y.ptr() + static_cast<int64_t>(bi) * (Ca + Cb) * plane);
    std::copy_n(bv.ptr() + static_cast<int64_t>(bi) * Cb * plane, Cb * plane,
                y.ptr() + (static_cast<int64_t>(bi) * (Ca + Cb) + Ca) * plane);
  }
  Node* an = a.node();
  Node* bn = b.node();
  Node* r = detail::make_result(t, std::move(y), {an, bn});
  if (r->requires_grad)
    r->backprop = [=]() {
      for (int bi = 0; bi < B; ++bi) {
        const real* g = r->grad.ptr() + static_cast<int64_t>(bi) * (Ca + Cb) * plane;
        if (an->requires_grad) {
          an->ensure_grad();
          real* da = an->grad.ptr() + static_cast<int64_t>(bi) * Ca * plane;
          for (int64_t i = 0; i < Ca * plane; ++i) da[i] += g[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          real* db = bn->grad.ptr() + static_cast<int64_t>(bi) * Cb * plane;
          for (int64_t i = 0; i < Cb * plane; ++i) db[i] += g[Ca * plane + i];
        }
      }
    };
  return Var(r);
}

/// Identity forward, negated gradient. Used by the adversarial domain mode.
inline Var grad_reverse(Tape& t, Var x) {
  Tensor y = x.value();
  Node* xn = x.node();
  Node* r = detail::make_result(t, std::move(y), {xn});
  if (r->requires_grad)
    r->backprop = [=]() {
      xn->ensure_grad();
      for (int64_t i = 0; i < r->grad.numel(); ++i) xn->grad.data[i] -= r->grad.data[i];
    };
  return Var(r);
}

/// Row-wise softmax on [B,K].
inline Var softmax(Tape& t, Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw ShapeError("softmax: expected [B,K]");
  const int B = xv.dim(0), K = xv.dim(1);
  Tensor y({B, K});
  for (int b = 0; b < B; ++b) {
    real m = xv(b, 0);
    for (int k = 1; k < K; ++k) m = std::max(m, xv(b, k));
    real sum = 0;
    for (int k = 0; k < K; ++k) {
      real e = std::exp(xv(b, k) - m);
      y(b, k) = e;
      sum += e;
    }
    for (int k = 0; k < K; ++k) y(b, k) /= sum;
  }
  Node* xn = x.node();
  Node* r = detail::make_result(t, std::move(y), {xn});
  if (r->requires_grad)
    r->backprop = [=]() {
      xn->ensure_grad();
      for (int b = 0; b < B; ++b) {
        real dot = 0;
        for (int k = 0; k < K; ++k) dot += r->grad(b, k) * r->value(b, k);
        for (int k = 0; k < K; ++k)
          xn->grad(b, k) += r->value(b, k) * (r->grad(b, k) - dot);
      }
    };
  return Var(r);
}

/// Mean categorical cross-entropy on logits [B,K] against integer labels.
inline Var softmax_cross_entropy(Tape& t, Var logits, const std::vector<int>& labels) {
  const Tensor& zv = logits.value();
  if (zv.rank() != 2 || static_cast<int>(labels.size()) != zv.dim(0))
    throw ShapeError("softmax_cross_entropy: labels must match batch");
  const int B = zv.dim(0), K = zv.dim(1);
  for (int l : labels)
    if (l < 0 || l >= K) throw DataError("softmax_cross_entropy: label out of range");
  auto probs = std::make_shared<Tensor>(std::vector<int>{B, K});
  real loss = 0;
  for (int b = 0; b < B; ++b) {
    real m = zv(b, 0);
    for (int k = 1; k < K; ++k) m = std::max(m, zv(b, k));
    real sum = 0;
    for (int k = 0; k < K; ++k) sum += std::exp(zv(b, k) - m);
    real lse = m + std::log(sum);
    loss += lse - zv(b, labels[b]);
    for (int k = 0; k < K; ++k) (*probs)(b, k) = std::exp(zv(b, k) - lse);
  }
  loss /= static_cast<real>(B);
  Node* zn = logits.node();
  Node* r = detail::make_result(t, Tensor::scalar(loss), {zn});
  if (r->requires_grad) {
    auto labs = labels;
    r->backprop = [=]() {
      zn->ensure_grad();
      const real g = r->grad.data[0] / static_cast<real>(B);
      for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k)
          zn->grad(b, k) += g * ((*probs)(b, k) - (k == labs[b] ? 1.0 : 0.0));
    };
  }
  return Var(r);
}

/// Plain sum of all elements -> scalar.
inline Var sum(Tape& t, Var x) {
  real acc = 0;
  for (real v : x.value().data) acc += v;
  Node* xn = x.node();
  Node* r = detail::make_result(t, Tensor::scalar(acc), {xn});
  if (r->requires_grad)
    r->backprop = [=]() {
      xn->ensure_grad();
      const real g = r->grad.data[0];
      for (int64_t i = 0; i < xn->grad.numel(); ++i) xn->grad.data[i] += g;
    };
  return Var(r);
}

/// Fixed-weight inner product -> scalar. Handy for gradient checks where a
/// plain sum would be constant (e.g. softmax outputs).
inline Var weighted_sum(Tape& t, Var x, const Tensor& w) {
  if (!x.value().same_shape(w)) throw ShapeError("weighted_sum: shape mismatch");
  real acc = 0;
  for (int64_t i = 0; i < w.numel(); ++i) acc += x.value().data[i] * w.data[i];
  Node* xn = x.node();
  auto wc = std::make_shared<Tensor>(w);
  Node* r = detail::make_result(t, Tensor::scalar(acc), {xn});
  if (r->requires_grad)
    r->backprop = [=]() {
      xn->ensure_grad();
      const real g = r->grad.data[0];
      for (int64_t i = 0; i < xn->grad.numel(); ++i) xn->grad.data[i] += g * wc->data[i];
    };
  return Var(r);
}

}  // namespace mars
