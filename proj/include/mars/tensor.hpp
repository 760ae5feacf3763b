#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <sstream>
#include <vector>

#include "mars/common.hpp"

namespace mars {

/// Dense row-major tensor of doubles. Rank is dynamic; detector code uses
/// [B,C,H,W] activations, [Co,Ci,kh,kw] kernels and flat vectors.
struct Tensor {
  std::vector<int> shape;
  std::vector<real> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), real(0)) {}
  Tensor(std::vector<int> s, real fill) : shape(std::move(s)), data(count(shape), fill) {}
  Tensor(std::vector<int> s, std::vector<real> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != count(shape))
      throw ShapeError("tensor: data size does not match shape");
  }

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d <= 0) throw ShapeError("tensor: nonpositive dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, real v) { return Tensor(std::move(s), v); }
  static Tensor scalar(real v) { return Tensor({1}, std::vector<real>{v}); }

  static Tensor uniform(std::vector<int> s, real lo, real hi, std::mt19937_64& rng) {
    Tensor t(std::move(s));
    std::uniform_real_distribution<real> dist(lo, hi);
    for (auto& v : t.data) v = dist(rng);
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(shape.size()); }

  real* ptr() { return data.data(); }
  const real* ptr() const { return data.data(); }

  real& operator()(int a) { return data[static_cast<size_t>(a)]; }
  real operator()(int a) const { return data[static_cast<size_t>(a)]; }
  real& operator()(int a, int b) { return data[static_cast<size_t>(a) * shape[1] + b]; }
  real operator()(int a, int b) const { return data[static_cast<size_t>(a) * shape[1] + b]; }
  real& operator()(int a, int b, int c) {
    return data[(static_cast<size_t>(a) * shape[1] + b) * shape[2] + c];
  }
  real operator()(int a, int b, int c) const {
    return data[(static_cast<size_t>(a) * shape[1] + b) * shape[2] + c];
  }
  real& operator()(int a, int b, int c, int d) {
    return data[((static_cast<size_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d];
  }
  real operator()(int a, int b, int c, int d) const {
    return data[((static_cast<size_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (real v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(real v) { std::fill(data.begin(), data.end(), v); }

  Tensor reshaped(std::vector<int> s) const {
    if (count(s) != numel()) throw ShapeError("reshape: element count mismatch");
    Tensor t;
    t.shape = std::move(s);
    t.data = data;
    return t;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
  }
};

inline void require_shape(const Tensor& t, const std::vector<int>& s, const char* what) {
  if (t.shape != s) {
    Tensor probe;
    probe.shape = s;
    throw ShapeError(std::string(what) + ": expected " + probe.shape_str() + ", got " + t.shape_str());
  }
}

/// A named trainable tensor. `grad` is accumulated by Tape::backward and
/// consumed by the optimizer; it always matches `value` in shape.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // empty until a backward pass touches it (saves memory on eval)

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor(value.shape, real(0));
  }
  void zero_grad() { grad.fill(0); }
};

}  // namespace mars
