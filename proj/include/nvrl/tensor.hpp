#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "nvrl/common.hpp"

namespace nvrl {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) {
    if (e <= 0) throw DimensionError("tensor extent must be positive");
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major N-d tensor.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), T(0)) {}
  Tensor(Shape s, T fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if ((int64_t)data.size() != shape_numel(shape))
      throw DimensionError("data length does not match shape " + shape_str(shape));
  }

  int64_t numel() const { return (int64_t)data.size(); }
  int rank() const { return (int)shape.size(); }
  int extent(int d) const { return shape[d]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  // Rank-4 [d0,d1,d2,d3] accessor; layout is row-major.
  T& at4(int a, int b, int c, int d) {
    return data[((int64_t)(a * shape[1] + b) * shape[2] + c) * shape[3] + d];
  }
  T at4(int a, int b, int c, int d) const {
    return data[((int64_t)(a * shape[1] + b) * shape[2] + c) * shape[3] + d];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite((double)v)) return false;
    return true;
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }

  static Tensor uniform(Shape s, T lo, T hi, std::mt19937_64& rng) {
    Tensor t(std::move(s));
    std::uniform_real_distribution<double> dist((double)lo, (double)hi);
    for (auto& v : t.data) v = (T)dist(rng);
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = (U)data[i];
    return out;
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TensorI = Tensor<int32_t>;

}  // namespace nvrl
