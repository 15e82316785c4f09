#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <type_traits>
#include <utility>
#include <vector>

#include "nvrl/detmath.hpp"
#include "nvrl/tensor.hpp"
#include "nvrl/threading.hpp"

namespace nvrl {

// Reverse-mode tape. Nodes are appended in execution order, so the tape is
// topologically sorted by construction; backward walks it once in reverse.
template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool grad_live = false;
    std::vector<int> parents;
    std::function<void(Tape&, int)> backward;
  };

  int leaf(Tensor<T> v, bool requires_grad) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return (int)nodes_.size() - 1;
  }

  int constant(Tensor<T> v) { return leaf(std::move(v), false); }

  int add_op(Tensor<T> value, std::vector<int> parents,
             std::function<void(Tape&, int)> backward) {
    Node n;
    n.value = std::move(value);
    for (int p : parents) {
      if (p < 0 || p >= (int)nodes_.size())
        throw ContractError("op parent not on tape");
      n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
    }
    n.parents = std::move(parents);
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return (int)nodes_.size() - 1;
  }

  const Tensor<T>& val(int id) const { return nodes_[id].value; }

  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const std::vector<int>& parents(int id) const { return nodes_[id].parents; }
  size_t size() const { return nodes_.size(); }

  // Gradient buffer, materialized as zeros on first touch.
  Tensor<T>& grad_buf(int id) {
    Node& n = nodes_[id];
    if (!n.grad_live) {
      n.grad = Tensor<T>::zeros(n.value.shape);
      n.grad_live = true;
    }
    return n.grad;
  }

  // Gradient of a leaf after backward(); zeros if it did not participate.
  const Tensor<T>& grad(int id) { return grad_buf(id); }

  void backward(int loss) {
    if (loss < 0 || loss >= (int)nodes_.size())
      throw ContractError("loss node not on tape");
    if (nodes_[loss].value.numel() != 1)
      throw ContractError("backward requires a scalar loss");
    for (auto& n : nodes_) n.grad_live = false;
    grad_buf(loss).data[0] = T(1);
    last_backward_visits_ = 0;
    for (int id = loss; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.grad_live || !n.backward) continue;
      ++last_backward_visits_;
      n.backward(*this, id);
    }
  }

  int64_t last_backward_visits() const { return last_backward_visits_; }

 private:
  std::vector<Node> nodes_;
  int64_t last_backward_visits_ = 0;
};

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;
  const Tensor<T>& val() const { return tape->val(id); }
  const Tensor<T>& grad() const { return tape->grad(id); }
};

namespace detail {

template <typename T>
void check_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ContractError("vars live on different tapes");
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape != b.shape)
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                         " vs " + shape_str(b.shape));
}

inline void check_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw DimensionError(std::string(op) + ": expected rank-4 tensor");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a.val(), b.val(), "add");
  Tensor<T> out = a.val();
  const T* pb = b.val().ptr();
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += pb[i];
  int id = a.tape->add_op(std::move(out), {a.id, b.id}, [a, b](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (t.requires_grad(a.id)) {
      Tensor<T>& ga = t.grad_buf(a.id);
      for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
    }
    if (t.requires_grad(b.id)) {
      Tensor<T>& gb = t.grad_buf(b.id);
      for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
    }
  });
  return {a.tape, id};
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a.val(), b.val(), "sub");
  Tensor<T> out = a.val();
  const T* pb = b.val().ptr();
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] -= pb[i];
  int id = a.tape->add_op(std::move(out), {a.id, b.id}, [a, b](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (t.requires_grad(a.id)) {
      Tensor<T>& ga = t.grad_buf(a.id);
      for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
    }
    if (t.requires_grad(b.id)) {
      Tensor<T>& gb = t.grad_buf(b.id);
      for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] -= g.data[i];
    }
  });
  return {a.tape, id};
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a.val(), b.val(), "mul");
  Tensor<T> out = a.val();
  const T* pb = b.val().ptr();
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= pb[i];
  int id = a.tape->add_op(std::move(out), {a.id, b.id}, [a, b](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& va = t.val(a.id);
    const Tensor<T>& vb = t.val(b.id);
    if (t.requires_grad(a.id)) {
      Tensor<T>& ga = t.grad_buf(a.id);
      for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * vb.data[i];
    }
    if (t.requires_grad(b.id)) {
      Tensor<T>& gb = t.grad_buf(b.id);
      for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * va.data[i];
    }
  });
  return {a.tape, id};
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a.val(), b.val(), "div");
  Tensor<T> out = a.val();
  const T* pb = b.val().ptr();
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] /= pb[i];
  int id = a.tape->add_op(std::move(out), {a.id, b.id}, [a, b](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& va = t.val(a.id);
    const Tensor<T>& vb = t.val(b.id);
    if (t.requires_grad(a.id)) {
      Tensor<T>& ga = t.grad_buf(a.id);
      for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] / vb.data[i];
    }
    if (t.requires_grad(b.id)) {
      Tensor<T>& gb = t.grad_buf(b.id);
      for (int64_t i = 0; i < g.numel(); ++i)
        gb.data[i] -= g.data[i] * va.data[i] / (vb.data[i] * vb.data[i]);
    }
  });
  return {a.tape, id};
}

template <typename T>
Var<T> add_const(Var<T> a, double c) {
  Tensor<T> out = a.val();
  for (auto& v : out.data) v += (T)c;
  int id = a.tape->add_op(std::move(out), {a.id}, [a](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    const Tensor<T>& g = t.grad_buf(self);
    Tensor<T>& ga = t.grad_buf(a.id);
    for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
  });
  return {a.tape, id};
}

template <typename T>
Var<T> mul_const(Var<T> a, double c) {
  Tensor<T> out = a.val();
  for (auto& v : out.data) v *= (T)c;
  int id = a.tape->add_op(std::move(out), {a.id}, [a, c](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    const Tensor<T>& g = t.grad_buf(self);
    Tensor<T>& ga = t.grad_buf(a.id);
    for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += (T)c * g.data[i];
  });
  return {a.tape, id};
}

// Broadcast a single-element tensor to an arbitrary shape.
template <typename T>
Var<T> broadcast_scalar(Var<T> s, Shape shape) {
  if (s.val().numel() != 1) throw DimensionError("broadcast_scalar: source must be scalar");
  Tensor<T> out(shape, s.val().data[0]);
  int id = s.tape->add_op(std::move(out), {s.id}, [s](Tape<T>& t, int self) {
    if (!t.requires_grad(s.id)) return;
    const Tensor<T>& g = t.grad_buf(self);
    double acc = 0;
    for (int64_t i = 0; i < g.numel(); ++i) acc += (double)g.data[i];
    t.grad_buf(s.id).data[0] += (T)acc;
  });
  return {s.tape, id};
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

namespace detail {

// Precision follows the tape type: the float tape uses the vectorizable
// single-precision path, the double tape (gradient checks) keeps ~1e-13.
template <typename T>
inline T scalar_exp(T x) {
  if constexpr (std::is_same_v<T, float>)
    return det_expf(x);
  else
    return (T)det_exp((double)x);
}

template <typename T>
inline T scalar_cdf(T x) {
  if constexpr (std::is_same_v<T, float>)
    return normal_cdf_f(x);
  else
    return (T)normal_cdf((double)x);
}

template <typename T>
inline T scalar_pdf(T x) {
  if constexpr (std::is_same_v<T, float>)
    return normal_pdf_f(x);
  else
    return (T)normal_pdf((double)x);
}

}  // namespace detail

template <typename T>
Var<T> gelu(Var<T> a) {
  Tensor<T> out = a.val();
  for (auto& v : out.data) v = v * detail::scalar_cdf(v);
  int id = a.tape->add_op(std::move(out), {a.id}, [a](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& x = t.val(a.id);
    Tensor<T>& ga = t.grad_buf(a.id);
    for (int64_t i = 0; i < g.numel(); ++i) {
      T xv = x.data[i];
      ga.data[i] += g.data[i] * (detail::scalar_cdf(xv) + xv * detail::scalar_pdf(xv));
    }
  });
  return {a.tape, id};
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out = a.val();
  for (auto& v : out.data) v = T(1) / (T(1) + detail::scalar_exp(-v));
  int id = a.tape->add_op(std::move(out), {a.id}, [a](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& y = t.val(self);
    Tensor<T>& ga = t.grad_buf(a.id);
    for (int64_t i = 0; i < g.numel(); ++i) {
      T yv = y.data[i];
      ga.data[i] += g.data[i] * yv * (T(1) - yv);
    }
  });
  return {a.tape, id};
}

template <typename T>
Var<T> exp_op(Var<T> a) {
  Tensor<T> out = a.val();
  for (auto& v : out.data) v = detail::scalar_exp(v);
  int id = a.tape->add_op(std::move(out), {a.id}, [a](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& y = t.val(self);
    Tensor<T>& ga = t.grad_buf(a.id);
    for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * y.data[i];
  });
  return {a.tape, id};
}

// Hard clamp; gradient passes only strictly inside the interval.
template <typename T>
Var<T> clamp_op(Var<T> a, double lo, double hi) {
  Tensor<T> out = a.val();
  for (auto& v : out.data) v = (T)std::min(hi, std::max(lo, (double)v));
  int id = a.tape->add_op(std::move(out), {a.id}, [a, lo, hi](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& x = t.val(a.id);
    Tensor<T>& ga = t.grad_buf(a.id);
    for (int64_t i = 0; i < g.numel(); ++i) {
      double xv = (double)x.data[i];
      if (xv > lo && xv < hi) ga.data[i] += g.data[i];
    }
  });
  return {a.tape, id};
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(Var<T> a) {
  double acc = 0;
  for (T v : a.val().data) acc += (double)v;
  Tensor<T> out({1}, (T)acc);
  int id = a.tape->add_op(std::move(out), {a.id}, [a](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    T g0 = t.grad_buf(self).data[0];
    Tensor<T>& ga = t.grad_buf(a.id);
    for (int64_t i = 0; i < ga.numel(); ++i) ga.data[i] += g0;
  });
  return {a.tape, id};
}

template <typename T>
Var<T> mse_loss(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a.val(), b.val(), "mse_loss");
  const int64_t n = a.val().numel();
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    double d = (double)a.val().data[i] - (double)b.val().data[i];
    acc += d * d;
  }
  Tensor<T> out({1}, (T)(acc / (double)n));
  int id = a.tape->add_op(std::move(out), {a.id, b.id}, [a, b, n](Tape<T>& t, int self) {
    double g0 = (double)t.grad_buf(self).data[0];
    const Tensor<T>& va = t.val(a.id);
    const Tensor<T>& vb = t.val(b.id);
    double scale = 2.0 * g0 / (double)n;
    if (t.requires_grad(a.id)) {
      Tensor<T>& ga = t.grad_buf(a.id);
      for (int64_t i = 0; i < n; ++i)
        ga.data[i] += (T)(scale * ((double)va.data[i] - (double)vb.data[i]));
    }
    if (t.requires_grad(b.id)) {
      Tensor<T>& gb = t.grad_buf(b.id);
      for (int64_t i = 0; i < n; ++i)
        gb.data[i] -= (T)(scale * ((double)va.data[i] - (double)vb.data[i]));
    }
  });
  return {a.tape, id};
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  const Tensor<T>& va = a.val();
  const Tensor<T>& vb = b.val();
  if (va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0])
    throw DimensionError("matmul: incompatible shapes");
  const int M = va.shape[0], K = va.shape[1], N = vb.shape[1];
  Tensor<T> out({M, N});
  for (int m = 0; m < M; ++m)
    for (int k = 0; k < K; ++k) {
      T w = va.data[(int64_t)m * K + k];
      const T* brow = vb.ptr() + (int64_t)k * N;
      T* orow = out.ptr() + (int64_t)m * N;
      for (int n = 0; n < N; ++n) orow[n] += w * brow[n];
    }
  int id = a.tape->add_op(std::move(out), {a.id, b.id},
                          [a, b, M, K, N](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& va = t.val(a.id);
    const Tensor<T>& vb = t.val(b.id);
    if (t.requires_grad(a.id)) {
      Tensor<T>& ga = t.grad_buf(a.id);
      for (int m = 0; m < M; ++m)
        for (int k = 0; k < K; ++k) {
          double acc = 0;
          const T* grow = g.ptr() + (int64_t)m * N;
          const T* brow = vb.ptr() + (int64_t)k * N;
          for (int n = 0; n < N; ++n) acc += (double)grow[n] * (double)brow[n];
          ga.data[(int64_t)m * K + k] += (T)acc;
        }
    }
    if (t.requires_grad(b.id)) {
      Tensor<T>& gb = t.grad_buf(b.id);
      for (int k = 0; k < K; ++k)
        for (int m = 0; m < M; ++m) {
          T w = va.data[(int64_t)m * K + k];
          const T* grow = g.ptr() + (int64_t)m * N;
          T* brow = gb.ptr() + (int64_t)k * N;
          for (int n = 0; n < N; ++n) brow[n] += w * grow[n];
        }
    }
  });
  return {a.tape, id};
}

// x[M,N] + b[N], broadcast over rows.
template <typename T>
Var<T> bias_rows(Var<T> x, Var<T> b) {
  detail::check_same_tape(x, b);
  const Tensor<T>& vx = x.val();
  const Tensor<T>& vb = b.val();
  if (vx.rank() != 2 || vb.rank() != 1 || vb.shape[0] != vx.shape[1])
    throw DimensionError("bias_rows: incompatible shapes");
  const int M = vx.shape[0], N = vx.shape[1];
  Tensor<T> out = vx;
  for (int m = 0; m < M; ++m)
    for (int n = 0; n < N; ++n) out.data[(int64_t)m * N + n] += vb.data[n];
  int id = x.tape->add_op(std::move(out), {x.id, b.id}, [x, b, M, N](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (t.requires_grad(x.id)) {
      Tensor<T>& gx = t.grad_buf(x.id);
      for (int64_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
    }
    if (t.requires_grad(b.id)) {
      Tensor<T>& gb = t.grad_buf(b.id);
      for (int n = 0; n < N; ++n) {
        double acc = 0;
        for (int m = 0; m < M; ++m) acc += (double)g.data[(int64_t)m * N + n];
        gb.data[n] += (T)acc;
      }
    }
  });
  return {x.tape, id};
}

// Affine layer: x[M,K] * w[K,N] + b[N].
template <typename T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> b) {
  return bias_rows(matmul(x, w), b);
}

// x[T,C,H,W] + b[C], broadcast per channel.
template <typename T>
Var<T> bias_channel(Var<T> x, Var<T> b) {
  detail::check_same_tape(x, b);
  const Tensor<T>& vx = x.val();
  const Tensor<T>& vb = b.val();
  detail::check_rank4(vx.shape, "bias_channel");
  if (vb.rank() != 1 || vb.shape[0] != vx.shape[1])
    throw DimensionError("bias_channel: bias length must equal channel count");
  const int Tn = vx.shape[0], C = vx.shape[1];
  const int64_t plane = (int64_t)vx.shape[2] * vx.shape[3];
  Tensor<T> out = vx;
  for (int t = 0; t < Tn; ++t)
    for (int c = 0; c < C; ++c) {
      T bias = vb.data[c];
      T* p = out.ptr() + ((int64_t)t * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) p[i] += bias;
    }
  int id = x.tape->add_op(std::move(out), {x.id, b.id},
                          [x, b, Tn, C, plane](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (t.requires_grad(x.id)) {
      Tensor<T>& gx = t.grad_buf(x.id);
      for (int64_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
    }
    if (t.requires_grad(b.id)) {
      Tensor<T>& gb = t.grad_buf(b.id);
      for (int c = 0; c < C; ++c) {
        double acc = 0;
        for (int tt = 0; tt < Tn; ++tt) {
          const T* p = g.ptr() + ((int64_t)tt * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) acc += (double)p[i];
        }
        gb.data[c] += (T)acc;
      }
    }
  });
  return {x.tape, id};
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  const Tensor<T>& va = a.val();
  const Tensor<T>& vb = b.val();
  detail::check_rank4(va.shape, "concat_channels");
  detail::check_rank4(vb.shape, "concat_channels");
  if (va.shape[0] != vb.shape[0] || va.shape[2] != vb.shape[2] ||
      va.shape[3] != vb.shape[3])
    throw DimensionError("concat_channels: non-channel extents differ");
  const int Tn = va.shape[0], Ca = va.shape[1], Cb = vb.shape[1];
  const int64_t plane = (int64_t)va.shape[2] * va.shape[3];
  Tensor<T> out({Tn, Ca + Cb, va.shape[2], va.shape[3]});
  for (int t = 0; t < Tn; ++t) {
    std::copy_n(va.ptr() + (int64_t)t * Ca * plane, Ca * plane,
                out.ptr() + (int64_t)t * (Ca + Cb) * plane);
    std::copy_n(vb.ptr() + (int64_t)t * Cb * plane, Cb * plane,
                out.ptr() + ((int64_t)t * (Ca + Cb) + Ca) * plane);
  }
  int id = a.tape->add_op(std::move(out), {a.id, b.id},
                          [a, b, Tn, Ca, Cb, plane](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (t.requires_grad(a.id)) {
      Tensor<T>& ga = t.grad_buf(a.id);
      for (int tt = 0; tt < Tn; ++tt) {
        const T* src = g.ptr() + (int64_t)tt * (Ca + Cb) * plane;
        T* dst = ga.ptr() + (int64_t)tt * Ca * plane;
        for (int64_t i = 0; i < Ca * plane; ++i) dst[i] += src[i];
      }
    }
    if (t.requires_grad(b.id)) {
      Tensor<T>& gb = t.grad_buf(b.id);
      for (int tt = 0; tt < Tn; ++tt) {
        const T* src = g.ptr() + ((int64_t)tt * (Ca + Cb) + Ca) * plane;
        T* dst = gb.ptr() + (int64_t)tt * Cb * plane;
        for (int64_t i = 0; i < Cb * plane; ++i) dst[i] += src[i];
      }
    }
  });
  return {a.tape, id};
}

template <typename T>
Var<T> slice_channels(Var<T> x, int start, int count) {
  const Tensor<T>& vx = x.val();
  detail::check_rank4(vx.shape, "slice_channels");
  if (start < 0 || count <= 0 || start + count > vx.shape[1])
    throw DimensionError("slice_channels: range out of bounds");
  const int Tn = vx.shape[0], C = vx.shape[1];
  const int64_t plane = (int64_t)vx.shape[2] * vx.shape[3];
  Tensor<T> out({Tn, count, vx.shape[2], vx.shape[3]});
  for (int t = 0; t < Tn; ++t)
    std::copy_n(vx.ptr() + ((int64_t)t * C + start) * plane, (int64_t)count * plane,
                out.ptr() + (int64_t)t * count * plane);
  int id = x.tape->add_op(std::move(out), {x.id},
                          [x, start, count, Tn, C, plane](Tape<T>& t, int self) {
    if (!t.requires_grad(x.id)) return;
    const Tensor<T>& g = t.grad_buf(self);
    Tensor<T>& gx = t.grad_buf(x.id);
    for (int tt = 0; tt < Tn; ++tt) {
      const T* src = g.ptr() + (int64_t)tt * count * plane;
      T* dst = gx.ptr() + ((int64_t)tt * C + start) * plane;
      for (int64_t i = 0; i < (int64_t)count * plane; ++i) dst[i] += src[i];
    }
  });
  return {x.tape, id};
}

// Gather frames along dim 0 of [T,C,H,W]; indices may repeat.
template <typename T>
Var<T> slice_frames(Var<T> x, std::vector<int> indices) {
  const Tensor<T>& vx = x.val();
  detail::check_rank4(vx.shape, "slice_frames");
  const int Tn = vx.shape[0];
  for (int i : indices)
    if (i < 0 || i >= Tn) throw DimensionError("slice_frames: index out of range");
  const int64_t frame = (int64_t)vx.shape[1] * vx.shape[2] * vx.shape[3];
  Tensor<T> out({(int)indices.size(), vx.shape[1], vx.shape[2], vx.shape[3]});
  for (size_t s = 0; s < indices.size(); ++s)
    std::copy_n(vx.ptr() + (int64_t)indices[s] * frame, frame, out.ptr() + (int64_t)s * frame);
  int id = x.tape->add_op(std::move(out), {x.id},
                          [x, indices, frame](Tape<T>& t, int self) {
    if (!t.requires_grad(x.id)) return;
    const Tensor<T>& g = t.grad_buf(self);
    Tensor<T>& gx = t.grad_buf(x.id);
    for (size_t s = 0; s < indices.size(); ++s) {
      const T* src = g.ptr() + (int64_t)s * frame;
      T* dst = gx.ptr() + (int64_t)indices[s] * frame;
      for (int64_t i = 0; i < frame; ++i) dst[i] += src[i];
    }
  });
  return {x.tape, id};
}

// Slice a conv kernel along its input-channel axis (dim 1), any rank >= 2.
template <typename T>
Var<T> slice_kernel_in_channels(Var<T> k, int start, int count) {
  const Tensor<T>& vk = k.val();
  if (vk.rank() < 2) throw DimensionError("slice_kernel_in_channels: rank too small");
  const int C = vk.shape[1];
  if (start < 0 || count <= 0 || start + count > C)
    throw DimensionError("slice_kernel_in_channels: range out of bounds");
  int64_t tail = 1;
  for (int d = 2; d < vk.rank(); ++d) tail *= vk.shape[d];
  const int Co = vk.shape[0];
  Shape oshape = vk.shape;
  oshape[1] = count;
  Tensor<T> out(oshape);
  for (int co = 0; co < Co; ++co)
    std::copy_n(vk.ptr() + ((int64_t)co * C + start) * tail, count * tail,
                out.ptr() + (int64_t)co * count * tail);
  int id = k.tape->add_op(std::move(out), {k.id},
                          [k, start, count, Co, C, tail](Tape<T>& t, int self) {
    if (!t.requires_grad(k.id)) return;
    const Tensor<T>& g = t.grad_buf(self);
    Tensor<T>& gk = t.grad_buf(k.id);
    for (int co = 0; co < Co; ++co) {
      const T* src = g.ptr() + (int64_t)co * count * tail;
      T* dst = gk.ptr() + ((int64_t)co * C + start) * tail;
      for (int64_t i = 0; i < count * tail; ++i) dst[i] += src[i];
    }
  });
  return {k.tape, id};
}

template <typename T>
Var<T> upsample_nearest2x(Var<T> x) {
  const Tensor<T>& vx = x.val();
  detail::check_rank4(vx.shape, "upsample_nearest2x");
  const int Tn = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
  Tensor<T> out({Tn, C, 2 * H, 2 * W});
  parallel_for_each((int64_t)Tn * C, [&](int64_t tc) {
    const T* src = vx.ptr() + tc * H * W;
    T* dst = out.ptr() + tc * 4 * H * W;
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) {
        T v = src[(int64_t)y * W + xx];
        T* d = dst + (int64_t)(2 * y) * (2 * W) + 2 * xx;
        d[0] = v;
        d[1] = v;
        d[2 * W] = v;
        d[2 * W + 1] = v;
      }
  });
  int id = x.tape->add_op(std::move(out), {x.id}, [x, Tn, C, H, W](Tape<T>& t, int self) {
    if (!t.requires_grad(x.id)) return;
    const Tensor<T>& g = t.grad_buf(self);
    Tensor<T>& gx = t.grad_buf(x.id);
    parallel_for_each((int64_t)Tn * C, [&](int64_t tc) {
      const T* src = g.ptr() + tc * 4 * H * W;
      T* dst = gx.ptr() + tc * H * W;
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          const T* s = src + (int64_t)(2 * y) * (2 * W) + 2 * xx;
          dst[(int64_t)y * W + xx] += s[0] + s[1] + s[2 * W] + s[2 * W + 1];
        }
    });
  });
  return {x.tape, id};
}

// Nearest-neighbour upsample of [T,C,H,W] by integer factors along (T,H,W),
// clipped to the requested output extents. Source extents must equal
// ceil(out/factor) per axis.
template <typename T>
Var<T> upsample_block(Var<T> x, int ft, int fh, int fw, int To, int Ho, int Wo) {
  const Tensor<T>& vx = x.val();
  detail::check_rank4(vx.shape, "upsample_block");
  if (ft < 1 || fh < 1 || fw < 1) throw DimensionError("upsample_block: bad factor");
  const int Ti = vx.shape[0], C = vx.shape[1], Hi = vx.shape[2], Wi = vx.shape[3];
  auto ceil_div = [](int a, int b) { return (a + b - 1) / b; };
  if (Ti != ceil_div(To, ft) || Hi != ceil_div(Ho, fh) || Wi != ceil_div(Wo, fw))
    throw DimensionError("upsample_block: source extents inconsistent with target");
  Tensor<T> out({To, C, Ho, Wo});
  for (int t = 0; t < To; ++t) {
    int ts = t / ft;
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < Ho; ++y) {
        int ys = y / fh;
        const T* src = vx.ptr() + (((int64_t)ts * C + c) * Hi + ys) * Wi;
        T* dst = out.ptr() + (((int64_t)t * C + c) * Ho + y) * Wo;
        for (int xx = 0; xx < Wo; ++xx) dst[xx] = src[xx / fw];
      }
  }
  int id = x.tape->add_op(std::move(out), {x.id},
                          [x, ft, fh, fw, To, Ho, Wo, Ti, C, Hi, Wi](Tape<T>& t, int self) {
    if (!t.requires_grad(x.id)) return;
    const Tensor<T>& g = t.grad_buf(self);
    Tensor<T>& gx = t.grad_buf(x.id);
    for (int t0 = 0; t0 < To; ++t0) {
      int ts = t0 / ft;
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < Ho; ++y) {
          int ys = y / fh;
          const T* src = g.ptr() + (((int64_t)t0 * C + c) * Ho + y) * Wo;
          T* dst = gx.ptr() + (((int64_t)ts * C + c) * Hi + ys) * Wi;
          for (int xx = 0; xx < Wo; ++xx) dst[xx / fw] += src[xx];
        }
    }
  });
  return {x.tape, id};
}

// ---------------------------------------------------------------------------
// Convolutions (cross-correlation, zero padding, same-size output)
// ---------------------------------------------------------------------------

namespace kern {

// Dot product with eight fixed accumulator lanes; the lane loop vectorizes
// while keeping a deterministic summation scheme.
template <typename T>
inline double dot8(const T* a, const T* b, int n) {
  T lanes[8] = {};
  int i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) lanes[l] += a[i + l] * b[i + l];
  for (; i < n; ++i) lanes[i & 7] += a[i] * b[i];
  double s01 = (double)lanes[0] + (double)lanes[1];
  double s23 = (double)lanes[2] + (double)lanes[3];
  double s45 = (double)lanes[4] + (double)lanes[5];
  double s67 = (double)lanes[6] + (double)lanes[7];
  return (s01 + s23) + (s45 + s67);
}

// out[t,co,y,x] = sum_{c,b,d} in[t, c, y+b-p, x+d-p] * k[co,c,b,d]
template <typename T>
void conv2d_fwd(const Tensor<T>& in, const Tensor<T>& k, int p, Tensor<T>& out) {
  const int Tn = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
  const int Co = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  parallel_for_each((int64_t)Tn * Co, [&](int64_t tco) {
    int t = (int)(tco / Co), co = (int)(tco % Co);
    for (int y = 0; y < H; ++y) {
      T* orow = out.ptr() + (((int64_t)t * Co + co) * H + y) * W;
      for (int c = 0; c < C; ++c)
        for (int b = 0; b < kh; ++b) {
          int yi = y + b - p;
          if (yi < 0 || yi >= H) continue;
          const T* irow = in.ptr() + (((int64_t)t * C + c) * H + yi) * W;
          const T* krow = k.ptr() + (((int64_t)co * C + c) * kh + b) * kw;
          for (int d = 0; d < kw; ++d) {
            T w = krow[d];
            int off = d - p;
            int x0 = off < 0 ? -off : 0;
            int x1 = off > 0 ? W - off : W;
            for (int xx = x0; xx < x1; ++xx) orow[xx] += w * irow[xx + off];
          }
        }
    }
  });
}

template <typename T>
void conv2d_bwd_input(const Tensor<T>& g, const Tensor<T>& k, int p, Tensor<T>& gin) {
  const int Tn = gin.shape[0], C = gin.shape[1], H = gin.shape[2], W = gin.shape[3];
  const int Co = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  parallel_for_each((int64_t)Tn * C, [&](int64_t tc) {
    int t = (int)(tc / C), c = (int)(tc % C);
    for (int y = 0; y < H; ++y) {
      T* grow_in = gin.ptr() + (((int64_t)t * C + c) * H + y) * W;
      for (int co = 0; co < Co; ++co)
        for (int b = 0; b < kh; ++b) {
          int yo = y - b + p;
          if (yo < 0 || yo >= H) continue;
          const T* grow = g.ptr() + (((int64_t)t * Co + co) * H + yo) * W;
          const T* krow = k.ptr() + (((int64_t)co * C + c) * kh + b) * kw;
          for (int d = 0; d < kw; ++d) {
            T w = krow[d];
            int off = p - d;  // gout x-index = x + p - d
            int x0 = off < 0 ? -off : 0;
            int x1 = off > 0 ? W - off : W;
            for (int xx = x0; xx < x1; ++xx) grow_in[xx] += w * grow[xx + off];
          }
        }
    }
  });
}

template <typename T>
void conv2d_bwd_kernel(const Tensor<T>& g, const Tensor<T>& in, int p, Tensor<T>& gk) {
  const int Tn = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
  const int Co = gk.shape[0], kh = gk.shape[2], kw = gk.shape[3];
  parallel_for_each((int64_t)Co * C * kh * kw, [&](int64_t idx) {
    int d = (int)(idx % kw);
    int b = (int)((idx / kw) % kh);
    int c = (int)((idx / ((int64_t)kw * kh)) % C);
    int co = (int)(idx / ((int64_t)kw * kh * C));
    double acc = 0;
    int off = d - p;
    int x0 = off < 0 ? -off : 0;
    int x1 = off > 0 ? W - off : W;
    for (int t = 0; t < Tn; ++t)
      for (int y = 0; y < H; ++y) {
        int yi = y + b - p;
        if (yi < 0 || yi >= H) continue;
        const T* grow = g.ptr() + (((int64_t)t * Co + co) * H + y) * W;
        const T* irow = in.ptr() + (((int64_t)t * C + c) * H + yi) * W;
        acc += dot8(grow + x0, irow + x0 + off, x1 - x0);
      }
    gk.data[idx] += (T)acc;
  });
}

}  // namespace kern

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> k, int padding) {
  detail::check_same_tape(x, k);
  const Tensor<T>& vx = x.val();
  const Tensor<T>& vk = k.val();
  detail::check_rank4(vx.shape, "conv2d");
  detail::check_rank4(vk.shape, "conv2d kernel");
  if (vk.shape[1] != vx.shape[1])
    throw DimensionError("conv2d: kernel input channels mismatch");
  if (vk.shape[2] != vk.shape[3] || vk.shape[2] % 2 == 0)
    throw DimensionError("conv2d: kernel must be square with odd size");
  if (padding != (vk.shape[2] - 1) / 2)
    throw DimensionError("conv2d: padding must be (k-1)/2");
  Tensor<T> out({vx.shape[0], vk.shape[0], vx.shape[2], vx.shape[3]});
  kern::conv2d_fwd(vx, vk, padding, out);
  int id = x.tape->add_op(std::move(out), {x.id, k.id}, [x, k, padding](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (t.requires_grad(x.id))
      kern::conv2d_bwd_input(g, t.val(k.id), padding, t.grad_buf(x.id));
    if (t.requires_grad(k.id))
      kern::conv2d_bwd_kernel(g, t.val(x.id), padding, t.grad_buf(k.id));
  });
  return {x.tape, id};
}

// Depthwise conv: x[T,C,H,W], k[C,kh,kw].
template <typename T>
Var<T> depthwise_conv2d(Var<T> x, Var<T> k, int padding) {
  detail::check_same_tape(x, k);
  const Tensor<T>& vx = x.val();
  const Tensor<T>& vk = k.val();
  detail::check_rank4(vx.shape, "depthwise_conv2d");
  if (vk.rank() != 3 || vk.shape[0] != vx.shape[1] || vk.shape[1] != vk.shape[2] ||
      vk.shape[1] % 2 == 0 || padding != (vk.shape[1] - 1) / 2)
    throw DimensionError("depthwise_conv2d: bad kernel shape or padding");
  const int Tn = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
  const int kh = vk.shape[1], kw = vk.shape[2], p = padding;
  Tensor<T> out(vx.shape);
  parallel_for_each((int64_t)Tn * C, [&](int64_t tc) {
    int t = (int)(tc / C), c = (int)(tc % C);
    const T* kc = vk.ptr() + (int64_t)c * kh * kw;
    for (int y = 0; y < H; ++y) {
      T* orow = out.ptr() + (tc * H + y) * W;
      for (int b = 0; b < kh; ++b) {
        int yi = y + b - p;
        if (yi < 0 || yi >= H) continue;
        const T* irow = vx.ptr() + (tc * H + yi) * W;
        for (int d = 0; d < kw; ++d) {
          T w = kc[b * kw + d];
          int off = d - p;
          int x0 = off < 0 ? -off : 0;
          int x1 = off > 0 ? W - off : W;
          for (int xx = x0; xx < x1; ++xx) orow[xx] += w * irow[xx + off];
        }
      }
    }
  });
  int id = x.tape->add_op(std::move(out), {x.id, k.id},
                          [x, k, p, Tn, C, H, W, kh, kw](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (t.requires_grad(x.id)) {
      Tensor<T>& gx = t.grad_buf(x.id);
      const Tensor<T>& vk = t.val(k.id);
      parallel_for_each((int64_t)Tn * C, [&](int64_t tc) {
        int c = (int)(tc % C);
        const T* kc = vk.ptr() + (int64_t)c * kh * kw;
        for (int y = 0; y < H; ++y) {
          T* grow_in = gx.ptr() + (tc * H + y) * W;
          for (int b = 0; b < kh; ++b) {
            int yo = y - b + p;
            if (yo < 0 || yo >= H) continue;
            const T* grow = g.ptr() + (tc * H + yo) * W;
            for (int d = 0; d < kw; ++d) {
              T w = kc[b * kw + d];
              int off = p - d;
              int x0 = off < 0 ? -off : 0;
              int x1 = off > 0 ? W - off : W;
              for (int xx = x0; xx < x1; ++xx) grow_in[xx] += w * grow[xx + off];
            }
          }
        }
      });
    }
    if (t.requires_grad(k.id)) {
      Tensor<T>& gk = t.grad_buf(k.id);
      const Tensor<T>& vx = t.val(x.id);
      parallel_for_each((int64_t)C * kh * kw, [&](int64_t idx) {
        int d = (int)(idx % kw);
        int b = (int)((idx / kw) % kh);
        int c = (int)(idx / ((int64_t)kw * kh));
        double acc = 0;
        int off = d - p;
        int x0 = off < 0 ? -off : 0;
        int x1 = off > 0 ? W - off : W;
        for (int t0 = 0; t0 < Tn; ++t0)
          for (int y = 0; y < H; ++y) {
            int yi = y + b - p;
            if (yi < 0 || yi >= H) continue;
            const T* grow = g.ptr() + (((int64_t)t0 * C + c) * H + y) * W;
            const T* irow = vx.ptr() + (((int64_t)t0 * C + c) * H + yi) * W;
            acc += kern::dot8(grow + x0, irow + x0 + off, x1 - x0);
          }
        gk.data[idx] += (T)acc;
      });
    }
  });
  return {x.tape, id};
}

// Temporal conv: x[T,C,H,W], k[Co,C,kt]; correlation along T per (h,w).
template <typename T>
Var<T> conv1d_temporal(Var<T> x, Var<T> k) {
  detail::check_same_tape(x, k);
  const Tensor<T>& vx = x.val();
  const Tensor<T>& vk = k.val();
  detail::check_rank4(vx.shape, "conv1d_temporal");
  if (vk.rank() != 3 || vk.shape[1] != vx.shape[1] || vk.shape[2] % 2 == 0)
    throw DimensionError("conv1d_temporal: bad kernel shape");
  const int Tn = vx.shape[0], C = vx.shape[1], Co = vk.shape[0], kt = vk.shape[2];
  const int p = (kt - 1) / 2;
  const int64_t plane = (int64_t)vx.shape[2] * vx.shape[3];
  Tensor<T> out({Tn, Co, vx.shape[2], vx.shape[3]});
  parallel_for_each((int64_t)Tn * Co, [&](int64_t tco) {
    int t = (int)(tco / Co), co = (int)(tco % Co);
    T* oplane = out.ptr() + tco * plane;
    for (int c = 0; c < C; ++c)
      for (int a = 0; a < kt; ++a) {
        int ti = t + a - p;
        if (ti < 0 || ti >= Tn) continue;
        T w = vk.data[((int64_t)co * C + c) * kt + a];
        const T* iplane = vx.ptr() + ((int64_t)ti * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) oplane[i] += w * iplane[i];
      }
  });
  int id = x.tape->add_op(std::move(out), {x.id, k.id},
                          [x, k, Tn, C, Co, kt, p, plane](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (t.requires_grad(x.id)) {
      Tensor<T>& gx = t.grad_buf(x.id);
      const Tensor<T>& vk = t.val(k.id);
      parallel_for_each((int64_t)Tn * C, [&](int64_t tc) {
        int ti = (int)(tc / C), c = (int)(tc % C);
        T* gplane = gx.ptr() + tc * plane;
        for (int co = 0; co < Co; ++co)
          for (int a = 0; a < kt; ++a) {
            int to = ti - a + p;
            if (to < 0 || to >= Tn) continue;
            T w = vk.data[((int64_t)co * C + c) * kt + a];
            const T* splane = g.ptr() + ((int64_t)to * Co + co) * plane;
            for (int64_t i = 0; i < plane; ++i) gplane[i] += w * splane[i];
          }
      });
    }
    if (t.requires_grad(k.id)) {
      Tensor<T>& gk = t.grad_buf(k.id);
      const Tensor<T>& vx = t.val(x.id);
      parallel_for_each((int64_t)Co * C * kt, [&](int64_t idx) {
        int a = (int)(idx % kt);
        int c = (int)((idx / kt) % C);
        int co = (int)(idx / ((int64_t)kt * C));
        double acc = 0;
        for (int to = 0; to < Tn; ++to) {
          int ti = to + a - p;
          if (ti < 0 || ti >= Tn) continue;
          const T* gp = g.ptr() + ((int64_t)to * Co + co) * plane;
          const T* ip = vx.ptr() + ((int64_t)ti * C + c) * plane;
          acc += kern::dot8(gp, ip, (int)plane);
        }
        gk.data[idx] += (T)acc;
      });
    }
  });
  return {x.tape, id};
}

namespace kern {

// out[t,co,y,x] = sum_{c,a,b,d} in[t+a-pt, c, y+b-ph, x+d-pw] * k[co,c,a,b,d]
// Output channels are processed four at a time so each input row is loaded
// once per quad.
template <typename T>
void conv3d_fwd(const Tensor<T>& in, const Tensor<T>& k, Tensor<T>& out) {
  const int Tn = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
  const int Co = k.shape[0], kt = k.shape[2], kh = k.shape[3], kw = k.shape[4];
  const int pt = (kt - 1) / 2, ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  constexpr int B = 4;
  const int nb = (Co + B - 1) / B;
  parallel_for_each((int64_t)Tn * nb, [&](int64_t tb) {
    int t = (int)(tb / nb), co0 = (int)(tb % nb) * B;
    int con = Co - co0 < B ? Co - co0 : B;
    for (int y = 0; y < H; ++y) {
      T* orow[B];
      for (int j = 0; j < con; ++j)
        orow[j] = out.ptr() + (((int64_t)t * Co + co0 + j) * H + y) * W;
      for (int c = 0; c < C; ++c)
        for (int a = 0; a < kt; ++a) {
          int ti = t + a - pt;
          if (ti < 0 || ti >= Tn) continue;
          for (int b = 0; b < kh; ++b) {
            int yi = y + b - ph;
            if (yi < 0 || yi >= H) continue;
            const T* irow = in.ptr() + (((int64_t)ti * C + c) * H + yi) * W;
            const T* krow[B];
            for (int j = 0; j < con; ++j)
              krow[j] = k.ptr() + ((((int64_t)(co0 + j) * C + c) * kt + a) * kh + b) * kw;
            for (int d = 0; d < kw; ++d) {
              int off = d - pw;
              int x0 = off < 0 ? -off : 0;
              int x1 = off > 0 ? W - off : W;
              const T* ir = irow + off;
              if (con == B) {
                T w0 = krow[0][d], w1 = krow[1][d], w2 = krow[2][d], w3 = krow[3][d];
                T *o0 = orow[0], *o1 = orow[1], *o2 = orow[2], *o3 = orow[3];
                for (int xx = x0; xx < x1; ++xx) {
                  T v = ir[xx];
                  o0[xx] += w0 * v;
                  o1[xx] += w1 * v;
                  o2[xx] += w2 * v;
                  o3[xx] += w3 * v;
                }
              } else {
                for (int j = 0; j < con; ++j) {
                  T w = krow[j][d];
                  T* o = orow[j];
                  for (int xx = x0; xx < x1; ++xx) o[xx] += w * ir[xx];
                }
              }
            }
          }
        }
    }
  });
}

template <typename T>
void conv3d_bwd_input(const Tensor<T>& g, const Tensor<T>& k, Tensor<T>& gin) {
  const int Tn = gin.shape[0], C = gin.shape[1], H = gin.shape[2], W = gin.shape[3];
  const int Co = k.shape[0], kt = k.shape[2], kh = k.shape[3], kw = k.shape[4];
  const int pt = (kt - 1) / 2, ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  constexpr int B = 4;
  const int nb = (C + B - 1) / B;
  parallel_for_each((int64_t)Tn * nb, [&](int64_t tb) {
    int ti = (int)(tb / nb), c0 = (int)(tb % nb) * B;
    int cn = C - c0 < B ? C - c0 : B;
    for (int y = 0; y < H; ++y) {
      T* grow_in[B];
      for (int j = 0; j < cn; ++j)
        grow_in[j] = gin.ptr() + (((int64_t)ti * C + c0 + j) * H + y) * W;
      for (int co = 0; co < Co; ++co)
        for (int a = 0; a < kt; ++a) {
          int to = ti - a + pt;
          if (to < 0 || to >= Tn) continue;
          for (int b = 0; b < kh; ++b) {
            int yo = y - b + ph;
            if (yo < 0 || yo >= H) continue;
            const T* grow = g.ptr() + (((int64_t)to * Co + co) * H + yo) * W;
            const T* krow[B];
            for (int j = 0; j < cn; ++j)
              krow[j] = k.ptr() + ((((int64_t)co * C + c0 + j) * kt + a) * kh + b) * kw;
            for (int d = 0; d < kw; ++d) {
              int off = pw - d;
              int x0 = off < 0 ? -off : 0;
              int x1 = off > 0 ? W - off : W;
              const T* gr = grow + off;
              if (cn == B) {
                T w0 = krow[0][d], w1 = krow[1][d], w2 = krow[2][d], w3 = krow[3][d];
                T *o0 = grow_in[0], *o1 = grow_in[1], *o2 = grow_in[2], *o3 = grow_in[3];
                for (int xx = x0; xx < x1; ++xx) {
                  T v = gr[xx];
                  o0[xx] += w0 * v;
                  o1[xx] += w1 * v;
                  o2[xx] += w2 * v;
                  o3[xx] += w3 * v;
                }
              } else {
                for (int j = 0; j < cn; ++j) {
                  T w = krow[j][d];
                  T* o = grow_in[j];
                  for (int xx = x0; xx < x1; ++xx) o[xx] += w * gr[xx];
                }
              }
            }
          }
        }
    }
  });
}

template <typename T>
void conv3d_bwd_kernel(const Tensor<T>& g, const Tensor<T>& in, Tensor<T>& gk) {
  const int Tn = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
  const int Co = gk.shape[0], kt = gk.shape[2], kh = gk.shape[3], kw = gk.shape[4];
  const int pt = (kt - 1) / 2, ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  parallel_for_each((int64_t)Co * C * kt * kh * kw, [&](int64_t idx) {
    int d = (int)(idx % kw);
    int b = (int)((idx / kw) % kh);
    int a = (int)((idx / ((int64_t)kw * kh)) % kt);
    int c = (int)((idx / ((int64_t)kw * kh * kt)) % C);
    int co = (int)(idx / ((int64_t)kw * kh * kt * C));
    double acc = 0;
    int off = d - pw;
    int x0 = off < 0 ? -off : 0;
    int x1 = off > 0 ? W - off : W;
    for (int t = 0; t < Tn; ++t) {
      int ti = t + a - pt;
      if (ti < 0 || ti >= Tn) continue;
      for (int y = 0; y < H; ++y) {
        int yi = y + b - ph;
        if (yi < 0 || yi >= H) continue;
        const T* grow = g.ptr() + (((int64_t)t * Co + co) * H + y) * W;
        const T* irow = in.ptr() + (((int64_t)ti * C + c) * H + yi) * W;
        acc += dot8(grow + x0, irow + x0 + off, x1 - x0);
      }
    }
    gk.data[idx] += (T)acc;
  });
}

}  // namespace kern

// Volumetric conv over (T,H,W): x[T,C,H,W], k[Co,C,kt,kh,kw], zero padding.
template <typename T>
Var<T> conv3d(Var<T> x, Var<T> k) {
  detail::check_same_tape(x, k);
  const Tensor<T>& vx = x.val();
  const Tensor<T>& vk = k.val();
  detail::check_rank4(vx.shape, "conv3d");
  if (vk.rank() != 5 || vk.shape[1] != vx.shape[1] || vk.shape[2] % 2 == 0 ||
      vk.shape[3] % 2 == 0 || vk.shape[4] % 2 == 0)
    throw DimensionError("conv3d: bad kernel shape");
  Tensor<T> out({vx.shape[0], vk.shape[0], vx.shape[2], vx.shape[3]});
  kern::conv3d_fwd(vx, vk, out);
  int id = x.tape->add_op(std::move(out), {x.id, k.id}, [x, k](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (t.requires_grad(x.id)) kern::conv3d_bwd_input(g, t.val(k.id), t.grad_buf(x.id));
    if (t.requires_grad(k.id)) kern::conv3d_bwd_kernel(g, t.val(x.id), t.grad_buf(k.id));
  });
  return {x.tape, id};
}

// ---------------------------------------------------------------------------
// Quantization proxies
// ---------------------------------------------------------------------------

// Shared rounding used by both the plain quantizer and the tape proxies, so
// the straight-through forward is bit-identical to dequantize(quantize(x)).
inline int32_t round_symbol(double x_over_step, int alphabet, bool* clamped = nullptr) {
  long long q = std::llround(x_over_step);
  if (q > alphabet) {
    q = alphabet;
    if (clamped) *clamped = true;
  } else if (q < -alphabet) {
    q = -alphabet;
    if (clamped) *clamped = true;
  }
  return (int32_t)q;
}

// Straight-through dequantize(quantize(x)) with elementwise steps.
// Gradient w.r.t. x is identity; steps receive no gradient.
template <typename T>
Var<T> round_dequant_ste(Var<T> x, Var<T> steps, int alphabet) {
  detail::check_same_tape(x, steps);
  detail::check_same_shape(x.val(), steps.val(), "round_dequant_ste");
  Tensor<T> out = x.val();
  const T* ps = steps.val().ptr();
  for (int64_t i = 0; i < out.numel(); ++i) {
    int32_t q = round_symbol((double)out.data[i] / (double)ps[i], alphabet);
    out.data[i] = (T)((double)q * (double)ps[i]);
  }
  int id = x.tape->add_op(std::move(out), {x.id, steps.id}, [x](Tape<T>& t, int self) {
    if (!t.requires_grad(x.id)) return;
    const Tensor<T>& g = t.grad_buf(self);
    Tensor<T>& gx = t.grad_buf(x.id);
    for (int64_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
  });
  return {x.tape, id};
}

// Straight-through rounded symbols q = round(x/steps) as real values.
// Gradient w.r.t. x is 1/steps (round treated as identity).
template <typename T>
Var<T> round_sym_ste(Var<T> x, Var<T> steps, int alphabet) {
  detail::check_same_tape(x, steps);
  detail::check_same_shape(x.val(), steps.val(), "round_sym_ste");
  Tensor<T> out = x.val();
  const T* ps = steps.val().ptr();
  for (int64_t i = 0; i < out.numel(); ++i)
    out.data[i] = (T)round_symbol((double)out.data[i] / (double)ps[i], alphabet);
  int id = x.tape->add_op(std::move(out), {x.id, steps.id}, [x, steps](Tape<T>& t, int self) {
    if (!t.requires_grad(x.id)) return;
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& s = t.val(steps.id);
    Tensor<T>& gx = t.grad_buf(x.id);
    for (int64_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i] / s.data[i];
  });
  return {x.tape, id};
}

// ---------------------------------------------------------------------------
// Rate estimation
// ---------------------------------------------------------------------------

constexpr double kProbFloor = 1.0 / 65536.0;  // 2^-16

// Probability of the unit-width bin around symbol value s under N(mu, sigma),
// floored so every symbol stays codable.
inline double gaussian_bin_prob(double s, double mu, double sigma) {
  double a = (s + 0.5 - mu) / sigma;
  double b = (s - 0.5 - mu) / sigma;
  double p = normal_cdf(a) - normal_cdf(b);
  return p < kProbFloor ? kProbFloor : p;
}

// Total bits -sum log2 p(sym | mu, sigma) over positions where select != 0.
// Differentiable in sym, mu and sigma; positions at the probability floor
// contribute a constant 16 bits and no gradient.
template <typename T>
Var<T> gaussian_rate_bits(Var<T> sym, Var<T> mu, Var<T> sigma, const Tensor<T>* select) {
  detail::check_same_tape(sym, mu);
  detail::check_same_tape(sym, sigma);
  detail::check_same_shape(sym.val(), mu.val(), "gaussian_rate_bits");
  detail::check_same_shape(sym.val(), sigma.val(), "gaussian_rate_bits");
  if (select && select->shape != sym.val().shape)
    throw DimensionError("gaussian_rate_bits: select mask shape mismatch");
  Tensor<T> sel_copy;
  if (select) sel_copy = *select;
  const int64_t n = sym.val().numel();
  double bits = 0;
  {
    const T* ps = sym.val().ptr();
    const T* pm = mu.val().ptr();
    const T* pg = sigma.val().ptr();
    for (int64_t i = 0; i < n; ++i) {
      if (select && sel_copy.data[i] == T(0)) continue;
      bits += -std::log2(gaussian_bin_prob((double)ps[i], (double)pm[i], (double)pg[i]));
    }
  }
  Tensor<T> out({1}, (T)bits);
  bool has_sel = select != nullptr;
  int id = sym.tape->add_op(
      std::move(out), {sym.id, mu.id, sigma.id},
      [sym, mu, sigma, sel = std::move(sel_copy), has_sel, n](Tape<T>& t, int self) {
        double g0 = (double)t.grad_buf(self).data[0];
        const T* ps = t.val(sym.id).ptr();
        const T* pm = t.val(mu.id).ptr();
        const T* pg = t.val(sigma.id).ptr();
        bool need_s = t.requires_grad(sym.id);
        bool need_m = t.requires_grad(mu.id);
        bool need_g = t.requires_grad(sigma.id);
        T* gs = need_s ? t.grad_buf(sym.id).ptr() : nullptr;
        T* gm = need_m ? t.grad_buf(mu.id).ptr() : nullptr;
        T* gg = need_g ? t.grad_buf(sigma.id).ptr() : nullptr;
        constexpr double kInvLn2 = 1.4426950408889634074;
        for (int64_t i = 0; i < n; ++i) {
          if (has_sel && sel.data[i] == T(0)) continue;
          double s = (double)ps[i], m = (double)pm[i], sg = (double)pg[i];
          double a = (s + 0.5 - m) / sg;
          double b = (s - 0.5 - m) / sg;
          double p = normal_cdf(a) - normal_cdf(b);
          if (p < kProbFloor) continue;  // floored: constant bits, no gradient
          double pa = normal_pdf(a), pb = normal_pdf(b);
          double coef = -g0 * kInvLn2 / p;
          if (need_s || need_m) {
            double dp_ds = (pa - pb) / sg;
            if (need_s) gs[i] += (T)(coef * dp_ds);
            if (need_m) gm[i] += (T)(-coef * dp_ds);
          }
          if (need_g) gg[i] += (T)(coef * (-(a * pa - b * pb) / sg));
        }
      });
  return {sym.tape, id};
}

}  // namespace nvrl
