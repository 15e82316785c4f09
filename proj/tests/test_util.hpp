#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "nvrl/tape.hpp"
#include "nvrl/tensor.hpp"

namespace nvrl::testutil {

inline TensorD random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0,
                             double hi = 1.0) {
  return TensorD::uniform(std::move(s), lo, hi, rng);
}

// ---------------------------------------------------------------------------
// Independent convolution references: plain nested loops, no shared code
// with the library kernels.
// ---------------------------------------------------------------------------

inline TensorD ref_conv2d(const TensorD& in, const TensorD& k, int p) {
  const int T = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
  const int Co = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  TensorD out({T, Co, H, W});
  for (int t = 0; t < T; ++t)
    for (int co = 0; co < Co; ++co)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double acc = 0;
          for (int c = 0; c < C; ++c)
            for (int b = 0; b < kh; ++b)
              for (int d = 0; d < kw; ++d) {
                int yi = y + b - p, xi = x + d - p;
                if (yi < 0 || yi >= H || xi < 0 || xi >= W) continue;
                acc += in.at4(t, c, yi, xi) * k.data[(((int64_t)co * C + c) * kh + b) * kw + d];
              }
          out.at4(t, co, y, x) = acc;
        }
  return out;
}

inline TensorD ref_conv1d_temporal(const TensorD& in, const TensorD& k) {
  const int T = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
  const int Co = k.shape[0], kt = k.shape[2], p = (kt - 1) / 2;
  TensorD out({T, Co, H, W});
  for (int t = 0; t < T; ++t)
    for (int co = 0; co < Co; ++co)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double acc = 0;
          for (int c = 0; c < C; ++c)
            for (int a = 0; a < kt; ++a) {
              int ti = t + a - p;
              if (ti < 0 || ti >= T) continue;
              acc += in.at4(ti, c, y, x) * k.data[((int64_t)co * C + c) * kt + a];
            }
          out.at4(t, co, y, x) = acc;
        }
  return out;
}

inline TensorD ref_conv3d(const TensorD& in, const TensorD& k) {
  const int T = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
  const int Co = k.shape[0], kt = k.shape[2], kh = k.shape[3], kw = k.shape[4];
  const int pt = (kt - 1) / 2, ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  TensorD out({T, Co, H, W});
  for (int t = 0; t < T; ++t)
    for (int co = 0; co < Co; ++co)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double acc = 0;
          for (int c = 0; c < C; ++c)
            for (int a = 0; a < kt; ++a)
              for (int b = 0; b < kh; ++b)
                for (int d = 0; d < kw; ++d) {
                  int ti = t + a - pt, yi = y + b - ph, xi = x + d - pw;
                  if (ti < 0 || ti >= T || yi < 0 || yi >= H || xi < 0 || xi >= W)
                    continue;
                  acc += in.at4(ti, c, yi, xi) *
                         k.data[((((int64_t)co * C + c) * kt + a) * kh + b) * kw + d];
                }
          out.at4(t, co, y, x) = acc;
        }
  return out;
}

// ---------------------------------------------------------------------------
// Central finite-difference gradient check (64-bit), eps 1e-3, rel tol 1e-4.
// ---------------------------------------------------------------------------

using BuildLoss = std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

struct GradcheckResult {
  double max_rel_err = 0;
  std::string detail;
};

inline GradcheckResult gradcheck(std::vector<TensorD> inputs, const BuildLoss& build,
                                 double eps = 1e-3) {
  GradcheckResult res;
  std::vector<TensorD> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (auto& t : inputs) vars.push_back({&tape, tape.leaf(t, true)});
    Var<double> loss = build(tape, vars);
    tape.backward(loss.id);
    for (auto v : vars) analytic.push_back(v.grad());
  }
  auto eval = [&](size_t vi, int64_t j, double delta) {
    std::vector<TensorD> mod = inputs;
    mod[vi].data[j] += delta;
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (auto& t : mod) vars.push_back({&tape, tape.leaf(t, false)});
    return (double)build(tape, vars).val().data[0];
  };
  for (size_t vi = 0; vi < inputs.size(); ++vi)
    for (int64_t j = 0; j < inputs[vi].numel(); ++j) {
      double fd = (eval(vi, j, eps) - eval(vi, j, -eps)) / (2 * eps);
      double an = analytic[vi].data[j];
      double denom = std::max({1.0, std::abs(fd), std::abs(an)});
      double rel = std::abs(fd - an) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.detail = "input " + std::to_string(vi) + " elem " + std::to_string(j) +
                     " fd=" + std::to_string(fd) + " an=" + std::to_string(an);
      }
    }
  return res;
}

// Named gradcheck cases covering every differentiable op; `instance` seeds
// the shapes and values.
struct OpCheck {
  const char* name;
  std::function<GradcheckResult(uint64_t instance)> run;
};

std::vector<OpCheck> differentiable_op_checks();

}  // namespace nvrl::testutil
