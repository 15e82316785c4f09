#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "nvrl/tape.hpp"
#include "nvrl/tensor.hpp"

namespace nvrl {

// Multi-scale representation. Stage n (0-based) runs at resolution
// (H/2^(N-1-n), W/2^(N-1-n)) with C/2^n channels; resolution doubles and
// channels halve per stage, which keeps per-stage conv cost constant.
struct SynthesisConfig {
  int num_stages = 3;
  int base_channels = 32;
  int frames = 8;
  int out_height = 64;
  int out_width = 64;
  std::vector<int> grid_channels = {4, 2, 1};  // per stage; 0 disables the grid
  int block_kernel = 3;   // depthwise kernel in the stage block
  int stem_kernel = 3;    // 2D stem kernel; the 1D temporal stem uses the same size
  int grid_temporal_stride = 1;
  uint64_t seed = 0;

  void validate() const {
    if (num_stages < 1) throw ConfigError("num_stages must be >= 1");
    int div = 1 << (num_stages - 1);
    if (base_channels < 1 || base_channels % div != 0)
      throw ConfigError("base_channels must be divisible by 2^(N-1)");
    if (out_height % div != 0 || out_width % div != 0)
      throw ConfigError("output resolution must be divisible by 2^(N-1)");
    if ((int)grid_channels.size() != num_stages)
      throw ConfigError("grid_channels must have one entry per stage");
    if (grid_channels[0] < 1) throw ConfigError("stage 0 requires a feature grid");
    for (int c : grid_channels)
      if (c < 0) throw ConfigError("grid channels must be >= 0");
    if (frames < 1) throw ConfigError("frames must be >= 1");
    if (block_kernel % 2 == 0 || stem_kernel % 2 == 0)
      throw ConfigError("kernels must be odd");
    if (grid_temporal_stride < 1) throw ConfigError("temporal stride must be >= 1");
  }

  int stage_channels(int n) const { return base_channels >> n; }
  int stage_height(int n) const { return out_height >> (num_stages - 1 - n); }
  int stage_width(int n) const { return out_width >> (num_stages - 1 - n); }
  int grid_frames() const {
    return (frames + grid_temporal_stride - 1) / grid_temporal_stride;
  }
  // Grid extents as (Tg, Hg, Wg, Cg).
  std::array<int, 4> grid_extents(int n) const {
    return {grid_frames(), stage_height(n), stage_width(n), grid_channels[n]};
  }
};

// The network half of theta. All convs are bias-free except the head.
template <typename T>
struct RepresentationParams {
  Tensor<T> stem2d;                  // [C, Cg0, k, k]
  Tensor<T> stem1d;                  // [C, Cg0, k]
  std::vector<Tensor<T>> reduce;     // stage n>=1: [C_n, C_{n-1}, 1, 1]
  std::vector<Tensor<T>> proj;       // stage n>=1: [C_n, Cg_n, 1, 1] (empty if no grid)
  std::vector<Tensor<T>> block_dw;   // stage n>=1: [C_n, k, k]
  std::vector<Tensor<T>> block_pw1;  // stage n>=1: [C_n, C_n, 1, 1]
  std::vector<Tensor<T>> block_pw2;  // stage n>=1: [C_n, C_n, 1, 1]
  Tensor<T> head_w;                  // [3, C_last, 1, 1]
  Tensor<T> head_b;                  // [3]

  std::vector<const Tensor<T>*> all() const {
    std::vector<const Tensor<T>*> out = {&stem2d, &stem1d};
    for (size_t n = 1; n < reduce.size(); ++n) {
      out.push_back(&reduce[n]);
      if (proj[n].numel() > 0) out.push_back(&proj[n]);
      out.push_back(&block_dw[n]);
      out.push_back(&block_pw1[n]);
      out.push_back(&block_pw2[n]);
    }
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
  }
};

// Feature grids, stored [Tg, Cg, Hg, Wg]; stages with zero grid channels
// hold an empty tensor.
template <typename T>
struct GridSet {
  std::vector<Tensor<T>> grids;
};

namespace detail {

template <typename T>
Tensor<T> fan_in_uniform(Shape shape, int64_t fan_in, std::mt19937_64& rng) {
  double bound = 1.0 / std::sqrt((double)fan_in);
  return Tensor<T>::uniform(std::move(shape), (T)-bound, (T)bound, rng);
}

}  // namespace detail

template <typename T>
std::pair<RepresentationParams<T>, GridSet<T>> build_model(const SynthesisConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const int N = cfg.num_stages;
  const int k = cfg.block_kernel;
  const int ks = cfg.stem_kernel;
  RepresentationParams<T> p;
  p.stem2d = detail::fan_in_uniform<T>({cfg.base_channels, cfg.grid_channels[0], ks, ks},
                                       (int64_t)cfg.grid_channels[0] * ks * ks, rng);
  p.stem1d = detail::fan_in_uniform<T>({cfg.base_channels, cfg.grid_channels[0], ks},
                                       (int64_t)cfg.grid_channels[0] * ks, rng);
  p.reduce.resize(N);
  p.proj.resize(N);
  p.block_dw.resize(N);
  p.block_pw1.resize(N);
  p.block_pw2.resize(N);
  for (int n = 1; n < N; ++n) {
    int cn = cfg.stage_channels(n), cp = cfg.stage_channels(n - 1);
    p.reduce[n] = detail::fan_in_uniform<T>({cn, cp, 1, 1}, cp, rng);
    if (cfg.grid_channels[n] > 0)
      p.proj[n] = detail::fan_in_uniform<T>({cn, cfg.grid_channels[n], 1, 1},
                                            cfg.grid_channels[n], rng);
    p.block_dw[n] = detail::fan_in_uniform<T>({cn, k, k}, (int64_t)k * k, rng);
    p.block_pw1[n] = detail::fan_in_uniform<T>({cn, cn, 1, 1}, cn, rng);
    p.block_pw2[n] = detail::fan_in_uniform<T>({cn, cn, 1, 1}, cn, rng);
  }
  int clast = cfg.stage_channels(N - 1);
  p.head_w = detail::fan_in_uniform<T>({3, clast, 1, 1}, clast, rng);
  p.head_b = Tensor<T>::zeros({3});

  GridSet<T> g;
  g.grids.resize(N);
  for (int n = 0; n < N; ++n) {
    auto e = cfg.grid_extents(n);
    if (e[3] > 0)
      g.grids[n] = Tensor<T>::uniform({e[0], e[3], e[1], e[2]}, (T)-1e-2, (T)1e-2, rng);
  }
  return {std::move(p), std::move(g)};
}

// Var handles for the model parameters on some tape (the trainer substitutes
// quantization proxies here; plain inference uses constants).
template <typename T>
struct RepresentationVars {
  Var<T> stem2d, stem1d;
  std::vector<Var<T>> reduce, proj, block_dw, block_pw1, block_pw2;
  Var<T> head_w, head_b;
};

template <typename T>
struct GridVars {
  std::vector<Var<T>> grids;  // invalid Var (id -1) where the stage has no grid
};

template <typename T>
RepresentationVars<T> params_as_constants(Tape<T>& tape, const RepresentationParams<T>& p) {
  RepresentationVars<T> v;
  v.stem2d = {&tape, tape.constant(p.stem2d)};
  v.stem1d = {&tape, tape.constant(p.stem1d)};
  const int N = (int)p.reduce.size();
  v.reduce.resize(N);
  v.proj.resize(N);
  v.block_dw.resize(N);
  v.block_pw1.resize(N);
  v.block_pw2.resize(N);
  for (int n = 1; n < N; ++n) {
    v.reduce[n] = {&tape, tape.constant(p.reduce[n])};
    if (p.proj[n].numel() > 0) v.proj[n] = {&tape, tape.constant(p.proj[n])};
    v.block_dw[n] = {&tape, tape.constant(p.block_dw[n])};
    v.block_pw1[n] = {&tape, tape.constant(p.block_pw1[n])};
    v.block_pw2[n] = {&tape, tape.constant(p.block_pw2[n])};
  }
  v.head_w = {&tape, tape.constant(p.head_w)};
  v.head_b = {&tape, tape.constant(p.head_b)};
  return v;
}

template <typename T>
GridVars<T> grids_as_constants(Tape<T>& tape, const GridSet<T>& g) {
  GridVars<T> v;
  v.grids.resize(g.grids.size());
  for (size_t n = 0; n < g.grids.size(); ++n)
    if (g.grids[n].numel() > 0) v.grids[n] = {&tape, tape.constant(g.grids[n])};
  return v;
}

// Full synthesis pipeline for the requested frames:
//   stage 0:   x = conv2d(G0) + conv1d_temporal(G0)
//   stage n>0: x = block_n(reduce_n(upsample2x(x)) + proj_n(G_n))
//   head:      sigmoid(1x1 conv + bias)
// block_n is one residual unit: depthwise k conv -> 1x1 -> gelu -> 1x1,
// added to its input. Output is [|frames|, 3, H, W], strictly inside (0,1).
template <typename T>
Var<T> synthesize(Tape<T>& tape, const SynthesisConfig& cfg,
                  const RepresentationVars<T>& p, const GridVars<T>& g,
                  const std::vector<int>& frame_indices) {
  cfg.validate();
  for (int f : frame_indices)
    if (f < 0 || f >= cfg.frames)
      throw DimensionError("synthesize: frame index out of range");
  const int N = cfg.num_stages;
  if ((int)g.grids.size() != N) throw DimensionError("synthesize: grid/stage mismatch");

  auto full_t = [&](Var<T> grid, int n) {
    auto e = cfg.grid_extents(n);
    if (grid.val().shape != Shape{e[0], e[3], e[1], e[2]})
      throw DimensionError("synthesize: grid extents do not match stage " +
                           std::to_string(n));
    if (cfg.grid_temporal_stride == 1) return grid;
    return upsample_block(grid, cfg.grid_temporal_stride, 1, 1, cfg.frames, e[1], e[2]);
  };

  int pad = (cfg.stem_kernel - 1) / 2;
  Var<T> g0 = full_t(g.grids[0], 0);
  Var<T> branch2d = conv2d(slice_frames(g0, frame_indices), p.stem2d, pad);
  Var<T> branch1d = slice_frames(conv1d_temporal(g0, p.stem1d), frame_indices);
  Var<T> x = add(branch2d, branch1d);

  int bpad = (cfg.block_kernel - 1) / 2;
  for (int n = 1; n < N; ++n) {
    x = conv2d(upsample_nearest2x(x), p.reduce[n], 0);
    if (cfg.grid_channels[n] > 0) {
      Var<T> gn = slice_frames(full_t(g.grids[n], n), frame_indices);
      x = add(x, conv2d(gn, p.proj[n], 0));
    }
    Var<T> h = depthwise_conv2d(x, p.block_dw[n], bpad);
    h = conv2d(h, p.block_pw1[n], 0);
    h = gelu(h);
    h = conv2d(h, p.block_pw2[n], 0);
    x = add(x, h);
  }
  return sigmoid(bias_channel(conv2d(x, p.head_w, 0), p.head_b));
}

// Non-tape convenience wrapper used by the decoder and evaluation paths.
template <typename T>
Tensor<T> synthesize_plain(const SynthesisConfig& cfg, const RepresentationParams<T>& p,
                           const GridSet<T>& g, const std::vector<int>& frame_indices) {
  Tape<T> tape;
  auto pv = params_as_constants(tape, p);
  auto gv = grids_as_constants(tape, g);
  return synthesize(tape, cfg, pv, gv, frame_indices).val();
}

// ---------------------------------------------------------------------------
// Complexity accounting
// ---------------------------------------------------------------------------

struct MacsRow {
  std::string layer;
  int stage;  // -1 for stem/head
  int64_t macs;
};

struct MacsReport {
  std::vector<MacsRow> rows;
  int64_t total = 0;
  double kmacs_per_pixel = 0;
};

// Exact multiply-accumulate counts from shape arithmetic, for synthesizing
// the whole clip.
inline MacsReport count_macs(const SynthesisConfig& cfg) {
  cfg.validate();
  MacsReport r;
  const int N = cfg.num_stages;
  const int64_t T = cfg.frames;
  auto push = [&](const std::string& name, int stage, int64_t macs) {
    r.rows.push_back({name, stage, macs});
    r.total += macs;
  };
  int64_t bh = cfg.stage_height(0), bw = cfg.stage_width(0);
  int64_t cg0 = cfg.grid_channels[0], c0 = cfg.base_channels;
  push("stem2d", -1, T * bh * bw * cg0 * c0 * cfg.stem_kernel * cfg.stem_kernel);
  push("stem1d", -1, T * bh * bw * cg0 * c0 * cfg.stem_kernel);
  for (int n = 1; n < N; ++n) {
    int64_t h = cfg.stage_height(n), w = cfg.stage_width(n);
    int64_t cn = cfg.stage_channels(n), cp = cfg.stage_channels(n - 1);
    push("reduce", n, T * h * w * cp * cn);
    if (cfg.grid_channels[n] > 0)
      push("proj", n, T * h * w * (int64_t)cfg.grid_channels[n] * cn);
    push("block_dw", n, T * h * w * cn * cfg.block_kernel * cfg.block_kernel);
    push("block_pw1", n, T * h * w * cn * cn);
    push("block_pw2", n, T * h * w * cn * cn);
  }
  int64_t clast = cfg.stage_channels(N - 1);
  push("head", -1, T * (int64_t)cfg.out_height * cfg.out_width * clast * 3);
  r.kmacs_per_pixel =
      (double)r.total / ((double)T * cfg.out_height * cfg.out_width) / 1000.0;
  return r;
}

}  // namespace nvrl
