#pragma once

#include <cstdint>
#include <random>

#include "nvrl/quantizer.hpp"
#include "nvrl/range_coder.hpp"
#include "nvrl/schedule.hpp"
#include "nvrl/synthesis.hpp"
#include "nvrl/tape.hpp"

namespace nvrl {

// Context network hyperparameters (shared by the octree model and the
// autoregressive reference).
constexpr int kCtxHidden = 16;
constexpr int kCtxKernel = 3;
constexpr int kAuxBlock = 16;     // auxiliary latent granularity per (T,H,W) axis
constexpr int kAuxChannels = 4;

// Two conv3d layers mapping masked context to per-channel (mu, log-sigma).
// The final layer starts at zero so the initial prediction is N(0, 1).
template <typename T>
struct ContextNet {
  Tensor<T> w1;  // [hidden, cin, 3,3,3]
  Tensor<T> b1;  // [hidden]
  Tensor<T> w2;  // [2*cg, hidden, 3,3,3]
  Tensor<T> b2;  // [2*cg]
};

// Input channels: masked latent + per-channel mask + upsampled aux latent.
inline int octree_ctx_in_channels(int cg) { return 2 * cg + kAuxChannels; }
// The autoregressive net sees the latent (causally masked kernels) + aux.
inline int ar_ctx_in_channels(int cg) { return cg + kAuxChannels; }

template <typename T>
ContextNet<T> build_context_net(int cin, int cg, std::mt19937_64& rng) {
  ContextNet<T> net;
  int64_t k3 = (int64_t)kCtxKernel * kCtxKernel * kCtxKernel;
  net.w1 = detail::fan_in_uniform<T>({kCtxHidden, cin, kCtxKernel, kCtxKernel, kCtxKernel},
                                     cin * k3, rng);
  net.b1 = Tensor<T>::zeros({kCtxHidden});
  net.w2 = Tensor<T>::zeros({2 * cg, kCtxHidden, kCtxKernel, kCtxKernel, kCtxKernel});
  net.b2 = Tensor<T>::zeros({2 * cg});
  return net;
}

template <typename T>
struct ContextNetVars {
  Var<T> w1, b1, w2, b2;
};

template <typename T>
ContextNetVars<T> context_net_as_constants(Tape<T>& tape, const ContextNet<T>& n) {
  return {{&tape, tape.constant(n.w1)},
          {&tape, tape.constant(n.b1)},
          {&tape, tape.constant(n.w2)},
          {&tape, tape.constant(n.b2)}};
}

template <typename T>
struct GaussianFieldVars {
  Var<T> mu, sigma;  // each [T, Cg, H, W]; sigma clamped to [0.05, 256]
};

// Layer-1 contribution of the aux latent. It is identical for every coding
// step of a grid, so callers compute it once and reuse it across passes.
template <typename T>
Var<T> context_aux_pre(Tape<T>& tape, const ContextNetVars<T>& net, Var<T> aux_up,
                       int cg) {
  (void)tape;
  Var<T> w1_aux = slice_kernel_in_channels(net.w1, 2 * cg, kAuxChannels);
  return conv3d(aux_up, w1_aux);
}

// Octree-model prediction from masked context. masked_latent must be zero at
// not-yet-decoded positions (m_k (x) z) and mask carries 1 exactly there.
// aux_pre comes from context_aux_pre on the same net.
template <typename T>
GaussianFieldVars<T> context_predict(Tape<T>& tape, const ContextNetVars<T>& net,
                                     Var<T> masked_latent, Var<T> mask, Var<T> aux_pre) {
  int cg = masked_latent.val().shape[1];
  if (mask.val().shape != masked_latent.val().shape)
    throw ContractError("context_predict: mask/latent shape mismatch");
  Var<T> w1_lm = slice_kernel_in_channels(net.w1, 0, 2 * cg);
  Var<T> pre = add(conv3d(concat_channels(masked_latent, mask), w1_lm), aux_pre);
  Var<T> h = gelu(bias_channel(pre, net.b1));
  Var<T> out = bias_channel(conv3d(h, net.w2), net.b2);
  Var<T> mu = slice_channels(out, 0, cg);
  Var<T> sigma = clamp_op(exp_op(slice_channels(out, cg, cg)), kSigmaMin, kSigmaMax);
  return {mu, sigma};
}

// Raster-causal mask over a conv3d kernel [Co,C,kt,kh,kw]: tap (a,b,d) is
// kept iff its offset from the center is lexicographically before zero
// (strictly, or allowing the center when include_center).
template <typename T>
Tensor<T> ar_kernel_mask(const Shape& kshape, bool include_center) {
  Tensor<T> m(kshape);
  const int kt = kshape[2], kh = kshape[3], kw = kshape[4];
  const int pt = (kt - 1) / 2, ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  int64_t i = 0;
  for (int co = 0; co < kshape[0]; ++co)
    for (int c = 0; c < kshape[1]; ++c)
      for (int a = 0; a < kt; ++a)
        for (int b = 0; b < kh; ++b)
          for (int d = 0; d < kw; ++d, ++i) {
            int dt = a - pt, dh = b - ph, dw = d - pw;
            bool before = dt < 0 || (dt == 0 && (dh < 0 || (dh == 0 && dw < 0)));
            bool center = dt == 0 && dh == 0 && dw == 0;
            m.data[i] = (before || (center && include_center)) ? T(1) : T(0);
          }
  return m;
}

// Autoregressive prediction over the full grid via causally masked kernels
// (training path; coding evaluates positions sequentially).
template <typename T>
GaussianFieldVars<T> ar_predict_full(Tape<T>& tape, const ContextNetVars<T>& net,
                                     Var<T> latent, Var<T> aux_up) {
  int cg = latent.val().shape[1];
  Var<T> w1m = mul(net.w1, Var<T>{&tape, tape.constant(ar_kernel_mask<T>(
                                            net.w1.val().shape, /*include_center=*/false))});
  Var<T> w2m = mul(net.w2, Var<T>{&tape, tape.constant(ar_kernel_mask<T>(
                                            net.w2.val().shape, /*include_center=*/true))});
  Var<T> input = concat_channels(latent, aux_up);
  Var<T> h = gelu(bias_channel(conv3d(input, w1m), net.b1));
  Var<T> out = bias_channel(conv3d(h, w2m), net.b2);
  Var<T> mu = slice_channels(out, 0, cg);
  Var<T> sigma = clamp_op(exp_op(slice_channels(out, cg, cg)), kSigmaMin, kSigmaMax);
  return {mu, sigma};
}

// ---------------------------------------------------------------------------
// Channel interleaving
// ---------------------------------------------------------------------------

inline int num_channel_groups(int cg) { return cg > 1 ? 2 : 1; }

inline std::vector<int> group_channels(int cg, int group) {
  std::vector<int> out;
  for (int c = group; c < cg; c += 2) out.push_back(c);
  return out;
}

// Mask of everything available to the predictor at (step, group): all
// positions of earlier steps on every channel, plus the current step's
// positions on already-coded channel groups.
template <typename T>
Tensor<T> decoded_mask(const MaskSchedule& s, int step, int group, int cg) {
  Tensor<T> m = decoded_position_mask<T>(s, step, cg);
  if (group == 1)
    for (const GridPos& p : s.positions(step))
      for (int c : group_channels(cg, 0)) m.at4(p.t, c, p.h, p.w) = T(1);
  return m;
}

// Mask of the symbols coded at (step, group).
template <typename T>
Tensor<T> select_mask(const MaskSchedule& s, int step, int group, int cg) {
  Tensor<T> m({s.tg, cg, s.hg, s.wg});
  for (const GridPos& p : s.positions(step))
    for (int c : group_channels(cg, group)) m.at4(p.t, c, p.h, p.w) = T(1);
  return m;
}

// ---------------------------------------------------------------------------
// Auxiliary conditional latent
// ---------------------------------------------------------------------------

inline Shape aux_shape_for_grid(int tg, int hg, int wg) {
  auto cd = [](int a, int b) { return (a + b - 1) / b; };
  return {cd(tg, kAuxBlock), kAuxChannels, cd(hg, kAuxBlock), cd(wg, kAuxBlock)};
}

template <typename T>
Var<T> upsample_aux(Tape<T>& tape, Var<T> aux, int tg, int hg, int wg) {
  return upsample_block(aux, kAuxBlock, kAuxBlock, kAuxBlock, tg, hg, wg);
}

}  // namespace nvrl
