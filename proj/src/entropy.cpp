#include "nvrl/entropy.hpp"

#include <cmath>
#include <memory>

#include "nvrl/detmath.hpp"

namespace nvrl {

double bin_probability(double mu, double sigma, int32_t q) {
  if (sigma < kSigmaMin || sigma > kSigmaMax)
    throw ParamError("bin_probability: sigma outside clamp range");
  return gaussian_bin_prob((double)q, mu, sigma);
}

double rate_bits_from_probs(const std::vector<double>& probs) {
  double bits = 0;
  for (double p : probs) bits += -std::log2(p < kProbFloor ? kProbFloor : p);
  return bits;
}

double estimate_rate_bits(const Tensor<int32_t>& q, const GaussianField& field) {
  if (q.shape != field.mu.shape || q.shape != field.sigma.shape)
    throw DimensionError("estimate_rate: field shape mismatch");
  double bits = 0;
  for (int64_t i = 0; i < q.numel(); ++i)
    bits += -std::log2(
        gaussian_bin_prob((double)q.data[i], (double)field.mu.data[i],
                          (double)field.sigma.data[i]));
  return bits;
}

namespace {

float dequant_value(int32_t sym, float step) {
  return (float)((double)sym * (double)step);
}

// One (step, group) pass of the octree coder. code_symbol consumes or
// produces the symbol for a flat index; the loop maintains the decoded
// latent and mask shared by encoder and decoder.
struct GridPassState {
  Tensor<float> deq;   // dequantized decoded values, zero where undecoded
  Tensor<float> mask;  // 1 where decoded
};

template <typename CodeSymbol>
void run_grid_passes(const Shape& shape, const ContextNet<float>& net,
                     const StepField& steps, const Tensor<float>& aux_deq,
                     const PredictProbe* probe, GridCodingStats* stats,
                     const CodeSymbol& code_symbol) {
  const int tg = shape[0], cg = shape[1], hg = shape[2], wg = shape[3];
  if (!steps.matches(shape)) throw ParamError("grid coder: step field mismatch");
  if (aux_deq.shape != aux_shape_for_grid(tg, hg, wg))
    throw DimensionError("grid coder: aux latent extents mismatch");
  MaskSchedule sched = build_schedule(tg, hg, wg);
  GridPassState st;
  st.deq = Tensor<float>::zeros(shape);
  st.mask = Tensor<float>::zeros(shape);
  // aux contribution to layer 1 is pass-independent; compute it once
  Tensor<float> aux_pre_value;
  {
    Tape<float> tape;
    auto netv = context_net_as_constants(tape, net);
    Var<float> aux{&tape, tape.constant(aux_deq)};
    Var<float> aux_up = upsample_aux(tape, aux, tg, hg, wg);
    aux_pre_value = context_aux_pre(tape, netv, aux_up, cg).val();
  }
  const int groups = num_channel_groups(cg);
  int pass_index = 0;
  for (int k = 1; k <= 4; ++k) {
    auto positions = sched.positions(k);
    if (positions.empty()) continue;
    for (int g = 0; g < groups; ++g) {
      auto channels = group_channels(cg, g);
      if (channels.empty()) continue;
      // predict from everything decoded so far
      Tape<float> tape;
      auto netv = context_net_as_constants(tape, net);
      Var<float> latent{&tape, tape.constant(st.deq)};
      Var<float> maskv{&tape, tape.constant(st.mask)};
      Var<float> aux_pre{&tape, tape.constant(aux_pre_value)};
      auto field = context_predict(tape, netv, latent, maskv, aux_pre);
      if (probe) (*probe)(k, g, st.deq, st.mask);
      const Tensor<float>& mu = field.mu.val();
      const Tensor<float>& sigma = field.sigma.val();
      for (int c : channels)
        for (const GridPos& p : positions) {
          int64_t i = ((((int64_t)p.t * cg) + c) * hg + p.h) * wg + p.w;
          QuantizedGaussian qg =
              quantize_gaussian((double)mu.data[i], (double)sigma.data[i]);
          int32_t sym = code_symbol(pass_index, qg, i);
          if (stats) {
            double muq = (double)qg.mu64 / 64.0;
            stats->estimate_bits +=
                -std::log2(gaussian_bin_prob((double)sym, muq,
                                             sigma_table()[qg.sigma_idx]));
          }
          st.deq.data[i] = dequant_value(sym, steps.step_at(p.t, c, p.h, p.w));
          st.mask.data[i] = 1.0f;
        }
      ++pass_index;
      if (stats) stats->passes = pass_index;
    }
  }
}

}  // namespace

std::vector<uint8_t> encode_grid(const Tensor<int32_t>& q, const ContextNet<float>& net,
                                 const StepField& steps, const Tensor<float>& aux_deq,
                                 GridCodingStats* stats, const PredictProbe* probe) {
  if (q.rank() != 4) throw DimensionError("encode_grid: grid must be rank 4");
  std::vector<uint8_t> payload;
  RangeEncoder* enc = nullptr;
  std::vector<uint8_t> pass_bytes;
  int current_pass = -1;
  RangeEncoder encoder(pass_bytes);  // re-created per pass below
  auto code_symbol = [&](int pass, const QuantizedGaussian& qg, int64_t i) -> int32_t {
    if (pass != current_pass) {
      if (enc) {
        enc->finish();
        payload.insert(payload.end(), pass_bytes.begin(), pass_bytes.end());
      }
      pass_bytes.clear();
      encoder = RangeEncoder(pass_bytes);
      enc = &encoder;
      current_pass = pass;
    }
    int32_t sym = q.data[i];
    encode_gaussian_symbol(*enc, qg, sym);
    return sym;
  };
  run_grid_passes(q.shape, net, steps, aux_deq, probe, stats, code_symbol);
  if (enc) {
    enc->finish();
    payload.insert(payload.end(), pass_bytes.begin(), pass_bytes.end());
  }
  return payload;
}

Tensor<int32_t> decode_grid(const uint8_t* data, size_t size,
                            const ContextNet<float>& net, const StepField& steps,
                            const Tensor<float>& aux_deq, const Shape& grid_shape,
                            size_t* consumed, const PredictProbe* probe) {
  if (grid_shape.size() != 4) throw DimensionError("decode_grid: grid must be rank 4");
  Tensor<int32_t> q(grid_shape);
  size_t offset = 0;
  std::unique_ptr<RangeDecoder> dec;
  int current_pass = -1;
  auto code_symbol = [&](int pass, const QuantizedGaussian& qg, int64_t i) -> int32_t {
    if (pass != current_pass) {
      if (dec) offset += dec->consumed();
      if (offset > size) throw StreamError("grid payload truncated");
      dec = std::make_unique<RangeDecoder>(data + offset, size - offset);
      current_pass = pass;
    }
    int32_t sym = decode_gaussian_symbol(*dec, qg);
    q.data[i] = sym;
    return sym;
  };
  run_grid_passes(grid_shape, net, steps, aux_deq, probe, nullptr, code_symbol);
  if (dec) offset += dec->consumed();
  if (consumed) *consumed = offset;
  return q;
}

std::vector<uint8_t> encode_weights(const Tensor<int32_t>& q, float sigma_w,
                                    GridCodingStats* stats) {
  if (!(sigma_w > 0)) throw ParamError("encode_weights: sigma_w must be positive");
  QuantizedGaussian qg = quantize_gaussian(0.0, (double)sigma_w);
  std::vector<uint8_t> out;
  RangeEncoder enc(out);
  for (int32_t sym : q.data) {
    encode_gaussian_symbol(enc, qg, sym);
    if (stats)
      stats->estimate_bits += -std::log2(
          gaussian_bin_prob((double)sym, 0.0, sigma_table()[qg.sigma_idx]));
  }
  enc.finish();
  if (stats) stats->passes += 1;
  return out;
}

Tensor<int32_t> decode_weights(const uint8_t* data, size_t size, const Shape& shape,
                               float sigma_w, size_t* consumed) {
  if (!(sigma_w > 0)) throw ParamError("decode_weights: sigma_w must be positive");
  QuantizedGaussian qg = quantize_gaussian(0.0, (double)sigma_w);
  Tensor<int32_t> q(shape);
  RangeDecoder dec(data, size);
  for (auto& sym : q.data) sym = decode_gaussian_symbol(dec, qg);
  if (consumed) *consumed = dec.consumed();
  return q;
}

// ---------------------------------------------------------------------------
// Autoregressive reference
// ---------------------------------------------------------------------------

namespace {

// Per-position evaluation of the causally masked two-layer context net.
// Recomputes layer-1 activations over the layer-2 window; deliberately the
// straightforward sequential reference, since each position depends on the
// previously decoded one.
struct ArEvaluator {
  const ContextNet<float>& net;
  const Tensor<float>& deq;     // decoded values (zero where undecoded)
  const Tensor<float>& aux_up;  // [Tg, kAuxChannels, Hg, Wg]
  int tg, cg, hg, wg;

  static bool strictly_before(int dt, int dh, int dw) {
    return dt < 0 || (dt == 0 && (dh < 0 || (dh == 0 && dw < 0)));
  }

  double input_at(int c, int t, int h, int w) const {
    if (t < 0 || t >= tg || h < 0 || h >= hg || w < 0 || w >= wg) return 0.0;
    if (c < cg) return (double)deq.at4(t, c, h, w);
    return (double)aux_up.at4(t, c - cg, h, w);
  }

  // layer-1 hidden vector at (t,h,w); strictly-causal taps only
  void hidden_at(int t, int h, int w, double* out) const {
    const int cin = cg + kAuxChannels;
    const int p = (kCtxKernel - 1) / 2;
    for (int j = 0; j < kCtxHidden; ++j) out[j] = (double)net.b1.data[j];
    for (int a = 0; a < kCtxKernel; ++a)
      for (int b = 0; b < kCtxKernel; ++b)
        for (int d = 0; d < kCtxKernel; ++d) {
          if (!strictly_before(a - p, b - p, d - p)) continue;
          for (int c = 0; c < cin; ++c) {
            double v = input_at(c, t + a - p, h + b - p, w + d - p);
            if (v == 0.0) continue;
            for (int j = 0; j < kCtxHidden; ++j)
              out[j] += v * (double)net.w1.data[((((int64_t)j * cin + c) * kCtxKernel + a) *
                                                     kCtxKernel + b) * kCtxKernel + d];
          }
        }
    for (int j = 0; j < kCtxHidden; ++j) {
      float pre = (float)out[j];
      out[j] = (double)(float)((double)pre * normal_cdf((double)pre));
    }
  }

  // (mu, sigma) for every channel at (t,h,w)
  void predict_at(int t, int h, int w, float* mu, float* sigma) const {
    const int p = (kCtxKernel - 1) / 2;
    std::vector<double> acc(2 * cg);
    for (int o = 0; o < 2 * cg; ++o) acc[o] = (double)net.b2.data[o];
    double hbuf[kCtxHidden];
    for (int a = 0; a < kCtxKernel; ++a)
      for (int b = 0; b < kCtxKernel; ++b)
        for (int d = 0; d < kCtxKernel; ++d) {
          int dt = a - p, dh = b - p, dw = d - p;
          bool center = dt == 0 && dh == 0 && dw == 0;
          if (!strictly_before(dt, dh, dw) && !center) continue;
          int ht = t + dt, hh = h + dh, hw = w + dw;
          if (ht < 0 || ht >= tg || hh < 0 || hh >= hg || hw < 0 || hw >= wg) continue;
          hidden_at(ht, hh, hw, hbuf);
          for (int o = 0; o < 2 * cg; ++o)
            for (int j = 0; j < kCtxHidden; ++j)
              acc[o] += hbuf[j] *
                        (double)net.w2.data[((((int64_t)o * kCtxHidden + j) * kCtxKernel + a) *
                                                 kCtxKernel + b) * kCtxKernel + d];
        }
    for (int c = 0; c < cg; ++c) {
      mu[c] = (float)acc[c];
      double s = det_exp((double)(float)acc[cg + c]);
      sigma[c] = (float)(s < kSigmaMin ? kSigmaMin : (s > kSigmaMax ? kSigmaMax : s));
    }
  }
};

Tensor<float> plain_upsample_aux(const Tensor<float>& aux, int tg, int hg, int wg) {
  Tape<float> tape;
  Var<float> a{&tape, tape.constant(aux)};
  return upsample_aux(tape, a, tg, hg, wg).val();
}

template <typename CodeSymbol>
void run_ar_raster(const Shape& shape, const ContextNet<float>& net,
                   const StepField& steps, const Tensor<float>& aux_deq,
                   const CodeSymbol& code_symbol) {
  const int tg = shape[0], cg = shape[1], hg = shape[2], wg = shape[3];
  if (!steps.matches(shape)) throw ParamError("ar coder: step field mismatch");
  if (aux_deq.shape != aux_shape_for_grid(tg, hg, wg))
    throw DimensionError("ar coder: aux latent extents mismatch");
  Tensor<float> deq = Tensor<float>::zeros(shape);
  Tensor<float> aux_up = plain_upsample_aux(aux_deq, tg, hg, wg);
  ArEvaluator eval{net, deq, aux_up, tg, cg, hg, wg};
  std::vector<float> mu(cg), sigma(cg);
  for (int t = 0; t < tg; ++t)
    for (int h = 0; h < hg; ++h)
      for (int w = 0; w < wg; ++w) {
        eval.predict_at(t, h, w, mu.data(), sigma.data());
        for (int c = 0; c < cg; ++c) {
          QuantizedGaussian qg = quantize_gaussian((double)mu[c], (double)sigma[c]);
          int64_t i = ((((int64_t)t * cg) + c) * hg + h) * wg + w;
          int32_t sym = code_symbol(qg, i);
          deq.data[i] = dequant_value(sym, steps.step_at(t, c, h, w));
        }
      }
}

}  // namespace

std::vector<uint8_t> encode_grid_autoregressive(const Tensor<int32_t>& q,
                                                const ContextNet<float>& net,
                                                const StepField& steps,
                                                const Tensor<float>& aux_deq,
                                                GridCodingStats* stats) {
  if (q.rank() != 4) throw DimensionError("ar encode: grid must be rank 4");
  std::vector<uint8_t> out;
  RangeEncoder enc(out);
  run_ar_raster(q.shape, net, steps, aux_deq,
                [&](const QuantizedGaussian& qg, int64_t i) -> int32_t {
                  int32_t sym = q.data[i];
                  encode_gaussian_symbol(enc, qg, sym);
                  if (stats)
                    stats->estimate_bits += -std::log2(gaussian_bin_prob(
                        (double)sym, (double)qg.mu64 / 64.0, sigma_table()[qg.sigma_idx]));
                  return sym;
                });
  enc.finish();
  if (stats) stats->passes += 1;
  return out;
}

Tensor<int32_t> decode_grid_autoregressive(const uint8_t* data, size_t size,
                                           const ContextNet<float>& net,
                                           const StepField& steps,
                                           const Tensor<float>& aux_deq,
                                           const Shape& grid_shape, size_t* consumed) {
  if (grid_shape.size() != 4) throw DimensionError("ar decode: grid must be rank 4");
  Tensor<int32_t> q(grid_shape);
  RangeDecoder dec(data, size);
  run_ar_raster(grid_shape, net, steps, aux_deq,
                [&](const QuantizedGaussian& qg, int64_t i) -> int32_t {
                  int32_t sym = decode_gaussian_symbol(dec, qg);
                  q.data[i] = sym;
                  return sym;
                });
  if (consumed) *consumed = dec.consumed();
  return q;
}

}  // namespace nvrl
