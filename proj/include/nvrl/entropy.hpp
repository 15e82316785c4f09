#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "nvrl/context_model.hpp"
#include "nvrl/quantizer.hpp"
#include "nvrl/range_coder.hpp"
#include "nvrl/schedule.hpp"
#include "nvrl/tensor.hpp"

namespace nvrl {

// Gaussian mass of the unit bin around integer symbol q, floored at 2^-16.
double bin_probability(double mu, double sigma, int32_t q);

struct GaussianField {
  Tensor<float> mu, sigma;
};

// -sum log2 p over all positions of q.
double estimate_rate_bits(const Tensor<int32_t>& q, const GaussianField& field);
double rate_bits_from_probs(const std::vector<double>& probs);

struct GridCodingStats {
  double estimate_bits = 0;  // from the coder's quantized (mu, sigma)
  int passes = 0;
};

// Observes the exact predictor inputs of every coding pass (used to verify
// encoder/decoder context equality).
using PredictProbe =
    std::function<void(int step, int group, const Tensor<float>& masked_latent,
                       const Tensor<float>& mask)>;

// Octree-scheduled coding of a quantized grid [Tg,Cg,Hg,Wg]. Four steps,
// channel-interleaved into at most two groups; each (step, group) pass runs
// the context model on everything decoded so far and range-codes the pass's
// symbols in channel-major raster order, flushing the coder per pass.
std::vector<uint8_t> encode_grid(const Tensor<int32_t>& q, const ContextNet<float>& net,
                                 const StepField& steps, const Tensor<float>& aux_deq,
                                 GridCodingStats* stats = nullptr,
                                 const PredictProbe* probe = nullptr);

Tensor<int32_t> decode_grid(const uint8_t* data, size_t size,
                            const ContextNet<float>& net, const StepField& steps,
                            const Tensor<float>& aux_deq, const Shape& grid_shape,
                            size_t* consumed = nullptr,
                            const PredictProbe* probe = nullptr);

// Factorized zero-mean Gaussian coding for network weights and aux latents;
// one learned sigma_w per tensor, one coding pass.
std::vector<uint8_t> encode_weights(const Tensor<int32_t>& q, float sigma_w,
                                    GridCodingStats* stats = nullptr);
Tensor<int32_t> decode_weights(const uint8_t* data, size_t size, const Shape& shape,
                               float sigma_w, size_t* consumed = nullptr);

// Autoregressive reference: strict raster order (t, h, w), one coding step
// per position, causally masked two-layer context evaluated per position.
std::vector<uint8_t> encode_grid_autoregressive(const Tensor<int32_t>& q,
                                                const ContextNet<float>& net,
                                                const StepField& steps,
                                                const Tensor<float>& aux_deq,
                                                GridCodingStats* stats = nullptr);
Tensor<int32_t> decode_grid_autoregressive(const uint8_t* data, size_t size,
                                           const ContextNet<float>& net,
                                           const StepField& steps,
                                           const Tensor<float>& aux_deq,
                                           const Shape& grid_shape,
                                           size_t* consumed = nullptr);

}  // namespace nvrl
