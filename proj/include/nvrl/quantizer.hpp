#pragma once

#include <array>
#include <cstdint>

#include "nvrl/common.hpp"
#include "nvrl/tensor.hpp"

namespace nvrl {

// Symbols live in [-kAlphabet, kAlphabet].
constexpr int kAlphabet = 255;

// Uniform quantization step sizes, one per (block, channel). Grids use
// 16^3 blocks over (T,H,W); network weights use a single whole-tensor step.
struct StepField {
  enum class Granularity { PerTensor, BlockWise };

  Granularity granularity = Granularity::PerTensor;
  std::array<int, 3> block = {16, 16, 16};    // (T,H,W) block extents
  std::array<int, 3> lattice = {1, 1, 1};     // target (T,H,W)
  int channels = 1;
  std::array<int, 3> nblocks = {1, 1, 1};
  std::vector<float> steps;  // [bt][bh][bw][c] for BlockWise, single for PerTensor

  static StepField per_tensor(float step);
  static StepField block_wise(std::array<int, 3> lattice, int channels,
                              std::array<int, 3> block, float init_step);

  float step_at(int t, int c, int h, int w) const {
    if (granularity == Granularity::PerTensor) return steps[0];
    int bt = t / block[0], bh = h / block[1], bw = w / block[2];
    return steps[(((size_t)bt * nblocks[1] + bh) * nblocks[2] + bw) * channels + c];
  }

  void validate() const;

  // Matches a [T,C,H,W] tensor shape?
  bool matches(const Shape& s) const;
};

struct QuantResult {
  Tensor<int32_t> q;
  int64_t clamp_events = 0;
};

// q = round(x / step), half away from zero, clamped to the alphabet.
// PerTensor fields accept any tensor rank; BlockWise fields require a
// [T,C,H,W] tensor matching the field's lattice and channels.
QuantResult quantize(const Tensor<float>& x, const StepField& steps);

// x_hat = q * step.
Tensor<float> dequantize(const Tensor<int32_t>& q, const StepField& steps);

// Per-position step values as a tensor shaped like the target.
Tensor<float> expand_steps(const StepField& steps, const Shape& target);

}  // namespace nvrl
