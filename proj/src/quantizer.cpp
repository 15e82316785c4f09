#include "nvrl/quantizer.hpp"

#include <cmath>

#include "nvrl/tape.hpp"

namespace nvrl {

namespace {
int ceil_div(int a, int b) { return (a + b - 1) / b; }
}  // namespace

StepField StepField::per_tensor(float step) {
  StepField f;
  f.granularity = Granularity::PerTensor;
  f.steps = {step};
  f.validate();
  return f;
}

StepField StepField::block_wise(std::array<int, 3> lattice, int channels,
                                std::array<int, 3> block, float init_step) {
  StepField f;
  f.granularity = Granularity::BlockWise;
  f.lattice = lattice;
  f.channels = channels;
  f.block = block;
  for (int i = 0; i < 3; ++i) f.nblocks[i] = ceil_div(lattice[i], block[i]);
  f.steps.assign((size_t)f.nblocks[0] * f.nblocks[1] * f.nblocks[2] * channels,
                 init_step);
  f.validate();
  return f;
}

void StepField::validate() const {
  if (steps.empty()) throw ParamError("step field has no steps");
  for (float s : steps)
    if (!(s > 0.0f)) throw ParamError("quantization step must be positive");
  if (granularity == Granularity::BlockWise) {
    for (int i = 0; i < 3; ++i) {
      if (block[i] < 1 || lattice[i] < 1)
        throw ParamError("step field block/lattice extents must be positive");
      if (nblocks[i] != ceil_div(lattice[i], block[i]))
        throw ParamError("step field block count inconsistent with lattice");
    }
    if ((size_t)nblocks[0] * nblocks[1] * nblocks[2] * channels != steps.size())
      throw ParamError("step count does not cover the tensor exactly once");
  } else if (steps.size() != 1) {
    throw ParamError("per-tensor step field must hold exactly one step");
  }
}

bool StepField::matches(const Shape& s) const {
  if (granularity == Granularity::PerTensor) return true;
  return s.size() == 4 && s[0] == lattice[0] && s[1] == channels &&
         s[2] == lattice[1] && s[3] == lattice[2];
}

QuantResult quantize(const Tensor<float>& x, const StepField& steps) {
  steps.validate();
  if (!steps.matches(x.shape))
    throw ParamError("step field does not match tensor shape " + shape_str(x.shape));
  QuantResult r;
  r.q.shape = x.shape;
  r.q.data.resize(x.data.size());
  if (steps.granularity == StepField::Granularity::PerTensor) {
    double s = steps.steps[0];
    for (size_t i = 0; i < x.data.size(); ++i) {
      bool clamped = false;
      r.q.data[i] = round_symbol((double)x.data[i] / s, kAlphabet, &clamped);
      if (clamped) ++r.clamp_events;
    }
  } else {
    const int T = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    size_t i = 0;
    for (int t = 0; t < T; ++t)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w, ++i) {
            bool clamped = false;
            r.q.data[i] = round_symbol(
                (double)x.data[i] / (double)steps.step_at(t, c, h, w), kAlphabet,
                &clamped);
            if (clamped) ++r.clamp_events;
          }
  }
  return r;
}

Tensor<float> dequantize(const Tensor<int32_t>& q, const StepField& steps) {
  steps.validate();
  if (!steps.matches(q.shape))
    throw ParamError("step field does not match tensor shape " + shape_str(q.shape));
  Tensor<float> x;
  x.shape = q.shape;
  x.data.resize(q.data.size());
  if (steps.granularity == StepField::Granularity::PerTensor) {
    double s = steps.steps[0];
    for (size_t i = 0; i < q.data.size(); ++i) x.data[i] = (float)((double)q.data[i] * s);
  } else {
    const int T = q.shape[0], C = q.shape[1], H = q.shape[2], W = q.shape[3];
    size_t i = 0;
    for (int t = 0; t < T; ++t)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w, ++i)
            x.data[i] = (float)((double)q.data[i] * (double)steps.step_at(t, c, h, w));
  }
  return x;
}

Tensor<float> expand_steps(const StepField& steps, const Shape& target) {
  steps.validate();
  if (!steps.matches(target))
    throw ParamError("step field does not match tensor shape " + shape_str(target));
  Tensor<float> out(target);
  if (steps.granularity == StepField::Granularity::PerTensor) {
    for (auto& v : out.data) v = steps.steps[0];
  } else {
    const int T = target[0], C = target[1], H = target[2], W = target[3];
    size_t i = 0;
    for (int t = 0; t < T; ++t)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w, ++i) out.data[i] = steps.step_at(t, c, h, w);
  }
  return out;
}

}  // namespace nvrl
