#pragma once

#include <bit>
#include <cstdint>
#include <cstring>

// Deterministic scalar math for everything that feeds the entropy coder.
// libm implementations of exp/erf differ across platforms; the coder needs
// encoder and decoder to agree on every probability bit, so these routines
// use plain IEEE arithmetic only. They are inline and branch-light so the
// activation loops vectorize.

namespace nvrl {

// exp(x) with ~1e-13 relative accuracy.
inline double det_exp(double x) {
  if (x > 709.0) x = 709.0;
  if (x < -708.0) return 0.0;  // below the normal range of the 2^n scale
  constexpr double kLog2E = 1.4426950408889634074;
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  double nd = x * kLog2E;
  nd = nd >= 0 ? nd + 0.5 : nd - 0.5;
  int n = (int)nd;
  double r = (x - n * kLn2Hi) - n * kLn2Lo;
  // degree-11 Horner series for e^r, |r| <= 0.3466
  double p = 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  // scale by 2^n via exponent bits; |n| <= 1075 here
  uint64_t bits = (uint64_t)(n + 1023) << 52;
  double scale;
  std::memcpy(&scale, &bits, 8);
  return p * scale;
}

// Standard normal CDF, absolute error < 2e-7 (Abramowitz & Stegun 7.1.26).
inline double normal_cdf(double x) {
  double z = x * 0.70710678118654752440;  // x / sqrt(2)
  double az = z < 0 ? -z : z;
  double t = 1.0 / (1.0 + 0.3275911 * az);
  double poly = t * (0.254829592 +
              t * (-0.284496736 +
              t * (1.421413741 +
              t * (-1.453152027 + t * 1.061405429))));
  double erf_abs = 1.0 - poly * det_exp(-az * az);
  double erf = z < 0 ? -erf_abs : erf_abs;
  return 0.5 * (1.0 + erf);
}

// Standard normal PDF.
inline double normal_pdf(double x) {
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return kInvSqrt2Pi * det_exp(-0.5 * x * x);
}

// Single-precision variants for activation loops on the float tape. Pure
// float IEEE arithmetic, so still deterministic; ~1e-6 relative accuracy.
inline float det_expf(float x) {
  // branch-free: clamps keep the exponent-bit scale in the normal range,
  // and rounding via the 1.5*2^23 bias keeps activation loops vectorizable
  x = x > 88.0f ? 88.0f : x;
  x = x < -87.0f ? -87.0f : x;
  constexpr float kLog2E = 1.442695041f;
  constexpr float kLn2Hi = 0.693359375f;  // short so n*kLn2Hi is exact
  constexpr float kLn2Lo = -2.12194440e-4f;
  constexpr float kRoundBias = 12582912.0f;  // 1.5 * 2^23
  float nd = x * kLog2E + kRoundBias;
  int n = std::bit_cast<int32_t>(nd) - std::bit_cast<int32_t>(kRoundBias);
  float nf = nd - kRoundBias;
  float r = (x - nf * kLn2Hi) - nf * kLn2Lo;
  float p = 1.0f / 720.0f;
  p = p * r + 1.0f / 120.0f;
  p = p * r + 1.0f / 24.0f;
  p = p * r + 1.0f / 6.0f;
  p = p * r + 0.5f;
  p = p * r + 1.0f;
  p = p * r + 1.0f;
  float scale = std::bit_cast<float>((uint32_t)(n + 127) << 23);
  return p * scale;
}

inline float normal_cdf_f(float x) {
  float z = x * 0.70710678f;
  float az = z < 0 ? -z : z;
  float t = 1.0f / (1.0f + 0.3275911f * az);
  float poly = t * (0.254829592f +
               t * (-0.284496736f +
               t * (1.421413741f +
               t * (-1.453152027f + t * 1.061405429f))));
  float erf_abs = 1.0f - poly * det_expf(-az * az);
  float erf = z < 0 ? -erf_abs : erf_abs;
  return 0.5f * (1.0f + erf);
}

inline float normal_pdf_f(float x) {
  constexpr float kInvSqrt2Pi = 0.3989422804f;
  return kInvSqrt2Pi * det_expf(-0.5f * x * x);
}

// IEEE 754 binary16 conversions, round-to-nearest-even.
uint16_t float_to_half(float x);
float half_to_float(uint16_t h);

}  // namespace nvrl
