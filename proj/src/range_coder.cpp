#include "nvrl/range_coder.hpp"

#include <cmath>

#include "nvrl/detmath.hpp"
#include "nvrl/quantizer.hpp"

namespace nvrl {

void CdfTable::validate() const {
  if (cum.size() < 2) throw ParamError("cdf table needs at least one symbol");
  if (cum.front() != 0 || cum.back() != kCdfTotal)
    throw ParamError("cdf table must span [0, 2^16]");
  for (size_t i = 1; i < cum.size(); ++i)
    if (cum[i] <= cum[i - 1]) throw ParamError("cdf table must be strictly increasing");
}

const double* sigma_table() {
  static const auto table = [] {
    std::array<double, kSigmaTableSize> t{};
    // log(kSigmaMax / kSigmaMin) = log(5120)
    constexpr double kLogSpan = 8.5409498628902524;
    for (int i = 0; i < kSigmaTableSize; ++i)
      t[i] = kSigmaMin * det_exp(kLogSpan * i / (kSigmaTableSize - 1));
    return t;
  }();
  return table.data();
}

QuantizedGaussian quantize_gaussian(double mu, double sigma) {
  if (mu > kAlphabet) mu = kAlphabet;
  if (mu < -kAlphabet) mu = -kAlphabet;
  QuantizedGaussian qg;
  qg.mu64 = (int32_t)std::llround(mu * 64.0);
  // nearest table entry in log scale, found by comparing against geometric
  // midpoints; plain comparisons keep this platform-deterministic
  const double* st = sigma_table();
  int lo = 0, hi = kSigmaTableSize - 1;
  while (lo < hi) {
    int mid = (lo + hi) / 2;
    double boundary = st[mid] * std::sqrt(st[mid + 1] / st[mid]);
    if (sigma > boundary)
      lo = mid + 1;
    else
      hi = mid;
  }
  qg.sigma_idx = lo;
  return qg;
}

namespace {
constexpr int kNumSymbols = 2 * kAlphabet + 1;                 // 511
constexpr uint32_t kCdfSpread = kCdfTotal - (uint32_t)kNumSymbols;  // 65025
}  // namespace

uint32_t gaussian_cum(const QuantizedGaussian& qg, int k) {
  if (k <= 0) return 0;
  if (k >= kNumSymbols) return kCdfTotal;
  double sigma = sigma_table()[qg.sigma_idx];
  double edge = (double)(-kAlphabet) - 0.5 + (double)k;
  double z = (edge - (double)qg.mu64 / 64.0) / sigma;
  double f = normal_cdf(z);
  uint32_t base = (uint32_t)(f * (double)kCdfSpread);
  if (base > kCdfSpread) base = kCdfSpread;
  return base + (uint32_t)k;
}

CdfTable build_cdf(double mu, double sigma) {
  QuantizedGaussian qg = quantize_gaussian(mu, sigma);
  CdfTable t;
  t.offset = -kAlphabet;
  t.cum.resize(kNumSymbols + 1);
  for (int k = 0; k <= kNumSymbols; ++k) t.cum[k] = gaussian_cum(qg, k);
  return t;
}

std::vector<uint8_t> encode_symbols(const std::vector<int32_t>& symbols,
                                    const std::vector<CdfTable>& tables) {
  if (tables.empty() || (tables.size() != 1 && tables.size() != symbols.size()))
    throw ContractError("encode_symbols: need one table or one per symbol");
  std::vector<uint8_t> out;
  RangeEncoder enc(out);
  for (size_t i = 0; i < symbols.size(); ++i) {
    const CdfTable& t = tables.size() == 1 ? tables[0] : tables[i];
    int idx = symbols[i] - t.offset;
    if (idx < 0 || idx >= t.size())
      throw ContractError("encode_symbols: symbol outside table alphabet");
    enc.encode(t.cum[idx], t.cum[idx + 1]);
  }
  enc.finish();
  return out;
}

std::vector<int32_t> decode_symbols(const uint8_t* data, size_t size, size_t count,
                                    const std::vector<CdfTable>& tables) {
  if (tables.empty() || (tables.size() != 1 && tables.size() != count))
    throw ContractError("decode_symbols: need one table or one per symbol");
  std::vector<int32_t> out(count);
  RangeDecoder dec(data, size);
  for (size_t i = 0; i < count; ++i) {
    const CdfTable& t = tables.size() == 1 ? tables[0] : tables[i];
    uint32_t v = dec.decode_target();
    // binary search: largest k with cum[k] <= v
    int lo = 0, hi = t.size();
    while (hi - lo > 1) {
      int mid = (lo + hi) / 2;
      if (t.cum[mid] <= v)
        lo = mid;
      else
        hi = mid;
    }
    dec.decode_advance(t.cum[lo], t.cum[lo + 1]);
    out[i] = t.offset + lo;
  }
  return out;
}

void encode_gaussian_symbol(RangeEncoder& enc, const QuantizedGaussian& qg, int32_t sym) {
  int k = sym + kAlphabet;
  if (k < 0 || k >= kNumSymbols)
    throw ContractError("encode: symbol outside the alphabet");
  enc.encode(gaussian_cum(qg, k), gaussian_cum(qg, k + 1));
}

int32_t decode_gaussian_symbol(RangeDecoder& dec, const QuantizedGaussian& qg) {
  uint32_t v = dec.decode_target();
  int lo = 0, hi = kNumSymbols;
  while (hi - lo > 1) {
    int mid = (lo + hi) / 2;
    if (gaussian_cum(qg, mid) <= v)
      lo = mid;
    else
      hi = mid;
  }
  dec.decode_advance(gaussian_cum(qg, lo), gaussian_cum(qg, lo + 1));
  return lo - kAlphabet;
}

double gaussian_symbol_bits(const QuantizedGaussian& qg, int32_t sym) {
  int k = sym + kAlphabet;
  if (k < 0 || k >= kNumSymbols)
    throw ContractError("symbol outside the alphabet");
  double count = (double)(gaussian_cum(qg, k + 1) - gaussian_cum(qg, k));
  return -std::log2(count / (double)kCdfTotal);
}

}  // namespace nvrl
