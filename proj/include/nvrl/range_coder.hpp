#pragma once

#include <cstdint>
#include <vector>

#include "nvrl/common.hpp"

namespace nvrl {

constexpr uint32_t kCdfTotalBits = 16;
constexpr uint32_t kCdfTotal = 1u << kCdfTotalBits;  // 65536

// Cumulative counts for one symbol alphabet: cum[0] = 0, cum[M] = 2^16,
// strictly increasing so every symbol has nonzero mass.
struct CdfTable {
  int offset = 0;                // value of the first symbol
  std::vector<uint32_t> cum;     // size M+1

  int size() const { return (int)cum.size() - 1; }
  void validate() const;
};

// Byte-oriented carry-counting range encoder (64-bit low, 32-bit range).
// Integer arithmetic only; output is bit-exact across platforms. finish()
// appends exactly 5 bytes.
class RangeEncoder {
 public:
  explicit RangeEncoder(std::vector<uint8_t>& out) : out_(&out) {}

  void encode(uint32_t cum_lo, uint32_t cum_hi) {
    uint64_t r = range_;
    uint64_t lo = (r * cum_lo) >> kCdfTotalBits;
    uint64_t hi = cum_hi == kCdfTotal ? r : (r * cum_hi) >> kCdfTotalBits;
    low_ += lo;
    range_ = (uint32_t)(hi - lo);
    while (range_ < kTop) {
      shift_low();
      range_ <<= 8;
    }
  }

  void finish() {
    for (int i = 0; i < 5; ++i) shift_low();
  }

 private:
  static constexpr uint32_t kTop = 1u << 24;

  void shift_low() {
    if ((uint32_t)low_ < 0xFF000000u || (low_ >> 32) != 0) {
      uint8_t carry = (uint8_t)(low_ >> 32);
      uint8_t b = cache_;
      do {
        out_->push_back((uint8_t)(b + carry));
        b = 0xFF;
      } while (--cache_size_ != 0);
      cache_ = (uint8_t)((uint32_t)low_ >> 24);
    }
    ++cache_size_;
    low_ = (uint64_t)((uint32_t)((uint32_t)low_ << 8));
  }

  uint64_t low_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint8_t cache_ = 0;
  uint64_t cache_size_ = 1;
  std::vector<uint8_t>* out_;
};

// Matching decoder. Consumes exactly as many bytes as the encoder produced;
// reading past the buffer raises StreamError.
class RangeDecoder {
 public:
  RangeDecoder(const uint8_t* data, size_t size) : data_(data), size_(size) {
    read_byte();  // leading byte, always zero
    for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | read_byte();
  }

  // Cumulative-count threshold of the current code in [0, 2^16).
  uint32_t decode_target() const {
    uint64_t v = ((((uint64_t)code_ + 1) << kCdfTotalBits) - 1) / range_;
    return v >= kCdfTotal ? kCdfTotal - 1 : (uint32_t)v;
  }

  void decode_advance(uint32_t cum_lo, uint32_t cum_hi) {
    uint64_t r = range_;
    uint64_t lo = (r * cum_lo) >> kCdfTotalBits;
    uint64_t hi = cum_hi == kCdfTotal ? r : (r * cum_hi) >> kCdfTotalBits;
    code_ -= (uint32_t)lo;
    range_ = (uint32_t)(hi - lo);
    while (range_ < kTop) {
      code_ = (code_ << 8) | read_byte();
      range_ <<= 8;
    }
  }

  size_t consumed() const { return pos_; }

 private:
  static constexpr uint32_t kTop = 1u << 24;

  uint8_t read_byte() {
    if (pos_ >= size_) throw StreamError("range decoder: stream exhausted");
    return data_[pos_++];
  }

  const uint8_t* data_;
  size_t size_;
  size_t pos_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint32_t code_ = 0;
};

// Integer CDF for the unit-bin Gaussian over symbols [-kAlphabet, kAlphabet].
// (mu, sigma) are first snapped to a shared fixed-point representation
// (mu in 1/64 units, sigma to a 64-entry geometric table spanning the clamp
// range [0.05, 256]) so encoder and decoder always build identical tables.
struct QuantizedGaussian {
  int32_t mu64;    // mu in 1/64 units
  int sigma_idx;   // index into the geometric sigma table
};

constexpr double kSigmaMin = 0.05;
constexpr double kSigmaMax = 256.0;
constexpr int kSigmaTableSize = 64;

const double* sigma_table();  // 64 geometric entries in [0.05, 256]

QuantizedGaussian quantize_gaussian(double mu, double sigma);

// Cumulative count at bin edge k (k in [0, 2A+1]) for a quantized Gaussian.
// Monotone with a minimum gap of 1 per bin and an exact total of 2^16.
uint32_t gaussian_cum(const QuantizedGaussian& qg, int k);

// Full table, consistent with gaussian_cum at every edge.
CdfTable build_cdf(double mu, double sigma);

// Generic symbol coding over explicit tables. tables must hold either one
// shared entry or one entry per symbol.
std::vector<uint8_t> encode_symbols(const std::vector<int32_t>& symbols,
                                    const std::vector<CdfTable>& tables);
std::vector<int32_t> decode_symbols(const uint8_t* data, size_t size, size_t count,
                                    const std::vector<CdfTable>& tables);

// Gaussian-parameterized coding of one symbol (used by the grid coder, which
// interleaves prediction with coding).
void encode_gaussian_symbol(RangeEncoder& enc, const QuantizedGaussian& qg, int32_t sym);
int32_t decode_gaussian_symbol(RangeDecoder& dec, const QuantizedGaussian& qg);

// Exact bits the integer CDF assigns to sym: -log2(count / 2^16).
double gaussian_symbol_bits(const QuantizedGaussian& qg, int32_t sym);

}  // namespace nvrl
