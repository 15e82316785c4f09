#pragma once

#include <cstdint>
#include <vector>

#include "nvrl/common.hpp"
#include "nvrl/synthesis.hpp"
#include "nvrl/tensor.hpp"

namespace nvrl {

// Record identifiers: (kind, a, b) = role, stage/index, slot.
enum class TensorKind : uint8_t {
  SynthesisWeight = 1,
  ContextWeight = 2,
  AuxLatent = 3,
  Grid = 4,
};

enum class EntropyMode : uint8_t {
  Octree = 0,
  Autoregressive = 1,
};

// One coded tensor section. Quantization metadata is stored as IEEE 754
// half floats: a single (step, sigma_w) pair for factorized tensors, or the
// block-wise step list for grids.
struct TensorRecord {
  uint8_t kind = 0, a = 0, b = 0;
  Shape extents;
  uint8_t qkind = 0;               // 0 = per-tensor, 1 = block-wise steps
  float step = 0.0f;               // qkind 0
  float sigma_w = 0.0f;            // qkind 0
  std::vector<float> steps;        // qkind 1
  std::vector<uint8_t> payload;

  uint32_t id_key() const {
    return ((uint32_t)kind << 16) | ((uint32_t)a << 8) | b;
  }
};

struct StreamSections {
  uint8_t version = 1;
  EntropyMode entropy_mode = EntropyMode::Octree;
  int frames = 0, height = 0, width = 0;
  SynthesisConfig config;
  std::vector<TensorRecord> records;
};

constexpr char kMagic[4] = {'N', 'V', 'R', 'L'};
constexpr uint8_t kStreamVersion = 1;

uint32_t crc32_ieee(const uint8_t* data, size_t size);

std::vector<uint8_t> write_stream(const StreamSections& s);

// Validates magic, CRC and version before parsing; throws StreamError on any
// corruption. Every multi-byte integer is little-endian.
StreamSections read_stream(const uint8_t* data, size_t size);

// Fixed (psi-level) header bytes for a config: magic through record count,
// plus the CRC trailer. Per-tensor record metadata counts toward payload.
size_t fixed_header_bytes(const SynthesisConfig& cfg);

struct BppBreakdown {
  double total = 0, header = 0, payload = 0;
};

BppBreakdown stream_bpp(const SynthesisConfig& cfg, size_t stream_size, int frames,
                        int height, int width);

}  // namespace nvrl
