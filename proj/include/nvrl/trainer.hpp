#pragma once

#include <cstdint>
#include <vector>

#include "nvrl/container.hpp"
#include "nvrl/context_model.hpp"
#include "nvrl/entropy.hpp"
#include "nvrl/synthesis.hpp"
#include "nvrl/video.hpp"

namespace nvrl {

struct TrainConfig {
  double lambda = 1000.0;
  int stage1_steps = 2000;
  int stage2_steps = 200;   // 12:1 split mirrors the two-stage protocol
  int batch_frames = 4;
  double lr_grids = 1e-2;
  double lr_kernels = 1e-3;
  uint64_t seed = 0;
  bool verbose = false;
  EntropyMode entropy_mode = EntropyMode::Octree;

  void validate() const {
    if (lambda <= 0) throw ConfigError("lambda must be positive");
    if (stage1_steps < 1 || stage2_steps < 0) throw ConfigError("bad step budget");
    if (batch_frames < 1) throw ConfigError("batch_frames must be >= 1");
  }
};

struct StepRecord {
  int step = 0;
  int stage = 1;
  double loss = 0, mse = 0, rate_bpp = 0;
};

struct RDPoint {
  double lambda = 0;
  double bpp = 0;
  double psnr_db = 0;
  double encode_seconds = 0;
  double decode_seconds = 0;
  double kmacs_per_pixel = 0;
};

struct TrainResult {
  std::vector<uint8_t> stream;
  std::vector<StepRecord> log;
  RDPoint point;
  double quantized_psnr = 0;  // from the coded model, verified against decode
  int64_t clamp_events = 0;
};

// L = R_bpp + lambda * MSE, with R_bpp = rate_bits / (T*H*W).
double rd_loss(double rate_bits, const VideoTensor& recon, const VideoTensor& target,
               double lambda);

// Two-stage rate-distortion overfitting of one clip, followed by hard
// quantization and serialization. Stage 1 trains with additive-noise
// proxies and learned step sizes; stage 2 freezes the (half-rounded) steps
// and switches to straight-through quantization. Deterministic per seed.
TrainResult train_encode(const VideoTensor& video, SynthesisConfig cfg,
                         const TrainConfig& tc);

struct DecodedStream {
  SynthesisConfig config;
  EntropyMode entropy_mode = EntropyMode::Octree;
  VideoTensor video;
};

DecodedStream decode_stream(const uint8_t* data, size_t size);

// Decode a stream and score it against the original clip.
RDPoint evaluate_stream(const uint8_t* data, size_t size, const VideoTensor& original);

// The desk-scale default model.
SynthesisConfig canonical_config(int frames, int height, int width, uint64_t seed);

// Ablation variant with grid features only at the first stage.
SynthesisConfig single_scale_config(SynthesisConfig cfg);

}  // namespace nvrl
