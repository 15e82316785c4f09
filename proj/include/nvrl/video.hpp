#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nvrl/tensor.hpp"

namespace nvrl {

// Video frames as a float tensor [T, 3, H, W] with values in [0, 1].
using VideoTensor = Tensor<float>;

inline int video_frames(const VideoTensor& v) { return v.shape[0]; }
inline int video_height(const VideoTensor& v) { return v.shape[2]; }
inline int video_width(const VideoTensor& v) { return v.shape[3]; }

// Mean squared error over all RGB samples, accumulated in double.
double video_mse(const VideoTensor& a, const VideoTensor& b);

// PSNR in dB over RGB in [0,1]; capped at 100 dB for zero MSE.
double video_psnr(const VideoTensor& a, const VideoTensor& b);

// The canonical synthetic test clip: a drifting sinusoidal gradient with a
// moving soft-edged disc.
VideoTensor synthetic_moving_scene(int frames, int height, int width);

// Constant gray clip.
VideoTensor constant_video(int frames, int height, int width, float value);

// Raw 8-bit interleaved RGB, frame-major.
VideoTensor video_from_rgb8(const std::vector<uint8_t>& bytes, int frames, int height,
                            int width);
std::vector<uint8_t> video_to_rgb8(const VideoTensor& v);

// File ingestion: raw RGB8 with explicit dims, or Y4M with C444 (planes are
// taken as the three channels; no colorspace conversion).
VideoTensor load_raw_video(const std::string& path, int frames, int height, int width);
VideoTensor load_y4m_video(const std::string& path, int max_frames);

}  // namespace nvrl
