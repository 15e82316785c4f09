#include "nvrl/video.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "nvrl/common.hpp"

namespace nvrl {

double video_mse(const VideoTensor& a, const VideoTensor& b) {
  if (a.shape != b.shape) throw DimensionError("video_mse: shape mismatch");
  double acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = (double)a.data[i] - (double)b.data[i];
    acc += d * d;
  }
  return acc / (double)a.numel();
}

double video_psnr(const VideoTensor& a, const VideoTensor& b) {
  double mse = video_mse(a, b);
  if (mse <= 0) return 100.0;
  double psnr = -10.0 * std::log10(mse);
  return psnr > 100.0 ? 100.0 : psnr;
}

VideoTensor synthetic_moving_scene(int frames, int height, int width) {
  VideoTensor v({frames, 3, height, width});
  const double pi2 = 6.28318530717958647692;
  for (int t = 0; t < frames; ++t) {
    // disc drifts along the diagonal
    double cx = width * (0.25 + 0.5 * t / std::max(1, frames - 1));
    double cy = height * (0.3 + 0.4 * t / std::max(1, frames - 1));
    double radius = 0.16 * std::min(width, height);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        double r = 0.5 + 0.35 * std::sin(pi2 * (x + 3.0 * t) / width);
        double g = 0.5 + 0.35 * std::sin(pi2 * (y + 2.0 * t) / height + 1.0);
        double b = 0.5 + 0.25 * std::sin(pi2 * (x + y - 2.0 * t) / (width + height) + 2.0);
        double d = std::sqrt((x - cx) * (x - cx) + (y - cy) * (y - cy));
        // soft edge, ~1.5px wide
        double m = 1.0 / (1.0 + std::exp((d - radius) / 0.75));
        double cr = r * (1 - m) + 0.92 * m;
        double cg = g * (1 - m) + 0.25 * m;
        double cb = b * (1 - m) + 0.18 * m;
        v.at4(t, 0, y, x) = (float)cr;
        v.at4(t, 1, y, x) = (float)cg;
        v.at4(t, 2, y, x) = (float)cb;
      }
  }
  return v;
}

VideoTensor constant_video(int frames, int height, int width, float value) {
  return VideoTensor({frames, 3, height, width}, value);
}

VideoTensor video_from_rgb8(const std::vector<uint8_t>& bytes, int frames, int height,
                            int width) {
  int64_t expect = (int64_t)frames * height * width * 3;
  if ((int64_t)bytes.size() != expect)
    throw DimensionError("raw video size does not match the given dimensions");
  VideoTensor v({frames, 3, height, width});
  int64_t i = 0;
  for (int t = 0; t < frames; ++t)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        for (int c = 0; c < 3; ++c) v.at4(t, c, y, x) = bytes[i++] / 255.0f;
  return v;
}

std::vector<uint8_t> video_to_rgb8(const VideoTensor& v) {
  const int T = v.shape[0], H = v.shape[2], W = v.shape[3];
  std::vector<uint8_t> out((size_t)T * H * W * 3);
  size_t i = 0;
  for (int t = 0; t < T; ++t)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c) {
          double s = std::round(255.0 * (double)v.at4(t, c, y, x));
          out[i++] = (uint8_t)(s < 0 ? 0 : (s > 255 ? 255 : s));
        }
  return out;
}

VideoTensor load_raw_video(const std::string& path, int frames, int height, int width) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open input file: " + path);
  f.seekg(0, std::ios::end);
  int64_t size = f.tellg();
  f.seekg(0);
  int64_t expect = (int64_t)frames * height * width * 3;
  if (size < expect)
    throw DimensionError("input file smaller than frames*height*width*3");
  std::vector<uint8_t> bytes(expect);
  f.read((char*)bytes.data(), expect);
  return video_from_rgb8(bytes, frames, height, width);
}

VideoTensor load_y4m_video(const std::string& path, int max_frames) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open input file: " + path);
  std::string header;
  std::getline(f, header);
  if (header.rfind("YUV4MPEG2", 0) != 0) throw StreamError("not a Y4M file");
  int w = 0, h = 0;
  bool c444 = false;
  std::istringstream hs(header);
  std::string tok;
  while (hs >> tok) {
    if (tok[0] == 'W') w = std::stoi(tok.substr(1));
    else if (tok[0] == 'H') h = std::stoi(tok.substr(1));
    else if (tok[0] == 'C') c444 = tok.substr(1, 3) == "444";
  }
  if (w <= 0 || h <= 0) throw StreamError("Y4M header missing dimensions");
  if (!c444) throw StreamError("only Y4M C444 is supported");
  std::vector<std::vector<uint8_t>> frames;
  std::string frame_hdr;
  while ((int)frames.size() < max_frames && std::getline(f, frame_hdr)) {
    if (frame_hdr.rfind("FRAME", 0) != 0) throw StreamError("bad Y4M frame marker");
    std::vector<uint8_t> planes((size_t)3 * w * h);
    f.read((char*)planes.data(), planes.size());
    if (f.gcount() != (std::streamsize)planes.size())
      throw StreamError("truncated Y4M frame");
    frames.push_back(std::move(planes));
  }
  if (frames.empty()) throw StreamError("Y4M file contains no frames");
  VideoTensor v({(int)frames.size(), 3, h, w});
  for (size_t t = 0; t < frames.size(); ++t)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          v.at4((int)t, c, y, x) = frames[t][((size_t)c * h + y) * w + x] / 255.0f;
  return v;
}

}  // namespace nvrl
