#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "nvrl/schedule.hpp"
#include "nvrl/trainer.hpp"
#include "nvrl/video.hpp"

namespace py = pybind11;
using namespace nvrl;

namespace {

// [T,H,W,3] float array in [0,1] -> internal [T,3,H,W]
VideoTensor video_from_array(py::array_t<float, py::array::c_style | py::array::forcecast> arr) {
  if (arr.ndim() != 4 || arr.shape(3) != 3)
    throw py::value_error("video must have shape [T, H, W, 3]");
  int t = (int)arr.shape(0), h = (int)arr.shape(1), w = (int)arr.shape(2);
  VideoTensor v({t, 3, h, w});
  auto a = arr.unchecked<4>();
  for (int i = 0; i < t; ++i)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) v.at4(i, c, y, x) = a(i, y, x, c);
  return v;
}

py::array_t<float> video_to_array(const VideoTensor& v) {
  int t = v.shape[0], h = v.shape[2], w = v.shape[3];
  py::array_t<float> arr({t, h, w, 3});
  auto a = arr.mutable_unchecked<4>();
  for (int i = 0; i < t; ++i)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) a(i, y, x, c) = v.at4(i, c, y, x);
  return arr;
}

SynthesisConfig config_from_kwargs(int frames, int height, int width, uint64_t seed,
                                   int stages, int channels,
                                   const std::vector<int>& grid_channels, int tstride) {
  SynthesisConfig cfg = canonical_config(frames, height, width, seed);
  if (stages > 0) {
    cfg.num_stages = stages;
    cfg.grid_channels.resize(stages, 0);
  }
  if (channels > 0) cfg.base_channels = channels;
  if (!grid_channels.empty()) {
    cfg.grid_channels = grid_channels;
    cfg.num_stages = (int)grid_channels.size();
  }
  cfg.grid_temporal_stride = tstride;
  cfg.validate();
  return cfg;
}

py::dict point_dict(const RDPoint& p) {
  py::dict d;
  d["lambda"] = p.lambda;
  d["bpp"] = p.bpp;
  d["psnr_db"] = p.psnr_db;
  d["enc_s"] = p.encode_seconds;
  d["dec_s"] = p.decode_seconds;
  d["kmacs_px"] = p.kmacs_per_pixel;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "NVRC-Lite desk-scale neural video codec";

  m.def(
      "encode",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> video, double lam,
         int steps1, int steps2, int batch, uint64_t seed, int stages, int channels,
         std::vector<int> grid_channels, int tstride, bool autoregressive) {
        VideoTensor v = video_from_array(video);
        SynthesisConfig cfg =
            config_from_kwargs(v.shape[0], v.shape[2], v.shape[3], seed, stages, channels,
                               grid_channels, tstride);
        TrainConfig tc;
        tc.lambda = lam;
        tc.stage1_steps = steps1;
        tc.stage2_steps = steps2;
        tc.batch_frames = batch;
        tc.seed = seed;
        if (autoregressive) tc.entropy_mode = EntropyMode::Autoregressive;
        TrainResult r = train_encode(v, cfg, tc);
        py::dict stats = point_dict(r.point);
        stats["quantized_psnr"] = r.quantized_psnr;
        stats["clamp_events"] = r.clamp_events;
        return py::make_tuple(py::bytes((const char*)r.stream.data(), r.stream.size()),
                              stats);
      },
      py::arg("video"), py::arg("lam") = 1000.0, py::arg("steps1") = 2000,
      py::arg("steps2") = 200, py::arg("batch") = 4, py::arg("seed") = 0,
      py::arg("stages") = 0, py::arg("channels") = 0,
      py::arg("grid_channels") = std::vector<int>{}, py::arg("tstride") = 1,
      py::arg("autoregressive") = false,
      "Overfit and serialize a [T,H,W,3] float clip; returns (stream, stats).");

  m.def(
      "decode",
      [](py::bytes stream) {
        std::string s = stream;
        DecodedStream d = decode_stream((const uint8_t*)s.data(), s.size());
        return video_to_array(d.video);
      },
      py::arg("stream"), "Decode a stream to a [T,H,W,3] float array.");

  m.def(
      "evaluate",
      [](py::bytes stream, py::array_t<float, py::array::c_style | py::array::forcecast> video) {
        std::string s = stream;
        VideoTensor v = video_from_array(video);
        return point_dict(evaluate_stream((const uint8_t*)s.data(), s.size(), v));
      },
      py::arg("stream"), py::arg("video"));

  m.def(
      "profile",
      [](int frames, int height, int width, int stages, int channels,
         std::vector<int> grid_channels, int tstride) {
        SynthesisConfig cfg = config_from_kwargs(frames, height, width, 0, stages,
                                                 channels, grid_channels, tstride);
        MacsReport r = count_macs(cfg);
        py::list layers;
        for (const auto& row : r.rows) {
          py::dict d;
          d["layer"] = row.layer;
          d["stage"] = row.stage;
          d["macs"] = row.macs;
          layers.append(d);
        }
        py::dict out;
        out["layers"] = layers;
        out["total_macs"] = r.total;
        out["kmacs_per_pixel"] = r.kmacs_per_pixel;
        return out;
      },
      py::arg("frames") = 8, py::arg("height") = 64, py::arg("width") = 64,
      py::arg("stages") = 0, py::arg("channels") = 0,
      py::arg("grid_channels") = std::vector<int>{}, py::arg("tstride") = 1);

  m.def(
      "build_schedule",
      [](int tg, int hg, int wg) {
        MaskSchedule s = build_schedule(tg, hg, wg);
        py::list steps;
        for (int k = 1; k <= 4; ++k) {
          py::list pos;
          for (const GridPos& p : s.positions(k))
            pos.append(py::make_tuple(p.t, p.h, p.w));
          steps.append(pos);
        }
        return steps;
      },
      py::arg("tg"), py::arg("hg"), py::arg("wg"),
      "Octree coding order: four lists of (t, h, w) positions.");

  m.def(
      "synthetic_video",
      [](int frames, int height, int width) {
        return video_to_array(synthetic_moving_scene(frames, height, width));
      },
      py::arg("frames"), py::arg("height"), py::arg("width"));

  m.def(
      "psnr",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> a,
         py::array_t<float, py::array::c_style | py::array::forcecast> b) {
        return video_psnr(video_from_array(a), video_from_array(b));
      },
      py::arg("a"), py::arg("b"));

  m.attr("__version__") = "0.1.0";
}
