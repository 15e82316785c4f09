#include <chrono>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nvrl/container.hpp"
#include "nvrl/entropy.hpp"
#include "nvrl/trainer.hpp"
#include "nvrl/video.hpp"

namespace {

using namespace nvrl;

constexpr const char* kCsvHeader = "lambda,bpp,psnr_db,enc_s,dec_s,kmacs_px";

void print_point(const RDPoint& p, const char* prefix = nullptr) {
  if (prefix) std::printf("%s,", prefix);
  std::printf("%.6g,%.6g,%.4f,%.3f,%.3f,%.4f\n", p.lambda, p.bpp, p.psnr_db,
              p.encode_seconds, p.decode_seconds, p.kmacs_per_pixel);
}

// "key=value,key=value" with keys: stages, channels, cg (colon separated),
// kernel, stem, tstride.
SynthesisConfig parse_config(const std::string& spec, int frames, int height, int width,
                             uint64_t seed) {
  SynthesisConfig cfg = canonical_config(frames, height, width, seed);
  if (spec.empty() || spec == "canonical") return cfg;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("bad --config item: " + item);
    std::string key = item.substr(0, eq), val = item.substr(eq + 1);
    if (key == "stages") cfg.num_stages = std::stoi(val);
    else if (key == "channels") cfg.base_channels = std::stoi(val);
    else if (key == "kernel") cfg.block_kernel = std::stoi(val);
    else if (key == "stem") cfg.stem_kernel = std::stoi(val);
    else if (key == "tstride") cfg.grid_temporal_stride = std::stoi(val);
    else if (key == "cg") {
      cfg.grid_channels.clear();
      std::stringstream cs(val);
      std::string c;
      while (std::getline(cs, c, ':')) cfg.grid_channels.push_back(std::stoi(c));
    } else {
      throw ConfigError("unknown --config key: " + key);
    }
  }
  cfg.grid_channels.resize(cfg.num_stages, 0);
  cfg.validate();
  return cfg;
}

VideoTensor load_input(const std::string& path, int frames, int height, int width) {
  if (path.size() > 4 && path.substr(path.size() - 4) == ".y4m") {
    VideoTensor v = load_y4m_video(path, frames);
    if (v.shape[0] != frames || v.shape[2] != height || v.shape[3] != width)
      throw DimensionError("Y4M dimensions disagree with the given --frames/--height/--width");
    return v;
  }
  return load_raw_video(path, frames, height, width);
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(f),
                              std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const uint8_t* data, size_t size) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path);
  f.write((const char*)data, size);
  if (!f) throw Error("write failed: " + path);
}

std::vector<double> parse_lambdas(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  if (out.empty()) throw ConfigError("empty lambda list");
  return out;
}

// Entropy-coding wall time (encode+decode) on a synthetic grid, per model.
struct EcBench {
  double octree_s = 0, autoregressive_s = 0;
  int64_t octree_steps = 0, autoregressive_steps = 0;
};

EcBench run_ec_bench(int tg, int hg, int wg) {
  std::mt19937_64 rng(7);
  Tensor<int32_t> q({tg, 1, hg, wg});
  std::normal_distribution<double> dist(0.0, 3.0);
  for (auto& v : q.data) v = (int32_t)std::llround(dist(rng));
  StepField steps = StepField::block_wise({tg, hg, wg}, 1, {16, 16, 16}, 0.05f);
  Tensor<float> aux =
      Tensor<float>::uniform(aux_shape_for_grid(tg, hg, wg), -0.5f, 0.5f, rng);
  std::mt19937_64 rng2(11);
  ContextNet<float> oct_net = build_context_net<float>(octree_ctx_in_channels(1), 1, rng2);
  oct_net.w2 = Tensor<float>::uniform(oct_net.w2.shape, -0.02f, 0.02f, rng2);
  ContextNet<float> ar_net = build_context_net<float>(ar_ctx_in_channels(1), 1, rng2);
  ar_net.w2 = Tensor<float>::uniform(ar_net.w2.shape, -0.02f, 0.02f, rng2);

  EcBench b;
  {
    auto t0 = std::chrono::steady_clock::now();
    auto payload = encode_grid(q, oct_net, steps, aux);
    auto dec = decode_grid(payload.data(), payload.size(), oct_net, steps, aux, q.shape);
    b.octree_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (dec.data != q.data) throw Error("octree round-trip failed in benchmark");
  }
  {
    auto t0 = std::chrono::steady_clock::now();
    auto payload = encode_grid_autoregressive(q, ar_net, steps, aux);
    auto dec = decode_grid_autoregressive(payload.data(), payload.size(), ar_net, steps,
                                          aux, q.shape);
    b.autoregressive_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (dec.data != q.data) throw Error("autoregressive round-trip failed in benchmark");
  }
  MaskSchedule sched = build_schedule(tg, hg, wg);
  b.octree_steps = 4 * num_channel_groups(1);
  b.autoregressive_steps = sched.total_positions();
  return b;
}

int run(int argc, char** argv) {
  CLI::App app{"NVRC-Lite desk-scale neural video codec"};
  app.require_subcommand(1);

  // encode
  auto* enc = app.add_subcommand("encode", "overfit and serialize a clip");
  std::string in_path, out_path, config_spec;
  int width = 0, height = 0, frames = 0;
  double lambda = 1000.0;
  uint64_t seed = 0;
  int steps1 = 2000, steps2 = 200, batch = 4;
  bool verbose = false;
  enc->add_option("--input", in_path, "raw RGB8 or .y4m input")->required();
  enc->add_option("--width", width)->required();
  enc->add_option("--height", height)->required();
  enc->add_option("--frames", frames)->required();
  enc->add_option("--lambda", lambda, "rate-distortion trade-off");
  enc->add_option("--config", config_spec, "model config (canonical or key=value list)");
  enc->add_option("--seed", seed);
  enc->add_option("--steps1", steps1, "stage-1 steps");
  enc->add_option("--steps2", steps2, "stage-2 steps");
  enc->add_option("--batch", batch, "frames per training step");
  enc->add_flag("--verbose", verbose, "emit per-step training records");
  enc->add_option("--out", out_path)->required();

  // decode
  auto* dec = app.add_subcommand("decode", "decode a stream to raw RGB8");
  std::string dec_in, dec_out;
  dec->add_option("--in", dec_in)->required();
  dec->add_option("--out", dec_out)->required();

  // evaluate
  auto* eva = app.add_subcommand("evaluate", "score a stream against the original");
  std::string eva_in, eva_orig;
  int eva_w = 0, eva_h = 0, eva_t = 0;
  eva->add_option("--in", eva_in)->required();
  eva->add_option("--input", eva_orig, "original raw RGB8 or .y4m")->required();
  eva->add_option("--width", eva_w)->required();
  eva->add_option("--height", eva_h)->required();
  eva->add_option("--frames", eva_t)->required();

  // profile
  auto* prof = app.add_subcommand("profile", "per-layer MACs report");
  std::string prof_config;
  int prof_w = 64, prof_h = 64, prof_t = 8;
  prof->add_option("--config", prof_config);
  prof->add_option("--width", prof_w);
  prof->add_option("--height", prof_h);
  prof->add_option("--frames", prof_t);

  // ablate
  auto* abl = app.add_subcommand("ablate", "run one codec variant over a lambda sweep");
  std::string abl_mode = "octree", abl_in, abl_lambdas = "300,3000,30000", abl_config;
  int abl_w = 0, abl_h = 0, abl_t = 0;
  uint64_t abl_seed = 0;
  int abl_s1 = 600, abl_s2 = 50;
  abl->add_option("--mode", abl_mode, "octree | autoregressive | single-scale")->required();
  abl->add_option("--input", abl_in, "raw RGB8 or .y4m input (synthetic clip if omitted)");
  abl->add_option("--width", abl_w)->required();
  abl->add_option("--height", abl_h)->required();
  abl->add_option("--frames", abl_t)->required();
  abl->add_option("--lambdas", abl_lambdas, "comma-separated sweep");
  abl->add_option("--config", abl_config);
  abl->add_option("--seed", abl_seed);
  abl->add_option("--steps1", abl_s1);
  abl->add_option("--steps2", abl_s2);

  CLI11_PARSE(app, argc, argv);

  if (enc->parsed()) {
    VideoTensor video = load_input(in_path, frames, height, width);
    SynthesisConfig cfg = parse_config(config_spec, frames, height, width, seed);
    TrainConfig tc;
    tc.lambda = lambda;
    tc.seed = seed;
    tc.stage1_steps = steps1;
    tc.stage2_steps = steps2;
    tc.batch_frames = batch;
    tc.verbose = verbose;
    TrainResult r = train_encode(video, cfg, tc);
    write_file(out_path, r.stream.data(), r.stream.size());
    if (r.clamp_events > 0)
      std::fprintf(stderr, "warning: %lld quantizer clamp events\n",
                   (long long)r.clamp_events);
    std::printf("%s\n", kCsvHeader);
    print_point(r.point);
    return 0;
  }

  if (dec->parsed()) {
    std::vector<uint8_t> stream = read_file(dec_in);
    DecodedStream d = decode_stream(stream.data(), stream.size());
    std::vector<uint8_t> rgb = video_to_rgb8(d.video);
    write_file(dec_out, rgb.data(), rgb.size());
    return 0;
  }

  if (eva->parsed()) {
    std::vector<uint8_t> stream = read_file(eva_in);
    VideoTensor orig = load_input(eva_orig, eva_t, eva_h, eva_w);
    RDPoint p = evaluate_stream(stream.data(), stream.size(), orig);
    std::printf("%s\n", kCsvHeader);
    print_point(p);
    return 0;
  }

  if (prof->parsed()) {
    SynthesisConfig cfg = parse_config(prof_config, prof_t, prof_h, prof_w, 0);
    MacsReport r = count_macs(cfg);
    std::printf("layer,stage,macs\n");
    for (const auto& row : r.rows)
      std::printf("%s,%d,%lld\n", row.layer.c_str(), row.stage, (long long)row.macs);
    std::printf("total,,%lld\n", (long long)r.total);
    std::printf("kmacs_per_pixel,,%.6f\n", r.kmacs_per_pixel);
    // constant per-stage compute under the channel-halving rule
    double max_rel = 0;
    for (const char* name : {"reduce", "proj", "block_pw1", "block_pw2"}) {
      int64_t first = -1;
      for (const auto& row : r.rows) {
        if (row.layer != name) continue;
        if (first < 0) first = row.macs;
        double rel = std::abs((double)row.macs - (double)first) / (double)first;
        if (rel > max_rel) max_rel = rel;
      }
    }
    std::printf("per_stage_pointwise_max_rel_diff,,%.3g\n", max_rel);
    return 0;
  }

  if (abl->parsed()) {
    VideoTensor video = abl_in.empty()
                            ? synthetic_moving_scene(abl_t, abl_h, abl_w)
                            : load_input(abl_in, abl_t, abl_h, abl_w);
    SynthesisConfig cfg = parse_config(abl_config, abl_t, abl_h, abl_w, abl_seed);
    TrainConfig tc;
    tc.seed = abl_seed;
    tc.stage1_steps = abl_s1;
    tc.stage2_steps = abl_s2;
    if (abl_mode == "single-scale") cfg = single_scale_config(cfg);
    else if (abl_mode == "autoregressive") tc.entropy_mode = EntropyMode::Autoregressive;
    else if (abl_mode != "octree") throw ConfigError("unknown --mode: " + abl_mode);

    std::printf("mode,%s\n", kCsvHeader);
    for (double lam : parse_lambdas(abl_lambdas)) {
      tc.lambda = lam;
      TrainResult r = train_encode(video, cfg, tc);
      print_point(r.point, abl_mode.c_str());
    }
    if (abl_mode != "single-scale") {
      EcBench b = run_ec_bench(16, 64, 64);
      std::printf("# ec_bench_16x64x64: octree_s=%.3f ar_s=%.3f ratio=%.2f "
                  "octree_steps=%lld ar_steps=%lld\n",
                  b.octree_s, b.autoregressive_s, b.autoregressive_s / b.octree_s,
                  (long long)b.octree_steps, (long long)b.autoregressive_steps);
    }
    return 0;
  }

  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const nvrl::StreamError& e) {
    std::fprintf(stderr, "stream error: %s\n", e.what());
    return 3;
  } catch (const nvrl::TrainingDiverged& e) {
    std::fprintf(stderr, "training diverged: %s\n", e.what());
    return 4;
  } catch (const nvrl::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const nvrl::DimensionError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
