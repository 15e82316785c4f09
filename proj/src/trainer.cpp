#include "nvrl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>

#include "nvrl/detmath.hpp"

namespace nvrl {

double rd_loss(double rate_bits, const VideoTensor& recon, const VideoTensor& target,
               double lambda) {
  if (recon.shape != target.shape) throw DimensionError("rd_loss: shape mismatch");
  double pixels = (double)target.shape[0] * target.shape[2] * target.shape[3];
  return rate_bits / pixels + lambda * video_mse(recon, target);
}

SynthesisConfig canonical_config(int frames, int height, int width, uint64_t seed) {
  SynthesisConfig cfg;
  cfg.num_stages = 3;
  while (cfg.num_stages > 1) {
    int div = 1 << (cfg.num_stages - 1);
    if (height % div == 0 && width % div == 0 && height / div >= 4 && width / div >= 4)
      break;
    --cfg.num_stages;
  }
  cfg.base_channels = 32;
  cfg.frames = frames;
  cfg.out_height = height;
  cfg.out_width = width;
  std::vector<int> cg = {4, 2, 1};
  cg.resize(cfg.num_stages);
  cfg.grid_channels = cg;
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

SynthesisConfig single_scale_config(SynthesisConfig cfg) {
  for (size_t n = 1; n < cfg.grid_channels.size(); ++n) cfg.grid_channels[n] = 0;
  cfg.grid_channels[0] *= 2;
  cfg.validate();
  return cfg;
}

namespace {

constexpr double kStepMin = 1e-6;
constexpr double kStepMax = 64.0;
constexpr double kInitGridStep = 1.0 / 32.0;
constexpr double kInitWeightStep = 1.0 / 128.0;
constexpr double kInitLogSigma = 0.6931471805599453;  // log 2
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

float f16_round(double v) { return half_to_float(float_to_half((float)v)); }

// ---------------------------------------------------------------------------
// Canonical tensor enumeration shared by the encoder and the decoder.
// ---------------------------------------------------------------------------

struct RecordSlot {
  TensorKind kind;
  uint8_t a = 0, b = 0;
  Shape shape;                 // in-memory shape
  bool blockwise = false;      // grids: block-wise steps over (T,H,W)
  std::array<int, 3> lattice = {1, 1, 1};
  int channels = 1;
  Tensor<float>* tensor = nullptr;
};

// Allocates model tensors to their configured shapes (decoder side) or
// checks them (encoder side), and lists them in stream order: synthesis
// weights, context weights, aux latents, then grids.
std::vector<RecordSlot> model_slots(const SynthesisConfig& cfg, EntropyMode mode,
                                    RepresentationParams<float>& syn,
                                    std::vector<ContextNet<float>>& ctx,
                                    std::vector<Tensor<float>>& aux,
                                    GridSet<float>& grids) {
  const int N = cfg.num_stages;
  ctx.resize(N);
  aux.resize(N);
  grids.grids.resize(N);
  syn.reduce.resize(N);
  syn.proj.resize(N);
  syn.block_dw.resize(N);
  syn.block_pw1.resize(N);
  syn.block_pw2.resize(N);

  std::vector<RecordSlot> slots;
  auto push = [&](TensorKind kind, uint8_t a, uint8_t b, Shape shape, Tensor<float>* t) {
    slots.push_back({kind, a, b, std::move(shape), false, {1, 1, 1}, 1, t});
  };

  const int ks = cfg.stem_kernel, kb = cfg.block_kernel, cg0 = cfg.grid_channels[0];
  push(TensorKind::SynthesisWeight, 0, 0, {cfg.base_channels, cg0, ks, ks}, &syn.stem2d);
  push(TensorKind::SynthesisWeight, 0, 1, {cfg.base_channels, cg0, ks}, &syn.stem1d);
  for (int n = 1; n < N; ++n) {
    int cn = cfg.stage_channels(n), cp = cfg.stage_channels(n - 1);
    push(TensorKind::SynthesisWeight, (uint8_t)n, 0, {cn, cp, 1, 1}, &syn.reduce[n]);
    if (cfg.grid_channels[n] > 0)
      push(TensorKind::SynthesisWeight, (uint8_t)n, 1, {cn, cfg.grid_channels[n], 1, 1},
           &syn.proj[n]);
    push(TensorKind::SynthesisWeight, (uint8_t)n, 2, {cn, kb, kb}, &syn.block_dw[n]);
    push(TensorKind::SynthesisWeight, (uint8_t)n, 3, {cn, cn, 1, 1}, &syn.block_pw1[n]);
    push(TensorKind::SynthesisWeight, (uint8_t)n, 4, {cn, cn, 1, 1}, &syn.block_pw2[n]);
  }
  int clast = cfg.stage_channels(N - 1);
  push(TensorKind::SynthesisWeight, 0, 2, {3, clast, 1, 1}, &syn.head_w);
  push(TensorKind::SynthesisWeight, 0, 3, {3}, &syn.head_b);

  for (int n = 0; n < N; ++n) {
    int cg = cfg.grid_channels[n];
    if (cg == 0) continue;
    int cin = mode == EntropyMode::Octree ? octree_ctx_in_channels(cg)
                                          : ar_ctx_in_channels(cg);
    push(TensorKind::ContextWeight, (uint8_t)n, 0,
         {kCtxHidden, cin, kCtxKernel, kCtxKernel, kCtxKernel}, &ctx[n].w1);
    push(TensorKind::ContextWeight, (uint8_t)n, 1, {kCtxHidden}, &ctx[n].b1);
    push(TensorKind::ContextWeight, (uint8_t)n, 2,
         {2 * cg, kCtxHidden, kCtxKernel, kCtxKernel, kCtxKernel}, &ctx[n].w2);
    push(TensorKind::ContextWeight, (uint8_t)n, 3, {2 * cg}, &ctx[n].b2);
    auto e = cfg.grid_extents(n);
    push(TensorKind::AuxLatent, (uint8_t)n, 0, aux_shape_for_grid(e[0], e[1], e[2]),
         &aux[n]);
  }
  for (int n = 0; n < N; ++n) {
    int cg = cfg.grid_channels[n];
    if (cg == 0) continue;
    auto e = cfg.grid_extents(n);
    RecordSlot s;
    s.kind = TensorKind::Grid;
    s.a = (uint8_t)n;
    s.shape = {e[0], cg, e[1], e[2]};
    s.blockwise = true;
    s.lattice = {e[0], e[1], e[2]};
    s.channels = cg;
    s.tensor = &grids.grids[n];
    slots.push_back(std::move(s));
  }
  return slots;
}

// ---------------------------------------------------------------------------
// Trainer state
// ---------------------------------------------------------------------------

struct Trainable {
  Tensor<float>* t = nullptr;   // master value
  Tensor<float> m, v;           // Adam moments
  bool grid_lr = false;
  bool steps_param = false;     // log-step tensors train only in stage 1
};

struct CodedEntry {
  RecordSlot slot;
  int value = -1;      // trainable index
  int log_step = -1;   // trainable index
  int log_sigma = -1;  // trainable index, -1 for grids
  StepField frozen;
  bool has_frozen = false;
};

struct PassMasks {
  int step = 0, group = 0;
  Tensor<float> decoded;
  Tensor<float> select;
};

struct Trainer {
  SynthesisConfig cfg;
  TrainConfig tc;
  const VideoTensor* video = nullptr;

  RepresentationParams<float> syn;
  std::vector<ContextNet<float>> ctx;
  std::vector<Tensor<float>> aux;
  GridSet<float> grids;
  std::vector<Tensor<float>> owned;  // log-step / log-sigma tensors

  std::vector<Trainable> trainables;
  std::vector<CodedEntry> coded;
  std::vector<std::vector<PassMasks>> stage_masks;  // per stage (octree mode)
  std::map<int, int> grid_coded_of_stage;           // stage -> coded index

  std::mt19937_64 rng;

  Trainer(const VideoTensor& v, SynthesisConfig c, const TrainConfig& t)
      : cfg(std::move(c)), tc(t), video(&v), rng(t.seed ^ 0x6e76726cULL) {
    cfg.validate();
    tc.validate();
    if (video->shape != Shape{cfg.frames, 3, cfg.out_height, cfg.out_width})
      throw DimensionError("train: video does not match the config dimensions");
    for (float x : video->data)
      if (x < 0.0f || x > 1.0f) throw ContractError("train: video values must be in [0,1]");

    auto built = build_model<float>(cfg);
    std::mt19937_64 ctx_rng(cfg.seed + 0x517cc1b727220a95ULL);
    std::vector<ContextNet<float>> built_ctx(cfg.num_stages);
    for (int n = 0; n < cfg.num_stages; ++n) {
      int cg = cfg.grid_channels[n];
      if (cg == 0) continue;
      int cin = tc.entropy_mode == EntropyMode::Octree ? octree_ctx_in_channels(cg)
                                                       : ar_ctx_in_channels(cg);
      built_ctx[n] = build_context_net<float>(cin, cg, ctx_rng);
    }

    syn = std::move(built.first);
    grids = std::move(built.second);
    ctx = std::move(built_ctx);
    aux.resize(cfg.num_stages);
    for (int n = 0; n < cfg.num_stages; ++n)
      if (cfg.grid_channels[n] > 0) {
        auto e = cfg.grid_extents(n);
        aux[n] = Tensor<float>::zeros(aux_shape_for_grid(e[0], e[1], e[2]));
      }
    auto slots = model_slots(cfg, tc.entropy_mode, syn, ctx, aux, grids);
    for (auto& s : slots)
      if (s.tensor->shape != s.shape)
        throw ConfigError("internal: built tensor disagrees with slot shape");

    owned.reserve(slots.size() * 2);
    for (auto& s : slots) {
      CodedEntry ce;
      ce.slot = s;
      bool is_grid = s.kind == TensorKind::Grid;
      ce.value = add_trainable(s.tensor, is_grid || s.kind == TensorKind::AuxLatent, false);
      if (is_grid) {
        auto nb = StepField::block_wise(s.lattice, s.channels, {16, 16, 16},
                                        (float)kInitGridStep)
                      .nblocks;
        owned.push_back(Tensor<float>({nb[0], s.channels, nb[1], nb[2]},
                                      (float)std::log(kInitGridStep)));
        ce.log_step = add_trainable(&owned.back(), false, true);
        grid_coded_of_stage[s.a] = (int)coded.size();
      } else {
        owned.push_back(Tensor<float>({1}, (float)std::log(kInitWeightStep)));
        ce.log_step = add_trainable(&owned.back(), false, true);
        owned.push_back(Tensor<float>({1}, (float)kInitLogSigma));
        ce.log_sigma = add_trainable(&owned.back(), false, false);
      }
      coded.push_back(std::move(ce));
    }

    if (tc.entropy_mode == EntropyMode::Octree) {
      stage_masks.resize(cfg.num_stages);
      for (int n = 0; n < cfg.num_stages; ++n) {
        int cg = cfg.grid_channels[n];
        if (cg == 0) continue;
        auto e = cfg.grid_extents(n);
        MaskSchedule sched = build_schedule(e[0], e[1], e[2]);
        for (int k = 1; k <= 4; ++k) {
          if (sched.positions(k).empty()) continue;
          for (int g = 0; g < num_channel_groups(cg); ++g) {
            PassMasks pm;
            pm.step = k;
            pm.group = g;
            pm.decoded = decoded_mask<float>(sched, k, g, cg);
            pm.select = select_mask<float>(sched, k, g, cg);
            stage_masks[n].push_back(std::move(pm));
          }
        }
      }
    }
  }

  int add_trainable(Tensor<float>* t, bool grid_lr, bool steps_param) {
    Trainable tr;
    tr.t = t;
    tr.m = Tensor<float>::zeros(t->shape);
    tr.v = Tensor<float>::zeros(t->shape);
    tr.grid_lr = grid_lr;
    tr.steps_param = steps_param;
    trainables.push_back(std::move(tr));
    return (int)trainables.size() - 1;
  }

  std::vector<int> sample_batch() {
    int T = cfg.frames;
    int n = std::min(tc.batch_frames, T);
    std::vector<int> all(T);
    for (int i = 0; i < T; ++i) all[i] = i;
    for (int i = 0; i < n; ++i) {
      int j = i + (int)(rng() % (uint64_t)(T - i));
      std::swap(all[i], all[j]);
    }
    all.resize(n);
    std::sort(all.begin(), all.end());
    return all;
  }

  Tensor<float> video_slice(const std::vector<int>& frames) const {
    Tensor<float> out({(int)frames.size(), 3, cfg.out_height, cfg.out_width});
    int64_t fsz = (int64_t)3 * cfg.out_height * cfg.out_width;
    for (size_t i = 0; i < frames.size(); ++i)
      std::copy_n(video->ptr() + frames[i] * fsz, fsz, out.ptr() + i * fsz);
    return out;
  }

  void freeze_steps() {
    for (auto& ce : coded) {
      const Tensor<float>& ls = *trainables[ce.log_step].t;
      if (ce.slot.blockwise) {
        StepField f = StepField::block_wise(ce.slot.lattice, ce.slot.channels,
                                            {16, 16, 16}, 1.0f);
        // log-steps live as [bt, c, bh, bw]; the field stores [bt][bh][bw][c]
        auto nb = f.nblocks;
        for (int bt = 0; bt < nb[0]; ++bt)
          for (int c = 0; c < ce.slot.channels; ++c)
            for (int bh = 0; bh < nb[1]; ++bh)
              for (int bw = 0; bw < nb[2]; ++bw) {
                double v = det_exp((double)ls.at4(bt, c, bh, bw));
                v = std::min(kStepMax, std::max(kStepMin, v));
                f.steps[(((size_t)bt * nb[1] + bh) * nb[2] + bw) * ce.slot.channels + c] =
                    f16_round(v);
              }
        f.validate();
        ce.frozen = std::move(f);
      } else {
        double v = det_exp((double)ls.data[0]);
        v = std::min(kStepMax, std::max(kStepMin, v));
        ce.frozen = StepField::per_tensor(f16_round(v));
      }
      ce.has_frozen = true;
    }
  }

  struct StepOutcome {
    double loss = 0, mse = 0, rate_bits = 0;
  };

  StepOutcome run_step(int stage, double lr_factor, int adam_t) {
    Tape<float> tape;
    const int n = (int)coded.size();
    std::vector<int> leaf_of(trainables.size(), -1);
    auto leaf = [&](int trainable_idx, bool trainable_now) -> Var<float> {
      int& id = leaf_of[trainable_idx];
      if (id < 0) id = tape.leaf(*trainables[trainable_idx].t, trainable_now);
      return {&tape, id};
    };

    std::vector<Var<float>> sym(n), proxy(n);
    for (int i = 0; i < n; ++i) {
      CodedEntry& ce = coded[i];
      Var<float> value = leaf(ce.value, true);
      Var<float> step_exp;
      if (stage == 1) {
        Var<float> ls = leaf(ce.log_step, true);
        Var<float> small = exp_op(ls);
        if (ce.slot.blockwise)
          step_exp = upsample_block(small, 16, 16, 16, ce.slot.lattice[0],
                                    ce.slot.lattice[1], ce.slot.lattice[2]);
        else
          step_exp = broadcast_scalar(small, value.val().shape);
      } else {
        step_exp = {&tape, tape.constant(expand_steps(ce.frozen, value.val().shape))};
      }
      if (stage == 1) {
        Tensor<float> u(value.val().shape);
        std::uniform_real_distribution<double> dist(-0.5, 0.5);
        for (auto& x : u.data) x = (float)dist(rng);
        Var<float> uc{&tape, tape.constant(std::move(u))};
        sym[i] = add(div(value, step_exp), uc);
        proxy[i] = mul(sym[i], step_exp);
      } else {
        sym[i] = round_sym_ste(value, step_exp, kAlphabet);
        proxy[i] = round_dequant_ste(value, step_exp, kAlphabet);
      }
    }

    // rate: factorized for weights and aux latents
    Var<float> rate{&tape, tape.constant(Tensor<float>({1}, 0.0f))};
    for (int i = 0; i < n; ++i) {
      CodedEntry& ce = coded[i];
      if (ce.slot.kind == TensorKind::Grid) continue;
      Var<float> lsg = leaf(ce.log_sigma, true);
      Var<float> sigma = broadcast_scalar(clamp_op(exp_op(lsg), kSigmaMin, kSigmaMax),
                                          sym[i].val().shape);
      Var<float> mu0{&tape, tape.constant(Tensor<float>::zeros(sym[i].val().shape))};
      rate = add(rate,
                 gaussian_rate_bits(sym[i], mu0, sigma, (const Tensor<float>*)nullptr));
    }

    // rate: context-modelled grids
    for (int s = 0; s < cfg.num_stages; ++s) {
      auto it = grid_coded_of_stage.find(s);
      if (it == grid_coded_of_stage.end()) continue;
      int gi = it->second;
      ContextNetVars<float> netv = ctx_vars(s, proxy);
      auto e = cfg.grid_extents(s);
      Var<float> aux_proxy = proxy[coded_index(TensorKind::AuxLatent, s, 0)];
      Var<float> aux_up = upsample_aux(tape, aux_proxy, e[0], e[1], e[2]);
      if (tc.entropy_mode == EntropyMode::Octree) {
        int cg = cfg.grid_channels[s];
        Var<float> aux_pre = context_aux_pre(tape, netv, aux_up, cg);
        for (const PassMasks& pm : stage_masks[s]) {
          Var<float> mask{&tape, tape.constant(pm.decoded)};
          Var<float> masked = mul(proxy[gi], mask);
          auto field = context_predict(tape, netv, masked, mask, aux_pre);
          rate = add(rate, gaussian_rate_bits(sym[gi], field.mu, field.sigma, &pm.select));
        }
      } else {
        auto field = ar_predict_full(tape, netv, proxy[gi], aux_up);
        rate = add(rate, gaussian_rate_bits(sym[gi], field.mu, field.sigma,
                                            (const Tensor<float>*)nullptr));
      }
    }

    // distortion on a frame batch
    std::vector<int> batch = sample_batch();
    RepresentationVars<float> pv = syn_vars(proxy);
    GridVars<float> gv;
    gv.grids.resize(cfg.num_stages);
    for (int s = 0; s < cfg.num_stages; ++s) {
      auto it = grid_coded_of_stage.find(s);
      if (it != grid_coded_of_stage.end()) gv.grids[s] = proxy[it->second];
    }
    Var<float> recon = synthesize(tape, cfg, pv, gv, batch);
    Var<float> target{&tape, tape.constant(video_slice(batch))};
    Var<float> dist = mse_loss(recon, target);

    double pixels = (double)cfg.frames * cfg.out_height * cfg.out_width;
    Var<float> loss = add(mul_const(rate, 1.0 / pixels), mul_const(dist, tc.lambda));

    StepOutcome out;
    out.rate_bits = (double)rate.val().data[0];
    out.mse = (double)dist.val().data[0];
    out.loss = (double)loss.val().data[0];
    if (!std::isfinite(out.loss))
      throw TrainingDiverged("loss is not finite (rate=" + std::to_string(out.rate_bits) +
                             ", mse=" + std::to_string(out.mse) + ")");

    tape.backward(loss.id);

    // Adam update
    double bc1 = 1.0 - std::pow(kAdamBeta1, adam_t);
    double bc2 = 1.0 - std::pow(kAdamBeta2, adam_t);
    for (size_t ti = 0; ti < trainables.size(); ++ti) {
      if (leaf_of[ti] < 0) continue;
      Trainable& tr = trainables[ti];
      if (stage == 2 && tr.steps_param) continue;
      const Tensor<float>& g = tape.grad(leaf_of[ti]);
      double lr = (tr.grid_lr ? tc.lr_grids : tc.lr_kernels) * lr_factor;
      float* pv_ = tr.t->ptr();
      float* pm = tr.m.ptr();
      float* pvv = tr.v.ptr();
      const float* pg = g.ptr();
      int64_t cnt = tr.t->numel();
      for (int64_t j = 0; j < cnt; ++j) {
        double gj = (double)pg[j];
        double mj = kAdamBeta1 * (double)pm[j] + (1 - kAdamBeta1) * gj;
        double vj = kAdamBeta2 * (double)pvv[j] + (1 - kAdamBeta2) * gj * gj;
        pm[j] = (float)mj;
        pvv[j] = (float)vj;
        double upd = (mj / bc1) / (std::sqrt(vj / bc2) + kAdamEps);
        pv_[j] = (float)((double)pv_[j] - lr * upd);
      }
    }
    return out;
  }

  int coded_index(TensorKind kind, int a, int b) const {
    for (size_t i = 0; i < coded.size(); ++i)
      if (coded[i].slot.kind == kind && coded[i].slot.a == a && coded[i].slot.b == b)
        return (int)i;
    throw ContractError("internal: coded tensor not found");
  }

  ContextNetVars<float> ctx_vars(int stage, const std::vector<Var<float>>& proxy) {
    return {proxy[coded_index(TensorKind::ContextWeight, stage, 0)],
            proxy[coded_index(TensorKind::ContextWeight, stage, 1)],
            proxy[coded_index(TensorKind::ContextWeight, stage, 2)],
            proxy[coded_index(TensorKind::ContextWeight, stage, 3)]};
  }

  RepresentationVars<float> syn_vars(const std::vector<Var<float>>& proxy) {
    RepresentationVars<float> v;
    const int N = cfg.num_stages;
    v.stem2d = proxy[coded_index(TensorKind::SynthesisWeight, 0, 0)];
    v.stem1d = proxy[coded_index(TensorKind::SynthesisWeight, 0, 1)];
    v.reduce.resize(N);
    v.proj.resize(N);
    v.block_dw.resize(N);
    v.block_pw1.resize(N);
    v.block_pw2.resize(N);
    for (int s = 1; s < N; ++s) {
      v.reduce[s] = proxy[coded_index(TensorKind::SynthesisWeight, s, 0)];
      if (cfg.grid_channels[s] > 0)
        v.proj[s] = proxy[coded_index(TensorKind::SynthesisWeight, s, 1)];
      v.block_dw[s] = proxy[coded_index(TensorKind::SynthesisWeight, s, 2)];
      v.block_pw1[s] = proxy[coded_index(TensorKind::SynthesisWeight, s, 3)];
      v.block_pw2[s] = proxy[coded_index(TensorKind::SynthesisWeight, s, 4)];
    }
    v.head_w = proxy[coded_index(TensorKind::SynthesisWeight, 0, 2)];
    v.head_b = proxy[coded_index(TensorKind::SynthesisWeight, 0, 3)];
    return v;
  }
};

}  // namespace

TrainResult train_encode(const VideoTensor& video, SynthesisConfig cfg,
                         const TrainConfig& tc) {
  auto t_start = std::chrono::steady_clock::now();
  Trainer tr(video, std::move(cfg), tc);
  TrainResult result;

  auto emit = [&](int step, int stage, const Trainer::StepOutcome& o) {
    double pixels = (double)tr.cfg.frames * tr.cfg.out_height * tr.cfg.out_width;
    StepRecord rec{step, stage, o.loss, o.mse, o.rate_bits / pixels};
    if (tc.verbose)
      std::printf("%d,%d,%.8g,%.8g,%.8g\n", rec.step, rec.stage, rec.loss, rec.mse,
                  rec.rate_bpp);
    result.log.push_back(rec);
  };

  constexpr double kPi = 3.14159265358979323846;
  int adam_t = 0;
  for (int i = 0; i < tc.stage1_steps; ++i) {
    double f = 0.1 + 0.9 * 0.5 * (1.0 + std::cos(kPi * (double)i / tc.stage1_steps));
    auto o = tr.run_step(1, f, ++adam_t);
    emit(i, 1, o);
  }
  tr.freeze_steps();
  for (int i = 0; i < tc.stage2_steps; ++i) {
    auto o = tr.run_step(2, 0.05, ++adam_t);
    emit(tc.stage1_steps + i, 2, o);
  }

  // hard quantization + serialization
  StreamSections sec;
  sec.entropy_mode = tc.entropy_mode;
  sec.frames = tr.cfg.frames;
  sec.height = tr.cfg.out_height;
  sec.width = tr.cfg.out_width;
  sec.config = tr.cfg;

  // final dequantized model (what the decoder will reconstruct)
  RepresentationParams<float> fsyn;
  std::vector<ContextNet<float>> fctx;
  std::vector<Tensor<float>> faux;
  GridSet<float> fgrids;
  auto fslots = model_slots(tr.cfg, tc.entropy_mode, fsyn, fctx, faux, fgrids);

  for (size_t i = 0; i < tr.coded.size(); ++i) {
    CodedEntry& ce = tr.coded[i];
    QuantResult qr = quantize(*tr.trainables[ce.value].t, ce.frozen);
    result.clamp_events += qr.clamp_events;
    Tensor<float> deq = dequantize(qr.q, ce.frozen);

    TensorRecord rec;
    rec.kind = (uint8_t)ce.slot.kind;
    rec.a = ce.slot.a;
    rec.b = ce.slot.b;
    if (ce.slot.kind == TensorKind::Grid) {
      // extents stored as (Tg, Hg, Wg, Cg)
      rec.extents = {ce.slot.shape[0], ce.slot.shape[2], ce.slot.shape[3],
                     ce.slot.shape[1]};
      rec.qkind = 1;
      rec.steps = ce.frozen.steps;
      const ContextNet<float>& net = fctx[ce.slot.a];
      const Tensor<float>& aux_deq = faux[ce.slot.a];
      if (tc.entropy_mode == EntropyMode::Octree)
        rec.payload = encode_grid(qr.q, net, ce.frozen, aux_deq);
      else
        rec.payload = encode_grid_autoregressive(qr.q, net, ce.frozen, aux_deq);
    } else {
      rec.extents = ce.slot.shape;
      rec.qkind = 0;
      rec.step = ce.frozen.steps[0];
      double sw = det_exp((double)tr.trainables[ce.log_sigma].t->data[0]);
      sw = std::min(kSigmaMax, std::max(kSigmaMin, sw));
      rec.sigma_w = f16_round(sw);
      rec.payload = encode_weights(qr.q, rec.sigma_w);
    }
    sec.records.push_back(std::move(rec));
    *fslots[i].tensor = std::move(deq);
  }
  result.stream = write_stream(sec);

  std::vector<int> all_frames(tr.cfg.frames);
  for (int i = 0; i < tr.cfg.frames; ++i) all_frames[i] = i;
  VideoTensor recon = synthesize_plain(tr.cfg, fsyn, fgrids, all_frames);
  result.quantized_psnr = video_psnr(recon, video);

  auto t_encoded = std::chrono::steady_clock::now();

  // closure check: decoding our own stream must reproduce the reported quality
  DecodedStream dec = decode_stream(result.stream.data(), result.stream.size());
  auto t_decoded = std::chrono::steady_clock::now();
  double dec_psnr = video_psnr(dec.video, video);
  if (std::abs(dec_psnr - result.quantized_psnr) > 0.01)
    throw Error("encode/decode closure violated: " + std::to_string(result.quantized_psnr) +
                " vs " + std::to_string(dec_psnr) + " dB");

  double pixels = (double)tr.cfg.frames * tr.cfg.out_height * tr.cfg.out_width;
  result.point.lambda = tc.lambda;
  result.point.bpp = 8.0 * (double)result.stream.size() / pixels;
  result.point.psnr_db = result.quantized_psnr;
  result.point.encode_seconds =
      std::chrono::duration<double>(t_encoded - t_start).count();
  result.point.decode_seconds =
      std::chrono::duration<double>(t_decoded - t_encoded).count();
  result.point.kmacs_per_pixel = count_macs(tr.cfg).kmacs_per_pixel;
  return result;
}

DecodedStream decode_stream(const uint8_t* data, size_t size) {
  StreamSections sec = read_stream(data, size);
  DecodedStream out;
  out.config = sec.config;
  out.entropy_mode = sec.entropy_mode;

  RepresentationParams<float> syn;
  std::vector<ContextNet<float>> ctx;
  std::vector<Tensor<float>> aux;
  GridSet<float> grids;
  auto slots = model_slots(sec.config, sec.entropy_mode, syn, ctx, aux, grids);
  if (slots.size() != sec.records.size())
    throw StreamError("stream record count does not match the config");

  std::map<uint32_t, const TensorRecord*> by_id;
  for (const auto& r : sec.records) by_id[r.id_key()] = &r;

  // weights and aux latents first; grids afterwards need the decoded nets
  for (const RecordSlot& s : slots) {
    uint32_t key = ((uint32_t)s.kind << 16) | ((uint32_t)s.a << 8) | s.b;
    auto it = by_id.find(key);
    if (it == by_id.end()) throw StreamError("missing tensor record");
    const TensorRecord& rec = *it->second;
    if (s.blockwise) continue;  // second pass
    if (rec.qkind != 0 || rec.extents != s.shape)
      throw StreamError("tensor record does not match the config");
    if (!(rec.step > 0) || !(rec.sigma_w > 0))
      throw StreamError("invalid quantization parameters in record");
    size_t consumed = 0;
    Tensor<int32_t> q = decode_weights(rec.payload.data(), rec.payload.size(), s.shape,
                                       rec.sigma_w, &consumed);
    if (consumed != rec.payload.size()) throw StreamError("record payload length mismatch");
    *s.tensor = dequantize(q, StepField::per_tensor(rec.step));
  }
  for (const RecordSlot& s : slots) {
    if (!s.blockwise) continue;
    uint32_t key = ((uint32_t)s.kind << 16) | ((uint32_t)s.a << 8) | s.b;
    const TensorRecord& rec = *by_id.at(key);
    Shape spec_extents = {s.shape[0], s.shape[2], s.shape[3], s.shape[1]};
    if (rec.qkind != 1 || rec.extents != spec_extents)
      throw StreamError("grid record does not match the config");
    StepField f = StepField::block_wise(s.lattice, s.channels, {16, 16, 16}, 1.0f);
    if (rec.steps.size() != f.steps.size())
      throw StreamError("grid record step count mismatch");
    for (float st : rec.steps)
      if (!(st > 0)) throw StreamError("invalid grid step in record");
    f.steps = rec.steps;
    size_t consumed = 0;
    Tensor<int32_t> q;
    if (sec.entropy_mode == EntropyMode::Octree)
      q = decode_grid(rec.payload.data(), rec.payload.size(), ctx[s.a], f, aux[s.a],
                      s.shape, &consumed);
    else
      q = decode_grid_autoregressive(rec.payload.data(), rec.payload.size(), ctx[s.a], f,
                                     aux[s.a], s.shape, &consumed);
    if (consumed != rec.payload.size()) throw StreamError("grid payload length mismatch");
    *s.tensor = dequantize(q, f);
  }

  std::vector<int> all_frames(sec.config.frames);
  for (int i = 0; i < sec.config.frames; ++i) all_frames[i] = i;
  out.video = synthesize_plain(sec.config, syn, grids, all_frames);
  return out;
}

RDPoint evaluate_stream(const uint8_t* data, size_t size, const VideoTensor& original) {
  auto t0 = std::chrono::steady_clock::now();
  DecodedStream dec = decode_stream(data, size);
  auto t1 = std::chrono::steady_clock::now();
  if (dec.video.shape != original.shape)
    throw DimensionError("evaluate: stream dimensions do not match the original");
  RDPoint p;
  p.bpp = 8.0 * (double)size /
          ((double)original.shape[0] * original.shape[2] * original.shape[3]);
  p.psnr_db = video_psnr(dec.video, original);
  p.decode_seconds = std::chrono::duration<double>(t1 - t0).count();
  p.kmacs_per_pixel = count_macs(dec.config).kmacs_per_pixel;
  return p;
}

}  // namespace nvrl
