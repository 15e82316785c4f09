#include "test_util.hpp"

namespace nvrl::testutil {

namespace {

std::mt19937_64 seeded(uint64_t instance, uint64_t salt) {
  return std::mt19937_64(instance * 0x9E3779B97F4A7C15ULL + salt);
}

int dim(std::mt19937_64& rng, int lo, int hi) {
  return lo + (int)(rng() % (uint64_t)(hi - lo + 1));
}

}  // namespace

std::vector<OpCheck> differentiable_op_checks() {
  std::vector<OpCheck> checks;
  auto add_check = [&](const char* name,
                       std::function<GradcheckResult(uint64_t)> fn) {
    checks.push_back({name, std::move(fn)});
  };

  add_check("add", [](uint64_t i) {
    auto rng = seeded(i, 1);
    Shape s = {dim(rng, 1, 3), dim(rng, 1, 4)};
    return gradcheck({random_tensor(s, rng), random_tensor(s, rng)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       return sum_all(add(v[0], v[1]));
                     });
  });
  add_check("sub", [](uint64_t i) {
    auto rng = seeded(i, 2);
    Shape s = {dim(rng, 1, 3), dim(rng, 1, 4)};
    return gradcheck({random_tensor(s, rng), random_tensor(s, rng)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       return sum_all(mul(sub(v[0], v[1]), sub(v[0], v[1])));
                     });
  });
  add_check("mul", [](uint64_t i) {
    auto rng = seeded(i, 3);
    Shape s = {dim(rng, 2, 4), dim(rng, 1, 4)};
    return gradcheck({random_tensor(s, rng), random_tensor(s, rng)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       return sum_all(mul(v[0], v[1]));
                     });
  });
  add_check("div", [](uint64_t i) {
    auto rng = seeded(i, 4);
    Shape s = {dim(rng, 1, 3), dim(rng, 1, 4)};
    // denominators away from zero
    return gradcheck({random_tensor(s, rng), random_tensor(s, rng, 0.5, 2.0)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       return sum_all(div(v[0], v[1]));
                     });
  });
  add_check("add_const/mul_const", [](uint64_t i) {
    auto rng = seeded(i, 5);
    Shape s = {dim(rng, 1, 4), dim(rng, 1, 4)};
    return gradcheck({random_tensor(s, rng)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       return sum_all(mul_const(add_const(v[0], 0.7), -1.3));
                     });
  });
  add_check("broadcast_scalar", [](uint64_t i) {
    auto rng = seeded(i, 6);
    Shape s = {dim(rng, 1, 3), dim(rng, 2, 5)};
    return gradcheck({random_tensor({1}, rng), random_tensor(s, rng)},
                     [s](Tape<double>&, std::vector<Var<double>>& v) {
                       return sum_all(mul(broadcast_scalar(v[0], s), v[1]));
                     });
  });
  add_check("gelu", [](uint64_t i) {
    auto rng = seeded(i, 7);
    Shape s = {dim(rng, 1, 3), dim(rng, 1, 5)};
    return gradcheck({random_tensor(s, rng, -2.5, 2.5)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       return sum_all(gelu(v[0]));
                     });
  });
  add_check("sigmoid", [](uint64_t i) {
    auto rng = seeded(i, 8);
    Shape s = {dim(rng, 1, 3), dim(rng, 1, 5)};
    return gradcheck({random_tensor(s, rng, -3, 3)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       return sum_all(sigmoid(v[0]));
                     });
  });
  add_check("exp", [](uint64_t i) {
    auto rng = seeded(i, 9);
    Shape s = {dim(rng, 1, 3), dim(rng, 1, 4)};
    return gradcheck({random_tensor(s, rng, -1.5, 1.5)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       return sum_all(exp_op(v[0]));
                     });
  });
  add_check("clamp(interior)", [](uint64_t i) {
    auto rng = seeded(i, 10);
    Shape s = {dim(rng, 1, 3), dim(rng, 1, 4)};
    // keep values away from the clamp edges so the gradient is defined
    return gradcheck({random_tensor(s, rng, -0.8, 0.8)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       return sum_all(mul(clamp_op(v[0], -1.0, 1.0), v[0]));
                     });
  });
  add_check("sum_all", [](uint64_t i) {
    auto rng = seeded(i, 11);
    Shape s = {dim(rng, 1, 4), dim(rng, 1, 4)};
    return gradcheck({random_tensor(s, rng)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       return mul_const(sum_all(v[0]), 2.0);
                     });
  });
  add_check("mse_loss", [](uint64_t i) {
    auto rng = seeded(i, 12);
    Shape s = {dim(rng, 1, 3), dim(rng, 2, 5)};
    return gradcheck({random_tensor(s, rng), random_tensor(s, rng)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       return mse_loss(v[0], v[1]);
                     });
  });
  add_check("matmul", [](uint64_t i) {
    auto rng = seeded(i, 13);
    int m = dim(rng, 1, 3), k = dim(rng, 1, 4), n = dim(rng, 1, 3);
    return gradcheck({random_tensor({m, k}, rng), random_tensor({k, n}, rng)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       return sum_all(mul(matmul(v[0], v[1]), matmul(v[0], v[1])));
                     });
  });
  add_check("affine", [](uint64_t i) {
    auto rng = seeded(i, 14);
    int m = dim(rng, 1, 3), k = dim(rng, 1, 3), n = dim(rng, 1, 3);
    return gradcheck(
        {random_tensor({m, k}, rng), random_tensor({k, n}, rng), random_tensor({n}, rng)},
        [](Tape<double>&, std::vector<Var<double>>& v) {
          return sum_all(gelu(affine(v[0], v[1], v[2])));
        });
  });
  add_check("bias_channel", [](uint64_t i) {
    auto rng = seeded(i, 15);
    Shape s = {dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)};
    return gradcheck({random_tensor(s, rng), random_tensor({s[1]}, rng)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       return sum_all(sigmoid(bias_channel(v[0], v[1])));
                     });
  });
  add_check("concat_channels", [](uint64_t i) {
    auto rng = seeded(i, 16);
    int t = dim(rng, 1, 2), h = dim(rng, 1, 3), w = dim(rng, 1, 3);
    return gradcheck({random_tensor({t, dim(rng, 1, 2), h, w}, rng),
                      random_tensor({t, dim(rng, 1, 2), h, w}, rng)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       auto c = concat_channels(v[0], v[1]);
                       return sum_all(mul(c, c));
                     });
  });
  add_check("slice_channels", [](uint64_t i) {
    auto rng = seeded(i, 17);
    int c = dim(rng, 2, 4);
    Shape s = {dim(rng, 1, 2), c, dim(rng, 1, 3), dim(rng, 1, 3)};
    int start = (int)(rng() % (uint64_t)c);
    int count = 1 + (int)(rng() % (uint64_t)(c - start));
    return gradcheck({random_tensor(s, rng)},
                     [start, count](Tape<double>&, std::vector<Var<double>>& v) {
                       auto sl = slice_channels(v[0], start, count);
                       return sum_all(mul(sl, sl));
                     });
  });
  add_check("slice_kernel_in_channels", [](uint64_t i) {
    auto rng = seeded(i, 18);
    int c = dim(rng, 2, 4);
    Shape s = {dim(rng, 1, 3), c, 3, 3, 3};
    int start = (int)(rng() % (uint64_t)c);
    int count = 1 + (int)(rng() % (uint64_t)(c - start));
    return gradcheck({random_tensor(s, rng)},
                     [start, count](Tape<double>&, std::vector<Var<double>>& v) {
                       auto sl = slice_kernel_in_channels(v[0], start, count);
                       return sum_all(mul(sl, sl));
                     });
  });
  add_check("slice_frames", [](uint64_t i) {
    auto rng = seeded(i, 19);
    int t = dim(rng, 2, 4);
    Shape s = {t, dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3)};
    std::vector<int> idx = {(int)(rng() % (uint64_t)t), (int)(rng() % (uint64_t)t)};
    return gradcheck({random_tensor(s, rng)},
                     [idx](Tape<double>&, std::vector<Var<double>>& v) {
                       auto sl = slice_frames(v[0], idx);
                       return sum_all(mul(sl, sl));
                     });
  });
  add_check("upsample_nearest2x", [](uint64_t i) {
    auto rng = seeded(i, 20);
    Shape s = {dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3)};
    return gradcheck({random_tensor(s, rng)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       auto u = upsample_nearest2x(v[0]);
                       return sum_all(mul(u, u));
                     });
  });
  add_check("upsample_block", [](uint64_t i) {
    auto rng = seeded(i, 21);
    int ft = dim(rng, 1, 3), fh = dim(rng, 1, 3), fw = dim(rng, 1, 3);
    int to = dim(rng, 1, 6), ho = dim(rng, 1, 6), wo = dim(rng, 1, 6);
    auto cd = [](int a, int b) { return (a + b - 1) / b; };
    Shape s = {cd(to, ft), dim(rng, 1, 2), cd(ho, fh), cd(wo, fw)};
    return gradcheck({random_tensor(s, rng)},
                     [=](Tape<double>&, std::vector<Var<double>>& v) {
                       auto u = upsample_block(v[0], ft, fh, fw, to, ho, wo);
                       return sum_all(mul(u, u));
                     });
  });
  add_check("conv2d", [](uint64_t i) {
    auto rng = seeded(i, 22);
    int kk = 1 + 2 * (int)(rng() % 2);  // 1 or 3
    Shape xs = {dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 2, 4), dim(rng, 2, 4)};
    Shape ks = {dim(rng, 1, 2), xs[1], kk, kk};
    return gradcheck({random_tensor(xs, rng), random_tensor(ks, rng)},
                     [kk](Tape<double>&, std::vector<Var<double>>& v) {
                       auto y = conv2d(v[0], v[1], (kk - 1) / 2);
                       return sum_all(mul(y, y));
                     });
  });
  add_check("depthwise_conv2d", [](uint64_t i) {
    auto rng = seeded(i, 23);
    Shape xs = {dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 2, 4)};
    Shape ks = {xs[1], 3, 3};
    return gradcheck({random_tensor(xs, rng), random_tensor(ks, rng)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       auto y = depthwise_conv2d(v[0], v[1], 1);
                       return sum_all(mul(y, y));
                     });
  });
  add_check("conv1d_temporal", [](uint64_t i) {
    auto rng = seeded(i, 24);
    Shape xs = {dim(rng, 2, 4), dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3)};
    Shape ks = {dim(rng, 1, 2), xs[1], 3};
    return gradcheck({random_tensor(xs, rng), random_tensor(ks, rng)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       auto y = conv1d_temporal(v[0], v[1]);
                       return sum_all(mul(y, y));
                     });
  });
  add_check("conv3d", [](uint64_t i) {
    auto rng = seeded(i, 25);
    Shape xs = {dim(rng, 2, 3), dim(rng, 1, 2), dim(rng, 2, 4), dim(rng, 2, 4)};
    Shape ks = {dim(rng, 1, 2), xs[1], 3, 3, 3};
    return gradcheck({random_tensor(xs, rng), random_tensor(ks, rng)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       auto y = conv3d(v[0], v[1]);
                       return sum_all(mul(y, y));
                     });
  });
  add_check("gaussian_rate_bits", [](uint64_t i) {
    auto rng = seeded(i, 26);
    Shape s = {dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3)};
    // probabilities well above the floor and off integer-tie boundaries
    return gradcheck({random_tensor(s, rng, -2, 2), random_tensor(s, rng, -1, 1),
                      random_tensor(s, rng, 0.7, 3.0)},
                     [](Tape<double>&, std::vector<Var<double>>& v) {
                       return gaussian_rate_bits(v[0], v[1], v[2],
                                                 (const TensorD*)nullptr);
                     });
  });
  add_check("gaussian_rate_bits(select)", [](uint64_t i) {
    auto rng = seeded(i, 27);
    Shape s = {1, dim(rng, 1, 2), dim(rng, 2, 3), dim(rng, 2, 3)};
    TensorD sel(s);
    for (auto& v : sel.data) v = (rng() % 2) ? 1.0 : 0.0;
    return gradcheck({random_tensor(s, rng, -2, 2), random_tensor(s, rng, -1, 1),
                      random_tensor(s, rng, 0.7, 3.0)},
                     [sel](Tape<double>&, std::vector<Var<double>>& v) {
                       return gaussian_rate_bits(v[0], v[1], v[2], &sel);
                     });
  });
  return checks;
}

}  // namespace nvrl::testutil
