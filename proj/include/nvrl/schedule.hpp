#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "nvrl/common.hpp"
#include "nvrl/tensor.hpp"

namespace nvrl {

struct GridPos {
  int t, h, w;
  bool operator==(const GridPos&) const = default;
};

// Octree coding order over a (T,H,W) lattice. Each of the four steps codes
// one spatial parity class (h%2, w%2) at both temporal parities, i.e. two
// values per 2x2x2 sub-block per step. The class order is checkerboard
// first: (0,0), (1,1), (1,0), (0,1). The steps partition the lattice and
// depend only on the extents.
struct MaskSchedule {
  int tg = 0, hg = 0, wg = 0;
  static constexpr std::array<std::array<int, 2>, 4> kSpatialClass = {
      {{0, 0}, {1, 1}, {1, 0}, {0, 1}}};

  // Positions of step k (1-based) in raster (t, h, w) order.
  std::vector<GridPos> positions(int step) const;

  int64_t total_positions() const { return (int64_t)tg * hg * wg; }
};

MaskSchedule build_schedule(int tg, int hg, int wg);

// 1.0 where (t,h,w) belongs to a step strictly before `step`, for all C
// channels; shape [T,C,H,W].
template <typename T>
Tensor<T> decoded_position_mask(const MaskSchedule& s, int step, int channels) {
  Tensor<T> m({s.tg, channels, s.hg, s.wg});
  for (int k = 1; k < step; ++k)
    for (const GridPos& p : s.positions(k))
      for (int c = 0; c < channels; ++c) m.at4(p.t, c, p.h, p.w) = T(1);
  return m;
}

}  // namespace nvrl
