#include "nvrl/schedule.hpp"

namespace nvrl {

MaskSchedule build_schedule(int tg, int hg, int wg) {
  if (tg < 1 || hg < 1 || wg < 1)
    throw DimensionError("build_schedule: extents must be >= 1");
  return MaskSchedule{tg, hg, wg};
}

std::vector<GridPos> MaskSchedule::positions(int step) const {
  if (step < 1 || step > 4) throw ContractError("schedule step must be 1..4");
  const auto cls = kSpatialClass[step - 1];
  std::vector<GridPos> out;
  for (int t = 0; t < tg; ++t)
    for (int h = cls[0]; h < hg; h += 2)
      for (int w = cls[1]; w < wg; w += 2) out.push_back({t, h, w});
  return out;
}

}  // namespace nvrl
