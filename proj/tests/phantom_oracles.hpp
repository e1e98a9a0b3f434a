#pragma once

// Test-only oracles derived from the analytic phantom: per-frame bite
// footprints (pixels whose ray hits carved space) and mask overlap metrics.

#include "voxcarve/change_detection.hpp"
#include "voxcarve/geometry.hpp"
#include "voxcarve/phantom.hpp"

namespace voxcarve::oracles {

// A pixel is in the footprint when removal made its ray travel deeper.
inline ChangeMask footprint_mask(const PhantomScene& before, const PhantomScene& after,
                                 const RigidTransform& pose, const CameraIntrinsics& K) {
  const DepthMap pre = render_gt_depth(before, pose, K);
  const DepthMap post = render_gt_depth(after, pose, K);
  ChangeMask mask = ChangeMask::zeros(K.width, K.height);
  for (int y = 0; y < K.height; ++y)
    for (int x = 0; x < K.width; ++x)
      if (pre.valid_at(x, y) && post.valid_at(x, y) &&
          post.at(x, y) > pre.at(x, y) + 1e-3f)
        mask.at(x, y) = 1;
  return mask;
}

inline double mask_iou(const ChangeMask& a, const ChangeMask& b) {
  int inter = 0, uni = 0;
  for (size_t i = 0; i < a.values.size(); ++i) {
    const bool va = a.values[i] != 0, vb = b.values[i] != 0;
    inter += (va && vb) ? 1 : 0;
    uni += (va || vb) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

}  // namespace voxcarve::oracles
