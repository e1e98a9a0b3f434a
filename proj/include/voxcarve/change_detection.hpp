#pragma once

// Per-frame change detection: scale-correct the estimated depth against the
// model render, rigidly register the lifted clouds, reproject into the frame,
// impute reprojection holes from the model render, and threshold the depth
// difference into a binary mask. Only depth increases flag: tissue is removed,
// never added, so changed regions read deeper than the model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "voxcarve/geometry.hpp"
#include "voxcarve/registration.hpp"
#include "voxcarve/render.hpp"
#include "voxcarve/tsdf_volume.hpp"

namespace voxcarve {

struct ChangeMask {
  int width = 0, height = 0;
  std::vector<std::uint8_t> values;

  static ChangeMask zeros(int width, int height) {
    ChangeMask m;
    m.width = width;
    m.height = height;
    m.values.assign(static_cast<size_t>(width) * height, 0);
    return m;
  }

  std::uint8_t at(int x, int y) const { return values[static_cast<size_t>(y) * width + x]; }
  std::uint8_t& at(int x, int y) { return values[static_cast<size_t>(y) * width + x]; }

  int count() const {
    int n = 0;
    for (const auto v : values) n += v ? 1 : 0;
    return n;
  }

  WeightImage to_weight_image() const {
    WeightImage w = WeightImage::zeros(width, height);
    for (size_t i = 0; i < values.size(); ++i) w.values[i] = values[i] ? 1.0f : 0.0f;
    return w;
  }
};

// The registered, imputed intraoperative depth for one frame.
struct AlignedFrame {
  DepthMap registered_depth;
  RegistrationResult registration;
  double imputed_fraction = 0.0;
};

struct ChangeDetectionParams {
  double threshold = 1.0;  // mm over the rendered model surface
  bool mask_open = true;   // 3x3 morphological opening of the raw mask
  bool use_icp = true;     // false: per-frame scale normalization only (ablation mode)
  RegistrationParams registration;
};

// mask = 1 iff both depths valid and registered - model > threshold.
inline ChangeMask detect_change(const DepthMap& registered, const DepthMap& model, double threshold) {
  if (registered.width() != model.width() || registered.height() != model.height())
    throw std::invalid_argument("detect_change: depth map sizes differ");
  ChangeMask mask = ChangeMask::zeros(registered.width(), registered.height());
  for (int y = 0; y < model.height(); ++y)
    for (int x = 0; x < model.width(); ++x)
      if (registered.valid_at(x, y) && model.valid_at(x, y) &&
          static_cast<double>(registered.at(x, y)) - model.at(x, y) > threshold)
        mask.at(x, y) = 1;
  return mask;
}

// One 3x3 opening (erosion then dilation); removes isolated detections.
inline ChangeMask open_mask(const ChangeMask& mask) {
  const int w = mask.width, h = mask.height;
  ChangeMask eroded = ChangeMask::zeros(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool all = true;
      for (int dy = -1; dy <= 1 && all; ++dy)
        for (int dx = -1; dx <= 1 && all; ++dx) {
          const int nx = x + dx, ny = y + dy;
          all = nx >= 0 && nx < w && ny >= 0 && ny < h && mask.at(nx, ny);
        }
      eroded.at(x, y) = all ? 1 : 0;
    }
  ChangeMask opened = ChangeMask::zeros(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool any = false;
      for (int dy = -1; dy <= 1 && !any; ++dy)
        for (int dx = -1; dx <= 1 && !any; ++dx) {
          const int nx = x + dx, ny = y + dy;
          any = nx >= 0 && nx < w && ny >= 0 && ny < h && eroded.at(nx, ny);
        }
      opened.at(x, y) = any ? 1 : 0;
    }
  return opened;
}

// Scale-correct, register, reproject, impute. Throws RegistrationError when
// the frame cannot be aligned (insufficient overlap or no consensus).
inline AlignedFrame align_frame(const DepthMap& estimated, const DepthMap& model_render,
                                const RigidTransform& pose, const CameraIntrinsics& K,
                                const ChangeDetectionParams& params = {}) {
  if (estimated.width() != model_render.width() || estimated.height() != model_render.height())
    throw std::invalid_argument("align_frame: depth map sizes differ");
  const double scale = estimate_scale(estimated, model_render);

  DepthMap scaled = estimated;
  for (auto& v : scaled.data())
    if (v > 0.0f) v = static_cast<float>(v * scale);

  AlignedFrame out;
  if (params.use_icp) {
    const PointCloud est_cloud = depth_to_pointcloud(scaled, pose, K);
    const PointCloud model_cloud = depth_to_pointcloud(model_render, pose, K);
    out.registration = ransac_icp(est_cloud, model_cloud, params.registration);

    // Reproject the registered cloud into the frame, nearest depth per pixel.
    DepthMap reproj(K.width, K.height, 0.0f);
    for (const Vec3& p : est_cloud.points) {
      const auto proj = project_point(pose, K, out.registration.transform * p);
      if (!proj) continue;
      const int px = round_pixel(proj->pixel.x());
      const int py = round_pixel(proj->pixel.y());
      float& slot = reproj.at(px, py);
      if (slot <= 0.0f || proj->depth < slot) slot = static_cast<float>(proj->depth);
    }
    out.registered_depth = std::move(reproj);
  } else {
    // Ablation mode: frames are only normalized to the model render.
    out.registered_depth = std::move(scaled);
  }
  out.registration.scale = scale;

  // Fill holes from the model render so missing pixels never flag as change.
  int imputed = 0, valid = 0;
  for (int y = 0; y < K.height; ++y)
    for (int x = 0; x < K.width; ++x) {
      if (!out.registered_depth.valid_at(x, y) && model_render.valid_at(x, y)) {
        out.registered_depth.at(x, y) = model_render.at(x, y);
        ++imputed;
      }
      if (out.registered_depth.valid_at(x, y)) ++valid;
    }
  out.imputed_fraction = valid > 0 ? static_cast<double>(imputed) / valid : 0.0;
  return out;
}

struct FrameChange {
  int frame_index = 0;
  AlignedFrame aligned;
  ChangeMask mask;
};

// Renders the model at every frame pose, aligns and thresholds each frame.
// Frames that fail registration are dropped with a warning; outputs keep the
// input order. Per-frame RANSAC seeds derive from the base seed and the frame
// index so results do not depend on scheduling.
inline std::vector<FrameChange> process_sequence(std::span<const CameraFrame> frames,
                                                 const TriangleMesh& model_mesh,
                                                 const CameraIntrinsics& K,
                                                 const ChangeDetectionParams& params = {},
                                                 std::vector<std::string>* warnings = nullptr) {
  if (frames.empty()) throw std::invalid_argument("process_sequence: empty sequence");
  const MeshRaycaster caster(model_mesh);
  const int n = static_cast<int>(frames.size());
  std::vector<std::optional<FrameChange>> slots(n);
  std::vector<std::string> errors(n);
  detail::parallel_for(n, [&](int i) {
    try {
      const DepthMap model_render = caster.render(frames[i].pose, K);
      ChangeDetectionParams frame_params = params;
      frame_params.registration.seed = params.registration.seed + static_cast<std::uint64_t>(i);
      AlignedFrame aligned = align_frame(frames[i].depth, model_render, frames[i].pose, K, frame_params);
      ChangeMask mask = detect_change(aligned.registered_depth, model_render, params.threshold);
      if (params.mask_open) mask = open_mask(mask);
      slots[i] = FrameChange{i, std::move(aligned), std::move(mask)};
    } catch (const RegistrationError& e) {
      errors[i] = e.what();
    }
  });
  std::vector<FrameChange> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    if (slots[i]) {
      out.push_back(std::move(*slots[i]));
    } else if (warnings) {
      warnings->push_back("frame " + std::to_string(i) + " dropped: " + errors[i]);
    }
  }
  return out;
}

}  // namespace voxcarve
