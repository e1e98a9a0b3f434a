#pragma once

// Evaluation against ground truth: marker-based rigid alignment refined by
// ICP on depths rendered at unchanged poses, a fixed 3D bounding box around
// the change region, and pixelwise point-correspondence errors from depths
// co-rendered at a constant set of evaluation poses. Correspondences are
// pixelwise by construction; closest points between meshes need not name the
// same piece of anatomy, so they are never used here.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "voxcarve/geometry.hpp"
#include "voxcarve/registration.hpp"
#include "voxcarve/render.hpp"

namespace voxcarve {

struct EvalProtocol {
  std::vector<RigidTransform> eval_poses;  // held constant across all steps
  Eigen::AlignedBox3d bbox;                // change region, mm
  RigidTransform gt_alignment;             // ground truth -> reference frame
  double gt_residual = 0.0;                // mm

  void validate() const {
    if (eval_poses.empty()) throw std::invalid_argument("eval protocol: no evaluation poses");
    if (bbox.isEmpty() || (bbox.sizes().array() <= 0.0).any())
      throw std::invalid_argument("eval protocol: bounding box must have positive extent");
  }
};

struct ErrorStats {
  double mean = 0.0;    // mm
  double stddev = 0.0;  // mm
  long count = 0;       // point pairs compared
};

namespace detail {

// Fixed-order pairwise summation for bit-stable statistics.
inline double pairwise_sum(std::span<const double> xs) {
  if (xs.size() <= 8) {
    double s = 0.0;
    for (const double x : xs) s += x;
    return s;
  }
  const size_t half = xs.size() / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

}  // namespace detail

// Coarse rigid fit from marker correspondences (gt, reference), refined by
// ransac_icp on point clouds lifted from depths rendered at poses that view
// no anatomical change. Returns the composed transform and the refinement's
// inlier RMSE.
inline std::pair<RigidTransform, double> align_gt(const TriangleMesh& gt_mesh,
                                                  const TriangleMesh& ref_mesh,
                                                  std::span<const std::pair<Vec3, Vec3>> marker_pairs,
                                                  std::span<const RigidTransform> unchanged_poses,
                                                  const CameraIntrinsics& K,
                                                  const RegistrationParams& params = {}) {
  if (marker_pairs.size() < 3) throw std::invalid_argument("align_gt: need at least 3 marker pairs");
  if (unchanged_poses.empty()) throw std::invalid_argument("align_gt: need at least 1 unchanged pose");
  const RigidTransform coarse = rigid_from_correspondences(marker_pairs);

  const MeshRaycaster gt_caster(transform_mesh(gt_mesh, coarse));
  const MeshRaycaster ref_caster(ref_mesh);
  PointCloud gt_cloud, ref_cloud;
  for (const RigidTransform& pose : unchanged_poses) {
    const PointCloud g = depth_to_pointcloud(gt_caster.render(pose, K), pose, K);
    const PointCloud r = depth_to_pointcloud(ref_caster.render(pose, K), pose, K);
    gt_cloud.points.insert(gt_cloud.points.end(), g.points.begin(), g.points.end());
    ref_cloud.points.insert(ref_cloud.points.end(), r.points.begin(), r.points.end());
  }
  const RegistrationResult refined = ransac_icp(gt_cloud, ref_cloud, params);
  return {refined.transform * coarse, refined.inlier_rmse};
}

// Axis-aligned box (plus margin) around every preop-mesh vertex farther than
// change_threshold from the final-step ground truth. Held constant across the
// whole progression.
inline Eigen::AlignedBox3d change_bbox(const TriangleMesh& final_gt_mesh, const TriangleMesh& preop_mesh,
                                       double margin = 1.0, double change_threshold = 1.0) {
  if (final_gt_mesh.empty() || preop_mesh.empty())
    throw std::invalid_argument("change_bbox: empty mesh");
  const MeshRaycaster gt_caster(final_gt_mesh);
  Eigen::AlignedBox3d box;
  for (const Vec3& v : preop_mesh.vertices)
    if (gt_caster.distance(v) > change_threshold) box.extend(v);
  if (box.isEmpty()) throw std::runtime_error("change_bbox: no change between the meshes");
  box.min() -= Vec3::Constant(margin);
  box.max() += Vec3::Constant(margin);
  return box;
}

// Pixelwise correspondence error between two aligned meshes: render both at
// every evaluation pose, backproject pixels valid in both, keep pairs whose
// reference point lies inside the bbox, and return mean +- std over all kept
// pairs in pose-then-pixel order.
inline ErrorStats correspondence_error(const TriangleMesh& model_mesh, const TriangleMesh& reference_mesh,
                                       const EvalProtocol& protocol, const CameraIntrinsics& K) {
  protocol.validate();
  if (model_mesh.empty() || reference_mesh.empty())
    throw std::invalid_argument("correspondence_error: empty mesh");
  const MeshRaycaster model_caster(model_mesh);
  const MeshRaycaster ref_caster(reference_mesh);
  std::vector<double> errors;
  for (const RigidTransform& pose : protocol.eval_poses) {
    const DepthMap dm = model_caster.render(pose, K);
    const DepthMap dr = ref_caster.render(pose, K);
    const RigidTransform cam_to_world = pose.inverse();
    for (int y = 0; y < K.height; ++y)
      for (int x = 0; x < K.width; ++x) {
        if (!dm.valid_at(x, y) || !dr.valid_at(x, y)) continue;
        const Vec3 dir((x - K.cx) / K.fx, (y - K.cy) / K.fy, 1.0);
        const Vec3 pm = cam_to_world * (dir * static_cast<double>(dm.at(x, y)));
        const Vec3 pr = cam_to_world * (dir * static_cast<double>(dr.at(x, y)));
        if (!protocol.bbox.contains(pr)) continue;
        errors.push_back((pm - pr).norm());
      }
  }
  if (errors.empty()) throw std::runtime_error("correspondence_error: no point pairs inside the bbox");
  ErrorStats stats;
  stats.count = static_cast<long>(errors.size());
  stats.mean = detail::pairwise_sum(errors) / static_cast<double>(errors.size());
  std::vector<double> sq(errors.size());
  for (size_t i = 0; i < errors.size(); ++i) sq[i] = (errors[i] - stats.mean) * (errors[i] - stats.mean);
  stats.stddev = std::sqrt(detail::pairwise_sum(sq) / static_cast<double>(errors.size()));
  return stats;
}

// One row per bite; absent variants stay blank in the emitted table.
struct ReportRow {
  int step = 0;
  std::optional<ErrorStats> no_update;
  std::optional<ErrorStats> updated;
  std::optional<ErrorStats> depth_ablation;
  std::optional<ErrorStats> registration_ablation;
};

struct ProgressionMeshes {
  TriangleMesh preop_model;                                        // model at t = 0
  std::vector<TriangleMesh> ground_truth;                          // after bite k, k = 1..n
  std::vector<std::optional<TriangleMesh>> updated;                // per bite or empty
  std::vector<std::optional<TriangleMesh>> depth_ablation;         // per bite or empty
  std::vector<std::optional<TriangleMesh>> registration_ablation;  // per bite or empty
};

inline std::vector<ReportRow> report_table(const ProgressionMeshes& meshes, const EvalProtocol& protocol,
                                           const CameraIntrinsics& K) {
  protocol.validate();
  const size_t n = meshes.ground_truth.size();
  if (n == 0) throw std::invalid_argument("report_table: empty progression");
  const auto check = [&](const std::vector<std::optional<TriangleMesh>>& v, const char* name) {
    if (!v.empty() && v.size() != n)
      throw std::invalid_argument(std::string("report_table: ") + name + " step count mismatch");
  };
  check(meshes.updated, "updated");
  check(meshes.depth_ablation, "depth_ablation");
  check(meshes.registration_ablation, "registration_ablation");

  std::vector<ReportRow> rows;
  rows.reserve(n);
  for (size_t k = 0; k < n; ++k) {
    ReportRow row;
    row.step = static_cast<int>(k) + 1;
    const TriangleMesh& gt = meshes.ground_truth[k];
    row.no_update = correspondence_error(meshes.preop_model, gt, protocol, K);
    const auto eval_variant = [&](const std::vector<std::optional<TriangleMesh>>& v)
        -> std::optional<ErrorStats> {
      if (v.empty() || !v[k]) return std::nullopt;
      return correspondence_error(*v[k], gt, protocol, K);
    };
    row.updated = eval_variant(meshes.updated);
    row.depth_ablation = eval_variant(meshes.depth_ablation);
    row.registration_ablation = eval_variant(meshes.registration_ablation);
    rows.push_back(row);
  }
  return rows;
}

inline std::string report_csv(std::span<const ReportRow> rows) {
  std::string out = "step,variant,mean_mm,std_mm,count\n";
  char line[160];
  const auto emit = [&](int step, const char* variant, const std::optional<ErrorStats>& s) {
    if (!s) return;
    std::snprintf(line, sizeof(line), "%d,%s,%.6f,%.6f,%ld\n", step, variant, s->mean, s->stddev,
                  s->count);
    out += line;
  };
  for (const ReportRow& r : rows) {
    emit(r.step, "no_update", r.no_update);
    emit(r.step, "updated", r.updated);
    emit(r.step, "depth_ablation", r.depth_ablation);
    emit(r.step, "registration_ablation", r.registration_ablation);
  }
  return out;
}

inline std::string report_text(std::span<const ReportRow> rows) {
  std::string out;
  char line[200];
  std::snprintf(line, sizeof(line), "%-6s %-22s %-22s %-22s %-22s\n", "step", "no_update", "updated",
                "depth_ablation", "registration_ablation");
  out += line;
  const auto cell = [](const std::optional<ErrorStats>& s) -> std::string {
    if (!s) return "-";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f +- %.3f", s->mean, s->stddev);
    return buf;
  };
  for (const ReportRow& r : rows) {
    std::snprintf(line, sizeof(line), "%-6d %-22s %-22s %-22s %-22s\n", r.step,
                  cell(r.no_update).c_str(), cell(r.updated).c_str(), cell(r.depth_ablation).c_str(),
                  cell(r.registration_ablation).c_str());
    out += line;
  }
  return out;
}

}  // namespace voxcarve
