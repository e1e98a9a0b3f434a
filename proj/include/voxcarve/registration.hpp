#pragma once

// Scale resolution and rigid alignment of intraoperative point clouds onto
// the model. Monocular scale is solved first from overlapping depth pixels
// (median ratio, robust to the one-sided ablation outliers), then a
// RANSAC-seeded point-to-point ICP aligns the clouds while discarding
// correspondences beyond the inlier threshold, so ablated regions do not
// bias the fit.

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "voxcarve/geometry.hpp"
#include "voxcarve/parallel.hpp"

namespace voxcarve {

// Alignment failures the caller is expected to handle (a frame that cannot be
// registered is dropped from the sequence, not a programming error).
struct RegistrationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RegistrationResult {
  RigidTransform transform;   // source -> target
  double scale = 1.0;         // applied to source before transform
  double inlier_rmse = 0.0;   // mm, over final inliers
  double inlier_fraction = 0.0;
};

struct RegistrationParams {
  int min_points = 100;
  double inlier_threshold = 1.0;  // mm; 2 * voxel_size at default resolution
  double min_inlier_fraction = 0.3;
  int max_ransac_iterations = 1000;
  double early_exit_inlier_fraction = 0.8;
  int max_icp_iterations = 50;
  double convergence_delta_rmse = 1e-4;  // mm
  // ICP correspondence gate anneals from gate_start_factor * inlier_threshold
  // down to inlier_threshold, so moderate initial misalignments converge while
  // far outliers stay excluded. Inlier stats are reported at the final gate.
  double gate_start_factor = 6.0;
  double gate_decay = 0.65;
  int max_source_samples = 2000;
  std::uint64_t seed = 0;
};

// Median of reference/source over mutually valid pixels; s * source is
// scale-corrected onto the reference.
inline double estimate_scale(const DepthMap& source, const DepthMap& reference) {
  if (source.width() != reference.width() || source.height() != reference.height())
    throw std::invalid_argument("estimate_scale: depth map sizes differ");
  std::vector<double> ratios;
  ratios.reserve(static_cast<size_t>(source.width()) * source.height() / 4);
  for (int y = 0; y < source.height(); ++y)
    for (int x = 0; x < source.width(); ++x)
      if (source.valid_at(x, y) && reference.valid_at(x, y))
        ratios.push_back(static_cast<double>(reference.at(x, y)) / source.at(x, y));
  if (ratios.size() < 50)
    throw RegistrationError("estimate_scale: fewer than 50 mutually valid pixels");
  const size_t mid = (ratios.size() - 1) / 2;
  std::nth_element(ratios.begin(), ratios.begin() + mid, ratios.end());
  return ratios[mid];
}

// Least-squares proper rigid fit (Kabsch): minimizes sum ||R*p + t - q||^2.
inline RigidTransform rigid_from_correspondences(std::span<const std::pair<Vec3, Vec3>> pairs) {
  if (pairs.size() < 3)
    throw std::invalid_argument("rigid_from_correspondences: need at least 3 pairs");
  Vec3 centroid_p = Vec3::Zero(), centroid_q = Vec3::Zero();
  for (const auto& [p, q] : pairs) {
    centroid_p += p;
    centroid_q += q;
  }
  centroid_p /= static_cast<double>(pairs.size());
  centroid_q /= static_cast<double>(pairs.size());
  Mat3 h = Mat3::Zero();
  for (const auto& [p, q] : pairs) h += (p - centroid_p) * (q - centroid_q).transpose();
  const Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  // Collinear or coincident points leave a rotation axis unconstrained.
  if (sv(1) <= 1e-12 * std::max(sv(0), 1e-300))
    throw std::invalid_argument("rigid_from_correspondences: degenerate configuration");
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Mat3 r = svd.matrixV() * d * svd.matrixU().transpose();
  return RigidTransform(r, centroid_q - r * centroid_p);
}

// Static 3D kd-tree for nearest-neighbor queries.
class KdTree3 {
 public:
  explicit KdTree3(std::span<const Vec3> points) : points_(points.begin(), points.end()) {
    if (points_.empty()) return;
    std::vector<int> order(points_.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    nodes_.reserve(points_.size());
    root_ = build(order, 0, static_cast<int>(order.size()));
  }

  struct Nearest {
    int index = -1;
    double squared_distance = std::numeric_limits<double>::infinity();
  };

  Nearest nearest(const Vec3& q) const {
    Nearest best;
    if (root_ >= 0) search(root_, q, best);
    return best;
  }

  bool empty() const { return points_.empty(); }

 private:
  struct Node {
    Vec3 p;
    int index = -1;
    int left = -1, right = -1;
    int axis = 0;
  };

  int build(std::vector<int>& order, int first, int last) {
    if (first >= last) return -1;
    Eigen::AlignedBox3d box;
    for (int k = first; k < last; ++k) box.extend(points_[order[k]]);
    int axis = 0;
    const Vec3 extent = box.sizes();
    if (extent.y() > extent[axis]) axis = 1;
    if (extent.z() > extent[axis]) axis = 2;
    const int mid = (first + last) / 2;
    std::nth_element(order.begin() + first, order.begin() + mid, order.begin() + last,
                     [&](int a, int b) { return points_[a][axis] < points_[b][axis]; });
    const int node_id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{points_[order[mid]], order[mid], -1, -1, axis});
    const int left = build(order, first, mid);
    const int right = build(order, mid + 1, last);
    nodes_[node_id].left = left;
    nodes_[node_id].right = right;
    return node_id;
  }

  void search(int node_id, const Vec3& q, Nearest& best) const {
    const Node& nd = nodes_[node_id];
    const double d2 = (q - nd.p).squaredNorm();
    if (d2 < best.squared_distance) best = Nearest{nd.index, d2};
    const double delta = q[nd.axis] - nd.p[nd.axis];
    const int near = delta < 0.0 ? nd.left : nd.right;
    const int far = delta < 0.0 ? nd.right : nd.left;
    if (near >= 0) search(near, q, best);
    if (far >= 0 && delta * delta < best.squared_distance) search(far, q, best);
  }

  std::vector<Vec3> points_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

// RANSAC over 3-point samples drawn from a fixed nearest-neighbor candidate
// set, then point-to-point ICP with per-iteration outlier gating.
inline RegistrationResult ransac_icp(const PointCloud& source, const PointCloud& target,
                                     const RegistrationParams& params = {}) {
  const int n_source = static_cast<int>(source.size());
  const int n_target = static_cast<int>(target.size());
  if (n_source < params.min_points || n_target < params.min_points)
    throw std::invalid_argument("ransac_icp: clouds smaller than min_points");

  // Deterministic stride subsample of the source keeps runtime bounded.
  std::vector<int> sample_idx;
  const int stride = std::max(1, n_source / std::max(1, params.max_source_samples));
  for (int i = 0; i < n_source; i += stride) sample_idx.push_back(i);
  const int n_samples = static_cast<int>(sample_idx.size());

  const KdTree3 tree(target.points);
  std::vector<std::pair<Vec3, Vec3>> candidates(n_samples);
  detail::parallel_for(n_samples, [&](int k) {
    const Vec3& p = source.points[sample_idx[k]];
    candidates[k] = {p, target.points[tree.nearest(p).index]};
  });

  // RANSAC on the candidate pairs.
  std::mt19937_64 rng(params.seed);
  std::uniform_int_distribution<int> pick(0, n_samples - 1);
  const double thr2 = params.inlier_threshold * params.inlier_threshold;
  RigidTransform best_transform;
  int best_count = -1;
  double best_sse = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < params.max_ransac_iterations; ++iter) {
    const int a = pick(rng), b = pick(rng), c = pick(rng);
    if (a == b || b == c || a == c) continue;
    const std::pair<Vec3, Vec3> minimal[3] = {candidates[a], candidates[b], candidates[c]};
    RigidTransform hyp;
    try {
      hyp = rigid_from_correspondences(minimal);
    } catch (const std::invalid_argument&) {
      continue;
    }
    int count = 0;
    double sse = 0.0;
    for (const auto& [p, q] : candidates) {
      const double d2 = (hyp * p - q).squaredNorm();
      if (d2 < thr2) {
        ++count;
        sse += d2;
      }
    }
    if (count > best_count || (count == best_count && sse < best_sse)) {
      best_count = count;
      best_sse = sse;
      best_transform = hyp;
    }
    if (best_count >= params.early_exit_inlier_fraction * n_samples) break;
  }
  if (best_count < params.min_inlier_fraction * n_samples)
    throw RegistrationError("ransac_icp: no consensus (inlier fraction too low)");

  // ICP refinement with an annealed correspondence gate; each iteration
  // refits on the gated nearest-neighbor pairs. The gate is also clamped to a
  // multiple of the median match distance so one-sided outlier clusters fall
  // out as soon as the bulk of the surface is in contact.
  RigidTransform current = best_transform;
  double rmse = std::sqrt(best_sse / std::max(1, best_count));
  double fraction = static_cast<double>(best_count) / n_samples;
  double prev_rmse = std::numeric_limits<double>::infinity();
  double gate = std::max(params.inlier_threshold, params.gate_start_factor * params.inlier_threshold);
  std::vector<std::pair<Vec3, Vec3>> inliers;
  std::vector<std::pair<Vec3, Vec3>> matched(n_samples);
  std::vector<double> dist2(n_samples);
  std::vector<double> dist2_sorted;
  for (int iter = 0; iter < params.max_icp_iterations; ++iter) {
    detail::parallel_for(n_samples, [&](int k) {
      const Vec3& p = source.points[sample_idx[k]];
      const auto nn = tree.nearest(current * p);
      matched[k] = {p, target.points[nn.index]};
      dist2[k] = nn.squared_distance;
    });
    dist2_sorted = dist2;
    std::nth_element(dist2_sorted.begin(), dist2_sorted.begin() + n_samples / 2, dist2_sorted.end());
    const double median = std::sqrt(dist2_sorted[n_samples / 2]);
    const double gate_eff = std::max(params.inlier_threshold, std::min(gate, 3.0 * median));
    const double gate2 = gate_eff * gate_eff;
    inliers.clear();
    for (int k = 0; k < n_samples; ++k)
      if (dist2[k] < gate2) inliers.push_back(matched[k]);
    if (inliers.size() < 3) break;
    RigidTransform fit;
    try {
      fit = rigid_from_correspondences(inliers);
    } catch (const std::invalid_argument&) {
      break;
    }
    double sse = 0.0;
    for (const auto& [p, q] : inliers) sse += (fit * p - q).squaredNorm();
    current = fit;
    rmse = std::sqrt(sse / static_cast<double>(inliers.size()));
    fraction = static_cast<double>(inliers.size()) / n_samples;
    const bool at_final_gate = gate_eff <= params.inlier_threshold;
    if (at_final_gate && prev_rmse - rmse < params.convergence_delta_rmse) break;
    prev_rmse = rmse;
    gate = std::max(params.inlier_threshold, gate * params.gate_decay);
  }

  RegistrationResult result;
  result.transform = current;
  result.scale = 1.0;
  result.inlier_rmse = rmse;
  result.inlier_fraction = fraction;
  return result;
}

}  // namespace voxcarve
