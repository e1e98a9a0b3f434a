#pragma once

// Discrete truncated-signed-distance volume. Per voxel it stores the running
// weighted mean D of per-frame signed distances d = clamp((M(x) - z_c) / tau)
// normalized to [-1, 1], and the cumulative weight W. Unobserved voxels carry
// D = 1, W = 0. The incremental update
//     D <- (W*D + w*d) / (W + w),   W <- W + w
// reproduces the batch weighted mean when starting from W = 0, which is what
// makes masked intraoperative updates compose with the preoperative fusion.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "voxcarve/geometry.hpp"
#include "voxcarve/marching_cubes_tables.hpp"
#include "voxcarve/parallel.hpp"

namespace voxcarve {

// Per-pixel integration weight in [0, 1]; a binary change mask is used
// directly as one of these during intraoperative updates.
struct WeightImage {
  int width = 0, height = 0;
  std::vector<float> values;

  static WeightImage ones(int width, int height) {
    WeightImage w;
    w.width = width;
    w.height = height;
    w.values.assign(static_cast<size_t>(width) * height, 1.0f);
    return w;
  }

  static WeightImage zeros(int width, int height) {
    WeightImage w = ones(width, height);
    std::fill(w.values.begin(), w.values.end(), 0.0f);
    return w;
  }

  float at(int x, int y) const { return values[static_cast<size_t>(y) * width + x]; }
  float& at(int x, int y) { return values[static_cast<size_t>(y) * width + x]; }
};

class TsdfVolume {
 public:
  TsdfVolume(const Eigen::Vector3i& dims, const Vec3& origin, double voxel_size, double truncation)
      : dims_(dims), origin_(origin), voxel_size_(voxel_size), truncation_(truncation) {
    if (!(voxel_size > 0.0)) throw std::invalid_argument("tsdf: voxel_size must be positive");
    if (!(truncation > 0.0)) throw std::invalid_argument("tsdf: truncation must be positive");
    if (dims.minCoeff() < 2) throw std::invalid_argument("tsdf: dims must be >= 2 per axis");
    const size_t n = static_cast<size_t>(dims.x()) * dims.y() * dims.z();
    d_.assign(n, 1.0f);  // unobserved default, free-space biased
    w_.assign(n, 0.0f);
  }

  const Eigen::Vector3i& dims() const { return dims_; }
  const Vec3& origin() const { return origin_; }
  double voxel_size() const { return voxel_size_; }
  double truncation() const { return truncation_; }
  size_t voxel_count() const { return d_.size(); }

  size_t index(int x, int y, int z) const {  // x-fastest
    return (static_cast<size_t>(z) * dims_.y() + y) * dims_.x() + x;
  }

  Vec3 voxel_center(int x, int y, int z) const { return origin_ + voxel_size_ * Vec3(x, y, z); }

  float d(size_t i) const { return d_[i]; }
  float w(size_t i) const { return w_[i]; }
  float& d(size_t i) { return d_[i]; }
  float& w(size_t i) { return w_[i]; }
  const std::vector<float>& d_data() const { return d_; }
  const std::vector<float>& w_data() const { return w_; }
  std::vector<float>& d_data() { return d_; }
  std::vector<float>& w_data() { return w_; }

  // Trilinear TSDF sample at a world point; nullopt outside the grid or when
  // any contributing corner has W < min_weight.
  std::optional<double> sample(const Vec3& p, float min_weight = 1.0f) const {
    const Vec3 g = (p - origin_) / voxel_size_;
    const int x0 = static_cast<int>(std::floor(g.x()));
    const int y0 = static_cast<int>(std::floor(g.y()));
    const int z0 = static_cast<int>(std::floor(g.z()));
    if (x0 < 0 || y0 < 0 || z0 < 0 || x0 + 1 >= dims_.x() || y0 + 1 >= dims_.y() || z0 + 1 >= dims_.z())
      return std::nullopt;
    const double fx = g.x() - x0, fy = g.y() - y0, fz = g.z() - z0;
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const size_t i = index(x0 + dx, y0 + dy, z0 + dz);
          if (w_[i] < min_weight) return std::nullopt;
          const double wt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) * (dz ? fz : 1.0 - fz);
          acc += wt * d_[i];
        }
    return acc;
  }

 private:
  Eigen::Vector3i dims_;
  Vec3 origin_;
  double voxel_size_ = 0.0;
  double truncation_ = 0.0;
  std::vector<float> d_, w_;
};

inline TsdfVolume new_volume(const Eigen::Vector3i& dims, const Vec3& origin, double voxel_size,
                             double truncation) {
  return TsdfVolume(dims, origin, voxel_size, truncation);
}

struct IntegrateOptions {
  float weight_cap = 255.0f;
  // When set, voxels receiving any weight are flagged in *touched. With
  // reset_on_first_touch, a voxel's cumulative W is zeroed right before its
  // first weighted observation of the pass, so new depths fully replace the
  // old model there.
  std::vector<std::uint8_t>* touched = nullptr;
  bool reset_on_first_touch = false;
};

namespace detail {

// World-space AABB (as inclusive voxel index ranges) of the view frustum cut
// at the deepest valid depth plus truncation. Voxels outside it either
// project out of view or land at d <= -1 and would be skipped anyway.
inline bool frustum_voxel_range(const TsdfVolume& v, const DepthMap& depth,
                                const RigidTransform& world_to_camera, const CameraIntrinsics& K,
                                Eigen::Vector3i& lo, Eigen::Vector3i& hi) {
  float max_depth = 0.0f;
  for (const float val : depth.data())
    if (val > max_depth && std::isfinite(val)) max_depth = val;
  if (max_depth <= 0.0f) return false;
  const double far = max_depth + v.truncation() + v.voxel_size();
  const RigidTransform cam_to_world = world_to_camera.inverse();
  Eigen::AlignedBox3d box;
  box.extend(cam_to_world.translation());
  const double us[2] = {-0.5, K.width - 0.5};
  const double vs[2] = {-0.5, K.height - 0.5};
  for (const double u : us)
    for (const double vv : vs) {
      const Vec3 xc(far * (u - K.cx) / K.fx, far * (vv - K.cy) / K.fy, far);
      box.extend(cam_to_world * xc);
    }
  const Vec3 gmin = (box.min() - v.origin()) / v.voxel_size();
  const Vec3 gmax = (box.max() - v.origin()) / v.voxel_size();
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::max(0, static_cast<int>(std::floor(gmin[a])) - 1);
    hi[a] = std::min(v.dims()[a] - 1, static_cast<int>(std::ceil(gmax[a])) + 1);
    if (lo[a] > hi[a]) return false;
  }
  return true;
}

}  // namespace detail

inline void integrate_frame(TsdfVolume& v, const DepthMap& depth, const RigidTransform& world_to_camera,
                            const CameraIntrinsics& K, const WeightImage& weights,
                            const IntegrateOptions& opts = {}) {
  if (depth.width() != K.width || depth.height() != K.height)
    throw std::invalid_argument("integrate_frame: depth map size does not match intrinsics");
  if (weights.width != depth.width() || weights.height != depth.height())
    throw std::invalid_argument("integrate_frame: weight image size does not match depth map");
  if (opts.reset_on_first_touch && opts.touched == nullptr)
    throw std::invalid_argument("integrate_frame: reset_on_first_touch requires a touched buffer");
  if (opts.touched && opts.touched->size() != v.voxel_count())
    throw std::invalid_argument("integrate_frame: touched buffer size mismatch");

  Eigen::Vector3i lo, hi;
  if (!detail::frustum_voxel_range(v, depth, world_to_camera, K, lo, hi)) return;

  const Mat3& R = world_to_camera.rotation();
  const Vec3& t = world_to_camera.translation();
  const double inv_trunc = 1.0 / v.truncation();
  float* dgrid = v.d_data().data();
  float* wgrid = v.w_data().data();

  detail::parallel_for(hi.z() - lo.z() + 1, [&](int zi) {
    const int z = lo.z() + zi;
    for (int y = lo.y(); y <= hi.y(); ++y) {
      for (int x = lo.x(); x <= hi.x(); ++x) {
        const Vec3 xc = R * v.voxel_center(x, y, z) + t;
        if (!(xc.z() > 0.0)) continue;
        const int px = round_pixel(K.fx * xc.x() / xc.z() + K.cx);
        const int py = round_pixel(K.fy * xc.y() / xc.z() + K.cy);
        if (px < 0 || px >= K.width || py < 0 || py >= K.height) continue;
        if (!depth.valid_at(px, py)) continue;
        const double wpix = weights.at(px, py);
        if (!(wpix > 0.0)) continue;
        double d = (static_cast<double>(depth.at(px, py)) - xc.z()) * inv_trunc;
        if (d < -1.0) continue;  // deep behind the observed surface
        d = std::min(1.0, d);
        const size_t i = v.index(x, y, z);
        double wprev = wgrid[i];
        if (opts.touched) {
          if (opts.reset_on_first_touch && !(*opts.touched)[i]) wprev = 0.0;
          (*opts.touched)[i] = 1;
        }
        const double wnew = wprev + wpix;
        dgrid[i] = static_cast<float>((wprev * dgrid[i] + wpix * d) / wnew);
        wgrid[i] = static_cast<float>(std::min<double>(wnew, opts.weight_cap));
      }
    }
  });
}

// Folds integrate_frame over the sequence. With empty `weights`, every frame
// integrates with all-ones weights (preoperative fusion).
inline void integrate_sequence(TsdfVolume& v, std::span<const CameraFrame> frames,
                               const CameraIntrinsics& K, std::span<const WeightImage> weights = {},
                               const IntegrateOptions& opts = {}) {
  if (!weights.empty() && weights.size() != frames.size())
    throw std::invalid_argument("integrate_sequence: weight list size mismatch");
  WeightImage ones;
  if (weights.empty() && !frames.empty()) ones = WeightImage::ones(K.width, K.height);
  for (size_t i = 0; i < frames.size(); ++i)
    integrate_frame(v, frames[i].depth, frames[i].pose, K, weights.empty() ? ones : weights[i], opts);
}

// Zero-isosurface extraction by marching cubes over cells whose 8 corners are
// all observed with W >= min_weight. Vertices are in world millimeters.
inline TriangleMesh extract_mesh(const TsdfVolume& v, float min_weight = 1.0f) {
  using namespace detail;
  TriangleMesh mesh;
  const Eigen::Vector3i dims = v.dims();
  std::unordered_map<std::uint64_t, int> edge_vertices;

  // Deduplicated vertex on the cell edge identified by its low corner and axis.
  const auto edge_vertex = [&](int cx, int cy, int cz, int edge, const double* corner_d) -> int {
    const auto [ca, cb] = kEdgeCorners[edge];
    const auto& oa = kCornerOffsets[ca];
    const auto& ob = kCornerOffsets[cb];
    const int gx = cx + std::min(oa[0], ob[0]);
    const int gy = cy + std::min(oa[1], ob[1]);
    const int gz = cz + std::min(oa[2], ob[2]);
    const int axis = (oa[0] != ob[0]) ? 0 : (oa[1] != ob[1]) ? 1 : 2;
    const std::uint64_t key =
        ((static_cast<std::uint64_t>(gz) * dims.y() + gy) * dims.x() + gx) * 3 + axis;
    if (const auto it = edge_vertices.find(key); it != edge_vertices.end()) return it->second;

    const double va = corner_d[ca];
    const double vb = corner_d[cb];
    const double tt = (va == vb) ? 0.5 : (0.0 - va) / (vb - va);
    const Vec3 pa = v.voxel_center(cx + oa[0], cy + oa[1], cz + oa[2]);
    const Vec3 pb = v.voxel_center(cx + ob[0], cy + ob[1], cz + ob[2]);
    const int id = static_cast<int>(mesh.vertices.size());
    mesh.vertices.push_back(pa + std::clamp(tt, 0.0, 1.0) * (pb - pa));
    edge_vertices.emplace(key, id);
    return id;
  };

  for (int z = 0; z + 1 < dims.z(); ++z) {
    for (int y = 0; y + 1 < dims.y(); ++y) {
      for (int x = 0; x + 1 < dims.x(); ++x) {
        double cd[8];
        int cube = 0;
        bool observed = true;
        for (int c = 0; c < 8; ++c) {
          const auto& o = kCornerOffsets[c];
          const size_t i = v.index(x + o[0], y + o[1], z + o[2]);
          if (v.w(i) < min_weight) {
            observed = false;
            break;
          }
          cd[c] = v.d(i);
          if (cd[c] < 0.0) cube |= 1 << c;
        }
        if (!observed || kEdgeTable[cube] == 0) continue;
        const auto& tris = kTriTable[cube];
        for (int k = 0; tris[k] != -1; k += 3) {
          const int i0 = edge_vertex(x, y, z, tris[k], cd);
          const int i1 = edge_vertex(x, y, z, tris[k + 1], cd);
          const int i2 = edge_vertex(x, y, z, tris[k + 2], cd);
          if (i0 == i1 || i1 == i2 || i0 == i2) continue;
          const Vec3 e1 = mesh.vertices[i1] - mesh.vertices[i0];
          const Vec3 e2 = mesh.vertices[i2] - mesh.vertices[i0];
          if (e1.cross(e2).squaredNorm() < 1e-24) continue;  // degenerate sliver
          mesh.triangles.push_back({i0, i1, i2});
        }
      }
    }
  }
  return mesh;
}

}  // namespace voxcarve
