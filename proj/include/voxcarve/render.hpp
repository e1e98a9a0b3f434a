#pragma once

// Depth synthesis from a triangle mesh or directly from the TSDF. Rendered
// values are camera-z depth (not ray length), the same convention as the
// fusion term d* = M(x) - z_c, so a rendered surface point fuses to exactly
// zero. Backfaces are accepted: the endoscope sits inside the cavity it maps.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "voxcarve/geometry.hpp"
#include "voxcarve/parallel.hpp"
#include "voxcarve/tsdf_volume.hpp"

namespace voxcarve {
namespace detail {

// Watertight ray/triangle intersection (shear-and-scale formulation). Both
// winding orders are accepted; t is in units of the ray direction length.
struct RayFrame {
  Vec3 org;
  int kx, ky, kz;
  double sx, sy, sz;

  RayFrame(const Vec3& origin, const Vec3& dir) : org(origin) {
    kz = 0;
    if (std::abs(dir.y()) > std::abs(dir[kz])) kz = 1;
    if (std::abs(dir.z()) > std::abs(dir[kz])) kz = 2;
    kx = (kz + 1) % 3;
    ky = (kx + 1) % 3;
    if (dir[kz] < 0.0) std::swap(kx, ky);
    sx = dir[kx] / dir[kz];
    sy = dir[ky] / dir[kz];
    sz = 1.0 / dir[kz];
  }

  std::optional<double> intersect(const Vec3& va, const Vec3& vb, const Vec3& vc, double t_min) const {
    const Vec3 a = va - org, b = vb - org, c = vc - org;
    const double ax = a[kx] - sx * a[kz], ay = a[ky] - sy * a[kz];
    const double bx = b[kx] - sx * b[kz], by = b[ky] - sy * b[kz];
    const double cx = c[kx] - sx * c[kz], cy = c[ky] - sy * c[kz];
    const double u = cx * by - cy * bx;
    const double v = ax * cy - ay * cx;
    const double w = bx * ay - by * ax;
    if ((u < 0.0 || v < 0.0 || w < 0.0) && (u > 0.0 || v > 0.0 || w > 0.0)) return std::nullopt;
    const double det = u + v + w;
    if (det == 0.0) return std::nullopt;
    const double az = sz * a[kz], bz = sz * b[kz], cz = sz * c[kz];
    const double t = (u * az + v * bz + w * cz) / det;
    if (!(t > t_min)) return std::nullopt;
    return t;
  }
};

inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;
  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) return a + (d1 / (d1 - d3)) * ab;
  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) return a + (d2 / (d2 - d6)) * ac;
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return b + t * (c - b);
  }
  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

class TriangleBvh {
 public:
  explicit TriangleBvh(const TriangleMesh& mesh) : mesh_(&mesh) {
    const int n = static_cast<int>(mesh.triangles.size());
    order_.resize(n);
    std::iota(order_.begin(), order_.end(), 0);
    centroids_.resize(n);
    for (int i = 0; i < n; ++i) {
      const auto& t = mesh.triangles[i];
      centroids_[i] = (mesh.vertices[t[0]] + mesh.vertices[t[1]] + mesh.vertices[t[2]]) / 3.0;
    }
    if (n > 0) build(0, n);
  }

  struct Hit {
    double t = 0.0;
    int triangle = -1;
  };

  std::optional<Hit> raycast(const Vec3& org, const Vec3& dir, double t_min = 1e-9) const {
    if (nodes_.empty()) return std::nullopt;
    const RayFrame frame(org, dir);
    const Vec3 inv_dir = dir.cwiseInverse();
    Hit best{std::numeric_limits<double>::infinity(), -1};
    int stack[64];
    int top = 0;
    stack[top++] = 0;
    while (top > 0) {
      const Node& node = nodes_[stack[--top]];
      if (!slab_hit(node.box, org, inv_dir, best.t)) continue;
      if (node.count > 0) {
        for (int k = node.first; k < node.first + node.count; ++k) {
          const auto& tri = mesh_->triangles[order_[k]];
          const auto t = frame.intersect(mesh_->vertices[tri[0]], mesh_->vertices[tri[1]],
                                         mesh_->vertices[tri[2]], t_min);
          if (t && *t < best.t) best = Hit{*t, order_[k]};
        }
      } else {
        stack[top++] = node.left;
        stack[top++] = node.right;
      }
    }
    if (best.triangle < 0) return std::nullopt;
    return best;
  }

  // Squared distance from p to the mesh surface.
  double squared_distance(const Vec3& p, Vec3* closest = nullptr) const {
    if (nodes_.empty()) return std::numeric_limits<double>::infinity();
    double best = std::numeric_limits<double>::infinity();
    Vec3 best_point = Vec3::Zero();
    nearest(0, p, best, best_point);
    if (closest) *closest = best_point;
    return best;
  }

  bool empty() const { return nodes_.empty(); }

 private:
  struct Node {
    Eigen::AlignedBox3d box;
    int left = -1, right = -1;
    int first = 0, count = 0;
  };

  static bool slab_hit(const Eigen::AlignedBox3d& box, const Vec3& org, const Vec3& inv_dir,
                       double t_max) {
    double t0 = 0.0, t1 = t_max;
    for (int a = 0; a < 3; ++a) {
      double near = (box.min()[a] - org[a]) * inv_dir[a];
      double far = (box.max()[a] - org[a]) * inv_dir[a];
      if (near > far) std::swap(near, far);
      t0 = std::max(t0, near);
      t1 = std::min(t1, far);
      if (t0 > t1) return false;
    }
    return true;
  }

  int build(int first, int count) {
    const int node_id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    Eigen::AlignedBox3d box, cbox;
    for (int k = first; k < first + count; ++k) {
      const auto& t = mesh_->triangles[order_[k]];
      for (const int vi : t) box.extend(mesh_->vertices[vi]);
      cbox.extend(centroids_[order_[k]]);
    }
    nodes_[node_id].box = box;
    if (count <= 4) {
      nodes_[node_id].first = first;
      nodes_[node_id].count = count;
      return node_id;
    }
    int axis = 0;
    const Vec3 extent = cbox.sizes();
    if (extent.y() > extent[axis]) axis = 1;
    if (extent.z() > extent[axis]) axis = 2;
    const int mid = first + count / 2;
    std::nth_element(order_.begin() + first, order_.begin() + mid, order_.begin() + first + count,
                     [&](int a, int b) { return centroids_[a][axis] < centroids_[b][axis]; });
    const int left = build(first, mid - first);
    const int right = build(mid, first + count - mid);
    nodes_[node_id].left = left;
    nodes_[node_id].right = right;
    return node_id;
  }

  void nearest(int node_id, const Vec3& p, double& best, Vec3& best_point) const {
    const Node& node = nodes_[node_id];
    if (node.box.squaredExteriorDistance(p) >= best) return;
    if (node.count > 0) {
      for (int k = node.first; k < node.first + node.count; ++k) {
        const auto& tri = mesh_->triangles[order_[k]];
        const Vec3 q = closest_point_on_triangle(p, mesh_->vertices[tri[0]], mesh_->vertices[tri[1]],
                                                 mesh_->vertices[tri[2]]);
        const double d2 = (p - q).squaredNorm();
        if (d2 < best) {
          best = d2;
          best_point = q;
        }
      }
      return;
    }
    const double dl = nodes_[node.left].box.squaredExteriorDistance(p);
    const double dr = nodes_[node.right].box.squaredExteriorDistance(p);
    if (dl < dr) {
      nearest(node.left, p, best, best_point);
      nearest(node.right, p, best, best_point);
    } else {
      nearest(node.right, p, best, best_point);
      nearest(node.left, p, best, best_point);
    }
  }

  const TriangleMesh* mesh_;
  std::vector<int> order_;
  std::vector<Vec3> centroids_;
  std::vector<Node> nodes_;
};

}  // namespace detail

// Mesh depth renderer with a reusable acceleration structure; build once per
// model, render at many poses. Also answers closest-point distance queries.
class MeshRaycaster {
 public:
  explicit MeshRaycaster(TriangleMesh mesh) : mesh_(std::move(mesh)), bvh_(mesh_) {}

  // The acceleration structure points into mesh_; rebuild instead of copying.
  MeshRaycaster(const MeshRaycaster&) = delete;
  MeshRaycaster& operator=(const MeshRaycaster&) = delete;

  DepthMap render(const RigidTransform& world_to_camera, const CameraIntrinsics& K) const {
    K.validate();
    DepthMap out(K.width, K.height, 0.0f);
    if (bvh_.empty()) return out;
    const RigidTransform cam_to_world = world_to_camera.inverse();
    const Vec3 center = cam_to_world.translation();
    detail::parallel_for(K.height, [&](int y) {
      for (int x = 0; x < K.width; ++x) {
        // Direction scaled so the ray parameter equals camera-z depth.
        const Vec3 dir_cam((x - K.cx) / K.fx, (y - K.cy) / K.fy, 1.0);
        const Vec3 dir_world = cam_to_world.rotation() * dir_cam;
        if (const auto hit = bvh_.raycast(center, dir_world))
          out.at(x, y) = static_cast<float>(hit->t);
      }
    });
    return out;
  }

  // Unsigned distance from a world point to the mesh surface.
  double distance(const Vec3& p) const { return std::sqrt(bvh_.squared_distance(p)); }

  Vec3 closest_point(const Vec3& p) const {
    Vec3 q;
    bvh_.squared_distance(p, &q);
    return q;
  }

  const TriangleMesh& mesh() const { return mesh_; }

 private:
  TriangleMesh mesh_;
  detail::TriangleBvh bvh_;
};

inline DepthMap render_depth_mesh(const TriangleMesh& mesh, const RigidTransform& world_to_camera,
                                  const CameraIntrinsics& K) {
  if (mesh.empty()) throw std::invalid_argument("render_depth_mesh: empty mesh");
  return MeshRaycaster(mesh).render(world_to_camera, K);
}

// Direct raycast of the TSDF zero crossing (front-to-back, positive-to-negative).
inline DepthMap render_depth_volume(const TsdfVolume& v, const RigidTransform& world_to_camera,
                                    const CameraIntrinsics& K, float min_weight = 1.0f) {
  K.validate();
  DepthMap out(K.width, K.height, 0.0f);
  const RigidTransform cam_to_world = world_to_camera.inverse();
  const Vec3 center = cam_to_world.translation();
  const Vec3 vol_min = v.origin();
  const Vec3 vol_max = v.origin() + v.voxel_size() * (v.dims().cast<double>() - Vec3::Ones());
  const double t_far = (vol_max - vol_min).norm() + (center - 0.5 * (vol_min + vol_max)).norm();
  const double coarse = 0.5 * v.voxel_size();
  const double trunc = v.truncation();

  detail::parallel_for(K.height, [&](int y) {
    for (int x = 0; x < K.width; ++x) {
      const Vec3 dir_cam((x - K.cx) / K.fx, (y - K.cy) / K.fy, 1.0);
      const double dir_norm = dir_cam.norm();
      const Vec3 u = (cam_to_world.rotation() * dir_cam) / dir_norm;
      double t = coarse;
      double prev_t = -1.0, prev_phi = 0.0;
      while (t < t_far) {
        const auto s = v.sample(center + t * u, min_weight);
        if (!s) {
          prev_t = -1.0;
          t += coarse;
          continue;
        }
        const double phi = *s * trunc;  // back to millimeters
        if (phi < 0.0) {
          if (prev_t >= 0.0 && prev_phi > 0.0) {
            const double t_hit = prev_t + prev_phi / (prev_phi - phi) * (t - prev_t);
            out.at(x, y) = static_cast<float>(t_hit / dir_norm);  // camera-z depth
          }
          break;
        }
        prev_t = t;
        prev_phi = phi;
        t += std::max(std::min(phi, trunc) * 0.75, coarse * 0.5);
      }
    }
  });
  return out;
}

}  // namespace voxcarve
