#pragma once

// Procedural stand-in for the ex vivo specimen: an analytic signed-distance
// cavity (a corridor of configurable radius ending at a wall), sequential
// carved bites, smooth in-cavity camera trajectories, exact sphere-traced
// depth, and a monocular-estimator corruption model. The scene SDF is
// positive in free space and Lipschitz-1, so ground truth is exact at machine
// precision and the evaluation measures pipeline error, not phantom error.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "voxcarve/geometry.hpp"
#include "voxcarve/parallel.hpp"
#include "voxcarve/tsdf_volume.hpp"

namespace voxcarve {

struct Bite {
  Vec3 center;
  double radius = 0.0;
};

class PhantomScene {
 public:
  // Free space is the open-ended tube {rho < radius, z < length}; tissue is
  // everything else. The wall at z = length is where bites are carved.
  static PhantomScene corridor(double radius, double length) {
    if (!(radius > 0.0) || !(length > 0.0))
      throw std::invalid_argument("phantom: corridor dimensions must be positive");
    PhantomScene s;
    s.radius_ = radius;
    s.length_ = length;
    return s;
  }

  // Signed distance to tissue: positive in free space, negative inside tissue.
  double sdf(const Vec3& p) const {
    double d = std::min(radius_ - std::hypot(p.x(), p.y()), length_ - p.z());
    for (const auto& b : bites_) d = std::max(d, b.radius - (p - b.center).norm());
    return d;
  }

  double corridor_radius() const { return radius_; }
  double corridor_length() const { return length_; }
  Vec3 wall_center() const { return Vec3(0.0, 0.0, length_); }
  const std::vector<Bite>& bites() const { return bites_; }

  // Region of interest enclosing every surface the camera can see.
  Eigen::AlignedBox3d bounds() const {
    const double r = radius_ + 3.0;
    return Eigen::AlignedBox3d(Vec3(-r, -r, -1.0), Vec3(r, r, length_ + 5.0));
  }

  friend PhantomScene carve_bite(const PhantomScene& scene, const Vec3& center, double radius);

 private:
  double radius_ = 0.0, length_ = 0.0;
  std::vector<Bite> bites_;
};

// Boolean subtraction of a sphere: scene' SDF = max(scene SDF, radius - |p-c|).
// The bite must touch the current surface (|SDF(center)| <= radius).
inline PhantomScene carve_bite(const PhantomScene& scene, const Vec3& center, double radius) {
  if (!(radius > 0.0)) throw std::invalid_argument("carve_bite: radius must be positive");
  if (std::abs(scene.sdf(center)) > radius)
    throw std::invalid_argument("carve_bite: bite center does not touch the current surface");
  PhantomScene out = scene;
  out.bites_.push_back(Bite{center, radius});
  return out;
}

// n smooth poses inside free space, each looking at the target region so it
// projects within the central 60% of the image. Pure function of parameters.
inline std::vector<RigidTransform> gen_trajectory(const PhantomScene& scene, int n_frames,
                                                  const Vec3& target, const CameraIntrinsics& K,
                                                  double safety_margin = 1.5) {
  if (n_frames < 1) throw std::invalid_argument("gen_trajectory: need at least one frame");
  const double r = scene.corridor_radius();
  const double len = scene.corridor_length();
  std::vector<RigidTransform> poses;
  poses.reserve(n_frames);
  for (int k = 0; k < n_frames; ++k) {
    const double s = n_frames == 1 ? 0.5 : static_cast<double>(k) / (n_frames - 1);
    const Vec3 center(0.35 * r * std::sin(4.2 * s + 0.4), 0.35 * r * std::sin(2.6 * s + 1.9),
                      len * (0.30 + 0.35 * s));
    if (scene.sdf(center) <= safety_margin)
      throw std::runtime_error("gen_trajectory: camera path leaves the safety margin");
    // Slightly wandering aim keeps viewpoints diverse without losing the target.
    const Vec3 aim = target + Vec3(1.2 * std::sin(5.0 * s), 1.2 * std::cos(3.0 * s), 0.0);
    RigidTransform pose = look_at_pose(center, aim);
    const auto proj = project_point(pose, K, target);
    if (!proj || std::abs(proj->pixel.x() - 0.5 * (K.width - 1)) > 0.30 * K.width ||
        std::abs(proj->pixel.y() - 0.5 * (K.height - 1)) > 0.30 * K.height)
      throw std::runtime_error("gen_trajectory: target left the central image region");
    poses.push_back(std::move(pose));
  }
  return poses;
}

// Sphere-traced camera-z depth against the analytic SDF; rays that leave the
// scene without hitting tissue are invalid.
inline DepthMap render_gt_depth(const PhantomScene& scene, const RigidTransform& world_to_camera,
                                const CameraIntrinsics& K) {
  K.validate();
  const RigidTransform cam_to_world = world_to_camera.inverse();
  const Vec3 center = cam_to_world.translation();
  if (!(scene.sdf(center) > 0.0))
    throw std::invalid_argument("render_gt_depth: camera center not in free space");
  const double t_far = 2.0 * scene.corridor_length() + 10.0 * scene.corridor_radius();
  constexpr double kEps = 1e-4;
  DepthMap out(K.width, K.height, 0.0f);
  detail::parallel_for(K.height, [&](int y) {
    for (int x = 0; x < K.width; ++x) {
      const Vec3 dir_cam((x - K.cx) / K.fx, (y - K.cy) / K.fy, 1.0);
      const double dir_norm = dir_cam.norm();
      const Vec3 u = (cam_to_world.rotation() * dir_cam) / dir_norm;
      double t = 0.0;
      for (int it = 0; it < 2000 && t < t_far; ++it) {
        const double s = scene.sdf(center + t * u);
        if (s < kEps) {
          out.at(x, y) = static_cast<float>(t / dir_norm);  // camera-z depth
          break;
        }
        t += s;
      }
    }
  });
  return out;
}

// Monocular-estimator failure model: one global scale per frame, a smooth
// low-frequency bias field, and per-pixel Gaussian noise.
struct NoiseModel {
  double scale_min = 0.7, scale_max = 1.3;
  double sigma = 0.3;           // mm
  double bias_amplitude = 0.5;  // mm
  double bias_period = 160.0;   // pixels; one full period across a default-width frame
  std::uint64_t seed = 0;

  void validate() const {
    if (!(scale_min > 0.0) || scale_max < scale_min)
      throw std::invalid_argument("noise model: invalid scale range");
    if (sigma < 0.0) throw std::invalid_argument("noise model: sigma must be >= 0");
    if (!(bias_period > 0.0)) throw std::invalid_argument("noise model: period must be positive");
  }
};

// output = s * (depth + bias + noise); invalid pixels stay invalid, results
// driven non-positive become invalid. Deterministic under the model's seed.
inline DepthMap corrupt_depth(const DepthMap& depth, const NoiseModel& noise) {
  noise.validate();
  std::mt19937_64 rng(noise.seed);
  std::uniform_real_distribution<double> scale_dist(noise.scale_min, noise.scale_max);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * M_PI);
  std::normal_distribution<double> gauss(0.0, noise.sigma > 0.0 ? noise.sigma : 1.0);
  const double s = scale_dist(rng);
  const double phase_x = phase_dist(rng);
  const double phase_y = phase_dist(rng);
  const double omega = 2.0 * M_PI / noise.bias_period;
  DepthMap out(depth.width(), depth.height(), 0.0f);
  for (int y = 0; y < depth.height(); ++y)
    for (int x = 0; x < depth.width(); ++x) {
      if (!depth.valid_at(x, y)) continue;
      const double bias =
          noise.bias_amplitude * std::sin(omega * x + phase_x) * std::sin(omega * y + phase_y);
      const double n = noise.sigma > 0.0 ? gauss(rng) : 0.0;
      const double v = s * (static_cast<double>(depth.at(x, y)) + bias + n);
      out.at(x, y) = v > 0.0 ? static_cast<float>(v) : 0.0f;
    }
  return out;
}

// Exact surface mesh of the scene: sample the SDF on a grid and run marching
// cubes. Used for per-step ground-truth meshes.
inline TriangleMesh mesh_scene(const PhantomScene& scene, double voxel_size) {
  if (!(voxel_size > 0.0)) throw std::invalid_argument("mesh_scene: voxel_size must be positive");
  const Eigen::AlignedBox3d box = scene.bounds();
  const Vec3 extent = box.sizes();
  Eigen::Vector3i dims;
  for (int a = 0; a < 3; ++a) dims[a] = std::max(2, static_cast<int>(std::ceil(extent[a] / voxel_size)) + 1);
  TsdfVolume v(dims, box.min(), voxel_size, 1.0);
  const int nx = dims.x(), ny = dims.y(), nz = dims.z();
  float* d = v.d_data().data();
  float* w = v.w_data().data();
  detail::parallel_for(nz, [&](int z) {
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        const size_t i = v.index(x, y, z);
        d[i] = static_cast<float>(std::clamp(scene.sdf(v.voxel_center(x, y, z)), -1.0, 1.0));
        w[i] = 1.0f;
      }
  });
  return extract_mesh(v, 0.5f);
}

}  // namespace voxcarve
