#pragma once

// Camera model, rigid transforms, and conversions between depth maps, point
// clouds, and world coordinates. All lengths are metric millimeters. Camera
// poses are stored world-to-camera: X_c = R * X_w + t. Pixel coordinates are
// continuous with integer pixel centers at integer coordinates; depth lookups
// use nearest-neighbor sampling.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace voxcarve {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

struct CameraIntrinsics {
  double fx = 0.0, fy = 0.0;  // focal lengths, pixels
  double cx = 0.0, cy = 0.0;  // principal point, pixels
  int width = 0, height = 0;  // image size, pixels

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0))
      throw std::invalid_argument("intrinsics: focal lengths must be positive");
    if (width <= 0 || height <= 0)
      throw std::invalid_argument("intrinsics: image size must be positive");
    if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height))
      throw std::invalid_argument("intrinsics: principal point outside image");
  }
};

inline int round_pixel(double v) { return static_cast<int>(std::lround(v)); }

// True when the continuous pixel rounds to a sampleable index.
inline bool pixel_in_image(const CameraIntrinsics& K, const Vec2& pixel) {
  const int x = round_pixel(pixel.x());
  const int y = round_pixel(pixel.y());
  return x >= 0 && x < K.width && y >= 0 && y < K.height;
}

// Proper rigid motion (orthonormal rotation, det +1).
class RigidTransform {
 public:
  RigidTransform() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}

  RigidTransform(const Mat3& rotation, const Vec3& translation)
      : rotation_(rotation), translation_(translation) {
    if (!is_proper_rotation(rotation_))
      throw std::invalid_argument("rigid transform: rotation must be orthonormal with det +1");
    if (!translation_.allFinite())
      throw std::invalid_argument("rigid transform: translation must be finite");
  }

  static RigidTransform identity() { return RigidTransform(); }

  static RigidTransform from_matrix(const Mat4& m) {
    if (m.row(3) != Eigen::RowVector4d(0, 0, 0, 1) && (m.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).norm() > 1e-9)
      throw std::invalid_argument("rigid transform: bottom row must be [0 0 0 1]");
    return RigidTransform(m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>());
  }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation_;
    m.topRightCorner<3, 1>() = translation_;
    return m;
  }

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  Vec3 apply(const Vec3& x) const { return rotation_ * x + translation_; }
  Vec3 operator*(const Vec3& x) const { return apply(x); }

  // this after other: (a*b)(x) = a(b(x))
  RigidTransform operator*(const RigidTransform& other) const {
    return RigidTransform(rotation_ * other.rotation_, rotation_ * other.translation_ + translation_);
  }

  RigidTransform inverse() const {
    const Mat3 rt = rotation_.transpose();
    return RigidTransform(rt, -(rt * translation_));
  }

  static bool is_proper_rotation(const Mat3& r, double tol = 1e-6) {
    if (!r.allFinite()) return false;
    const Mat3 err = r.transpose() * r - Mat3::Identity();
    return err.cwiseAbs().maxCoeff() <= tol && r.determinant() > 0.0;
  }

 private:
  Mat3 rotation_;
  Vec3 translation_;
};

// Per-pixel metric depth; any value <= 0 marks an invalid pixel.
class DepthMap {
 public:
  DepthMap() = default;
  DepthMap(int width, int height, float fill = 0.0f)
      : width_(width), height_(height), values_(static_cast<size_t>(width) * height, fill) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("depth map: size must be positive");
  }

  static DepthMap constant(int width, int height, float value) { return DepthMap(width, height, value); }

  int width() const { return width_; }
  int height() const { return height_; }

  float at(int x, int y) const { return values_[static_cast<size_t>(y) * width_ + x]; }
  float& at(int x, int y) { return values_[static_cast<size_t>(y) * width_ + x]; }

  bool valid_at(int x, int y) const {
    const float v = at(x, y);
    return v > 0.0f && std::isfinite(v);
  }

  // Nearest-neighbor sample; nullopt outside the image or at invalid pixels.
  std::optional<float> sample(const Vec2& pixel) const {
    const int x = round_pixel(pixel.x());
    const int y = round_pixel(pixel.y());
    if (x < 0 || x >= width_ || y < 0 || y >= height_) return std::nullopt;
    if (!valid_at(x, y)) return std::nullopt;
    return at(x, y);
  }

  int valid_count() const {
    int n = 0;
    for (int y = 0; y < height_; ++y)
      for (int x = 0; x < width_; ++x)
        if (valid_at(x, y)) ++n;
    return n;
  }

  const std::vector<float>& data() const { return values_; }
  std::vector<float>& data() { return values_; }

 private:
  int width_ = 0, height_ = 0;
  std::vector<float> values_;
};

struct PointCloud {
  std::vector<Vec3> points;
  // Row-major source pixel index (y * width + x) per point; empty when the
  // cloud did not come from a depth map.
  std::vector<int> pixel_indices;

  size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;

  bool empty() const { return triangles.empty(); }
};

inline TriangleMesh transform_mesh(const TriangleMesh& mesh, const RigidTransform& transform) {
  TriangleMesh out = mesh;
  for (Vec3& v : out.vertices) v = transform * v;
  return out;
}

// One posed observation; intrinsics travel separately since a sequence shares
// a single camera.
struct CameraFrame {
  DepthMap depth;
  RigidTransform pose;  // world-to-camera
};

struct ImagePoint {
  Vec2 pixel;
  double depth = 0.0;  // camera-z component, mm
};

// Pinhole arithmetic only: pixel = (fx*x/z + cx, fy*y/z + cy). Requires a
// point in front of the camera; performs no image-bounds test.
inline ImagePoint project_camera_point(const CameraIntrinsics& K, const Vec3& camera_point) {
  const double z = camera_point.z();
  if (!(z > 0.0)) throw std::invalid_argument("project_camera_point: point not in front of camera");
  return ImagePoint{Vec2(K.fx * camera_point.x() / z + K.cx, K.fy * camera_point.y() / z + K.cy), z};
}

// World point through a world-to-camera pose; nullopt when behind the camera
// or projecting outside the image.
inline std::optional<ImagePoint> project_point(const RigidTransform& world_to_camera,
                                               const CameraIntrinsics& K, const Vec3& world_point) {
  const Vec3 xc = world_to_camera * world_point;
  if (!(xc.z() > 0.0)) return std::nullopt;
  ImagePoint p = project_camera_point(K, xc);
  if (!pixel_in_image(K, p.pixel)) return std::nullopt;
  return p;
}

inline Vec3 backproject_pixel(const RigidTransform& world_to_camera, const CameraIntrinsics& K,
                              const Vec2& pixel, double depth) {
  if (!(depth > 0.0)) throw std::invalid_argument("backproject_pixel: depth must be positive");
  const Vec3 xc(depth * (pixel.x() - K.cx) / K.fx, depth * (pixel.y() - K.cy) / K.fy, depth);
  return world_to_camera.inverse() * xc;
}

// World-to-camera pose for a camera at `center` with its optical axis toward
// `target`.
inline RigidTransform look_at_pose(const Vec3& center, const Vec3& target, Vec3 up = Vec3(0, 1, 0)) {
  const Vec3 zc = (target - center).normalized();
  if (std::abs(up.dot(zc)) > 0.95) up = Vec3(1, 0, 0);
  const Vec3 xc = up.cross(zc).normalized();
  const Vec3 yc = zc.cross(xc);
  Mat3 rot;
  rot.row(0) = xc;
  rot.row(1) = yc;
  rot.row(2) = zc;
  return RigidTransform(rot, -(rot * center));
}

// One point per valid pixel, row-major order, source pixel indices recorded.
inline PointCloud depth_to_pointcloud(const DepthMap& depth, const RigidTransform& world_to_camera,
                                      const CameraIntrinsics& K) {
  if (depth.width() != K.width || depth.height() != K.height)
    throw std::invalid_argument("depth_to_pointcloud: depth map size does not match intrinsics");
  PointCloud cloud;
  cloud.points.reserve(static_cast<size_t>(depth.width()) * depth.height() / 4);
  const RigidTransform camera_to_world = world_to_camera.inverse();
  for (int y = 0; y < depth.height(); ++y) {
    for (int x = 0; x < depth.width(); ++x) {
      if (!depth.valid_at(x, y)) continue;
      const double z = depth.at(x, y);
      const Vec3 xc(z * (x - K.cx) / K.fx, z * (y - K.cy) / K.fy, z);
      cloud.points.push_back(camera_to_world * xc);
      cloud.pixel_indices.push_back(y * depth.width() + x);
    }
  }
  return cloud;
}

}  // namespace voxcarve
