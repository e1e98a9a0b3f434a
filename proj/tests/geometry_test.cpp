#include "voxcarve/geometry.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace voxcarve;

namespace {

CameraIntrinsics test_camera() {
  CameraIntrinsics K;
  K.fx = K.fy = 100.0;
  K.cx = K.cy = 50.0;
  K.width = K.height = 100;
  return K;
}

RigidTransform random_pose(std::mt19937& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Eigen::Quaterniond q =
      Eigen::Quaterniond(u(rng), u(rng), u(rng), u(rng)).normalized();
  return RigidTransform(q.toRotationMatrix(), Vec3(10.0 * u(rng), 10.0 * u(rng), 10.0 * u(rng)));
}

}  // namespace

TEST(CameraIntrinsics, ValidatesFields) {
  CameraIntrinsics K = test_camera();
  EXPECT_NO_THROW(K.validate());
  K.fx = 0.0;
  EXPECT_THROW(K.validate(), std::invalid_argument);
  K = test_camera();
  K.cx = 100.0;  // must be < width
  EXPECT_THROW(K.validate(), std::invalid_argument);
}

TEST(RigidTransform, RejectsImproperRotation) {
  Mat3 r = Mat3::Identity();
  r(0, 0) = 2.0;
  EXPECT_THROW(RigidTransform(r, Vec3::Zero()), std::invalid_argument);
  Mat3 reflection = Mat3::Identity();
  reflection(2, 2) = -1.0;  // orthonormal but det -1
  EXPECT_THROW(RigidTransform(reflection, Vec3::Zero()), std::invalid_argument);
}

TEST(RigidTransform, InverseComposesToIdentity) {
  std::mt19937 rng(7);
  for (int i = 0; i < 100; ++i) {
    const RigidTransform t = random_pose(rng);
    const RigidTransform id = t * t.inverse();
    EXPECT_LT((id.rotation() - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT(id.translation().norm(), 1e-9);
  }
}

TEST(RigidTransform, CompositionIsAssociative) {
  std::mt19937 rng(8);
  for (int i = 0; i < 50; ++i) {
    const RigidTransform a = random_pose(rng), b = random_pose(rng), c = random_pose(rng);
    const Mat4 lhs = ((a * b) * c).matrix();
    const Mat4 rhs = (a * (b * c)).matrix();
    EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(ProjectPoint, OnOpticalAxis) {
  const auto p = project_point(RigidTransform::identity(), test_camera(), Vec3(0, 0, 2));
  ASSERT_TRUE(p.has_value());
  EXPECT_DOUBLE_EQ(p->pixel.x(), 50.0);
  EXPECT_DOUBLE_EQ(p->pixel.y(), 50.0);
  EXPECT_DOUBLE_EQ(p->depth, 2.0);
}

TEST(ProjectPoint, PinholeArithmetic) {
  // fx*x/z + cx = 100*0.5 + 50 = 100; that pixel has no sampleable image
  // index in a 100-wide image, so the bounds-checked projection rejects it.
  const ImagePoint p = project_camera_point(test_camera(), Vec3(1, 0, 2));
  EXPECT_DOUBLE_EQ(p.pixel.x(), 100.0);
  EXPECT_DOUBLE_EQ(p.pixel.y(), 50.0);
  EXPECT_DOUBLE_EQ(p.depth, 2.0);
  EXPECT_FALSE(project_point(RigidTransform::identity(), test_camera(), Vec3(1, 0, 2)).has_value());
}

TEST(ProjectPoint, BehindCameraIsOutOfView) {
  EXPECT_FALSE(project_point(RigidTransform::identity(), test_camera(), Vec3(0, 0, -2)).has_value());
  EXPECT_FALSE(project_point(RigidTransform::identity(), test_camera(), Vec3(0, 0, 0)).has_value());
}

// Oracle: independent hand-multiplied 4x4. With R = rot 90 deg about y
// (x<-z, z<--x) and t = (1,2,3), X = (-2,-2,-1) maps to
// X_c = R*X + t = (-1,-2,2) + (1,2,3)... computed by hand: R*X = (X_z, X_y,
// -X_x) = (-1,-2,2); X_c = (0,0,5), so the pixel is the principal point and
// z_c = 5.
TEST(ProjectPoint, RotatedPoseMatchesHandComputation) {
  Mat3 r;
  r << 0, 0, 1,
       0, 1, 0,
      -1, 0, 0;
  const RigidTransform pose(r, Vec3(1, 2, 3));
  const auto p = project_point(pose, test_camera(), Vec3(-2, -2, -1));
  ASSERT_TRUE(p.has_value());
  EXPECT_NEAR(p->pixel.x(), 50.0, 1e-12);
  EXPECT_NEAR(p->pixel.y(), 50.0, 1e-12);
  EXPECT_NEAR(p->depth, 5.0, 1e-12);
}

TEST(BackprojectPixel, InvertsKnownPixels) {
  const CameraIntrinsics K = test_camera();
  const RigidTransform id = RigidTransform::identity();
  EXPECT_LT((backproject_pixel(id, K, Vec2(50, 50), 2.0) - Vec3(0, 0, 2)).norm(), 1e-12);
  EXPECT_LT((backproject_pixel(id, K, Vec2(100, 50), 2.0) - Vec3(1, 0, 2)).norm(), 1e-12);
}

TEST(BackprojectPixel, RejectsNonPositiveDepth) {
  EXPECT_THROW(backproject_pixel(RigidTransform::identity(), test_camera(), Vec2(50, 50), 0.0),
               std::invalid_argument);
  EXPECT_THROW(backproject_pixel(RigidTransform::identity(), test_camera(), Vec2(50, 50), -1.0),
               std::invalid_argument);
}

TEST(BackprojectPixel, RoundTripsWithProjectPoint) {
  const CameraIntrinsics K = test_camera();
  std::mt19937 rng(42);
  std::uniform_real_distribution<double> upix(0.0, 99.0);
  std::uniform_real_distribution<double> udepth(0.1, 100.0);
  for (int i = 0; i < 1000; ++i) {
    const RigidTransform pose = random_pose(rng);
    const Vec2 pixel(upix(rng), upix(rng));
    const double depth = udepth(rng);
    const Vec3 world = backproject_pixel(pose, K, pixel, depth);
    const auto reproj = project_point(pose, K, world);
    ASSERT_TRUE(reproj.has_value());
    EXPECT_LT((reproj->pixel - pixel).norm(), 1e-6 * std::max(1.0, pixel.norm()));
    EXPECT_LT(std::abs(reproj->depth - depth), 1e-6 * depth);
  }
}

TEST(DepthToPointcloud, AllInvalidGivesEmptyCloud) {
  const DepthMap empty(100, 100, 0.0f);
  const PointCloud cloud = depth_to_pointcloud(empty, RigidTransform::identity(), test_camera());
  EXPECT_TRUE(cloud.empty());
}

TEST(DepthToPointcloud, ConstantDepthGivesPlane) {
  const DepthMap flat(100, 100, 10.0f);
  const PointCloud cloud = depth_to_pointcloud(flat, RigidTransform::identity(), test_camera());
  ASSERT_EQ(cloud.size(), 100u * 100u);
  for (const Vec3& p : cloud.points) EXPECT_NEAR(p.z(), 10.0, 1e-12);
}

TEST(DepthToPointcloud, CountsMatchValidPixelsAndIndicesAreRowMajor) {
  DepthMap depth(100, 100, 0.0f);
  depth.at(3, 0) = 5.0f;
  depth.at(7, 2) = 6.0f;
  depth.at(0, 50) = 7.0f;
  const PointCloud cloud = depth_to_pointcloud(depth, RigidTransform::identity(), test_camera());
  ASSERT_EQ(cloud.size(), static_cast<size_t>(depth.valid_count()));
  ASSERT_EQ(cloud.pixel_indices.size(), 3u);
  EXPECT_EQ(cloud.pixel_indices[0], 3);
  EXPECT_EQ(cloud.pixel_indices[1], 2 * 100 + 7);
  EXPECT_EQ(cloud.pixel_indices[2], 50 * 100 + 0);
}

TEST(DepthToPointcloud, RejectsDimensionMismatch) {
  const DepthMap depth(64, 48, 1.0f);
  EXPECT_THROW(depth_to_pointcloud(depth, RigidTransform::identity(), test_camera()),
               std::invalid_argument);
}

TEST(DepthMap, SampleIsNearestNeighborAndRejectsInvalid) {
  DepthMap depth(4, 4, 0.0f);
  depth.at(1, 2) = 3.0f;
  EXPECT_EQ(depth.sample(Vec2(1.4, 2.4)), 3.0f);
  EXPECT_EQ(depth.sample(Vec2(0.6, 1.6)), 3.0f);
  EXPECT_FALSE(depth.sample(Vec2(0, 0)).has_value());   // invalid pixel
  EXPECT_FALSE(depth.sample(Vec2(9, 2)).has_value());   // outside
  EXPECT_FALSE(depth.sample(Vec2(-0.6, 2)).has_value());
}
